import numpy as np
import pytest

from decouple_distill import probe
from decouple_distill.encoder import EncoderConfig, encode, init_params
from decouple_distill.numerics import softmax_rows


def test_attention_matches_recomputation_from_qk(rng):
    cfg = EncoderConfig(image_size=32, patch_size=8, depth=1, heads=4, dim=16, vl_dim=8)
    params = init_params(cfg, 5)
    out = encode(rng.uniform(size=(32, 32, 3)), params, cfg)
    q, k, _ = out.last_qkv
    dh = cfg.head_dim
    heads = [softmax_rows(q[:, h * dh:(h + 1) * dh] @ k[:, h * dh:(h + 1) * dh].T, 1 / np.sqrt(dh))
             for h in range(cfg.heads)]
    np.testing.assert_allclose(out.attn_maps[0], np.mean(heads, axis=0), atol=1e-6)
    assert out.attn_maps[0].shape == (17, 17)
    np.testing.assert_array_equal(probe.cls_attention(out, 0), out.attn_maps[0][0, 1:])
    np.testing.assert_array_equal(probe.anchor_attention(out, 0, (1, 2)), out.attn_maps[0][1 + 6, 1:])


def test_uniform_attention_scores_fraction():
    cfg = EncoderConfig(image_size=224, patch_size=16, depth=1, heads=2, dim=8, vl_dim=4)
    params = init_params(cfg, 0)
    for name in ("q.w", "q.b", "k.w", "k.b"):
        params[f"blocks.0.{name}"][...] = 0
    out = encode(np.random.default_rng(0).uniform(size=(224, 224, 3)), params, cfg)
    assert out.attn_maps[0].shape == (197, 197)
    np.testing.assert_allclose(out.attn_maps[0], 1 / 197, atol=1e-7)
    assert probe.proxy_score(out, 0, 0.02) == pytest.approx(0.02, abs=1e-3)


def test_collapse_scores_one():
    n = 17
    m = np.zeros((n, n))
    m[:, 5] = 1
    assert probe.proxy_score(m, fraction=0.02) == pytest.approx(1.0)
    assert probe.proxy_columns(m[0, 1:], 0.02).tolist() == [4]


def test_layer_and_anchor_bounds(small_cfg, small_params, rng):
    out = encode(rng.uniform(size=(32, 32, 3)), small_params, small_cfg)
    with pytest.raises(IndexError, match="layer"):
        probe.cls_attention(out, small_cfg.depth)
    with pytest.raises(IndexError, match="anchor"):
        probe.anchor_attention(out, 0, (2, 0))


def test_feature_correlation(rng):
    grid = rng.normal(size=(3, 4, 5))
    corr = probe.feature_correlation(grid, (1, 2))
    assert corr[6] == pytest.approx(1.0)
    a = grid[1, 2]
    for i, v in enumerate(grid.reshape(12, 5)):
        assert corr[i] == pytest.approx(v @ a / np.linalg.norm(v) / np.linalg.norm(a), abs=1e-12)
    assert np.all(np.abs(corr) <= 1)


def test_feature_correlation_of_block_output(small_cfg, small_params, rng):
    out = encode(rng.uniform(size=(32, 32, 3)), small_params, small_cfg)
    np.testing.assert_allclose(probe.feature_correlation(out, (0, 0), 0),
                               probe.feature_correlation(out.block_outputs[0].grid, (0, 0)))
    np.testing.assert_allclose(probe.feature_correlation(out, (0, 0)),
                               probe.feature_correlation(out.dense, (0, 0)))


def test_heatmap_constant_is_mid_gray():
    hm = probe.render_heatmap(np.full(4, 0.3), (2, 2), 8)
    assert (hm.width, hm.height) == (8, 8)
    assert np.all(hm.pixels == 128) and hm.pixels.dtype == np.uint8


def test_heatmap_two_by_two_hand_checked():
    hm = probe.render_heatmap([0.0, 1.0, 2.0, 3.0], (2, 2), 4)
    # upsampled value is x + 2y with x, y in {0, 0.25, 0.75, 1}; scaled by 255/3
    expected = [
        [0, 21, 64, 85],
        [42, 64, 106, 128],
        [128, 149, 191, 212],
        [170, 191, 234, 255],
    ]
    assert hm.pixels.tolist() == expected


def test_heatmap_bytes_stable(tmp_path, small_cfg):
    from decouple_distill.formats import write_pgm

    def render(path):
        params = init_params(small_cfg, 11)
        img = np.random.default_rng(11).uniform(size=(32, 32, 3))
        out = encode(img, params, small_cfg)
        write_pgm(path, probe.render_heatmap(probe.cls_attention(out, 1), (2, 2), 32).pixels)
        return path.read_bytes()

    assert render(tmp_path / "a.pgm") == render(tmp_path / "b.pgm")
