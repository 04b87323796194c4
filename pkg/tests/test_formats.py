import numpy as np
import pytest

from decouple_distill import formats
from decouple_distill.encoder import init_params
from decouple_distill.formats import FormatError
from decouple_distill.region_ops import RegionBox


def test_checkpoint_round_trip_bit_exact(tmp_path, small_cfg):
    params = init_params(small_cfg, 7)
    params["scalar"] = np.float32(2.5)
    path = tmp_path / "m.ckpt"
    formats.save_checkpoint(path, params)
    back = formats.load_checkpoint(path)
    assert set(back) == set(params)
    for k, v in params.items():
        assert back[k].dtype == np.float32
        assert back[k].shape == np.shape(v)
        assert back[k].tobytes() == np.asarray(v, dtype=np.float32).tobytes()
    formats.save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption_detected(tmp_path, small_cfg):
    path = tmp_path / "m.ckpt"
    formats.save_checkpoint(path, init_params(small_cfg, 7))
    blob = bytearray(path.read_bytes())
    bad = tmp_path / "bad.ckpt"
    flipped = blob.copy()
    flipped[len(blob) // 2] ^= 0x40
    bad.write_bytes(bytes(flipped))
    with pytest.raises(FormatError, match="checksum"):
        formats.load_checkpoint(bad)
    bad.write_bytes(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(FormatError, match="magic"):
        formats.load_checkpoint(bad)
    v2 = blob.copy()
    v2[4] = 9
    bad.write_bytes(bytes(v2))
    with pytest.raises(FormatError, match="version"):
        formats.load_checkpoint(bad)
    bad.write_bytes(bytes(blob[:10]))
    with pytest.raises(FormatError):
        formats.load_checkpoint(bad)


def test_pnm_round_trip(tmp_path, rng):
    gray = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    rgb = rng.integers(0, 256, (4, 3, 3)).astype(np.uint8)
    formats.write_pgm(tmp_path / "g.pgm", gray)
    formats.write_ppm(tmp_path / "c.ppm", rgb)
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(formats.read_pnm(tmp_path / "g.pgm"), gray)
    np.testing.assert_array_equal(formats.read_pnm(tmp_path / "c.ppm"), rgb)
    img = formats.read_image(tmp_path / "c.ppm")
    assert img.dtype == np.float32 and img.max() <= 1
    np.testing.assert_array_equal(formats.to_uint8(img), rgb)


def test_pnm_header_comments_and_errors(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert formats.read_pnm(p).tolist() == [[1, 2]]
    p.write_bytes(b"P2\n2 1\n255\n1 2\n")
    with pytest.raises(FormatError, match="magic"):
        formats.read_pnm(p)
    p.write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(FormatError, match="truncated"):
        formats.read_pnm(p)
    p.write_bytes(b"P5\n2 1\n65535\n\x00\x01\x00\x02")
    with pytest.raises(FormatError, match="16-bit"):
        formats.read_pnm(p)
    with pytest.raises(ValueError):
        formats.write_pgm(p, np.zeros((2, 2, 3)))


def test_bank_round_trip(tmp_path, rng):
    bank = formats.ClassBank(["sky", "road", "car"], rng.normal(size=(3, 5)))
    np.testing.assert_allclose(np.linalg.norm(bank.embeds, axis=1), 1)
    formats.write_bank(tmp_path / "b.txt", bank)
    assert (tmp_path / "b.txt").read_text().splitlines()[0] == "5 3"
    back = formats.read_bank(tmp_path / "b.txt")
    assert back.names == bank.names
    np.testing.assert_allclose(back.embeds, bank.embeds, atol=1e-8)


def test_bank_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError, match="unique"):
        formats.ClassBank(["a", "a"], np.eye(2))
    with pytest.raises(ValueError, match="zero"):
        formats.ClassBank(["a", "b"], [[1, 0], [0, 0]])
    p = tmp_path / "b.txt"
    p.write_text("2 2\na 1 0\n")
    with pytest.raises(FormatError, match="2 classes"):
        formats.read_bank(p)
    p.write_text("2 1\na 1 0 3\n")
    with pytest.raises(FormatError, match=":2:"):
        formats.read_bank(p)


def test_regions_round_trip(tmp_path):
    regs = [formats.AnnotatedRegion(0, RegionBox(0.1, 0.2, 0.5, 0.75), 3),
            formats.AnnotatedRegion(4, RegionBox(0, 0, 1, 1), 1)]
    formats.write_regions(tmp_path / "r.txt", regs)
    back = formats.read_regions(tmp_path / "r.txt")
    assert back == regs
    (tmp_path / "r.txt").write_text("# header\n0 0.5 0 0.2 1 2\n")
    with pytest.raises(FormatError, match=":2:"):
        formats.read_regions(tmp_path / "r.txt")


def test_config_parse_and_dump_round_trip():
    text = "# toy\ndepth = 2\nlambda = 0.5  # weight\ncontext_type = qk\nstudent_mean = 0.5 0.5 0.5\ntrain_vl_proj = no\n"
    rc = formats.parse_config(text)
    assert (rc.depth, rc.lam, rc.context_type, rc.train_vl_proj) == (2, 0.5, "qk", False)
    assert rc.student_mean == (0.5, 0.5, 0.5)
    assert formats.parse_config(formats.dump_config(rc)) == rc
    assert formats.parse_config("") == formats.RunConfig()


def test_config_errors_carry_line_numbers(tmp_path):
    with pytest.raises(FormatError, match=r"cfg:3: unknown key 'depht'"):
        formats.parse_config("depth = 2\n\ndepht = 3\n", "cfg")
    with pytest.raises(FormatError, match="cfg:1: bad value"):
        formats.parse_config("depth = two\n", "cfg")
    with pytest.raises(FormatError, match="cfg:1: expected"):
        formats.parse_config("depth 2\n", "cfg")
    with pytest.raises(FormatError, match="token-count"):
        formats.parse_config("vfm_patch = 16\n", "cfg")
    p = tmp_path / "run.cfg"
    p.write_text("bogus = 1\n")
    with pytest.raises(FormatError, match="run.cfg:1"):
        formats.load_config(p)


def test_config_builds_component_configs():
    rc = formats.RunConfig(depth=2, finetune_layers=2, lr=1e-3)
    s, v, d = rc.student_config(), rc.vfm_config(), rc.distill_config()
    assert s.grid == v.grid == 4
    assert not v.has_vl_proj
    assert (d.lr, d.finetune_layers, d.lam) == (1e-3, 2, 0.25)
