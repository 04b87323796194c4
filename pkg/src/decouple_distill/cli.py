"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 I/O or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import distill, evaluate, formats, probe, synth
from .decoupled_head import dense_batch, dense_for_inference
from .encoder import check_params, encode, init_params
from .numerics import NonFiniteError, resize_bilinear

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOL = 1e-3

CONFIG_HELP = """config keys (flat 'key = value' file, '#' comments, unknown keys rejected):
  student_res student_patch depth heads dim vl_dim has_vl_proj student_mean student_std
  vfm_res vfm_patch vfm_depth vfm_heads vfm_dim vfm_mean vfm_std
  lambda context_type(q|k|qk) finetune_layers grid_lo grid_hi teacher_crop_px
  lr weight_decay epochs batch seed max_steps beta1 beta2 adam_eps
  context_norm(pairs|rows) train_vl_proj mode(decoupled|coupled) roi_bins roi_samples log_every
  window stride resize_short proxy_fraction ignore_index
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> formats.RunConfig:
    return formats.load_config(args.config) if args.config else formats.RunConfig()


def _load_student(path, rc: formats.RunConfig):
    params = formats.load_checkpoint(path)
    try:
        check_params(params, rc.student_config())
    except (KeyError, ValueError) as e:
        raise formats.FormatError(f"{path}: {e}") from None
    return params


def cmd_gen_synth(args):
    synth.gen_synth(args.out, seed=args.seed, count=args.count, px=args.px,
                    classes=args.classes, dim=args.dim)
    print(f"wrote {args.count} samples to {args.out}")


def cmd_init(args):
    rc = _config(args)
    student = init_params(rc.student_config(), rc.seed)
    vfm = init_params(rc.vfm_config(), rc.seed + 1)
    s_path, t_path, v_path = args.out
    formats.save_checkpoint(s_path, student)
    formats.save_checkpoint(t_path, student)
    formats.save_checkpoint(v_path, vfm)


def _models(args, rc):
    student = _load_student(args.student, rc)
    teacher = _load_student(args.teacher, rc)
    vfm = formats.load_checkpoint(args.vfm)
    return distill.Models(student, teacher, vfm, rc.student_config(), rc.vfm_config())


def cmd_distill(args):
    rc = _config(args)
    ds = synth.load_dataset(args.data)
    models = _models(args, rc)
    dcfg = rc.distill_config()
    try:
        models.validate(dcfg)
    except (KeyError, ValueError) as e:
        raise formats.FormatError(str(e)) from None
    try:
        result = distill.train(ds.images, models, dcfg, out_checkpoint=args.out)
    except distill.DivergenceError as e:
        print(e.report.line(), file=sys.stderr)
        raise
    text = result.log_text()
    sys.stdout.write(text)
    if args.log:
        Path(args.log).write_text(text)


def cmd_eval_seg(args):
    rc = _config(args)
    ds = synth.load_dataset(args.data)
    params = _load_student(args.student, rc)
    bank = formats.read_bank(args.bank)
    cfg = rc.student_config()
    window = args.window or rc.window
    stride = args.stride or rc.stride
    counts = None
    for img, gt in zip(ds.images, ds.labels):
        pred = evaluate.segment(img, params, cfg, bank, window, stride,
                                rc.context_type, rc.resize_short)
        c = evaluate.seg_counts(pred.labels, gt, len(bank), rc.ignore_index)
        counts = c if counts is None else counts.merge(c)
    iou, mean = evaluate.iou_from_counts(counts)
    print("class\tIoU")
    for name, v in zip(bank.names, iou):
        print(f"{name}\t{'nan' if np.isnan(v) else format(v, '.6f')}")
    print(f"mIoU\t{mean:.6f}")


def cmd_eval_region(args):
    rc = _config(args)
    ds = synth.load_dataset(args.data)
    params = _load_student(args.student, rc)
    bank = formats.read_bank(args.bank)
    cfg = rc.student_config()
    preds, gts = [], []
    for i, img in enumerate(ds.images):
        regs = ds.regions_of(i)
        if not regs:
            continue
        dense = dense_for_inference(_fit(img, cfg.image_size), params, cfg, rc.context_type)
        masks = [ds.mask(i, r) for r in range(len(regs))] if args.mode == "mask" else None
        p = evaluate.region_classify(dense, [r.box for r in regs], bank, args.mode, masks,
                                     rc.roi_bins, rc.roi_samples)
        preds.extend(int(x) for x in p)
        gts.extend(r.class_id for r in regs)
    if not gts:
        raise formats.FormatError(f"{args.data}: no annotated regions")
    print(f"mAcc\t{evaluate.macc(preds, gts):.6f}\t{len(gts)} regions")


def _fit(img, size):
    if img.shape[0] == size and img.shape[1] == size:
        return img
    return resize_bilinear(img, size, size)


def cmd_probe(args):
    rc = _config(args)
    params = _load_student(args.student, rc)
    cfg = rc.student_config()
    img = _fit(formats.read_image(args.image), cfg.image_size)
    try:
        r, c = (int(t) for t in args.anchor.split(","))
    except ValueError:
        raise UsageError("--anchor must be 'row,col'") from None
    out = encode(img, params, cfg)
    layers = range(cfg.depth) if args.layer is None else [args.layer]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    g = (cfg.grid, cfg.grid)
    px = cfg.image_size
    try:
        for layer in layers:
            maps = {
                "cls": probe.cls_attention(out, layer),
                "anchor": probe.anchor_attention(out, layer, (r, c)),
                "featcorr": probe.feature_correlation(out, (r, c), layer),
            }
            for name, vec in maps.items():
                hm = probe.render_heatmap(vec, g, px)
                formats.write_pgm(outdir / f"{name}_L{layer}.pgm", hm.pixels)
        content = dense_for_inference(img, params, cfg, rc.context_type)
        hm = probe.render_heatmap(probe.feature_correlation(content, (r, c)), g, px)
        formats.write_pgm(outdir / "content_corr.pgm", hm.pixels)
    except IndexError as e:
        raise UsageError(str(e)) from None
    print("layer\tproxy_score")
    for layer in layers:
        print(f"{layer}\t{probe.proxy_score(out, layer, rc.proxy_fraction):.6f}")


def cmd_grad_check(args):
    if args.config:
        rc = formats.load_config(args.config)
        s_cfg, v_cfg = rc.student_config(), rc.vfm_config()
        student = {k: v.astype(np.float64) for k, v in init_params(s_cfg, args.seed).items()}
        vfm = {k: v.astype(np.float64) for k, v in init_params(v_cfg, args.seed + 1).items()}
        models = distill.Models(student, {k: v.copy() for k, v in student.items()}, vfm, s_cfg, v_cfg)
        res = distill.grad_check(args.seed, args.coords, models=models, dcfg=rc.distill_config())
    else:
        res = distill.grad_check(args.seed, args.coords)
    print(f"max_rel_error\t{res.max_rel_error:.3e}\tcoords\t{len(res.coords)}")
    if not res.max_rel_error <= GRAD_TOL:
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="decouple-distill", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=CONFIG_HELP)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen-synth", help="write a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--px", type=int, default=64)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--dim", type=int, default=16, help="class-bank embedding width")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("init", help="initialize student, teacher and VFM checkpoints")
    s.add_argument("--config")
    s.add_argument("--out", nargs=3, required=True, metavar=("STUDENT", "TEACHER", "VFM"))
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("distill", help="run content + context distillation")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--vfm", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="also write the training log here")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("eval-seg", help="training-free segmentation mIoU")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--window", type=int)
    s.add_argument("--stride", type=int)
    s.set_defaults(func=cmd_eval_seg)

    s = sub.add_parser("eval-region", help="region classification mAcc")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--mode", choices=("box", "mask"), default="box")
    s.set_defaults(func=cmd_eval_region)

    s = sub.add_parser("probe", help="attention / correlation heatmaps and proxy scores")
    s.add_argument("--config")
    s.add_argument("--student", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--anchor", required=True, help="row,col in the token grid")
    s.add_argument("--layer", type=int, help="0-based layer (default: all)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("grad-check", help="finite-difference gradient check")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--coords", type=int, default=50)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        code = args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, distill.DivergenceError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, formats.FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
