"""Command-line pipeline driver.

Subcommands: synth, tile, stats, train, infer, eval, ablate, gradcheck.
Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
MUDET_THREADS caps the kernel worker count; MUDET_NUMBA=0 forces the
pure-numpy kernel backend.
"""

import argparse
import os
import sys

import numpy as np

from . import data as dio
from . import detector as det
from .config import ConfigError, RunConfig
from .data import DataFormatError
from .detector import TrainingDiverged, build_model, gradcheck_model
from .fusion import ConfidencePair, MaskTriple, build_masks, cross_attention, fuse
from .losses import focal_loss, obb_regression_loss
from .metrics import emit_pr_csv, evaluate_dataset
from .tensor import Tensor, finite_diff_check, tsum

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.apply_overrides(getattr(args, "set", None))
    return cfg


def _log_config(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg.to_file(os.path.join(out_dir, "run_config.txt"))


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.scenes is not None:
        cfg.set("synth.scenes", str(args.scenes))
    if args.seed is not None:
        cfg.set("synth.seed", str(args.seed))
    if args.occluder_prob is not None:
        cfg.set("synth.occluder_prob", str(args.occluder_prob))
    if args.split is not None:
        cfg.set("synth.split", str(args.split))
    scenes = dio.synth_generate(cfg.synth())
    if args.no_split:
        dio.write_dataset(scenes, args.out, force=args.force)
        groups = {args.out: scenes}
    else:
        k = int(round(len(scenes) * cfg["synth.split"]))
        groups = {os.path.join(args.out, "train"): scenes[:k],
                  os.path.join(args.out, "test"): scenes[k:]}
        os.makedirs(args.out, exist_ok=True)
        for root, part in groups.items():
            dio.write_dataset(part, root, force=args.force)
    _log_config(cfg, args.out)
    for root, part in groups.items():
        stats = dio.dataset_stats(part)
        print(f"{root}: {stats['scenes']} scenes, {stats['instances']} instances, "
              f"mean density {stats['density_mean']:.2f}")
    return EXIT_OK


def cmd_tile(args) -> int:
    cfg = _load_config(args)
    if args.tile_size is not None:
        cfg.set("tile.tile_size", str(args.tile_size))
    if args.overlap is not None:
        cfg.set("tile.overlap", str(args.overlap))
    spec = cfg.tile_spec()
    scenes, _ = dio.read_dataset(args.inp)
    tiles, records = [], []
    for s in scenes:
        t, r = dio.tile_scene(s, spec)
        tiles.extend(t)
        records.extend(r)
    dio.write_dataset(tiles, args.out, records=records, force=args.force)
    _log_config(cfg, args.out)
    print(f"{len(scenes)} scenes -> {len(tiles)} tiles of {spec.tile_size} "
          f"(overlap {spec.overlap})")
    return EXIT_OK


def cmd_stats(args) -> int:
    scenes, _ = dio.read_dataset(args.inp)
    stats = dio.dataset_stats(scenes)
    if args.out:
        dio.stats_to_csv(stats, args.out)
    print(f"scenes {stats['scenes']}, instances {stats['instances']}, "
          f"per-class {stats['per_class']}, density mean {stats['density_mean']:.2f} "
          f"max {stats['density_max']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    for key, val in (("detector.max_epochs", args.epochs), ("detector.seed", args.seed),
                     ("detector.modality", args.modality)):
        if val is not None:
            cfg.set(key, str(val))
    dcfg = cfg.detector()
    need_height = dcfg.modality != "rgb_only"
    scenes, _ = dio.read_dataset(args.data, need_height=need_height)
    val_scenes = None
    if args.val:
        val_scenes, _ = dio.read_dataset(args.val, need_height=need_height)
    os.makedirs(args.out, exist_ok=True)
    _log_config(cfg, args.out)
    model = build_model(dcfg)
    history = det.train(model, scenes, dcfg, val_scenes=val_scenes,
                        log_path=os.path.join(args.out, "training_log.csv"))
    model.save(os.path.join(args.out, "model.ckpt"))
    last = history[-1]
    print(f"trained {dcfg.max_epochs} epochs ({dcfg.modality}); "
          f"final loss {last['loss_total']:.4f}, val AP "
          f"{last['val_ap'] if last['val_ap'] == last['val_ap'] else 'n/a'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    if args.modality is not None:
        cfg.set("detector.modality", str(args.modality))
    dcfg = cfg.detector()
    need_height = dcfg.modality != "rgb_only"
    scenes, _ = dio.read_dataset(args.data, need_height=need_height)
    model = build_model(dcfg)
    model.load(args.ckpt)
    det_dir = os.path.join(args.out, "detections")
    os.makedirs(det_dir, exist_ok=True)
    _log_config(cfg, args.out)
    total = 0
    for s in scenes:
        records = det.infer(model, s, dcfg)
        dio.write_detections(os.path.join(det_dir, f"{s.id}.txt"), records)
        total += len(records)
    print(f"{total} detections over {len(scenes)} scenes -> {det_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gts_scenes, _ = dio.read_dataset(args.gts, need_height=False)
    gts = {s.id: s.annotations for s in gts_scenes}
    dets = {}
    for s in gts_scenes:
        path = os.path.join(args.dets, f"{s.id}.txt")
        dets[s.id] = dio.read_detections(path) if os.path.exists(path) else []
    mean_ap, per_class = evaluate_dataset(dets, gts, iou_threshold=args.iou,
                                          interpolated=args.interpolated)
    print(f"AP{args.iou:g} = {mean_ap:.6f}")
    for cls, (ap, _) in per_class.items():
        print(f"  class {cls}: AP = {ap:.6f}")
    if args.pr_csv:
        curves = [c for _, c in per_class.values() if c.points]
        if len(per_class) == 1 and curves:
            emit_pr_csv(curves[0], args.pr_csv)
        else:
            for cls, (_, curve) in per_class.items():
                root, ext = os.path.splitext(args.pr_csv)
                emit_pr_csv(curve, f"{root}_class{cls}{ext}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    for key, val in (("detector.max_epochs", args.epochs), ("detector.seed", args.seed)):
        if val is not None:
            cfg.set(key, str(val))
    dcfg = cfg.detector()
    train_scenes, _ = dio.read_dataset(args.train)
    test_scenes, _ = dio.read_dataset(args.test)
    os.makedirs(args.out, exist_ok=True)
    _log_config(cfg, args.out)
    rows = det.run_ablation(train_scenes, test_scenes, dcfg)
    det.write_ablation_csv(os.path.join(args.out, "ablation.csv"), rows)
    for r in rows:
        print(f"{r['variant']:>11}: AP0.5 = {r['ap']:.6f}")
    return EXIT_OK


def _gradcheck_battery(seed: int):
    """Finite-difference checks for the loss/fusion kernels plus the
    end-to-end micro model. Yields (name, max_relative_error)."""
    rng = np.random.default_rng(seed)

    x = Tensor(rng.uniform(0.1, 0.9, size=8), requires_grad=True)
    labels = (rng.uniform(size=8) > 0.5).astype(float)
    yield "focal_loss", finite_diff_check(
        lambda t: tsum(focal_loss(t, labels, 2.0)), x)

    gt = (Tensor(rng.uniform(0.5, 3, 4)), Tensor(rng.uniform(0.1, 0.9, 4)),
          Tensor(rng.uniform(0.3, 0.9)))
    lp = Tensor(rng.uniform(0.5, 3, 4), requires_grad=True)
    sp = Tensor(rng.uniform(0.1, 0.9, 4))
    yield "obb_regression_loss", finite_diff_check(
        lambda t: obb_regression_loss(gt, (t, sp, Tensor(0.5))), lp)

    from .tensor import ConvBlockParams

    def lin(cin, cout):
        return ConvBlockParams(
            weight=Tensor(rng.normal(size=(cout, cin, 1, 1))),
            bias=Tensor(np.zeros(cout)), bn_enabled=False, leaky_slope=1.0)

    from .fusion import CrossAttentionParams

    p = CrossAttentionParams(g1=lin(2, 2), g2=lin(2, 2), g3=lin(2, 2), d=2)
    z_h = Tensor(rng.normal(size=(2, 2, 4)))
    za = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
    yield "cross_attention", finite_diff_check(
        lambda t: tsum(cross_attention(t, z_h, p)), za)

    cr = Tensor(rng.uniform(0.25, 0.9, (3, 3)), requires_grad=True)
    pair = ConfidencePair(conf_rgb=Tensor(cr.data.copy()),
                          conf_h=Tensor(rng.uniform(0.25, 0.9, (3, 3))), theta=0.2)
    masks = build_masks(pair)
    feats = [Tensor(rng.normal(size=(2, 3, 3))) for _ in range(3)]

    def f_fuse(t):
        live = ConfidencePair(conf_rgb=t, conf_h=pair.conf_h, theta=0.2)
        return tsum(fuse(feats[0], feats[1], feats[2], masks, live))

    yield "fuse", finite_diff_check(f_fuse, cr)

    model = build_model(det.micro_config(seed=seed))
    scene = _micro_scene(seed)
    yield "micro_model", gradcheck_model(model, scene, n_coords=50, seed=seed)


def _micro_scene(seed):
    rng = np.random.default_rng(seed ^ 0xC0FFEE)
    rgb = rng.integers(40, 200, size=(3, 16, 16)).astype(np.uint8)
    hmap = rng.integers(0, 3000, size=(16, 16)).astype(np.uint16)
    from .geometry import ObbAnnotation

    anns = [ObbAnnotation(0, 7.0, 8.0, 7.0, 4.0, 25.0),
            ObbAnnotation(0, 12.0, 4.0, 6.0, 3.5, -40.0)]
    return dio.SceneSample(id="gradcheck", rgb=rgb, hmap_raw=hmap, annotations=anns)


def cmd_gradcheck(args) -> int:
    worst = 0.0
    failed = False
    rows = []
    for name, err in _gradcheck_battery(args.seed):
        ok = err < args.tol
        failed |= not ok
        worst = max(worst, err)
        rows.append((name, err, ok))
        print(f"{name:>22}: max rel err {err:.3e} {'ok' if ok else 'FAIL'}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("check,max_rel_err,pass\n")
            for name, err, ok in rows:
                fh.write(f"{name},{err:.9e},{int(ok)}\n")
    print(f"worst: {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(
        prog="mudet",
        description="Multimodal (RGB + height map) oriented vehicle detection kit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run-config file (key value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--occluder-prob", type=float, dest="occluder_prob")
    p.add_argument("--split", type=float, help="train fraction (default from config)")
    p.add_argument("--no-split", action="store_true", help="write one flat dataset")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("tile", help="cut scenes into overlapping tiles")
    common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile-size", type=int, dest="tile_size")
    p.add_argument("--overlap", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_tile)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("train", help="train a detector")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--modality", choices=det.MODALITIES)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run inference over a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modality", choices=det.MODALITIES)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--dets", required=True, help="directory of detection .txt files")
    p.add_argument("--gts", required=True, help="dataset root with labels")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--interpolated", action="store_true")
    p.add_argument("--pr-csv", dest="pr_csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train rgb-only / height-only / multimodal")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(fn=cmd_gradcheck)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
