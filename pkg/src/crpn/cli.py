"""Command-line entry point: synth, train, eval, gradcheck, ablate.

Every command takes `--config` (strict INI, defaults apply when omitted),
`--out`, `--seed`, and `--no-timestamp`; data-consuming commands take
`--data`. Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .ablation import ablate, build_preset_variants
from .cascade import anchor_imbalance
from .config import ConfigError, load_run_config
from .detector import Detector
from .evaluate import evaluate_detector
from .geometry import generate_anchors
from .gradchecks import run_suite
from .reporting import svg_line_chart, write_csv
from .rng import mix_seed
from .snapshot import SnapshotFormatError, load_snapshot
from .synth import ANNOTATION_FILE, AnnotationError, generate_dataset, read_annotations, write_annotations
from .train import STATE_PREFIX, metrics_header, train

TEST_SEED_STREAM = 0x7E57


def _resolve_split(data_root, split: str) -> Path:
    root = Path(data_root)
    candidate = root / split
    if (candidate / ANNOTATION_FILE).exists():
        return candidate
    if (root / ANNOTATION_FILE).exists():
        return root
    raise AnnotationError(f"no {split} dataset (missing {ANNOTATION_FILE}) under {root}")


def _build_detector(cfg, seed: int) -> Detector:
    return Detector(cfg.backbone, cfg.cascade, cfg.roi, seed=seed)


def _anchor_grid(cfg):
    size = cfg.backbone.tap_size
    return generate_anchors(
        size, size, cfg.backbone.stride_at_tap,
        list(cfg.cascade.anchor_scales), list(cfg.cascade.anchor_ratios),
    )


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.scene.seed = args.seed
    out = Path(args.out or cfg.output_dir or "data")
    train_records = generate_dataset(cfg.scene)
    test_spec = replace(
        cfg.scene,
        num_images=max(cfg.scene.num_images // 4, 1),
        seed=mix_seed(cfg.scene.seed, TEST_SEED_STREAM),
    )
    test_records = generate_dataset(test_spec)
    write_annotations(train_records, out / "train")
    write_annotations(test_records, out / "test")

    grid = _anchor_grid(cfg)
    neg, pos, ratio = anchor_imbalance(train_records, grid, cfg.cascade)
    print(f"wrote {len(train_records)} train / {len(test_records)} test images to {out}")
    print(f"objects: {sum(len(r.gts) for r in train_records)} train, "
          f"{sum(len(r.gts) for r in test_records)} test")
    print(f"anchor imbalance over train split: {neg} negative / {pos} positive "
          f"= {ratio:.1f}:1")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    records = read_annotations(_resolve_split(args.data, "train"))
    eval_records = None
    if cfg.train.eval_every:
        try:
            eval_records = read_annotations(_resolve_split(args.data, "test"))
        except AnnotationError:
            eval_records = None
    out = Path(args.out or cfg.output_dir or "runs/train")
    detector = _build_detector(cfg, cfg.train.seed)
    result = train(
        records,
        detector,
        cfg.train,
        out_dir=out,
        resume_from=args.resume,
        eval_records=eval_records,
    )
    write_csv(out / "metrics.csv", result.header, result.rows, timestamp=not args.no_timestamp)
    if result.eval_rows:
        eval_header = ["iteration", "map50"] + [
            f"ap_{name}" for name in cfg.scene.classes
        ]
        write_csv(out / "eval_log.csv", eval_header, result.eval_rows,
                  timestamp=not args.no_timestamp)
    if result.rows:
        first, last = result.rows[0], result.rows[-1]
        total_col = result.header.index("total")
        suffix = f" (resumed after iteration {int(first[0]) - 1})" if args.resume else ""
        print(f"trained {len(result.rows)} iterations{suffix}")
        print(f"detection_total: first={first[total_col]:.4f} last={last[total_col]:.4f}")
    print(f"snapshot: {out / 'snapshot_final.crpn'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    records = read_annotations(_resolve_split(args.data, "test"))
    if not records:
        raise AnnotationError(f"empty evaluation dataset under {args.data}")
    detector = _build_detector(cfg, cfg.train.seed)
    arrays = load_snapshot(args.snapshot)
    detector.load_arrays({k: v for k, v in arrays.items() if not k.startswith(STATE_PREFIX)})
    report = evaluate_detector(detector, records)

    rows = []
    for name, ap in zip(cfg.scene.classes, report.ap50_per_class):
        rows.append([f"ap50_{name}", ap])
    rows.append(["map50", report.map50])
    for t, rate in enumerate(report.per_stage_rejection_rate, start=1):
        rows.append([f"rejection_rate_stage{t}", rate])
    rows.append(["final_stage_hard_fraction", report.stage4_hard_fraction])
    rows.append(["proposals_per_image", report.proposals_per_image])
    out = Path(args.out or cfg.output_dir or "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval.csv", ["metric", "value"], rows, timestamp=not args.no_timestamp)

    for name, value in rows:
        print(f"{name:32s} {value:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite()
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:{width}s}  max_rel_err={r.max_error:.3e}  "
              f"threshold={r.threshold:g}  {status}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 0 if failed == 0 else 2


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    variants = build_preset_variants(
        cfg.ablate.preset,
        cfg.cascade,
        r_values=cfg.ablate.r_values,
        lambda_values=cfg.ablate.lambda_values,
    )
    if len(variants) < 2:
        raise ConfigError(f"ablation preset {cfg.ablate.preset!r} yields fewer than 2 variants")
    train_records = read_annotations(_resolve_split(args.data, "train"))
    test_records = read_annotations(_resolve_split(args.data, "test"))
    seeds = [args.seed] if args.seed is not None else list(cfg.ablate.seeds)

    def progress(name, seed, map50):
        print(f"variant={name} seed={seed} map50={map50:.4f}")

    result = ablate(
        train_records,
        test_records,
        variants,
        seeds,
        cfg.backbone,
        cfg.roi,
        cfg.train,
        progress=progress,
    )
    out = Path(args.out or cfg.output_dir or "runs/ablate")
    out.mkdir(parents=True, exist_ok=True)
    class_cols = [f"ap_{name}" for name in cfg.scene.classes]
    write_csv(out / "ablation.csv", ["variant", "seed", "map50"] + class_cols,
              result.rows, timestamp=not args.no_timestamp)
    write_csv(out / "summary.csv", ["variant", "mean_map50", "std_map50", "seeds"],
              result.summary, timestamp=not args.no_timestamp)

    for sweep, fname, xlabel in (
        ("r", "ap_vs_r.svg", "reject threshold r"),
        ("lambda_f", "ap_vs_lambda_f.svg", "fusion weight lambda_f"),
    ):
        points = [
            (v.x, mean)
            for v, (name, mean, _std, _n) in zip(result.variants, result.summary)
            if v.sweep == sweep
        ]
        if points:
            xs = [p[0] for p in points]
            ys = [p[1] for p in points]
            svg_line_chart(
                out / fname,
                {"mean AP@0.5": (xs, ys)},
                title=f"AP@0.5 vs {xlabel}",
                xlabel=xlabel,
                ylabel="mean AP@0.5",
            )
            print(f"wrote {out / fname}")
    for name, mean, std, n in result.summary:
        print(f"{name:20s} map50 = {mean:.4f} +/- {std:.4f} over {n} seeds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crpn",
        description="Cascade region-proposal detector: data synthesis, training, "
                    "evaluation, gradient checks, ablations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, needs_out=False):
        p.add_argument("--config", default=None, help="INI config path (defaults when omitted)")
        if data:
            p.add_argument("--data", required=True, help="dataset root directory")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--no-timestamp", action="store_true",
                       help="omit the timestamp comment from CSV outputs")

    p = sub.add_parser("synth", help="generate train/test synthetic datasets")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    common(p, data=True)
    p.add_argument("--resume", default=None, help="training snapshot to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a snapshot")
    common(p, data=True)
    p.add_argument("--snapshot", required=True, help="parameter snapshot path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient-check suite")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the configured ablation study")
    common(p, data=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (AnnotationError, SnapshotFormatError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
