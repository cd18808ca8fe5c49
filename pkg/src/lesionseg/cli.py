"""Command-line entry point: ``lesionseg generate|train|eval|sweep``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
The default output root is ``$LESIONSEG_OUT`` (``./lesionseg_out`` if unset).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import config as config_io
from .data import generate_dataset, load_samples, make_folds, write_dataset
from .errors import ContractError, FormatError, NumericalError
from .evaluate import EvalConfig, evaluate_split, write_records, write_report
from .experiment import encoder_name, require_lesions, run_sweep
from .schedules import SCHEDULE_NAMES
from .segnet import ModelConfig, load_model
from .train import TrainConfig, fold_job, run_jobs

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "LESIONSEG_OUT"

log = logging.getLogger("lesionseg")


class UsageError(Exception):
    pass


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "lesionseg_out"))


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError("fraction must lie in [0, 1)")
    return value


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(args) -> int:
    if args.n_lesion < 0 or args.n_clean < 0:
        raise UsageError("sample counts must be nonnegative")
    if args.n_lesion + args.n_clean == 0:
        raise UsageError("--n-lesion and --n-clean are both 0; nothing to generate")
    out = Path(args.out_dir) if args.out_dir else default_out_root() / "data"
    samples = generate_dataset(args.n_lesion, args.n_clean, args.size, args.seed, args.prefix)
    manifest = write_dataset(samples, out)
    print(f"wrote {len(samples)} samples ({args.n_lesion} lesion, {args.n_clean} clean) to {manifest}")
    return EXIT_OK


def _train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig(
        base_channels=args.base_channels, depth=args.depth, cascade=not args.no_cascade, seed=args.seed
    )
    train_cfg = TrainConfig(
        total_steps=args.steps,
        batch_size=args.batch_size,
        lr_max=args.lr,
        schedule=args.schedule,
        steps_per_epoch=args.steps_per_epoch,
        seed=args.seed,
    )
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    try:
        model_cfg, train_cfg = _train_configs(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    samples = load_samples(args.manifest)
    if not args.allow_clean_train:
        try:
            require_lesions(samples)
        except ContractError as exc:
            raise ContractError(f"{exc}; pass --allow-clean-train to train on them anyway") from None
    split = make_folds([s.id for s in samples], args.folds, args.seed)
    by_id = {s.id: s for s in samples}
    out = Path(args.out_dir) if args.out_dir else default_out_root() / "runs" / args.schedule
    jobs = [
        fold_job([by_id[i] for i in split.train_ids(f)], f, model_cfg, train_cfg, out) for f in range(args.folds)
    ]
    for path in run_jobs(jobs, args.workers):
        print(path)
    return EXIT_OK


def _checkpoint_paths(arg: str) -> list[Path]:
    path = Path(arg)
    paths = sorted(path.glob("fold_*.ckpt")) if path.is_dir() else [Path(p) for p in arg.split(",")]
    if not paths:
        raise FormatError(f"no fold_*.ckpt checkpoints in {path}")
    for p in paths:
        if not p.is_file():
            raise FormatError(f"missing checkpoint {p}")
    return paths


def cmd_eval(args) -> int:
    paths = _checkpoint_paths(args.checkpoints)
    models = [load_model(p) for p in paths]
    samples = load_samples(args.manifest)
    lesion = sorted((s for s in samples if s.has_lesion), key=lambda s: s.id)
    clean = sorted((s for s in samples if not s.has_lesion), key=lambda s: s.id)
    f = args.ood_fraction
    n_ood = min(len(clean), round(f * len(lesion) / (1.0 - f))) if lesion else len(clean)
    split = lesion + clean[:n_ood]
    if not split:
        raise FormatError(f"{args.manifest}: no samples to evaluate")
    cfg = EvalConfig(threshold=args.threshold, min_area=args.min_area, tta=args.tta)
    records, row = evaluate_split(models, split, cfg, args.schedule, encoder_name(models[0].config))
    out = Path(args.out_dir) if args.out_dir else default_out_root() / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_report([row], out / "report.csv")
    write_records(records, out / "records.csv")
    print(f"{len(paths)} model(s), {len(lesion)} lesion + {n_ood} lesion-free images")
    print(f"mean DSC {row.mean_dsc:.2f}, rejected {row.rejected_pct:.1f}% -> {out / 'report.csv'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.dump_config:
        sys.stdout.write(config_io.dumps(config_io.ExperimentConfig()))
        return EXIT_OK
    cfg = config_io.load(args.config) if args.config else config_io.ExperimentConfig()
    out = Path(args.out_dir) if args.out_dir else default_out_root() / cfg.out_dir
    start = time.perf_counter()
    result = run_sweep(cfg, out, args.workers)
    elapsed = time.perf_counter() - start
    for regime, rows in result.reports.items():
        print(f"[{regime}]")
        for r in rows:
            extra = "" if r.ood_dsc is None else f", lesion-free images rejected {r.ood_dsc:.1f}%"
            print(f"  {r.schedule:8s} DSC {r.mean_dsc:6.2f} ({r.rejected_pct:.1f}% rejected{extra})")
    print(f"sweep finished in {elapsed / 60:.1f} min, outputs in {out}")
    if result.failures:
        for name, fold, exc in result.failures:
            print(f"FAILED {name} fold {fold}: {exc}", file=sys.stderr)
        numeric = any(isinstance(e, NumericalError) for _, _, e in result.failures)
        return EXIT_NUMERIC if numeric else EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset (PGM images, masks, manifest.csv)")
    p.add_argument("--n-lesion", type=int, required=True)
    p.add_argument("--n-clean", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(64, 64), help="HxW, default 64x64")
    p.add_argument("--prefix", default="", help="prefix for sample ids")
    p.add_argument("--out-dir", help=f"default ${OUT_ENV}/data")
    p.set_defaults(func=cmd_generate)

    defaults = TrainConfig()
    p = sub.add_parser("train", help="k-fold training for one loss schedule")
    p.add_argument("--manifest", required=True)
    p.add_argument("--schedule", choices=SCHEDULE_NAMES, required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--steps", type=int, default=defaults.total_steps)
    p.add_argument("--steps-per-epoch", type=int, default=defaults.steps_per_epoch)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.lr_max)
    p.add_argument("--base-channels", type=int, default=ModelConfig.base_channels)
    p.add_argument("--depth", type=int, default=ModelConfig.depth)
    p.add_argument("--no-cascade", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--allow-clean-train", action="store_true", help="permit lesion-free training images")
    p.add_argument("--out-dir", help=f"default ${OUT_ENV}/runs/<schedule>")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ensemble evaluation of fold checkpoints")
    p.add_argument("--checkpoints", required=True, help="directory of fold_*.ckpt or comma-separated files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ood-fraction", type=_fraction, default=0.0, help="share of lesion-free images in the split")
    p.add_argument("--tta", action="store_true", help="average over the four flip combinations")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-area", type=int, default=0)
    p.add_argument("--schedule", default="", help="label for the report row")
    p.add_argument("--out-dir", help=f"default ${OUT_ENV}/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="all schedules end to end from a config file")
    p.add_argument("--config", help="flat key = value file (see --dump-config)")
    p.add_argument("--dump-config", action="store_true", help="print the default config and exit")
    p.add_argument("--workers", type=int, help="parallel training processes (overrides the config)")
    p.add_argument("--out-dir", help=f"default ${OUT_ENV}/<out_dir from config>")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lesionseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"lesionseg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ContractError, OSError) as exc:
        print(f"lesionseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
