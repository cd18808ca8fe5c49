"""The loss-schedule sweep: data, k-fold training, and two evaluation regimes.

Regime ``id`` scores every training image with the fold model that did not
see it (out-of-fold cross-validation).  Regime ``mixed`` scores the held-out
test split, lesion and lesion-free images together, with the k-fold
ensemble.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import config as config_io
from .config import ExperimentConfig
from .data import Sample, generate_dataset, load_samples, make_folds, write_dataset
from .errors import ContractError, FormatError
from .evaluate import EvalRecord, ReportRow, evaluate_split, summarize, write_records, write_report
from .plotting import plot_loss_curves, plot_report
from .segnet import ModelConfig, load_model
from .train import FoldJob, fold_job, read_log, run_fold_job, derive_seed

log = logging.getLogger(__name__)

REGIMES = ("id", "mixed")

# keys mixed into the master seed for each derived stream
_SEED_TRAIN_DATA, _SEED_TEST_DATA, _SEED_FOLDS, _SEED_MODEL, _SEED_BATCHES = range(1, 6)


def encoder_name(cfg: ModelConfig) -> str:
    name = f"unet-b{cfg.base_channels}-d{cfg.depth}"
    return name + "-cascade" if cfg.cascade else name


def ensure_dataset(directory, n_lesion: int, n_clean: int, size, seed: int, prefix: str = "") -> list[Sample]:
    """Load the dataset in ``directory``, generating it first if there is no manifest.

    Samples are always read back from disk so a resumed run sees exactly the
    quantised images a fresh run trained on.
    """
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        write_dataset(generate_dataset(n_lesion, n_clean, size, seed, prefix), directory)
    samples = load_samples(manifest)
    lesions = sum(s.has_lesion for s in samples)
    if (lesions, len(samples) - lesions) != (n_lesion, n_clean):
        raise FormatError(f"{manifest}: expected {n_lesion} lesion and {n_clean} clean rows, found {lesions} and {len(samples) - lesions}")
    return samples


def require_lesions(samples: Sequence[Sample]) -> None:
    clean = [s.id for s in samples if not s.has_lesion]
    if clean:
        raise ContractError(f"training set contains {len(clean)} lesion-free images (first: {clean[0]})")


@dataclass
class SweepResult:
    reports: dict[str, list[ReportRow]] = field(default_factory=lambda: {r: [] for r in REGIMES})
    records: dict[tuple[str, str], list[EvalRecord]] = field(default_factory=dict)
    failures: list[tuple[str, int, BaseException]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_sweep(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> SweepResult:
    """Run (or resume) every schedule of ``cfg`` and write reports under ``out_dir``.

    Folds whose checkpoint already exists are not retrained.  Report CSVs are
    rewritten after each schedule, so rows of finished schedules survive a
    later failure.  A failed fold is recorded in the result and its schedule
    is left out of the reports.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    workers = cfg.workers if workers is None else workers
    out.mkdir(parents=True, exist_ok=True)
    config_io.save(cfg, out / "config.txt")
    size = (cfg.height, cfg.width)

    train_set = ensure_dataset(out / "data" / "train", cfg.n_train, 0, size, derive_seed(cfg.seed, _SEED_TRAIN_DATA))
    require_lesions(train_set)
    test_set = ensure_dataset(
        out / "data" / "test", cfg.n_test_lesion, cfg.n_test_clean, size, derive_seed(cfg.seed, _SEED_TEST_DATA), "test_"
    )
    split = make_folds([s.id for s in train_set], cfg.folds, derive_seed(cfg.seed, _SEED_FOLDS))
    by_id = {s.id: s for s in train_set}
    model_cfg = replace(cfg.model, seed=derive_seed(cfg.seed, _SEED_MODEL))
    train_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, _SEED_BATCHES))

    jobs: dict[str, list[FoldJob]] = {
        name: [
            fold_job(
                [by_id[i] for i in split.train_ids(f)],
                f,
                model_cfg,
                replace(train_cfg, schedule=name),
                out / "runs" / name,
            )
            for f in range(cfg.folds)
        ]
        for name in cfg.schedules
    }

    result = SweepResult()
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        futures = {}
        if pool is not None:
            for name, js in jobs.items():
                futures[name] = [None if j.ckpt_path.exists() else pool.submit(run_fold_job, j) for j in js]
        for name in cfg.schedules:
            failed = False
            for f, job in enumerate(jobs[name]):
                try:
                    if pool is not None:
                        if futures[name][f] is not None:
                            futures[name][f].result()
                    elif not job.ckpt_path.exists():
                        run_fold_job(job)
                except Exception as exc:  # recorded; the sweep goes on with the other schedules
                    log.error("schedule %s fold %d failed: %s", name, f, exc)
                    result.failures.append((name, f, exc))
                    failed = True
            if failed:
                continue
            _evaluate_schedule(cfg, name, jobs[name], split, by_id, test_set, out, result)
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)

    _figures(cfg, jobs, out, result)
    return result


def _evaluate_schedule(cfg, name, jobs, split, by_id, test_set, out: Path, result: SweepResult) -> None:
    models = [load_model(j.ckpt_path) for j in jobs]
    encoder = encoder_name(cfg.model)

    oof: list[EvalRecord] = []
    for f, model in enumerate(models):
        records, _ = evaluate_split([model], [by_id[i] for i in split.val_ids(f)], cfg.eval)
        oof += records
    oof.sort(key=lambda r: r.id)
    result.records[("id", name)] = oof
    result.reports["id"].append(summarize(oof, name, encoder))

    mixed, row = evaluate_split(models, test_set, cfg.eval, name, encoder)
    result.records[("mixed", name)] = mixed
    result.reports["mixed"].append(row)

    (out / "records").mkdir(exist_ok=True)
    for regime in REGIMES:
        write_records(result.records[(regime, name)], out / "records" / f"{regime}_{name}.csv")
        write_report(result.reports[regime], out / f"report_{regime}.csv")
    log.info(
        "schedule %s: id %.2f, mixed %.2f (%.1f%% rejected)",
        name,
        result.reports["id"][-1].mean_dsc,
        row.mean_dsc,
        row.rejected_pct,
    )


def _figures(cfg, jobs, out: Path, result: SweepResult) -> None:
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    titles = {"id": "out-of-fold, lesion images", "mixed": "k-fold ensemble, lesion and lesion-free images"}
    for regime in REGIMES:
        if result.reports[regime]:
            plot_report(result.reports[regime], titles[regime], fig_dir / f"report_{regime}.png")
    logs = {
        name: [read_log(j.log_path) for j in jobs[name] if j.log_path.exists()]
        for name in cfg.schedules
    }
    if any(logs.values()):
        plot_loss_curves(logs, fig_dir / "training_loss.png")
