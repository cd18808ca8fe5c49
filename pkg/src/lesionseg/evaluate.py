"""OoD-aware DSC scoring, rejection reporting, k-fold ensembling and flip TTA."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .data import Sample, stack
from .errors import ContractError, DimensionError
from .losses import dsc_metric, overlap_counts
from .segnet import Model

REPORT_FIELDS = ("schedule", "encoder", "mean_dsc", "rejected_pct", "id_dsc", "ood_dsc", "n")
RECORD_FIELDS = ("id", "dsc", "tp", "fp", "fn", "gt_empty", "pred_empty", "rejected")

Predictor = Union[Model, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    min_area: int = 0
    tta: bool = False
    batch_size: int = 16


@dataclass(frozen=True)
class EvalRecord:
    id: str
    dsc: float
    tp: int
    fp: int
    fn: int
    gt_empty: bool
    pred_empty: bool

    @property
    def rejected(self) -> bool:
        return self.pred_empty


@dataclass(frozen=True)
class ReportRow:
    schedule: str
    encoder: str
    mean_dsc: float  # x100
    rejected_pct: float
    id_dsc: float | None  # x100, None without lesion images
    ood_dsc: float | None  # x100, None without lesion-free images
    n: int


def threshold(prob_map: np.ndarray, t: float = 0.5, min_area: int = 0) -> np.ndarray:
    """Binary mask of pixels with probability >= t, emptied if it has <= min_area pixels."""
    if not 0.0 < t < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {t}")
    mask = (np.asarray(prob_map) >= t).astype(np.uint8)
    if np.count_nonzero(mask) <= min_area:
        mask[...] = 0
    return mask


def score_image(pred_mask, gt_mask, sample_id: str = "") -> EvalRecord:
    """Per-image DSC with the empty-mask rules: both empty scores 1, exactly one empty scores 0."""
    tp, fp, fn = overlap_counts(pred_mask, gt_mask)
    gt_empty = tp + fn == 0
    pred_empty = tp + fp == 0
    if gt_empty and pred_empty:
        dsc = 1.0
    elif gt_empty or pred_empty:
        dsc = 0.0
    else:
        dsc = dsc_metric(pred_mask, gt_mask).dsc
    return EvalRecord(sample_id, dsc, tp, fp, fn, gt_empty, pred_empty)


# ---------------------------------------------------------------------------
# Prediction


def _predict_fn(member: Predictor) -> Callable[[np.ndarray], np.ndarray]:
    return member.predict if isinstance(member, Model) else member


def _flip(x: np.ndarray, h: bool, v: bool) -> np.ndarray:
    if h:
        x = x[..., ::-1]
    if v:
        x = x[..., ::-1, :]
    return x


_VIEWS = ((False, False), (True, False), (False, True), (True, True))


def tta_predict(member: Predictor, images: np.ndarray) -> np.ndarray:
    """Mean over identity, h-flip, v-flip and h+v-flip, each mapped back before averaging."""
    predict = _predict_fn(member)
    n = images.shape[0]
    batch = np.concatenate([_flip(images, h, v) for h, v in _VIEWS])
    out = predict(np.ascontiguousarray(batch))
    views = np.stack([_flip(out[i * n : (i + 1) * n], h, v) for i, (h, v) in enumerate(_VIEWS)])
    avg = views.sum(axis=0) / len(_VIEWS)
    return np.clip(avg, views.min(axis=0), views.max(axis=0))


def ensemble_predict(models: Sequence[Predictor], images: np.ndarray, tta: bool = False) -> np.ndarray:
    """Average member probability maps for ``(N, 1, H, W)`` (or a single ``(H, W)``) input.

    Members are summed in sorted order per pixel, so the result does not
    depend on the order of ``models``.
    """
    if not models:
        raise ContractError("ensemble needs at least one model")
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None, None]
    if arr.ndim != 4:
        raise DimensionError(f"expected (N, 1, H, W) or (H, W) images, got shape {arr.shape}")
    outs = [tta_predict(m, arr) if tta else _predict_fn(m)(arr) for m in models]
    if len(outs) == 1:
        out = outs[0]
    else:
        members = np.sort(np.stack(outs), axis=0)
        out = np.clip(members.sum(axis=0) / len(outs), members[0], members[-1])
    return out[0, 0] if single else out


# ---------------------------------------------------------------------------
# Split evaluation


def summarize(records: Sequence[EvalRecord], schedule: str = "", encoder: str = "") -> ReportRow:
    if not records:
        raise ContractError("cannot summarize an empty evaluation")
    dsc = np.array([r.dsc for r in records])
    gt_empty = np.array([r.gt_empty for r in records])
    rejected = sum(r.rejected for r in records)

    def sub_mean(sel):
        return float(100.0 * dsc[sel].mean()) if sel.any() else None

    return ReportRow(
        schedule=schedule,
        encoder=encoder,
        mean_dsc=float(100.0 * dsc.mean()),
        rejected_pct=100.0 * rejected / len(records),
        id_dsc=sub_mean(~gt_empty),
        ood_dsc=sub_mean(gt_empty),
        n=len(records),
    )


def subset_rejected_pct(records: Sequence[EvalRecord], gt_empty: bool = True) -> float | None:
    """Percentage of rejected images among the OoD (or, with False, the ID) subset."""
    sel = [r for r in records if r.gt_empty == gt_empty]
    if not sel:
        return None
    return 100.0 * sum(r.rejected for r in sel) / len(sel)


def score_predictions(probs: np.ndarray, samples: Sequence[Sample], cfg: EvalConfig) -> list[EvalRecord]:
    return [
        score_image(threshold(p[0], cfg.threshold, cfg.min_area), s.mask, s.id) for p, s in zip(probs, samples)
    ]


def predict_samples(models: Sequence[Predictor], samples: Sequence[Sample], cfg: EvalConfig) -> np.ndarray:
    chunks = []
    for start in range(0, len(samples), cfg.batch_size):
        images, _ = stack(samples[start : start + cfg.batch_size])
        chunks.append(ensemble_predict(models, images, tta=cfg.tta))
    return np.concatenate(chunks)


def evaluate_split(
    models: Sequence[Predictor],
    samples: Sequence[Sample],
    cfg: EvalConfig = EvalConfig(),
    schedule: str = "",
    encoder: str = "",
) -> tuple[list[EvalRecord], ReportRow]:
    """Ensemble-predict, threshold and score every sample; records come back sorted by id."""
    if not samples:
        raise ContractError("evaluation split is empty")
    ordered = sorted(samples, key=lambda s: s.id)
    records = score_predictions(predict_samples(models, ordered, cfg), ordered, cfg)
    return records, summarize(records, schedule, encoder)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.4f}"


def write_report(rows: Sequence[ReportRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for r in rows:
            writer.writerow(
                [r.schedule, r.encoder, _fmt(r.mean_dsc), _fmt(r.rejected_pct), _fmt(r.id_dsc), _fmt(r.ood_dsc), r.n]
            )


def read_report(path) -> list[ReportRow]:
    def opt(s: str) -> float | None:
        return float(s) if s else None

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_FIELDS:
            raise ValueError(f"{path}: unexpected report header {reader.fieldnames}")
        return [
            ReportRow(
                r["schedule"],
                r["encoder"],
                float(r["mean_dsc"]),
                float(r["rejected_pct"]),
                opt(r["id_dsc"]),
                opt(r["ood_dsc"]),
                int(r["n"]),
            )
            for r in reader
        ]


def write_records(records: Sequence[EvalRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow(
                [r.id, repr(r.dsc), r.tp, r.fp, r.fn, int(r.gt_empty), int(r.pred_empty), int(r.rejected)]
            )


def read_records(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        return [
            EvalRecord(
                r["id"],
                float(r["dsc"]),
                int(r["tp"]),
                int(r["fp"]),
                int(r["fn"]),
                r["gt_empty"] == "1",
                r["pred_empty"] == "1",
            )
            for r in csv.DictReader(fh)
        ]
