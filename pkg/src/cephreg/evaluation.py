"""Radial error metrics, detection rates and k-fold cross-validation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .heatmap import LandmarkSet, check_frame

SDR_THRESHOLDS = (2.0, 2.5, 3.0, 4.0)


def radial_errors(pred: LandmarkSet, gt: LandmarkSet, spacing: float) -> np.ndarray:
    """Per-landmark Euclidean distance in physical units; NaN marks an invalid prediction."""
    check_frame(pred.frame, gt.frame, "prediction")
    if len(pred) != len(gt):
        raise ValueError(f"prediction has {len(pred)} landmarks, ground truth {len(gt)}")
    if spacing <= 0:
        raise ValueError(f"pixel spacing must be positive, got {spacing}")
    d = pred.points - gt.points
    r = spacing * np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
    r[~(pred.valid & gt.valid)] = np.nan
    return r


def mre_std(errors) -> tuple[float, float]:
    """Mean and population standard deviation over the valid (non-NaN) errors."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    e = e[~np.isnan(e)]
    if e.size == 0:
        raise ValueError("no valid radial errors")
    return float(e.mean()), float(e.std())


def sdr(errors, thresholds: Sequence[float] = SDR_THRESHOLDS) -> dict[float, float]:
    """Percentage of landmarks with error <= threshold; NaN counts as a miss."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("no radial errors")
    with np.errstate(invalid="ignore"):
        return {float(t): 100.0 * np.count_nonzero(e <= t) / e.size for t in thresholds}


@dataclass
class EvalReport:
    errors: dict[str, np.ndarray]
    thresholds: tuple[float, ...] = SDR_THRESHOLDS
    seed: int | None = None
    mre: float = field(init=False)
    std: float = field(init=False)
    sdr: dict[float, float] = field(init=False)
    n_invalid: int = field(init=False)

    def __post_init__(self):
        allv = self.all_errors()
        self.mre, self.std = mre_std(allv)
        self.sdr = sdr(allv, self.thresholds)
        self.n_invalid = int(np.isnan(allv).sum())

    def all_errors(self) -> np.ndarray:
        if not self.errors:
            return np.zeros(0)
        return np.concatenate([self.errors[k] for k in sorted(self.errors)])

    @property
    def count(self) -> int:
        return sum(len(v) for v in self.errors.values())

    def summary_row(self, label: str = "") -> dict:
        row = {"label": label, "n": self.count, "invalid": self.n_invalid,
               "mre": f"{self.mre:.6f}", "std": f"{self.std:.6f}"}
        for t in self.thresholds:
            row[f"sdr_{t:g}"] = f"{self.sdr[t]:.4f}"
        return row


def evaluate(predictions: dict[str, LandmarkSet], truths: dict[str, LandmarkSet], spacing: float,
             thresholds: Sequence[float] = SDR_THRESHOLDS) -> EvalReport:
    missing = sorted(set(truths) - set(predictions))
    if missing:
        raise KeyError(f"no predictions for items {missing[:5]}{'...' if len(missing) > 5 else ''}")
    errs = {k: radial_errors(predictions[k], truths[k], spacing) for k in sorted(truths)}
    return EvalReport(errs, tuple(thresholds))


def write_summary_csv(path, rows: Sequence[tuple[str, EvalReport]]) -> None:
    fields = None
    with open(path, "w", newline="") as fh:
        for label, report in rows:
            row = report.summary_row(label)
            if fields is None:
                fields = list(row)
                writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
                writer.writeheader()
            writer.writerow(row)


def write_errors_csv(path, report: EvalReport) -> None:
    """Long-form per-landmark errors (item, landmark, error) for box plots."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "landmark", "radial_error"])
        for item_id in sorted(report.errors):
            for k, r in enumerate(report.errors[item_id]):
                w.writerow([item_id, k, "nan" if np.isnan(r) else f"{r:.6f}"])


def fold_assignment(ids: Sequence[str], folds: int, seed: int = 0) -> list[list[str]]:
    """Seeded shuffle split into ``folds`` disjoint parts.

    When ``folds`` does not divide the item count the first ``len(ids) % folds``
    folds get one extra item.
    """
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if len(ids) < folds:
        raise ValueError(f"{len(ids)} items cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[i] for i in part] for part in np.array_split(order, folds)]


@dataclass
class CrossValResult:
    folds: list[list[str]]
    reports: list[EvalReport]
    pooled: EvalReport
    seed: int


def crossval(items: Sequence, folds: int, train_fn: Callable, infer_fn: Callable,
             truth_fn: Callable, spacing: float, seed: int = 0,
             thresholds: Sequence[float] = SDR_THRESHOLDS) -> CrossValResult:
    """Train on k-1 folds, test on the held-out one, for every fold.

    ``train_fn(train_items, fold_index)`` returns a model;
    ``infer_fn(model, test_items)`` returns ``{item id: LandmarkSet}``;
    ``truth_fn(item)`` gives the reference landmarks in the prediction frame.
    """
    by_id = {it.id: it for it in items}
    if len(by_id) != len(items):
        raise ValueError("item ids must be unique")
    parts = fold_assignment(list(by_id), folds, seed)
    reports = []
    pooled: dict[str, np.ndarray] = {}
    for f, test_ids in enumerate(parts):
        held = set(test_ids)
        train_items = [by_id[i] for i in by_id if i not in held]
        test_items = [by_id[i] for i in test_ids]
        model = train_fn(train_items, f)
        preds = infer_fn(model, test_items)
        truths = {it.id: truth_fn(it) for it in test_items}
        rep = evaluate(preds, truths, spacing, thresholds)
        rep.seed = seed
        reports.append(rep)
        pooled.update(rep.errors)
    return CrossValResult(parts, reports, EvalReport(pooled, tuple(thresholds), seed), seed)
