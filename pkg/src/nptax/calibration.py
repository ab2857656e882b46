"""Choosing the posterior temperature on held-out data, and calibration curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .classifier import TrainedModel, annotate_batch, check_rho, log_posteriors, train
from .errors import DataError
from .evaluation import score_all

DEFAULT_GRID = (0.02, 0.05, 0.08, 0.1, 0.15, 0.2, 0.3, 0.5, 0.7, 1.0)
OBJECTIVES = ("gap", "ece")


@dataclass(frozen=True)
class RhoScore:
    rho: float
    accuracy: float
    mean_probability: float
    gap: float
    ece: float


@dataclass
class CalibrationReport:
    scores: list[RhoScore]
    chosen_rho: float
    objective: str = "gap"
    curve: list[tuple[float, float]] = field(default_factory=list)

    @property
    def rho_grid(self) -> list[float]:
        return [s.rho for s in self.scores]

    def score_at(self, rho: float) -> RhoScore:
        for s in self.scores:
            if s.rho == rho:
                return s
        raise KeyError(rho)


def expected_calibration_error(probs, correct, n_bins: int = 10) -> float:
    """Bin-weighted mean of |accuracy - confidence| over equal-width bins."""
    probs = np.asarray(probs, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    bins = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            total += mask.sum() * abs(correct[mask].mean() - probs[mask].mean())
    return total / len(probs)


def calibration_curve(probs, correct, n_bins: int = 10) -> list[tuple[float, float]]:
    """Cumulative mean probability against cumulative accuracy, both in percent.

    Predictions are sorted from most to least confident and the running
    averages are read off at ``n_bins`` evenly spaced quantiles. Repeated
    points are dropped. A calibrated classifier tracks the diagonal.
    """
    probs = np.asarray(probs, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if len(probs) == 0:
        return []
    order = np.argsort(-probs, kind="stable")
    cum_p = np.cumsum(probs[order])
    cum_c = np.cumsum(correct[order])
    n = len(probs)
    cut = np.unique(np.ceil(np.arange(1, n_bins + 1) * n / n_bins).astype(int))
    points = []
    for k in cut:
        pt = (100.0 * cum_p[k - 1] / k, 100.0 * cum_c[k - 1] / k)
        if not points or points[-1] != pt:
            points.append(pt)
    return points


def evaluate_rho(model: TrainedModel, log_post: np.ndarray, ids: Sequence[str],
                 truths: Mapping[str, Sequence[str]], rho: float):
    """Species-rank correctness and call probabilities at one temperature."""
    anns = annotate_batch(model, log_post, ids, rho, topk=0)
    scored = score_all(anns, truths, model.tree)
    correct = np.array([s.correct[-1] for s in scored], dtype=np.float64)
    probs = np.array([s.max_probability for s in scored])
    return correct, probs


def select_rho(model: TrainedModel, queries: Sequence, truths: Mapping[str, Sequence[str]],
               grid: Sequence[float] = DEFAULT_GRID, objective: str = "gap",
               threads: int = 1, n_bins: int = 10,
               log_post: np.ndarray | None = None) -> CalibrationReport:
    """Pick the temperature whose held-out calls are best calibrated.

    Queries are scored once; each grid point only re-tempers the cached
    posteriors. ``objective="gap"`` minimises |accuracy - mean probability|
    at the lowest rank, ``"ece"`` the binned calibration error. Ties go to
    the larger temperature.
    """
    if len(queries) == 0:
        raise DataError("calibration needs a non-empty hold-out set")
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    grid = sorted({check_rho(r) for r in grid})
    ids = [q.id for q in queries]
    if log_post is None:
        log_post = log_posteriors(model, queries, threads)

    scores, curves = [], {}
    for rho in grid:
        correct, probs = evaluate_rho(model, log_post, ids, truths, rho)
        acc, mean_p = float(correct.mean()), float(probs.mean())
        scores.append(RhoScore(rho, acc, mean_p, abs(acc - mean_p),
                               expected_calibration_error(probs, correct, n_bins)))
        curves[rho] = calibration_curve(probs, correct, n_bins)

    key = (lambda s: s.gap) if objective == "gap" else (lambda s: s.ece)
    best = min(key(s) for s in scores)
    chosen = max(s.rho for s in scores if key(s) == best)
    return CalibrationReport(scores, chosen, objective, curves[chosen])


def calibrate_holdout(records: Sequence, levels: Sequence[str], kernel: str = "product1",
                      kappa: int | None = None, fraction: float = 0.1, seed: int = 0,
                      grid: Sequence[float] = DEFAULT_GRID, objective: str = "gap",
                      threads: int = 1) -> CalibrationReport:
    """Hold out a random ``fraction`` of the records, train on the rest and
    choose the temperature on the held-out part.

    Taxa whose every record lands in the hold-out become novel there, so the
    choice also accounts for new-branch calls.
    """
    from .synth import holdout_split

    fit, held = holdout_split(records, "random", fraction, seed)
    if not held or not fit:
        raise DataError("library too small to hold out a calibration set")
    model = train(fit, levels, kernel=kernel, kappa=kappa)
    truths = {r.id: tuple(r.labels) for r in held}
    return select_rho(model, held, truths, grid, objective, threads)


def write_report(report: CalibrationReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["rho", "accuracy", "mean_probability", "gap", "ece", "chosen"])
        for s in report.scores:
            w.writerow([f"{s.rho:g}", f"{s.accuracy:.6f}", f"{s.mean_probability:.6f}",
                        f"{s.gap:.6f}", f"{s.ece:.6f}", int(s.rho == report.chosen_rho)])


def write_curves(curves: Mapping[str, Sequence[tuple[float, float]]], path) -> None:
    """Plot-ready CSV with one block of points per group."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "cumulative_probability_pct", "cumulative_accuracy_pct"])
        for label, points in curves.items():
            for x, y in points:
                w.writerow([label, f"{x:.4f}", f"{y:.4f}"])
