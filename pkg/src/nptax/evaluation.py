"""Scoring predictions against true taxonomies, with novelty-aware correctness.

A true taxon absent from training is novel, and so is everything below it.
At a novel rank the prediction is correct only if it opens a new branch
under the same deepest observed ancestor as the truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .classifier import Annotation
from .errors import DataError
from .taxonomy import TaxonomicTree

FULLY_CORRECT_NOVEL = "fully-correct-novel"
NOVEL_WRONG_BRANCH = "novel-wrong-branch"
PREDICTED_OBSERVED = "predicted-observed"

GROUPS = ("All", "New", "Observed")


@dataclass(frozen=True)
class ScoredPrediction:
    query_id: str
    correct: tuple[bool, ...]
    truth_novel: tuple[bool, ...]
    predicted_novel: tuple[bool, ...]
    probabilities: tuple[float, ...]
    outcome: str | None

    @property
    def is_new(self) -> bool:
        return any(self.truth_novel)

    @property
    def first_novel_level(self) -> int | None:
        for i, flag in enumerate(self.truth_novel):
            if flag:
                return i + 1
        return None

    @property
    def max_probability(self) -> float:
        return self.probabilities[-1]


def score_prediction(predicted: Annotation, truth: Sequence[str], training: TaxonomicTree) -> ScoredPrediction:
    L = training.depth
    truth = tuple(truth)
    if len(truth) != L or any(not t for t in truth):
        raise DataError(f"truth for {predicted.query_id!r} must have {L} labels, got {truth!r}")
    if len(predicted.calls) != L:
        raise DataError(f"prediction for {predicted.query_id!r} has {len(predicted.calls)} ranks, expected {L}")

    truth_novel = tuple(training.find(truth[:lv]) is None for lv in range(1, L + 1))
    anchor = training.deepest_observed(truth).path

    correct = []
    for lv, call in enumerate(predicted.calls, start=1):
        if truth_novel[lv - 1]:
            correct.append(call.novel and call.path == anchor)
        else:
            correct.append(not call.novel and call.path == truth[:lv])

    outcome = None
    if any(truth_novel):
        leaf = predicted.calls[-1]
        if not leaf.novel:
            outcome = PREDICTED_OBSERVED
        elif leaf.path == anchor:
            outcome = FULLY_CORRECT_NOVEL
        else:
            outcome = NOVEL_WRONG_BRANCH

    return ScoredPrediction(
        query_id=predicted.query_id,
        correct=tuple(correct),
        truth_novel=truth_novel,
        predicted_novel=tuple(c.novel for c in predicted.calls),
        probabilities=tuple(c.probability for c in predicted.calls),
        outcome=outcome,
    )


def score_all(annotations: Iterable[Annotation], truths, training: TaxonomicTree) -> list[ScoredPrediction]:
    """``truths`` maps query id to its label tuple."""
    out = []
    for ann in annotations:
        if ann.query_id not in truths:
            raise DataError(f"no true taxonomy for query {ann.query_id!r}")
        out.append(score_prediction(ann, truths[ann.query_id], training))
    return out


@dataclass(frozen=True)
class AccuracyRow:
    group: str
    rank: str
    n: int
    accuracy: float
    mean_probability: float


def _select(scored: Sequence[ScoredPrediction], group: str) -> list[ScoredPrediction]:
    if group == "New":
        return [s for s in scored if s.is_new]
    if group == "Observed":
        return [s for s in scored if not s.is_new]
    return list(scored)


def accuracy_table(scored: Sequence[ScoredPrediction], ranks: Sequence[str]) -> list[AccuracyRow]:
    """Per group and rank: percent correct and mean probability of the call.

    Groups with no members are omitted.
    """
    if not scored:
        raise DataError("accuracy table needs at least one scored prediction")
    rows = []
    for group in GROUPS:
        sub = _select(scored, group)
        if not sub:
            continue
        correct = np.array([s.correct for s in sub], dtype=np.float64)
        probs = np.array([s.probabilities for s in sub], dtype=np.float64)
        for lv, rank in enumerate(ranks):
            rows.append(AccuracyRow(group, rank, len(sub), 100.0 * correct[:, lv].mean(),
                                    float(probs[:, lv].mean())))
    return rows


@dataclass(frozen=True)
class NoveltySummary:
    predicted_novel: int
    truly_novel: int
    recognized_novel: int
    fully_correct_novel: int

    @property
    def recognized_pct(self) -> float:
        return 100.0 * self.recognized_novel / self.truly_novel if self.truly_novel else 0.0

    @property
    def fully_correct_pct(self) -> float:
        return 100.0 * self.fully_correct_novel / self.truly_novel if self.truly_novel else 0.0


def novelty_summary(scored: Sequence[ScoredPrediction]) -> NoveltySummary:
    """Counts of novel predictions and how many truly novel queries were caught.

    A truly novel query counts as recognised when the prediction is novel at
    the rank where the truth first becomes novel, on any branch.
    """
    predicted = sum(1 for s in scored if s.predicted_novel[-1])
    truly = [s for s in scored if s.is_new]
    recognized = sum(1 for s in truly if s.predicted_novel[s.first_novel_level - 1])
    fully = sum(1 for s in truly if s.outcome == FULLY_CORRECT_NOVEL)
    return NoveltySummary(predicted, len(truly), recognized, fully)


def write_accuracy_table(rows: Sequence[AccuracyRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("group\trank\tn\taccuracy_pct\tmean_probability\n")
        for r in rows:
            fh.write(f"{r.group}\t{r.rank}\t{r.n}\t{r.accuracy:.1f}\t{r.mean_probability:.4f}\n")


def write_novelty_summary(summary: NoveltySummary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("predicted_novel\ttruly_novel\trecognized_novel\tfully_correct_novel\t"
                 "recognized_pct\tfully_correct_pct\n")
        fh.write(f"{summary.predicted_novel}\t{summary.truly_novel}\t{summary.recognized_novel}\t"
                 f"{summary.fully_correct_novel}\t{summary.recognized_pct:.1f}\t"
                 f"{summary.fully_correct_pct:.1f}\n")
