"""Pitman-Yor allocation probabilities, the partition likelihood, and priors
over candidate leaves of a taxonomy.

All likelihood work happens in log space: rising factorials are written as
differences of ``gammaln`` so that partitions with tens of thousands of
items stay finite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, gammaln

from .errors import DataError, NumericError
from .taxonomy import CandidateLeaf, TaxonomicTree

log = logging.getLogger(__name__)

DEGENERATE_ALPHA = 1e-2
_ALPHA_OFFSET = 1e-8
_STARTS = [(x, y) for x in (-2.0, 0.0, 2.0) for y in (-1.0, 1.0)]


@dataclass(frozen=True)
class LevelParams:
    """Pitman-Yor strength ``alpha`` and discount ``sigma`` for one rank.

    ``alpha = sigma = 0`` is accepted as the no-novelty limit, where the urn
    reduces to observed proportions.
    """

    level: int
    alpha: float
    sigma: float

    def __post_init__(self):
        if not 0.0 <= self.sigma < 1.0:
            raise ValueError(f"sigma must lie in [0, 1), got {self.sigma}")
        if not (self.alpha > -self.sigma or (self.alpha == 0.0 and self.sigma == 0.0)):
            raise ValueError(f"alpha must exceed -sigma, got alpha={self.alpha}, sigma={self.sigma}")


@dataclass(frozen=True)
class PartitionCounts:
    frequencies: tuple[int, ...]

    def __post_init__(self):
        freqs = tuple(int(f) for f in self.frequencies)
        if not freqs or min(freqs) < 1:
            raise ValueError("a partition needs at least one block and positive frequencies")
        object.__setattr__(self, "frequencies", freqs)

    @property
    def total(self) -> int:
        return sum(self.frequencies)

    @property
    def blocks(self) -> int:
        return len(self.frequencies)


def _freqs(counts) -> np.ndarray:
    if isinstance(counts, PartitionCounts):
        return np.asarray(counts.frequencies, dtype=np.float64)
    return np.asarray(PartitionCounts(tuple(counts)).frequencies, dtype=np.float64)


def urn_probabilities(counts, params: LevelParams) -> np.ndarray:
    """Probability that the next item joins each existing block, then a new one.

    Returns a vector of length ``k + 1``; the last entry is the new-block
    probability ``(alpha + sigma k) / (alpha + n)``.
    """
    n_j = _freqs(counts)
    n, k = n_j.sum(), len(n_j)
    a, s = params.alpha, params.sigma
    out = np.empty(k + 1)
    out[:k] = (n_j - s) / (a + n)
    out[k] = (a + s * k) / (a + n)
    return out


def log_eppf(counts, params: LevelParams) -> float:
    """Log probability of a partition with the given block sizes."""
    return _log_eppf(_freqs(counts), params.alpha, params.sigma)


def _log_eppf(n_j: np.ndarray, a: float, s: float) -> float:
    n, k = n_j.sum(), len(n_j)
    out = 0.0
    if k > 1:
        with np.errstate(divide="ignore"):
            out += float(np.log(a + s * np.arange(1, k)).sum())
    out -= gammaln(a + n) - gammaln(a + 1.0)
    out += float((gammaln(n_j - s) - gammaln(1.0 - s)).sum())
    return out


class _ProductEPPF:
    """Sum of per-parent log-EPPFs, pre-aggregated so one evaluation is O(unique sizes)."""

    def __init__(self, partitions: Sequence[np.ndarray]):
        ks = np.array([len(p) for p in partitions], dtype=np.int64)
        ns = np.array([p.sum() for p in partitions], dtype=np.float64)
        sizes = np.concatenate(partitions).astype(np.float64)
        # log(a + i s) appears once for each parent with k > i
        max_k = int(ks.max())
        self.i_terms = np.arange(1, max_k, dtype=np.float64)
        self.i_mult = np.array([(ks > i).sum() for i in range(1, max_k)], dtype=np.float64)
        self.n_vals, self.n_mult = np.unique(ns, return_counts=True)
        self.size_vals, self.size_mult = np.unique(sizes, return_counts=True)
        self.n_parents = len(partitions)

    def __call__(self, a: float, s: float) -> float:
        out = 0.0
        if len(self.i_terms):
            with np.errstate(divide="ignore"):
                out += float((self.i_mult * np.log(a + s * self.i_terms)).sum())
        # sigma -> 1 gives inf - inf; the optimiser treats the resulting nan as infeasible
        with np.errstate(invalid="ignore"):
            out -= float((self.n_mult * (gammaln(a + self.n_vals) - gammaln(a + 1.0))).sum())
            out += float((self.size_mult * (gammaln(self.size_vals - s) - gammaln(1.0 - s))).sum())
        return out

    @property
    def degenerate(self) -> bool:
        # every parent holds a single one-item block: the likelihood is flat
        return bool(np.all(self.size_vals == 1.0)) and not len(self.i_terms)


def level_partitions(tree: TaxonomicTree, level: int) -> list[np.ndarray]:
    """Child sequence counts for every parent at ``level - 1``."""
    if not 1 <= level <= tree.depth:
        raise ValueError(f"level must be in 1..{tree.depth}")
    counts = tree.seq_counts[level]
    return [counts[list(node.children)] for node in tree.nodes[level - 1]]


def _unpack(z) -> tuple[float, float]:
    x, y = float(z[0]), float(np.clip(z[1], -30.0, 30.0))
    s = float(expit(x))
    return math.exp(y) - s + _ALPHA_OFFSET, s


def fit_partitions(partitions: Sequence, level: int = 1) -> LevelParams:
    """Maximise the product of Pitman-Yor partition likelihoods over ``(alpha, sigma)``.

    Nelder-Mead from several starts on an unconstrained reparametrisation,
    followed by a one-dimensional search on the ``sigma = 0`` edge, which the
    logistic map can only approach.
    """
    parts = [np.asarray(p, dtype=np.float64) for p in partitions]
    if not parts or any(len(p) == 0 or p.min() < 1 for p in parts):
        raise DataError("every parent needs at least one child with at least one sequence")
    objective = _ProductEPPF(parts)
    if objective.degenerate:
        log.warning("level %d is degenerate (all singleton parents); using alpha=%g, sigma=0",
                    level, DEGENERATE_ALPHA)
        return LevelParams(level, DEGENERATE_ALPHA, 0.0)

    def neg(z):
        a, s = _unpack(z)
        val = objective(a, s)
        return -val if np.isfinite(val) else np.inf

    best_val, best = np.inf, None
    for start in _STARTS:
        res = minimize(neg, np.array(start), method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        if res.fun < best_val:
            best_val, best = res.fun, _unpack(res.x)

    edge = minimize_scalar(lambda y: -objective(math.exp(y), 0.0), bounds=(-25.0, 15.0),
                           method="bounded", options={"xatol": 1e-10})
    if edge.fun < best_val:
        best_val, best = edge.fun, (math.exp(edge.x), 0.0)

    if best is None or not np.isfinite(best_val):
        raise NumericError(f"Pitman-Yor fit failed at level {level}")
    return LevelParams(level, best[0], best[1])


def product_log_eppf(partitions: Sequence, params: LevelParams) -> float:
    """Objective maximised by :func:`fit_partitions`, for checking fits."""
    return float(sum(_log_eppf(np.asarray(p, dtype=np.float64), params.alpha, params.sigma)
                     for p in partitions))


def fit_level_params(tree: TaxonomicTree, level: int) -> LevelParams:
    return fit_partitions(level_partitions(tree, level), level)


def fit_all_levels(tree: TaxonomicTree) -> list[LevelParams]:
    return [fit_level_params(tree, lv) for lv in range(1, tree.depth + 1)]


def log_path_priors(tree: TaxonomicTree, params: Sequence[LevelParams]):
    """Log prior of reaching every observed node, and of novelty below it.

    Returns ``(path, novel)`` where ``path[l][i]`` is the log probability
    that the next sequence lands in node ``(l, i)`` and ``novel[l][i]`` for
    ``l < L`` is the log probability that it opens a new branch directly
    under that node.
    """
    L = tree.depth
    if len(params) != L:
        raise ValueError(f"expected {L} level parameters, got {len(params)}")
    path = [np.zeros(1)]
    novel = []
    for lv in range(1, L + 1):
        a, s = params[lv - 1].alpha, params[lv - 1].sigma
        pa = tree.parents[lv]
        n_parent = tree.seq_counts[lv - 1].astype(np.float64)
        k_parent = tree.child_counts[lv - 1].astype(np.float64)
        with np.errstate(divide="ignore"):
            novel.append(path[lv - 1] + np.log(a + s * k_parent) - np.log(a + n_parent))
        cond = np.log(tree.seq_counts[lv] - s) - np.log(a + n_parent[pa])
        path.append(path[lv - 1][pa] + cond)
    return path, novel


def log_leaf_priors(tree: TaxonomicTree, params: Sequence[LevelParams],
                    candidates: Sequence[CandidateLeaf]) -> np.ndarray:
    path, novel = log_path_priors(tree, params)
    return np.array([novel[c.level][c.index] if c.is_novel else path[c.level][c.index]
                     for c in candidates])


def leaf_prior(tree: TaxonomicTree, params: Sequence[LevelParams], candidate: CandidateLeaf) -> float:
    """Prior probability that the next sequence falls in ``candidate``.

    A product of allocation probabilities along the branch, with one
    new-block factor at the novelty level and factors of one below it.
    """
    prob = 1.0
    chain = tree.ancestors(candidate.level, candidate.index)
    for lv in range(1, candidate.level + 1):
        p = params[lv - 1]
        node = tree.nodes[lv][chain[lv]]
        parent = tree.nodes[lv - 1][chain[lv - 1]]
        prob *= (node.seq_count - p.sigma) / (p.alpha + parent.seq_count)
    if candidate.is_novel:
        p = params[candidate.level]
        anchor = tree.nodes[candidate.level][candidate.index]
        prob *= (p.alpha + p.sigma * anchor.child_count) / (p.alpha + anchor.seq_count)
    return prob
