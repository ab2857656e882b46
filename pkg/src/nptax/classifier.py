"""Training, leaf posteriors, tempering, upward aggregation and top-down calls.

Scoring is a single dense product: every query becomes a feature-count row
and every candidate leaf a row of log predictive probabilities, so the
log-likelihood of all queries against all candidates is ``X @ T.T``.
Queries are processed in fixed-size chunks; chunk boundaries do not depend
on the worker count, which keeps results identical for any ``threads``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DataError, NumericError
from .sequence_model import (
    DEFAULT_KAPPA,
    Hyperparameters,
    KernelSpec,
    LeafModel,
    accumulate_stats,
    assign_hyperparameters,
    feature_indices,
    log_predictive_table,
)
from .species_prior import LevelParams, fit_all_levels, log_leaf_priors
from .taxonomy import (
    CandidateLeaf,
    TaxonomicTree,
    build_tree,
    enumerate_candidates,
)

CHUNK = 256
DEFAULT_TOPK = 5


@dataclass
class TrainedModel:
    tree: TaxonomicTree
    params: list[LevelParams]
    spec: KernelSpec
    leaf_counts: np.ndarray
    hyper: Hyperparameters
    rho: float = 1.0
    candidates: list[CandidateLeaf] = field(init=False, repr=False)
    log_prior: np.ndarray = field(init=False, repr=False)
    _table: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        check_rho(self.rho)
        self.candidates = enumerate_candidates(self.tree)
        self.log_prior = log_leaf_priors(self.tree, self.params, self.candidates)
        L = self.tree.depth
        kinds = np.array([c.is_novel for c in self.candidates])
        self.observed_pos = np.flatnonzero(~kinds)
        self.novel_pos = []
        for lv in range(L):
            pos = np.full(len(self.tree.nodes[lv]), -1, dtype=np.int64)
            for j, c in enumerate(self.candidates):
                if c.is_novel and c.level == lv:
                    pos[c.index] = j
            self.novel_pos.append(pos)
        # first child of every internal node; children are contiguous
        self.child_start = [np.array([n.children[0] for n in self.tree.nodes[lv]], dtype=np.int64)
                            for lv in range(L)]
        self.labels = [candidate_label(self.tree, c) for c in self.candidates]

    @property
    def table(self) -> np.ndarray:
        """Log predictive probabilities, one row per candidate."""
        if self._table is None:
            self._table = self._build_table()
        return self._table

    def _build_table(self) -> np.ndarray:
        tree, L = self.tree, self.tree.depth
        table = np.empty((len(self.candidates), self.spec.n_features))
        parent_xi = self.hyper.node_xi[L - 1][tree.parents[L]]
        table[self.observed_pos] = log_predictive_table(parent_xi, self.leaf_counts, self.spec)
        for lv in range(L):
            table[self.novel_pos[lv]] = log_predictive_table(self.hyper.node_xi[lv], None, self.spec)
        return table

    def leaf_model(self, j: int) -> LeafModel:
        c = self.candidates[j]
        counts = (np.zeros(self.spec.n_features) if c.is_novel
                  else self.leaf_counts[c.index].astype(np.float64))
        return LeafModel(c, self.spec, counts, self.hyper.for_candidate(self.tree, c))


def check_rho(rho: float) -> float:
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    return float(rho)


def candidate_label(tree: TaxonomicTree, c: CandidateLeaf) -> str:
    """Display path of a candidate, ranks joined by ';'."""
    node = tree.node(c.level, c.index)
    parts = list(node.path)
    if c.is_novel:
        prev = node.label
        for lv in range(c.level + 1, tree.depth + 1):
            prev = f"New {tree.levels[lv - 1]} in {prev}"
            parts.append(prev)
    return ";".join(parts)


def _infer_spec(records, kernel: str, kappa: int | None) -> KernelSpec:
    if kernel == "kmer":
        return KernelSpec("kmer", kappa=kappa or DEFAULT_KAPPA)
    lengths = {len(r.sequence) for r in records}
    if len(lengths) != 1:
        raise DataError(f"aligned kernel needs equal-length sequences, found lengths {sorted(lengths)[:5]}")
    return KernelSpec(kernel, p=lengths.pop())


def train(records: Iterable, levels: Sequence[str], kernel: str = "product1",
          kappa: int | None = None, rho: float = 1.0,
          params: Sequence[LevelParams] | None = None) -> TrainedModel:
    """Fit a model from records carrying ``id``, ``labels`` and ``sequence``.

    Level parameters are estimated by maximum likelihood unless ``params``
    is supplied.
    """
    records = list(records)
    tree = build_tree(((r.labels, r.id) for r in records), levels)
    spec = _infer_spec(records, kernel, kappa)
    stats = accumulate_stats(tree, {r.id: r.sequence for r in records}, spec)
    params = list(params) if params is not None else fit_all_levels(tree)
    hyper = assign_hyperparameters(tree, stats, spec)
    return TrainedModel(tree, params, spec, stats, hyper, rho)


# ---------------------------------------------------------------------------
# scoring


def _features(queries: Sequence, spec: KernelSpec) -> np.ndarray:
    X = np.zeros((len(queries), spec.n_features))
    for i, q in enumerate(queries):
        np.add.at(X[i], feature_indices(getattr(q, "sequence", q), spec), 1.0)
    return X


def _score_chunk(model: TrainedModel, queries: Sequence) -> np.ndarray:
    loglik = _features(queries, model.spec) @ model.table.T
    joint = loglik + model.log_prior
    return joint - logsumexp(joint, axis=1, keepdims=True)


def log_posteriors(model: TrainedModel, queries: Sequence, threads: int = 1) -> np.ndarray:
    """Untempered, normalised log leaf posteriors, shape ``(queries, candidates)``."""
    model.table  # build once before fanning out
    chunks = [queries[i:i + CHUNK] for i in range(0, len(queries), CHUNK)]
    if not chunks:
        return np.empty((0, len(model.candidates)))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _score_chunk(model, c), chunks))
    else:
        parts = [_score_chunk(model, c) for c in chunks]
    out = np.concatenate(parts, axis=0)
    if np.isnan(out).any() or np.isposinf(out).any():
        raise NumericError("posterior computation produced non-finite values")
    return out


def temper_log(log_probs: np.ndarray, rho: float) -> np.ndarray:
    """``p**rho`` renormalised, computed from log probabilities along the last axis."""
    check_rho(rho)
    z = rho * np.asarray(log_probs, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def temper(probabilities, rho: float) -> np.ndarray:
    """Flatten a normalised probability vector by raising it to ``rho``.

    Ranking is preserved, ``rho = 1`` is the identity, and a point mass
    stays a point mass.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    with np.errstate(divide="ignore"):
        return temper_log(np.log(p), rho)


# ---------------------------------------------------------------------------
# aggregation and annotation


@dataclass
class NodeProbabilities:
    """Posterior mass of every observed node, and of the new branch under each
    internal node. Arrays carry a leading query axis when aggregated in batch.
    """

    levels: list[np.ndarray]
    novel: list[np.ndarray]


def aggregate(leaf_posterior: np.ndarray, model: TrainedModel) -> NodeProbabilities:
    """Sum candidate-leaf probabilities upward through the tree.

    A novel candidate anchored at a node counts toward that node and all of
    its ancestors.
    """
    P = np.asarray(leaf_posterior, dtype=np.float64)
    L = model.tree.depth
    levels: list[np.ndarray] = [None] * (L + 1)
    novel = [P[..., model.novel_pos[lv]] for lv in range(L)]
    levels[L] = P[..., model.observed_pos]
    for lv in range(L - 1, -1, -1):
        levels[lv] = np.add.reduceat(levels[lv + 1], model.child_start[lv], axis=-1) + novel[lv]
    return NodeProbabilities(levels, novel)


@dataclass(frozen=True)
class RankCall:
    """Prediction at one rank.

    ``path`` is the observed node's label path, or for a novel call the path
    of the anchor the new branch hangs from.
    """

    rank: str
    label: str
    probability: float
    novel: bool
    path: tuple[str, ...]


@dataclass
class Annotation:
    query_id: str
    calls: list[RankCall]
    top: list[tuple[str, float]] = field(default_factory=list)

    @property
    def leaf(self) -> RankCall:
        return self.calls[-1]

    @property
    def novel_level(self) -> int | None:
        """1-based level of the first novel call, or None."""
        for i, c in enumerate(self.calls):
            if c.novel:
                return i + 1
        return None


@dataclass
class LeafPosterior:
    query_id: str
    probabilities: np.ndarray


def annotate(query_id: str, probs: np.ndarray, nodes: NodeProbabilities, model: TrainedModel,
             topk: int = DEFAULT_TOPK) -> Annotation:
    """Walk from the root choosing the most probable child at each rank.

    Ties go to the first child in label order; the new branch ranks after
    every observed child. Once a new branch is chosen the deeper ranks are
    new as well and keep its probability.
    """
    tree, L = model.tree, model.tree.depth
    calls: list[RankCall] = []
    cur = 0
    for lv in range(1, L + 1):
        node = tree.nodes[lv - 1][cur]
        lo = node.children[0]
        hi = node.children[-1] + 1
        options = np.append(nodes.levels[lv][lo:hi], nodes.novel[lv - 1][cur])
        best = int(np.argmax(options))
        if best == len(options) - 1:
            prob = float(options[best])
            prev = node.label
            for deeper in range(lv, L + 1):
                prev = f"New {tree.levels[deeper - 1]} in {prev}"
                calls.append(RankCall(tree.levels[deeper - 1], prev, prob, True, node.path))
            break
        cur = lo + best
        child = tree.nodes[lv][cur]
        calls.append(RankCall(tree.levels[lv - 1], child.label, float(options[best]), False, child.path))
    top = []
    if topk > 0:
        order = np.argsort(-probs, kind="stable")[:topk]
        top = [(model.labels[j], float(probs[j])) for j in order]
    return Annotation(query_id, calls, top)


def annotate_batch(model: TrainedModel, log_post: np.ndarray, ids: Sequence[str], rho: float,
                   topk: int = DEFAULT_TOPK) -> list[Annotation]:
    probs = temper_log(log_post, rho)
    nodes = aggregate(probs, model)
    out = []
    for i, qid in enumerate(ids):
        view = NodeProbabilities([a[i] for a in nodes.levels], [a[i] for a in nodes.novel])
        out.append(annotate(qid, probs[i], view, model, topk))
    return out


def _query_id(q, i: int) -> str:
    return getattr(q, "id", None) or f"query{i + 1}"


def classify(query, model: TrainedModel, rho: float | None = None,
             topk: int = DEFAULT_TOPK) -> tuple[LeafPosterior, Annotation]:
    rho = model.rho if rho is None else check_rho(rho)
    lp = log_posteriors(model, [query])
    probs = temper_log(lp[0], rho)
    qid = _query_id(query, 0)
    ann = annotate(qid, probs, aggregate(probs, model), model, topk)
    return LeafPosterior(qid, probs), ann


def classify_many(queries: Sequence, model: TrainedModel, rho: float | None = None,
                  threads: int = 1, topk: int = DEFAULT_TOPK) -> list[Annotation]:
    rho = model.rho if rho is None else check_rho(rho)
    lp = log_posteriors(model, queries, threads)
    ids = [_query_id(q, i) for i, q in enumerate(queries)]
    return annotate_batch(model, lp, ids, rho, topk)


__all__ = [
    "Annotation", "LeafPosterior", "NodeProbabilities", "RankCall", "TrainedModel",
    "aggregate", "annotate", "annotate_batch", "candidate_label", "classify",
    "classify_many", "log_posteriors", "temper", "temper_log", "train",
]
