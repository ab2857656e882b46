"""Nucleotide encodings and Dirichlet-multinomial sequence kernels.

Every kernel is handled through one representation: a sequence becomes a
bag of *feature indices* into a vector of ``n_blocks * alphabet`` cells.

* ``product1`` -- aligned, one block per locus, alphabet ACGT.
* ``product2`` -- aligned, one block per adjacent locus pair (s, s+1),
  alphabet of the 16 dinucleotides.
* ``kmer`` -- unaligned, a single block holding all 4**kappa k-mers.

Gaps (and anything outside ACGT) never produce a feature, so they drop out
of both the training counts and the query likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .taxonomy import CandidateLeaf, TaxonomicTree

NUCLEOTIDES = "ACGT"
GAP = 4
KERNELS = ("product1", "product2", "kmer")
DEFAULT_KAPPA = 5

# Moment-fit clamping
DEGENERATE_TOL = 1e-9
XI0_RANGE = (1e-2, 1e4)
XI0_FALLBACK = 4.0
THETA_FLOOR_PER_NUCLEOTIDE = 1e-3

_FLUSH = 1 << 24

_CODE = np.full(256, GAP, dtype=np.uint8)
for _i, _c in enumerate(NUCLEOTIDES):
    _CODE[ord(_c)] = _i
    _CODE[ord(_c.lower())] = _i


def _codes(raw: str) -> np.ndarray:
    return _CODE[np.frombuffer(raw.encode("ascii", "replace"), dtype=np.uint8)]


@dataclass(frozen=True)
class EncodedSequence:
    """A sequence after cleanup. ``codes`` is None for unaligned input."""

    id: str
    mode: str
    codes: np.ndarray | None = None
    raw: str | None = None

    @property
    def length(self) -> int:
        return len(self.codes) if self.codes is not None else len(self.raw or "")


def encode_aligned(raw: str, p: int | None = None, id: str = "") -> EncodedSequence:
    """Map an aligned sequence to codes 0..3 for ACGT and 4 for a gap.

    Case is folded; '-' and every other character become a gap.
    """
    codes = _codes(raw)
    if p is not None and len(codes) != p:
        raise DataError(f"sequence {id!r} has length {len(codes)}, expected {p}")
    return EncodedSequence(id=id, mode="aligned", codes=codes)


def encode_unaligned(raw: str, id: str = "") -> EncodedSequence:
    return EncodedSequence(id=id, mode="unaligned", raw=raw.upper())


@dataclass(frozen=True)
class KmerVector:
    kappa: int
    counts: np.ndarray
    total: int


def _kmer_indices(raw: str, kappa: int) -> np.ndarray:
    if not 1 <= kappa <= 8:
        raise ValueError(f"kappa must be in 1..8, got {kappa}")
    codes = _codes(raw).astype(np.int64)
    m = len(codes) - kappa + 1
    if m <= 0:
        return np.empty(0, dtype=np.int64)
    bad = (codes == GAP).astype(np.int64)
    bad_in_window = np.convolve(bad, np.ones(kappa, dtype=np.int64), mode="valid") > 0
    idx = np.zeros(m, dtype=np.int64)
    for j in range(kappa):
        idx = idx * 4 + np.where(codes[j:j + m] == GAP, 0, codes[j:j + m])
    return idx[~bad_in_window]


def kmer_counts(raw: str, kappa: int) -> KmerVector:
    """Count overlapping k-mers, skipping windows that touch a non-ACGT symbol.

    K-mers are indexed in base 4 with A=0, C=1, G=2, T=3, first letter most
    significant.
    """
    idx = _kmer_indices(raw, kappa)
    counts = np.bincount(idx, minlength=4 ** kappa)
    return KmerVector(kappa=kappa, counts=counts, total=int(len(idx)))


@dataclass(frozen=True)
class KernelSpec:
    """Which kernel, plus its shape parameters.

    ``p`` is the aligned length (aligned kernels only); ``kappa`` the k-mer
    width (kmer kernel only).
    """

    kind: str
    p: int | None = None
    kappa: int | None = None

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; choose from {KERNELS}")
        if self.kind == "kmer":
            if self.kappa is None or not 1 <= self.kappa <= 8:
                raise ValueError("kmer kernel needs kappa in 1..8")
        else:
            if self.kappa is not None:
                raise ValueError("kappa only applies to the kmer kernel")
            if self.p is None or self.p < (2 if self.kind == "product2" else 1):
                raise ValueError(f"{self.kind} kernel needs an aligned length p")

    @property
    def aligned(self) -> bool:
        return self.kind != "kmer"

    @property
    def alphabet(self) -> int:
        return {"product1": 4, "product2": 16, "kmer": 4 ** (self.kappa or 0)}[self.kind]

    @property
    def n_blocks(self) -> int:
        return {"product1": self.p, "product2": (self.p or 0) - 1, "kmer": 1}[self.kind]

    @property
    def n_features(self) -> int:
        return self.n_blocks * self.alphabet

    @property
    def theta_floor(self) -> float:
        return THETA_FLOOR_PER_NUCLEOTIDE * 4.0 / self.alphabet


def feature_indices(seq: str | EncodedSequence, spec: KernelSpec) -> np.ndarray:
    """Feature cells hit by one sequence (with repeats for k-mers)."""
    if spec.kind == "kmer":
        if isinstance(seq, EncodedSequence):
            seq = seq.raw if seq.raw is not None else "".join(
                NUCLEOTIDES[c] if c < 4 else "-" for c in seq.codes)
        return _kmer_indices(seq, spec.kappa)
    if isinstance(seq, EncodedSequence):
        if seq.codes is None:
            raise DataError(f"query {seq.id!r} is unaligned but the model kernel is {spec.kind}")
        codes = seq.codes
        if len(codes) != spec.p:
            raise DataError(f"query {seq.id!r} has length {len(codes)}, model expects {spec.p}")
    else:
        codes = encode_aligned(seq, spec.p).codes
    codes = codes.astype(np.int64)
    if spec.kind == "product1":
        loci = np.flatnonzero(codes != GAP)
        return loci * 4 + codes[loci]
    left, right = codes[:-1], codes[1:]
    loci = np.flatnonzero((left != GAP) & (right != GAP))
    return loci * 16 + left[loci] * 4 + right[loci]


def feature_vector(seq, spec: KernelSpec) -> np.ndarray:
    return np.bincount(feature_indices(seq, spec), minlength=spec.n_features).astype(np.float64)


def feature_matrix(seqs: Sequence, spec: KernelSpec) -> np.ndarray:
    out = np.zeros((len(seqs), spec.n_features))
    for i, s in enumerate(seqs):
        idx = feature_indices(s, spec)
        np.add.at(out[i], idx, 1.0)
    return out


def accumulate_stats(tree: TaxonomicTree, sequences: Mapping[str, str | EncodedSequence],
                     spec: KernelSpec) -> np.ndarray:
    """Per-leaf count table, shape ``(n_leaves, n_features)``.

    ``sequences`` maps sequence id to its raw or encoded sequence; every id
    must belong to a leaf of ``tree``.
    """
    n_leaves = len(tree.leaves)
    F = spec.n_features
    counts = np.zeros(n_leaves * F, dtype=np.int64)
    pending: list[np.ndarray] = []
    size = 0
    for sid, seq in sequences.items():
        leaf = tree.leaf_of.get(sid)
        if leaf is None:
            raise DataError(f"sequence {sid!r} is not in the taxonomy")
        idx = feature_indices(seq, spec) + leaf * F
        pending.append(idx)
        size += len(idx)
        if size >= _FLUSH:
            counts += np.bincount(np.concatenate(pending), minlength=n_leaves * F)
            pending, size = [], 0
    if pending:
        counts += np.bincount(np.concatenate(pending), minlength=n_leaves * F)
    return counts.reshape(n_leaves, F)


def _blocks(a: np.ndarray, spec: KernelSpec) -> np.ndarray:
    return a.reshape(a.shape[:-1] + (spec.n_blocks, spec.alphabet))


def leaf_proportions(stats: np.ndarray, spec: KernelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-leaf, per-block symbol proportions and a mask of blocks with data."""
    blk = _blocks(stats.astype(np.float64), spec)
    totals = blk.sum(axis=-1, keepdims=True)
    has = totals[..., 0] > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        props = np.where(totals > 0, blk / totals, 0.0)
    return props, has


def moments_from_proportions(props: np.ndarray, has: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Method-of-moments Dirichlet fit for each block, returned flattened.

    ``props`` is ``(leaves, blocks, alphabet)``. The symbol mean is the plain
    average of leaf proportions over leaves with data in that block, and the
    concentration comes from the average sum of squared proportions.
    Blocks whose concentration is undefined or out of range fall back to a
    fixed one; the mean is floored whenever a symbol would get zero mass.
    """
    used = has.sum(axis=0).astype(np.float64)            # (blocks,)
    safe = np.maximum(used, 1.0)[:, None]
    theta = props.sum(axis=0) / safe                     # (blocks, alphabet)
    theta[used == 0] = 1.0 / spec.alphabet
    s_hat = (props ** 2).sum(axis=(0, 2)) / safe[:, 0]
    m = (theta ** 2).sum(axis=1)

    denom = s_hat - m
    with np.errstate(divide="ignore", invalid="ignore"):
        xi0 = np.where(denom > DEGENERATE_TOL, (1.0 - s_hat) / denom, np.nan)
    bad_xi0 = (~np.isfinite(xi0)) | (xi0 < XI0_RANGE[0]) | (xi0 > XI0_RANGE[1]) | (used == 0)
    xi0 = np.where(bad_xi0, XI0_FALLBACK, xi0)
    # a symbol never seen below the node would get zero mass, so floor the mean too
    floor_theta = bad_xi0 | (theta <= 0).any(axis=1)
    floored = np.maximum(theta, spec.theta_floor)
    floored /= floored.sum(axis=1, keepdims=True)
    xi = xi0[:, None] * np.where(floor_theta[:, None], floored, theta)
    return xi.reshape(-1)


def fit_moments(tree: TaxonomicTree, stats: np.ndarray, level: int, index: int,
                spec: KernelSpec) -> np.ndarray:
    """Dirichlet hyperparameters for the leaves below node ``(level, index)``."""
    lo, hi = tree.leaf_ranges[level][index]
    props, has = leaf_proportions(stats[lo:hi], spec)
    return moments_from_proportions(props, has, spec)


@dataclass
class Hyperparameters:
    """Dirichlet vectors for every internal node (levels 0..L-1).

    An observed leaf takes its parent's vector; a novel leaf takes its
    anchor's vector.
    """

    node_xi: list[np.ndarray]

    def source(self, tree: TaxonomicTree, cand: CandidateLeaf) -> tuple[int, int]:
        if cand.is_novel:
            return cand.level, cand.index
        return cand.level - 1, int(tree.parents[cand.level][cand.index])

    def for_candidate(self, tree: TaxonomicTree, cand: CandidateLeaf) -> np.ndarray:
        lv, i = self.source(tree, cand)
        return self.node_xi[lv][i]


def assign_hyperparameters(tree: TaxonomicTree, stats: np.ndarray, spec: KernelSpec) -> Hyperparameters:
    props, has = leaf_proportions(stats, spec)
    node_xi = []
    for lv in range(tree.depth):
        ranges = tree.leaf_ranges[lv]
        node_xi.append(np.stack([moments_from_proportions(props[lo:hi], has[lo:hi], spec)
                                 for lo, hi in ranges]))
    return Hyperparameters(node_xi)


def log_predictive_table(xi: np.ndarray, counts: np.ndarray | None, spec: KernelSpec) -> np.ndarray:
    """``log((xi + n) / M)`` per cell, ``M`` summed within each block.

    Works row-wise on 2-d input. ``counts=None`` gives the prior predictive.
    """
    post = xi if counts is None else xi + counts
    blk = _blocks(post, spec)
    return (np.log(blk) - np.log(blk.sum(axis=-1, keepdims=True))).reshape(post.shape)


@dataclass
class LeafModel:
    """Everything needed to score queries against one candidate leaf."""

    candidate: CandidateLeaf
    spec: KernelSpec
    suff_stats: np.ndarray
    hyper: np.ndarray
    log_pred_table: np.ndarray = field(init=False)

    def __post_init__(self):
        self.log_pred_table = log_predictive_table(self.hyper, self.suff_stats, self.spec)


def log_predictive(query, model: LeafModel) -> float:
    """Log posterior predictive of a query under one leaf.

    Observed leaves use their counts, novel leaves the prior alone; gaps and
    skipped windows contribute nothing.
    """
    if isinstance(query, KmerVector):
        if model.spec.kind != "kmer" or query.kappa != model.spec.kappa:
            raise DataError("k-mer query does not match the model kernel")
        return float(query.counts @ model.log_pred_table)
    idx = feature_indices(query, model.spec)
    return float(model.log_pred_table[idx].sum())
