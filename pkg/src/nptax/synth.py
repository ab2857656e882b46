"""Synthetic reference libraries drawn from the classifier's own generative model.

Taxa arise from nested Pitman-Yor urns, one per level. Nucleotide
frequencies drift down the tree: every new node draws its per-locus
frequencies from a Dirichlet centred on its parent's, with a per-level
concentration. Sequences are then sampled locus by locus from their leaf.

The generator is numpy's Philox, a counter-based 64-bit generator, so a
seed reproduces the same library on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data_io import LibraryRecord
from .species_prior import LevelParams

DEFAULT_RANKS = ("Family", "Genus", "Species")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of a simulated library.

    ``concentrations`` has one entry per level 0..L: the root frequencies
    are Dirichlet(c0 / 4) per locus and a node at level l draws
    Dirichlet(c_l * parent frequencies). ``gap_rate`` blanks loci at random.
    """

    alphas: tuple[float, ...]
    sigmas: tuple[float, ...]
    p: int = 100
    n: int = 1000
    concentrations: tuple[float, ...] | None = None
    ranks: tuple[str, ...] | None = None
    gap_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        L = len(self.alphas)
        if L < 1 or len(self.sigmas) != L:
            raise ValueError("alphas and sigmas must have the same, non-zero length")
        self.level_params()  # validates each pair
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if self.concentrations is not None:
            if len(self.concentrations) != L + 1 or min(self.concentrations) <= 0:
                raise ValueError(f"need {L + 1} positive concentrations (root plus one per level)")
        if self.ranks is not None and len(self.ranks) != L:
            raise ValueError(f"need {L} rank names")
        if not 0.0 <= self.gap_rate < 1.0:
            raise ValueError("gap_rate must lie in [0, 1)")

    @property
    def depth(self) -> int:
        return len(self.alphas)

    @property
    def rank_names(self) -> tuple[str, ...]:
        if self.ranks is not None:
            return tuple(self.ranks)
        if self.depth <= len(DEFAULT_RANKS):
            return DEFAULT_RANKS[len(DEFAULT_RANKS) - self.depth:]
        return tuple(f"level{i}" for i in range(1, self.depth + 1))

    @property
    def level_concentrations(self) -> tuple[float, ...]:
        return self.concentrations or (4.0,) + (20.0,) * (self.depth - 1) + (2.0,)

    def level_params(self) -> list[LevelParams]:
        return [LevelParams(i + 1, float(a), float(s))
                for i, (a, s) in enumerate(zip(self.alphas, self.sigmas))]


@dataclass
class SynthLibrary:
    records: list[LibraryRecord]
    ranks: tuple[str, ...]
    params: list[LevelParams]
    theta: dict[tuple[str, ...], np.ndarray] = field(repr=False)


class _Node:
    __slots__ = ("path", "theta", "children", "counts")

    def __init__(self, path, theta):
        self.path = path
        self.theta = theta
        self.children: list[_Node] = []
        self.counts: list[int] = []


def urn_draw(rng: np.random.Generator, counts: Sequence[int], params: LevelParams) -> int:
    """Index of the block joined by the next item; ``len(counts)`` means new.

    An empty urn always opens a new block.
    """
    n = sum(counts)
    if n == 0:
        return 0
    k = len(counts)
    w = np.empty(k + 1)
    w[:k] = np.asarray(counts, dtype=np.float64) - params.sigma
    w[k] = params.alpha + params.sigma * k
    total = params.alpha + n
    u = rng.random() * total
    return int(min(np.searchsorted(np.cumsum(w), u, side="right"), k))


def _drift(rng: np.random.Generator, parent: np.ndarray, conc: float) -> np.ndarray:
    """Per-locus Dirichlet(conc * parent) draw; rows that underflow become one-hot."""
    g = rng.standard_gamma(conc * parent)
    s = g.sum(axis=1, keepdims=True)
    dead = s[:, 0] <= 0
    if dead.any():
        g[dead] = 0.0
        g[dead, np.argmax(parent[dead], axis=1)] = 1.0
        s = g.sum(axis=1, keepdims=True)
    return g / s


def _sample_sequence(rng: np.random.Generator, theta: np.ndarray, gap_rate: float) -> str:
    u = rng.random(theta.shape[0])
    idx = (np.cumsum(theta, axis=1)[:, :-1] < u[:, None]).sum(axis=1)
    letters = np.frombuffer(b"ACGT", dtype=np.uint8)[idx]
    if gap_rate > 0:
        letters = np.where(rng.random(theta.shape[0]) < gap_rate, ord("-"), letters).astype(np.uint8)
    return letters.tobytes().decode("ascii")


def simulate_library(config: SynthConfig) -> SynthLibrary:
    """Draw ``n`` labelled sequences sequentially from the nested urns.

    Returns the records, the true level parameters, and the true per-locus
    nucleotide frequencies of every leaf keyed by label path.
    """
    rng = make_rng(config.seed)
    ranks = config.rank_names
    params = config.level_params()
    conc = config.level_concentrations
    root = _Node((), _drift(rng, np.full((config.p, 4), 0.25), conc[0]))
    made = [0] * config.depth
    records = []
    for i in range(config.n):
        node = root
        for lv in range(config.depth):
            j = urn_draw(rng, node.counts, params[lv])
            if j == len(node.children):
                made[lv] += 1
                label = f"{ranks[lv]}{made[lv]}"
                node.children.append(_Node(node.path + (label,), _drift(rng, node.theta, conc[lv + 1])))
                node.counts.append(0)
            node.counts[j] += 1
            node = node.children[j]
        seq = _sample_sequence(rng, node.theta, config.gap_rate)
        records.append(LibraryRecord(f"seq{i + 1:06d}", node.path, seq))

    theta = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if len(node.path) == config.depth:
            theta[node.path] = node.theta
        stack.extend(node.children)
    return SynthLibrary(records, ranks, params, theta)


def holdout_split(records: Sequence, mode: str = "random", fraction: float = 0.2,
                  seed: int = 0, level: int | None = None) -> tuple[list, list]:
    """Split records into (train, test), both in input order.

    ``random`` sends ``round(fraction * n)`` records chosen uniformly to the
    test set. ``stratified`` repeatedly picks a taxon at ``level`` (1-based)
    uniformly among those with sequences left, then one of its sequences
    uniformly, until the test quota is met.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    records = list(records)
    n = len(records)
    quota = int(round(fraction * n))
    rng = make_rng(seed)
    if mode == "random":
        test_idx = set(rng.choice(n, size=quota, replace=False).tolist())
    elif mode == "stratified":
        if level is None:
            raise ValueError("stratified split needs a level")
        groups: dict[tuple[str, ...], list[int]] = {}
        for i, r in enumerate(records):
            groups.setdefault(tuple(r.labels[:level]), []).append(i)
        pools = [groups[k] for k in sorted(groups)]
        test_idx = set()
        while len(test_idx) < quota:
            t = int(rng.integers(len(pools)))
            pool = pools[t]
            test_idx.add(pool.pop(int(rng.integers(len(pool)))))
            if not pool:
                pools.pop(t)
    else:
        raise ValueError("mode must be 'random' or 'stratified'")
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test
