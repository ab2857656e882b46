"""Rooted taxonomic tree built from rank-labelled training records.

Nodes are identified by their full root-to-node label path, so two genera
that share a name under different families are different nodes. Within a
level, nodes are stored in lexicographic order of their path; this makes
the leaves under any node a contiguous index range and gives a depth-first,
label-sorted traversal for free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

OBSERVED = "observed"
NOVEL = "novel"

ROOT_LABEL = "root"


def fill_dummy_ranks(labels: Sequence[str]) -> tuple[str, ...]:
    """Replace blank intermediate ranks with deterministic placeholder labels.

    A blank at level l becomes ``unk_<path of the ranks above>``. The lowest
    rank must be present.
    """
    cleaned = [(lab or "").strip() for lab in labels]
    if not cleaned or not cleaned[-1]:
        raise DataError(f"lowest rank is missing in {tuple(labels)!r}")
    filled: list[str] = []
    for lab in cleaned:
        if not lab:
            lab = "unk_" + ("/".join(filled) if filled else ROOT_LABEL)
        filled.append(lab)
    return tuple(filled)


@dataclass(frozen=True)
class TaxonNode:
    level: int
    index: int
    path: tuple[str, ...]
    parent: int
    children: tuple[int, ...]
    seq_count: int

    @property
    def label(self) -> str:
        return self.path[-1] if self.path else ROOT_LABEL

    @property
    def child_count(self) -> int:
        return len(self.children)


@dataclass(frozen=True)
class CandidateLeaf:
    """An observed leaf, or a novel leaf branching off below ``(level, index)``.

    For observed candidates ``level`` is the leaf level L and ``index`` the
    leaf index. For novel candidates they locate the anchor node, the deepest
    observed node on the new branch (level 0 is the root).
    """

    kind: str
    level: int
    index: int

    @property
    def is_novel(self) -> bool:
        return self.kind == NOVEL


class TaxonomicTree:
    """Immutable taxonomy with per-node sequence counts.

    Attributes
    ----------
    levels : tuple of str
        Rank names for levels 1..L.
    nodes : list of list of TaxonNode
        ``nodes[l]`` holds the level-l nodes; ``nodes[0]`` is the root alone.
    leaf_of : dict
        Sequence id -> leaf index.
    """

    def __init__(self, levels, nodes, leaf_of):
        self.levels = tuple(levels)
        self.nodes = nodes
        self.leaf_of = dict(leaf_of)
        self._lookup = {node.path: (node.level, node.index)
                        for level_nodes in nodes for node in level_nodes}
        self.parents = [np.array([n.parent for n in lv], dtype=np.int64) for lv in nodes]
        self.seq_counts = [np.array([n.seq_count for n in lv], dtype=np.int64) for lv in nodes]
        self.child_counts = [np.array([n.child_count for n in lv], dtype=np.int64) for lv in nodes]
        # leaf range [start, stop) under every node, per level
        self.leaf_ranges = self._compute_leaf_ranges()

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def n(self) -> int:
        return int(self.nodes[0][0].seq_count)

    @property
    def root(self) -> TaxonNode:
        return self.nodes[0][0]

    @property
    def leaves(self) -> list[TaxonNode]:
        return self.nodes[self.depth]

    def node(self, level: int, index: int) -> TaxonNode:
        return self.nodes[level][index]

    def find(self, path: Sequence[str]) -> TaxonNode | None:
        hit = self._lookup.get(tuple(path))
        return None if hit is None else self.nodes[hit[0]][hit[1]]

    def ancestors(self, level: int, index: int) -> list[int]:
        """Indices of the node and its ancestors, ``out[l]`` at level l."""
        out = [0] * (level + 1)
        out[level] = index
        for lv in range(level, 0, -1):
            index = self.nodes[lv][index].parent
            out[lv - 1] = index
        return out

    def deepest_observed(self, path: Sequence[str]) -> TaxonNode:
        """The deepest node of the tree lying on ``path`` (the root at worst)."""
        best = self.root
        for lv in range(1, len(path) + 1):
            hit = self.find(path[:lv])
            if hit is None:
                break
            best = hit
        return best

    def _compute_leaf_ranges(self):
        L = self.depth
        ranges = [None] * (L + 1)
        n_leaves = len(self.nodes[L])
        ranges[L] = np.stack([np.arange(n_leaves), np.arange(n_leaves) + 1], axis=1)
        for lv in range(L - 1, -1, -1):
            lo = np.full(len(self.nodes[lv]), np.iinfo(np.int64).max, dtype=np.int64)
            hi = np.zeros(len(self.nodes[lv]), dtype=np.int64)
            np.minimum.at(lo, self.parents[lv + 1], ranges[lv + 1][:, 0])
            np.maximum.at(hi, self.parents[lv + 1], ranges[lv + 1][:, 1])
            ranges[lv] = np.stack([lo, hi], axis=1)
        return ranges

    def __repr__(self):
        sizes = ", ".join(str(len(lv)) for lv in self.nodes[1:])
        return f"TaxonomicTree(levels={self.levels!r}, nodes per level=[{sizes}], n={self.n})"


def build_tree(records: Iterable[tuple[Sequence[str], str]], levels: Sequence[str]) -> TaxonomicTree:
    """Build the tree from ``(labels, sequence_id)`` records.

    Every record must carry exactly ``len(levels)`` non-empty labels; fill
    blanks beforehand with :func:`fill_dummy_ranks`.
    """
    levels = tuple(levels)
    L = len(levels)
    if L < 2:
        raise DataError("a taxonomy needs at least two ranks")
    seen: set[str] = set()
    leaf_paths: list[tuple[str, ...]] = []
    ids: list[str] = []
    for labels, seq_id in records:
        labels = tuple(labels)
        if len(labels) != L or any(not lab for lab in labels):
            raise DataError(f"record {seq_id!r} does not have {L} non-empty labels: {labels!r}")
        if seq_id in seen:
            raise DataError(f"duplicate sequence id {seq_id!r}")
        seen.add(seq_id)
        leaf_paths.append(labels)
        ids.append(seq_id)
    if not leaf_paths:
        raise DataError("cannot build a taxonomy from zero records")

    # per-level counts keyed by full path
    counts: list[dict[tuple[str, ...], int]] = [dict() for _ in range(L + 1)]
    counts[0][()] = len(leaf_paths)
    for path in leaf_paths:
        for lv in range(1, L + 1):
            key = path[:lv]
            counts[lv][key] = counts[lv].get(key, 0) + 1

    paths = [sorted(c) for c in counts]
    index = [{p: i for i, p in enumerate(ps)} for ps in paths]
    children: list[list[list[int]]] = [[[] for _ in ps] for ps in paths]
    for lv in range(1, L + 1):
        for i, p in enumerate(paths[lv]):
            children[lv - 1][index[lv - 1][p[:-1]]].append(i)

    nodes = []
    for lv in range(L + 1):
        nodes.append([
            TaxonNode(level=lv, index=i, path=p,
                      parent=index[lv - 1][p[:-1]] if lv else -1,
                      children=tuple(children[lv][i]),
                      seq_count=counts[lv][p])
            for i, p in enumerate(paths[lv])
        ])
    leaf_of = {sid: index[L][path] for sid, path in zip(ids, leaf_paths)}
    return TaxonomicTree(levels, nodes, leaf_of)


def enumerate_candidates(tree: TaxonomicTree) -> list[CandidateLeaf]:
    """All candidate leaves in canonical depth-first order.

    Children are visited in label order; the novel candidate anchored at a
    node comes after everything beneath that node, so novelty sorts last
    among siblings.
    """
    L = tree.depth
    out: list[CandidateLeaf] = []
    stack: list[tuple[int, int, bool]] = [(0, 0, False)]
    while stack:
        lv, i, expanded = stack.pop()
        if lv == L:
            out.append(CandidateLeaf(OBSERVED, lv, i))
        elif expanded:
            out.append(CandidateLeaf(NOVEL, lv, i))
        else:
            stack.append((lv, i, True))
            for c in reversed(tree.nodes[lv][i].children):
                stack.append((lv + 1, c, False))
    return out
