from dataclasses import dataclass

import numpy as np
import pytest

from nptax.taxonomy import build_tree

RANKS3 = ("Order", "Family", "Genus")

# Two orders, three families, seven genera, 28 sequences.
# Order1 holds 12 sequences, its first family 8 split over two genera.
SEVEN_GENERA = {
    ("Order1", "Family1", "Genus1"): 5,
    ("Order1", "Family1", "Genus2"): 3,
    ("Order1", "Family2", "Genus3"): 4,
    ("Order2", "Family3", "Genus4"): 4,
    ("Order2", "Family3", "Genus5"): 4,
    ("Order2", "Family3", "Genus6"): 4,
    ("Order2", "Family3", "Genus7"): 4,
}


@dataclass(frozen=True)
class Rec:
    id: str
    labels: tuple
    sequence: str


def seven_genera_pairs():
    out, k = [], 0
    for path, n in SEVEN_GENERA.items():
        for _ in range(n):
            k += 1
            out.append((path, f"s{k:02d}"))
    return out


@pytest.fixture
def seven_genera_tree():
    return build_tree(seven_genera_pairs(), RANKS3)


def random_records(rng, n, p=12, branching=(3, 3, 3), ranks=RANKS3):
    recs = []
    for i in range(n):
        labels = tuple(f"{r[0]}{rng.integers(b)}" for r, b in zip(ranks, branching))
        seq = "".join(rng.choice(list("ACGT-"), size=p, p=[.24, .24, .24, .24, .04]))
        recs.append(Rec(f"r{i}", labels, seq))
    return recs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
