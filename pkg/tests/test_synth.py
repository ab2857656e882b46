import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nptax.data_io import LibraryRecord
from nptax.species_prior import LevelParams
from nptax.synth import SynthConfig, holdout_split, make_rng, simulate_library, urn_draw


class TestConfig:
    def test_defaults(self):
        cfg = SynthConfig(alphas=(1.0, 1.0), sigmas=(0.1, 0.1))
        assert cfg.rank_names == ("Genus", "Species")
        assert cfg.level_concentrations == (4.0, 20.0, 2.0)

    def test_deep_default_ranks(self):
        cfg = SynthConfig(alphas=(1.0,) * 4, sigmas=(0.0,) * 4)
        assert cfg.rank_names == ("level1", "level2", "level3", "level4")

    @pytest.mark.parametrize("kw", [
        dict(alphas=(1.0,), sigmas=(0.1, 0.1)),
        dict(alphas=(1.0,), sigmas=(1.0,)),
        dict(alphas=(1.0,), sigmas=(0.1,), n=0),
        dict(alphas=(1.0,), sigmas=(0.1,), concentrations=(1.0,)),
        dict(alphas=(1.0,), sigmas=(0.1,), gap_rate=1.0),
        dict(alphas=(1.0,), sigmas=(0.1,), ranks=("a", "b")),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)


class TestUrn:
    def test_never_new(self):
        rng = make_rng(0)
        p = LevelParams(1, 0.0, 0.0)
        counts = [1]
        for _ in range(500):
            j = urn_draw(rng, counts, p)
            assert j == 0
            counts[0] += 1

    def test_empty_urn_opens_block(self):
        assert urn_draw(make_rng(0), [], LevelParams(1, 1.0, 0.5)) == 0

    def test_new_block_frequency(self):
        # P(new at item 20) = E[(alpha + sigma K19) / (alpha + 19)]
        p = LevelParams(1, 1.0, 0.25)
        rng = make_rng(11)
        reps = 20_000
        new = np.empty(reps)
        expected = np.empty(reps)
        for r in range(reps):
            counts = []
            for _ in range(19):
                j = urn_draw(rng, counts, p)
                if j == len(counts):
                    counts.append(0)
                counts[j] += 1
            expected[r] = (1.0 + 0.25 * len(counts)) / 20.0
            new[r] = urn_draw(rng, counts, p) == len(counts)
        se = np.sqrt(np.var(new - expected) / reps)
        assert abs(new.mean() - expected.mean()) < 3 * se


class TestSimulate:
    def test_single_leaf_when_never_new(self):
        lib = simulate_library(SynthConfig(alphas=(0.0, 0.0), sigmas=(0.0, 0.0), p=10, n=50))
        assert {r.labels for r in lib.records} == {("Genus1", "Species1")}
        assert len(lib.theta) == 1

    def test_deterministic(self):
        cfg = SynthConfig(alphas=(2.0, 2.0), sigmas=(0.2, 0.2), p=30, n=200, seed=7)
        a, b = simulate_library(cfg), simulate_library(cfg)
        assert a.records == b.records
        assert a.records != simulate_library(SynthConfig(alphas=(2.0, 2.0), sigmas=(0.2, 0.2),
                                                         p=30, n=200, seed=8)).records

    def test_shapes(self):
        cfg = SynthConfig(alphas=(2.0, 2.0, 2.0), sigmas=(0.2, 0.2, 0.2), p=25, n=300, seed=1)
        lib = simulate_library(cfg)
        assert len(lib.records) == 300
        assert all(len(r.sequence) == 25 and len(r.labels) == 3 for r in lib.records)
        assert set(lib.theta) == {r.labels for r in lib.records}
        for th in lib.theta.values():
            np.testing.assert_allclose(th.sum(axis=1), 1.0, atol=1e-12)
        assert lib.records[0].id == "seq000001"

    def test_sequences_follow_leaf_frequencies(self):
        cfg = SynthConfig(alphas=(0.0,), sigmas=(0.0,), p=4, n=20_000, ranks=("Species",),
                          concentrations=(4.0, 2.0), seed=3)
        lib = simulate_library(cfg)
        theta = next(iter(lib.theta.values()))
        arr = np.array([list(r.sequence) for r in lib.records])
        for i in range(4):
            freq = np.array([(arr[:, i] == c).mean() for c in "ACGT"])
            np.testing.assert_allclose(freq, theta[i], atol=0.015)

    def test_gap_rate(self):
        cfg = SynthConfig(alphas=(1.0,), sigmas=(0.1,), p=200, n=100, gap_rate=0.2, seed=2)
        frac = np.mean([c == "-" for r in simulate_library(cfg).records for c in r.sequence])
        assert abs(frac - 0.2) < 0.01


def _records(sizes):
    recs = []
    for t, k in enumerate(sizes):
        recs.extend(LibraryRecord(f"t{t}r{i}", (f"T{t}",), "A") for i in range(k))
    return recs


class TestHoldout:
    def test_two_records(self):
        tr, te = holdout_split(_records([2]), "random", 0.5, seed=0)
        assert len(tr) == len(te) == 1

    def test_order_kept(self):
        recs = _records([30])
        tr, te = holdout_split(recs, "random", 0.3, seed=1)
        assert tr == [r for r in recs if r in tr] and te == [r for r in recs if r in te]
        assert len(te) == 9

    def test_stratified_taxon_uniform(self):
        # a single test pick lands on each taxon equally often regardless of size
        recs = _records([1, 5, 30])
        hits = np.zeros(3)
        for seed in range(3000):
            _, te = holdout_split(recs, "stratified", 1 / 36, seed=seed, level=1)
            hits[int(te[0].labels[0][1:])] += 1
        assert stats.chisquare(hits).pvalue > 1e-3

    def test_stratified_exhausts_taxa(self):
        recs = _records([1, 2, 10])
        _, te = holdout_split(recs, "stratified", 0.5, seed=5, level=1)
        assert len(te) == 6
        assert sum(r.labels[0] == "T0" for r in te) <= 1

    def test_bad_args(self):
        with pytest.raises(ValueError):
            holdout_split(_records([4]), "random", 0.0)
        with pytest.raises(ValueError):
            holdout_split(_records([4]), "stratified", 0.5)
        with pytest.raises(ValueError):
            holdout_split(_records([4]), "other", 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=1, max_size=6), st.floats(0.05, 0.95),
           st.integers(0, 10_000), st.sampled_from(["random", "stratified"]))
    def test_partition(self, sizes, fraction, seed, mode):
        recs = _records(sizes)
        tr, te = holdout_split(recs, mode, fraction, seed=seed, level=1)
        assert len(te) == int(round(fraction * len(recs)))
        assert sorted(r.id for r in tr + te) == sorted(r.id for r in recs)
        assert not {r.id for r in tr} & {r.id for r in te}
