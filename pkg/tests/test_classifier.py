import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nptax.classifier import (
    aggregate,
    annotate,
    candidate_label,
    classify,
    classify_many,
    log_posteriors,
    temper,
    train,
)
from nptax.errors import DataError
from nptax.sequence_model import log_predictive
from nptax.species_prior import LevelParams, leaf_prior
from nptax.taxonomy import build_tree

from conftest import SEVEN_GENERA, RANKS3, Rec, random_records

GRID = (0.02, 0.05, 0.08, 0.1, 0.15, 0.2, 0.3, 0.5, 0.7, 1.0)


def brute_posterior(model, query):
    """Posterior over candidates by direct per-candidate evaluation."""
    logs = []
    for j, c in enumerate(model.candidates):
        prior = leaf_prior(model.tree, model.params, c)
        logs.append(math.log(prior) + log_predictive(query, model.leaf_model(j)))
    logs = np.array(logs)
    w = np.exp(logs - logs.max())
    return w / w.sum()


def seven_genera_model(p=6, seed=0):
    rng = np.random.default_rng(seed)
    recs, k = [], 0
    for path, n in SEVEN_GENERA.items():
        base = rng.choice(list("ACGT"), size=p)
        for _ in range(n):
            seq = base.copy()
            flip = rng.random(p) < 0.2
            seq[flip] = rng.choice(list("ACGT"), size=flip.sum())
            k += 1
            recs.append(Rec(f"s{k:02d}", path, "".join(seq)))
    return train(recs, RANKS3), recs


class TestTemper:
    def test_identity(self):
        np.testing.assert_allclose(temper([0.9, 0.1], 1.0), [0.9, 0.1], rtol=1e-15)

    def test_point_mass_fixed(self):
        for rho in GRID:
            np.testing.assert_array_equal(temper([1.0, 0.0, 0.0], rho), [1.0, 0.0, 0.0])

    def test_worked_value(self):
        out = temper([0.8, 0.2], 0.1)
        a, b = 0.8 ** 0.1, 0.2 ** 0.1
        np.testing.assert_allclose(out, [a / (a + b), b / (a + b)], atol=1e-15)
        np.testing.assert_allclose(out, [0.5346, 0.4654], atol=1e-4)

    def test_bad_rho(self):
        for rho in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                temper([0.5, 0.5], rho)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(2, 30), elements=st.floats(1e-6, 1.0)), st.sampled_from(GRID))
    def test_order_preserved(self, raw, rho):
        p = raw / raw.sum()
        out = temper(p, rho)
        assert abs(out.sum() - 1) < 1e-12
        # inputs one ulp apart may tie after flattening, so compare with ties allowed
        assert out[np.argmax(p)] >= out.max() * (1 - 1e-12)
        assert np.all(np.diff(out[np.argsort(p, kind="stable")]) >= -1e-15)
        i, j = np.argmin(p), np.argmax(p)
        if p[j] > p[i] * (1 + 1e-6):
            assert out[j] > out[i]

    def test_flattens(self):
        out = temper([0.7, 0.2, 0.1], 0.1)
        assert out.max() < 0.7 and out.min() > 0.1


class TestAggregate:
    def test_uniform_posterior(self, seven_genera_tree):
        model, _ = seven_genera_model()
        probs = np.full(13, 1 / 13)
        nodes = aggregate(probs, model)
        assert abs(nodes.levels[0][0] - 1) < 1e-12
        order1 = model.tree.find(("Order1",)).index
        # 3 observed genera + novel below Order1, Family1, Family2
        assert abs(nodes.levels[1][order1] - 6 / 13) < 1e-12

    def test_single_leaf_tree(self):
        model = train([Rec("x", ("A", "B"), "ACGT")], ("L1", "L2"))
        probs = np.array([1.0, 0.0, 0.0])
        nodes = aggregate(probs, model)
        assert nodes.levels[0][0] == nodes.levels[1][0] == nodes.levels[2][0] == 1.0

    def test_conservation_random(self, rng):
        recs = random_records(rng, 300)
        model = train(recs, RANKS3)
        P = rng.dirichlet(np.ones(len(model.candidates)), size=20)
        nodes = aggregate(P, model)
        t = model.tree
        for lv in range(t.depth):
            child_sum = np.zeros_like(nodes.levels[lv])
            for i in range(len(t.nodes[lv + 1])):
                child_sum[:, t.parents[lv + 1][i]] += nodes.levels[lv + 1][:, i]
            np.testing.assert_allclose(nodes.levels[lv], child_sum + nodes.novel[lv], atol=1e-12)
        np.testing.assert_allclose(nodes.levels[0][:, 0], 1.0, atol=1e-12)


class TestPosterior:
    def test_matches_brute_force(self):
        model, recs = seven_genera_model()
        for q in ["ACGTAC", "TT--GA", recs[3].sequence]:
            got = np.exp(log_posteriors(model, [q])[0])
            np.testing.assert_allclose(got, brute_posterior(model, q), rtol=1e-10, atol=1e-15)

    def test_three_leaf_toy(self):
        recs = [Rec("a", ("F1", "G1"), "AAC"), Rec("b", ("F1", "G2"), "AGC"), Rec("c", ("F2", "G3"), "TTT"),
                Rec("d", ("F1", "G1"), "AAA")]
        params = [LevelParams(1, 1.0, 0.2), LevelParams(2, 0.5, 0.3)]
        model = train(recs, ("F", "G"), params=params)
        for q in ["AAC", "TTA", "CCC"]:
            np.testing.assert_allclose(np.exp(log_posteriors(model, [q])[0]), brute_posterior(model, q),
                                       rtol=1e-10)

    def test_all_gap_returns_prior(self):
        model, _ = seven_genera_model()
        post, _ = classify("------", model, rho=1.0)
        np.testing.assert_allclose(post.probabilities, np.exp(model.log_prior), rtol=1e-12)

    def test_isolated_leaf_wins(self):
        rng = np.random.default_rng(5)
        recs = []
        for f in range(3):
            fam_base = rng.choice(list("ACGT"), size=80)
            for g in range(3):
                gen_base = fam_base.copy()
                m = rng.random(80) < 0.3
                gen_base[m] = rng.choice(list("ACGT"), size=m.sum())
                for i in range(6):
                    s = gen_base.copy()
                    m = rng.random(80) < 0.05
                    s[m] = rng.choice(list("ACGT"), size=m.sum())
                    recs.append(Rec(f"f{f}g{g}i{i}", (f"F{f}", f"G{f}{g}", f"S{f}{g}{i % 2}"), "".join(s)))
        solo = Rec("solo", ("F1", "G1x", "S1x"), "".join(rng.choice(list("ACGT"), size=80)))
        model = train(recs + [solo], RANKS3)
        for target in (solo, recs[7]):
            _, ann = classify(target.sequence, model, rho=1.0)
            assert [c.label for c in ann.calls] == list(target.labels)
            assert not any(c.novel for c in ann.calls)

    def test_threads_do_not_change_output(self, rng):
        recs = random_records(rng, 200, p=20)
        model = train(recs, RANKS3)
        queries = random_records(np.random.default_rng(9), 700, p=20)
        a = log_posteriors(model, queries, threads=1)
        b = log_posteriors(model, queries, threads=4)
        np.testing.assert_array_equal(a, b)

    def test_wrong_length_query(self, rng):
        model = train(random_records(rng, 20, p=10), RANKS3)
        with pytest.raises(DataError):
            log_posteriors(model, ["ACGT"])

    def test_kmer_kernel_unaligned(self, rng):
        recs = [Rec(f"u{i}", ("A", f"B{i % 2}", f"C{i % 4}"),
                    "".join(rng.choice(list("ACGT"), size=int(rng.integers(30, 60))))) for i in range(16)]
        model = train(recs, RANKS3, kernel="kmer", kappa=3)
        assert model.spec.n_features == 64
        anns = classify_many([r.sequence for r in recs[:3]], model)
        assert len(anns) == 3

    def test_unequal_lengths_need_kmer(self, rng):
        recs = [Rec("a", ("A", "B", "C"), "ACGT"), Rec("b", ("A", "B", "D"), "ACG")]
        with pytest.raises(DataError):
            train(recs, RANKS3)


class TestAnnotate:
    def test_novel_chain_labels(self):
        model, _ = seven_genera_model()
        t = model.tree
        j = next(j for j, c in enumerate(model.candidates) if c.is_novel and c.level == 1
                 and t.nodes[1][c.index].label == "Order2")
        probs = np.zeros(len(model.candidates))
        probs[j] = 1.0
        ann = annotate("q", probs, aggregate(probs, model), model)
        assert [c.label for c in ann.calls] == ["Order2", "New Family in Order2", "New Genus in New Family in Order2"]
        assert [c.novel for c in ann.calls] == [False, True, True]
        assert ann.calls[1].path == ("Order2",)
        assert ann.calls[2].probability == ann.calls[1].probability == 1.0
        assert ann.novel_level == 2
        assert candidate_label(t, model.candidates[j]) == \
            "Order2;New Family in Order2;New Genus in New Family in Order2"

    def test_root_novel_label(self):
        model, _ = seven_genera_model()
        probs = np.zeros(len(model.candidates))
        probs[-1] = 1.0
        ann = annotate("q", probs, aggregate(probs, model), model)
        assert ann.calls[0].label == "New Order in root"

    def test_ties_go_to_first_label(self):
        recs = [Rec("a", ("F", "G1"), "A"), Rec("b", ("F", "G2"), "A")]
        model = train(recs, ("F", "G"), params=[LevelParams(1, 0.0, 0.0), LevelParams(2, 0.0, 0.0)])
        _, ann = classify("A", model, rho=1.0)
        assert ann.calls[1].label == "G1"
        assert ann.calls[1].probability == pytest.approx(0.5)

    def test_rank_probabilities_decrease(self, rng):
        model = train(random_records(rng, 150, p=15), RANKS3)
        for ann in classify_many(random_records(np.random.default_rng(2), 50, p=15), model, rho=0.3):
            probs = [c.probability for c in ann.calls]
            assert all(a >= b - 1e-12 for a, b in zip(probs, probs[1:]))
            assert len(ann.top) == 5

    def test_query_ids(self, rng):
        model = train(random_records(rng, 30, p=8), RANKS3)
        anns = classify_many(["ACGTACGT", Rec("named", (), "ACGTACGT")], model)
        assert [a.query_id for a in anns] == ["query1", "named"]

    def test_zero_prior_branch(self):
        # alpha = sigma = 0 at every level: novelty impossible
        recs = [Rec("a", ("F", "G"), "AC"), Rec("b", ("F", "G"), "AC")]
        model = train(recs, ("F", "G"), params=[LevelParams(1, 0.0, 0.0), LevelParams(2, 0.0, 0.0)])
        post, ann = classify("TT", model)
        assert not any(c.novel for c in ann.calls)
        assert post.probabilities[0] == 1.0


def test_build_tree_roundtrip_labels():
    t = build_tree([(("a", "b"), "x")], ("L1", "L2"))
    assert t.leaves[0].label == "b"
