import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from triplet_embed.classify import CentroidModel
from triplet_embed.errors import StructuralError
from triplet_embed.metrics import (
    centroid_drift, cluster_radius, confusion_matrix, fmt, scores, top_confoundings,
)


class TestRadius:
    def test_single_member(self):
        assert cluster_radius([[0.6, 0.8]], [0]).tolist() == [0.0]

    def test_symmetric_pair(self):
        r = cluster_radius([[1, 0], [0, 1]], [3, 3])
        assert r[0] == pytest.approx(np.sqrt(0.5), abs=1e-15)

    def test_identical_members(self):
        assert cluster_radius([[0, 1]] * 4, [0] * 4).tolist() == [0.0]

    @given(st.integers(0, 2**32 - 1))
    def test_bounded_on_sphere(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((30, 5))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        r = cluster_radius(x, rng.integers(0, 3, 30))
        assert np.all((r >= 0) & (r <= 2))


class TestDrift:
    def m(self, cents, classes=(0, 1)):
        return CentroidModel(np.array(classes), np.array(cents, dtype=float))

    def test_identical(self):
        a = self.m([[1, 0], [0, 1]])
        assert centroid_drift(a, a).tolist() == [0, 0]

    def test_moved(self):
        a, b = self.m([[1, 0], [0, 1]]), self.m([[0, 1], [0, 1]])
        assert centroid_drift(a, b)[0] == pytest.approx(np.sqrt(2), abs=1e-15)
        assert np.array_equal(centroid_drift(a, b), centroid_drift(b, a))

    def test_mismatched_tables(self):
        with pytest.raises(StructuralError):
            centroid_drift(self.m([[1, 0], [0, 1]]), self.m([[1, 0], [0, 1]], (0, 2)))


class TestScores:
    def test_diagonal(self):
        r = scores(np.diag([5, 7, 1]))
        assert r.f1.tolist() == [1, 1, 1] and r.accuracy == 1.0 and r.macro_f1 == 1.0
        assert r.confoundings == []

    def test_two_class_by_hand(self):
        r = scores([[40, 10], [20, 30]])
        # class 0: P = 40/60, R = 40/50; class 1: P = 30/40, R = 30/50
        f0 = 2 * (40 / 60) * (40 / 50) / (40 / 60 + 40 / 50)
        f1 = 2 * (30 / 40) * (30 / 50) / (30 / 40 + 30 / 50)
        assert r.f1[0] == pytest.approx(f0, rel=1e-14) and r.f1[0] == pytest.approx(0.7273, abs=5e-5)
        assert r.f1[1] == pytest.approx(f1, rel=1e-14) and r.f1[1] == pytest.approx(0.6667, abs=5e-5)
        assert r.macro_f1 == pytest.approx(0.6970, abs=5e-5)
        assert r.accuracy == 0.7

    def test_empty_class_scores_zero(self):
        r = scores([[3, 0], [0, 0]])
        assert r.f1.tolist() == [1.0, 0.0] and r.macro_f1 == 0.5

    @settings(max_examples=50)
    @given(arrays(np.int64, (4, 4), elements=st.integers(0, 30)).filter(lambda m: m.sum() > 0),
           st.permutations(range(4)))
    def test_permutation_equivariant(self, cm, perm):
        perm = np.array(perm)
        a = scores(cm)
        b = scores(cm[np.ix_(perm, perm)])
        np.testing.assert_allclose(b.f1, a.f1[perm], rtol=1e-12)
        assert b.macro_f1 == pytest.approx(a.macro_f1, rel=1e-12)
        assert b.accuracy == pytest.approx(a.accuracy, rel=1e-12)
        for v in (a.precision, a.recall, a.f1):
            assert np.all((v >= 0) & (v <= 1))

    def test_random_predictor_near_chance(self):
        rng = np.random.default_rng(0)
        c, n = 5, 20_000
        true = np.repeat(np.arange(c), n // c)
        r = scores(confusion_matrix(true, rng.integers(0, c, n), c))
        # each per-class F1 has sd around sqrt(p(1-p)/(n/c)) ~ 0.006
        assert abs(r.macro_f1 - 1 / c) < 5 * 0.006


class TestConfoundings:
    def test_rate_granularity(self):
        cm = np.array([[31, 19], [0, 50]])
        (t, p, rate), = top_confoundings(cm)
        assert (t, p) == (0, 1) and rate == 19 / 50 == 0.38

    def test_ranking_and_ties(self):
        cm = np.array([[8, 1, 1], [2, 8, 0], [0, 2, 8]])
        got = top_confoundings(cm)
        assert [(t, p) for t, p, _ in got] == [(1, 0), (2, 1), (0, 1), (0, 2)]
        assert top_confoundings(cm, 2) == got[:2]

    def test_row_rates_sum_to_one(self):
        rng = np.random.default_rng(2)
        cm = rng.integers(0, 20, (6, 6))
        conf = top_confoundings(cm, 100)
        for t in range(6):
            s = sum(r for tt, _, r in conf if tt == t) + cm[t, t] / cm[t].sum()
            assert abs(s - 1) < 1e-12

    def test_tsv_format(self):
        r = scores([[31, 19], [0, 50]], ["copepod", "detritus"])
        text = r.to_tsv()
        assert text.endswith("\n") and "\r" not in text
        sections = [line for line in text.split("\n") if line.startswith("#")]
        assert sections == ["#confusion", "#per_class", "#summary", "#confoundings"]
        tail = text.split("#confoundings\n")[1].split("\n")
        assert tail[0] == "true\tpredicted\trate"
        assert tail[1] == "copepod\tdetritus\t0.380"


def test_fmt_roundtrips():
    for x in (0.1, 1 / 3, 1e-300, 0.0, 12345.678):
        assert float(fmt(x)) == x
    assert fmt(0.5) == "0.5"
