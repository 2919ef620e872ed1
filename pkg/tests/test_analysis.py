import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logitcorrect import analysis, defender, nn
from logitcorrect.defender import DefenderConfig, LogitsRecord
from oracles import numeric_jacobian, rel_error


def recs_from(z_adv, labels):
    z_adv = np.asarray(z_adv, np.float32)
    return [LogitsRecord(z_adv[i], z_adv[i], int(labels[i]), "pgd", i) for i in range(len(labels))]


def test_identity_jacobian_is_exact():
    H = analysis.defender_jacobian(defender.identity_defender(7), np.arange(7.0))
    assert np.array_equal(H, np.eye(7))


def test_dense_jacobian_is_weight():
    g = nn.build_network("dense(4,4)", 4, seed=3, input_shape=(4,))
    H = analysis.defender_jacobian(g, np.ones(4))
    assert np.array_equal(H, g.layers[0].weight.astype(np.float64))


def test_trained_defender_jacobian_matches_finite_differences():
    g = nn.build_network(defender.defender_arch(6, DefenderConfig(hidden=20)), 6, seed=1, input_shape=(6,))
    z = np.random.default_rng(0).normal(size=6).astype(np.float32)
    H = analysis.defender_jacobian(g, z)
    assert rel_error(H, numeric_jacobian(g, z)).max() < 1e-3


def test_batched_jacobian_matches_single():
    g = nn.build_network(defender.defender_arch(5, DefenderConfig(hidden=9)), 5, seed=2, input_shape=(5,))
    z = np.random.default_rng(1).normal(size=(3, 5)).astype(np.float32)
    Hb = analysis.defender_jacobian(g, z)
    for i in range(3):
        assert np.array_equal(Hb[i], analysis.defender_jacobian(g, z[i]))


def test_support_scores_of_identity():
    S = analysis.support_scores(np.eye(4), 0)
    assert np.allclose(S, [0.75, -0.25, -0.25, -0.25])


def test_support_scores_identical_rows_vanish():
    H = np.tile([1.0, -2.0, 0.5], (3, 1))
    assert not analysis.support_scores(H, 1).any()


def test_support_scores_hand_matrix():
    H = np.array([[1.0, 2.0, 0.0], [4.0, -1.0, 3.0], [1.0, 2.0, 6.0]])
    # column means: [2, 1, 3]; row 1 minus means: [2, -2, 0]
    assert np.allclose(analysis.support_scores(H, 1), [2.0, -2.0, 0.0])


def test_top_n_ties_go_to_lower_index():
    assert analysis.top_n(np.array([1.0, 3.0, 3.0, 2.0, 3.0]), 3).tolist() == [1, 2, 4]


def test_single_record_all_classes():
    rep = analysis.supporting_classes(defender.identity_defender(4), recs_from([[1, 2, 3, 4]], [2]), 4)
    assert rep.counts.tolist() == [1, 1, 1, 1]
    assert np.allclose(rep.distribution(), 0.25)


def test_identical_records_double_counts():
    g = nn.build_network("dense(4,4)", 4, seed=0, input_shape=(4,))
    one = analysis.supporting_classes(g, recs_from([[0, 1, 0, 0]], [1]), 2)
    two = analysis.supporting_classes(g, recs_from([[0, 1, 0, 0]] * 2, [1, 1]), 2)
    assert np.array_equal(two.counts, 2 * one.counts)


def test_h_ranking_uses_jacobian_row():
    g = defender.identity_defender(3)
    rep = analysis.supporting_classes(g, recs_from([[0, 0, 0]], [2]), 1, ranking="h")
    assert rep.top_classes.tolist() == [[2]]
    with pytest.raises(ValueError):
        analysis.supporting_classes(g, recs_from([[0, 0, 0]], [2]), 1, ranking="x")


def test_bhattacharyya_cases():
    assert analysis.bhattacharyya([0.5, 0.5, 0], [0.25, 0.25, 0.5]) == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert analysis.bhattacharyya([1, 0], [0, 1]) == 0.0
    with pytest.raises(ValueError):
        analysis.bhattacharyya([0.5, 0.6], [0.5, 0.5])


dists = st.lists(st.floats(0, 10), min_size=2, max_size=12).filter(lambda v: sum(v) > 1e-3)


@settings(max_examples=100)
@given(dists, st.data())
def test_bhattacharyya_properties(p, data):
    q = data.draw(st.lists(st.floats(0, 10), min_size=len(p), max_size=len(p)).filter(lambda v: sum(v) > 1e-3))
    p = np.array(p) / sum(p)
    q = np.array(q) / sum(q)
    b = analysis.bhattacharyya(p, q)
    assert 0.0 <= b <= 1.0
    assert b == analysis.bhattacharyya(q, p)
    assert abs(analysis.bhattacharyya(p, p) - 1.0) < 1e-9
    if np.abs(np.sqrt(p) - np.sqrt(q)).max() > 1e-3:
        assert b < 1.0


def _report(counts):
    counts = np.asarray(counts)
    return analysis.SupportReport(np.zeros(1, int), np.zeros((1, 1), int), np.zeros((1, 1)),
                                  counts, analysis.top_n(counts, 1))


def test_transfer_prediction_report():
    names, m = analysis.transfer_prediction_report({"a": _report([1, 2, 3]), "b": _report([1, 2, 3])})
    assert names == ["a", "b"] and np.allclose(m, 1.0)
    names, m = analysis.transfer_prediction_report(
        {"a": _report([1, 0, 3]), "b": _report([2, 2, 0]), "c": _report([0, 1, 1])})
    assert np.array_equal(m, m.T) and np.all(np.diag(m) == 1)


def test_knockout_zero_delta_is_noop():
    g = nn.build_network("dense(4,8) relu dense(8,4)", 4, seed=0, input_shape=(4,))
    recs = recs_from(np.random.default_rng(0).normal(size=(20, 4)), np.arange(20) % 4)
    k = analysis.knockout_test(g, recs, [1, 2], 0.0)
    assert k["before"] == k["after"]


def test_knockout_of_unused_classes_is_harmless():
    # class 3 is never a top-1 supporting class of the identity; lowering it cannot
    # hurt records whose label is elsewhere
    recs = recs_from(np.eye(4)[[0, 1, 2, 0]] * 5, [0, 1, 2, 0])
    k = analysis.knockout_test(defender.identity_defender(4), recs, [3], 20.0)
    assert k["after"].value >= 0 and k["after"] == k["before"]


def test_knockout_subtracts_delta():
    z = analysis.knockout(np.zeros((2, 3)), [0, 2], 20)
    assert z.tolist() == [[-20, 0, -20]] * 2


def test_histogram_identical_populations():
    z = np.random.default_rng(0).normal(size=(50, 10))
    h = analysis.logits_mean_histogram(z, z)
    assert len(h["edges"]) == 21
    assert np.array_equal(h["clean_counts"], h["adv_counts"]) and h["clean_counts"].sum() == 50


def test_histogram_shift_by_one():
    z = np.random.default_rng(1).normal(size=(40, 10))
    h = analysis.logits_mean_histogram(z, z + 1.0, bins=20)
    assert h["adv_mean"] - h["clean_mean"] == pytest.approx(1.0, abs=1e-12)
    assert h["clean_counts"].sum() == 40 and h["adv_counts"].sum() == 40
