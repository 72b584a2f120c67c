import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diopt.errors import DomainError
from diopt.evaluation import (WeightMode, aggregate_seeds, metrics, modified_weights, rank_key,
                              select_batch, select_index, select_solution, theorem1_mc, weight,
                              weights, write_results_csv)
from diopt.problems import Kind, ProblemFamily, objective


def box(n=2, kind=Kind.QP):
    # G = I, h = 0: violation of y is max(y, 0) elementwise
    return ProblemFamily(kind, n, 0, n, np.ones(n), np.zeros(n), np.zeros((0, n)), np.eye(n),
                         np.zeros(n))


def test_weight_examples():
    F = box()
    y = np.array([-1.0, -2.0])
    assert weight(F, None, y, objective(F, y)) == 1.0
    assert math.isclose(weight(F, None, np.array([0.5, 0.2]), 0.0), -0.7)
    assert weight(F, None, y, 0.0, WeightMode.VIOLATION_ONLY) == 0.0
    # the eps threshold decides feasibility, not strict sign
    assert weight(F, None, np.array([0.005, -1.0]), 0.0) > 0


def test_modified_weight_examples():
    assert np.allclose(modified_weights([1.0, 0.2, -0.7]), [0.8333333, 0.0333333, 0.0], atol=1e-6)
    w = np.array([0.3, 2.0, 0.0])
    assert np.array_equal(modified_weights(w), w)
    assert np.array_equal(modified_weights([-0.4, -0.4, -0.4]), np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40))
def test_modified_weight_properties(w):
    m = modified_weights(np.array(w))
    assert np.all(m >= 0)
    # the mean-shift branch only runs when some weight is negative
    if min(w) < 0 and m.sum() > 0:
        assert np.any(np.array(w) > np.mean(w))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(-5, 5), st.floats(0.1, 3))
def test_feasible_dominance(seed, fstar, beta):
    rng = np.random.default_rng(seed)
    F = box(3)
    Y = rng.normal(0, 1, (30, 3))
    w = weights(F, Y, fstar, beta_w=beta)
    feas = np.all(Y <= 0.01, axis=1)
    if feas.any() and (~feas).any():
        assert w[feas].min() > w[~feas].max()


def test_rank_key_agrees_with_full_weight():
    rng = np.random.default_rng(0)
    F = box(3)
    Y = rng.normal(0, 1, (200, 3))
    feas, score = rank_key(F, Y)
    w = weights(F, Y, 0.3)
    order_w = np.argsort(-w, kind="stable")
    order_k = np.lexsort((score, feas))[::-1]
    assert np.array_equal(w[order_w], w[order_k])


def test_select_examples():
    F = box()
    Y = np.array([[0.5, 0.5], [0.1, -1.0], [3.0, -4.0]])
    assert select_index(F, np.vstack([Y, [[-1.0, -3.0]]])) == 3
    assert select_index(F, Y) == 1
    G = ProblemFamily(Kind.QP, 1, 0, 1, np.zeros(1), np.ones(1), np.zeros((0, 1)), np.eye(1),
                      np.full(1, 10.0))
    assert np.array_equal(select_solution(G, None, np.array([[2.0], [1.0]])), [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_select_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    F = box(2)
    Y = rng.normal(0, 1, (12, 2))
    perm = rng.permutation(12)
    assert np.array_equal(select_solution(F, None, Y), select_solution(F, None, Y[perm]))


def test_select_batch_matches_rows():
    rng = np.random.default_rng(1)
    F = box(2)
    C = rng.normal(size=(5, 7, 2))
    S = select_batch(F, C)
    for i in range(5):
        assert np.array_equal(S[i], select_solution(F, None, C[i]))


def test_metrics_exact_labels(small_qp_dataset):
    ds = small_qp_dataset
    m = metrics(ds.family, ds.X, ds.Y, ds.F)
    assert np.allclose(m.gap, 0.0)
    s = m.summary
    assert s["Ineq Num Viol"][0] == 0 and s["Ineq Max"][0] < 1e-6 and s["Feasibility%"][0] == 100.0


def test_metrics_threshold_semantics():
    F = box(4)
    y = np.array([[0.005, -1.0, -1.0, -1.0]])
    m = metrics(F, np.zeros((1, 0)), y)
    assert m.ineq_num_viol[0] == 0
    assert math.isclose(m.ineq_mean[0], 0.005 / 4)
    assert m.feasible[0]


def test_metrics_half_feasible():
    F = box(2)
    m = metrics(F, np.zeros((2, 0)), np.array([[-1.0, -1.0], [1.0, -1.0]]))
    assert m.summary["Feasibility%"][0] == 50.0


def test_metrics_order_invariant(small_qp_dataset):
    ds = small_qp_dataset
    rng = np.random.default_rng(2)
    Y = ds.Y + rng.normal(0, 0.3, ds.Y.shape)
    perm = rng.permutation(len(Y))
    a = metrics(ds.family, ds.X, Y, ds.F).summary
    b = metrics(ds.family, ds.X[perm], Y[perm], ds.F[perm]).summary
    for k in a:
        assert np.allclose(a[k], b[k], equal_nan=True)


def test_gap_absolute_fallback():
    F = box(1)
    m = metrics(F, np.zeros((2, 0)), np.array([[-1.0], [-2.0]]), np.array([0.0, 1.0]))
    assert m.gap_absolute.tolist() == [True, False]
    assert m.gap[0] == 0.5 and m.gap[1] == 100.0


def test_aggregate_and_csv(tmp_path, small_qp_dataset):
    ds = small_qp_dataset
    recs = [metrics(ds.family, ds.X, ds.Y + s * 0.01, ds.F) for s in range(3)]
    agg = aggregate_seeds(recs)
    objs = [r.summary["Objective"][0] for r in recs]
    assert np.isclose(agg["Objective"][0], np.mean(objs)) and np.isclose(agg["Objective"][1], np.std(objs))
    p = tmp_path / "r.csv"
    write_results_csv(p, [({"method": "x", "seed": "all"}, agg)])
    rows = list(csv.DictReader(open(p)))
    assert rows[0]["method"] == "x"
    assert float(rows[0]["Objective mean"]) == agg["Objective"][0]
    assert "±" in rows[0]["Objective"]


def test_theorem1_d1():
    e = theorem1_mc(1, n_points=200000, seed=3)
    assert abs(e.estimate - 0.5) <= 3 * e.stderr


def test_theorem1_d6():
    e = theorem1_mc(6, n_points=10**6, seed=3)
    assert abs(e.estimate - 1 / 64) <= 3 * e.stderr


def test_theorem1_inactive_planes_do_not_matter():
    e = theorem1_mc(3, n_planes=10, n_points=200000, seed=1)
    assert abs(e.z_score) <= 4


def test_theorem1_domain():
    with pytest.raises(DomainError):
        theorem1_mc(0)
    with pytest.raises(DomainError):
        theorem1_mc(3, n_planes=2)
