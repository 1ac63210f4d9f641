import csv
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from conftest import perturb
from setflow.autodiff import ContractError
from setflow.dynamics import DynamicsConfig, EquivariantDynamics
from setflow.flow import Domain, FlowModel, SolverConfig
from setflow.metrics import (DegenerateSetWarning, METRIC_COLUMNS, nll_report, pairwise_distances,
                             pooled_wasserstein, ripley_k, wasserstein1, write_metrics)
from setflow.point_process import PointProcessModel

finite = st.floats(-10, 10, allow_nan=False)


def test_pairwise_examples():
    assert pairwise_distances([[0, 0], [3, 4]]).tolist() == [5.0]
    assert pairwise_distances([[0, 0], [1, 0], [2, 0]]).tolist() == [1.0, 1.0, 2.0]


def test_pairwise_degenerate_warns():
    with pytest.warns(DegenerateSetWarning):
        assert pairwise_distances([[0.5, 0.5]]).size == 0


def test_pairwise_brute_force():
    X = np.random.default_rng(0).uniform(size=(15, 2))
    brute = sorted(float(np.sqrt(((a - b) ** 2).sum())) for a, b in itertools.combinations(X, 2))
    assert np.array_equal(pairwise_distances(X), np.array(brute))


def test_wasserstein_examples():
    assert wasserstein1([0.3, 0.1, 0.9], [0.9, 0.3, 0.1]) == 0.0
    assert wasserstein1([0, 1], [1, 2]) == 1.0
    with pytest.raises(ContractError):
        wasserstein1([], [1.0])


def lp_transport(a, b):
    n = len(a)
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    rows = np.zeros((2 * n, n * n))
    for i in range(n):
        rows[i, i * n:(i + 1) * n] = 1
        rows[n + i, i::n] = 1
    res = linprog(cost, A_eq=rows, b_eq=np.full(2 * n, 1.0 / n), bounds=(0, None), method="highs")
    return res.fun


def test_wasserstein_matches_linear_program():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=20), rng.normal(1.0, 2.0, size=20)
    assert abs(wasserstein1(a, b) - lp_transport(a, b)) < 1e-12


def test_wasserstein_subsamples_larger_side_deterministically():
    a = np.linspace(0, 1, 100)
    b = np.linspace(0, 1, 10)
    assert wasserstein1(a, b, seed=4) == wasserstein1(a, b, seed=4)
    assert wasserstein1(a, b, seed=4) == wasserstein1(b, a, seed=4)


@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=30))
def test_wasserstein_metric_properties(rows):
    a, b, c = (np.array(v) for v in zip(*rows))
    assert wasserstein1(a, b) == wasserstein1(b, a)
    assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-12


def test_ripley_examples():
    assert ripley_k([np.array([[0.0, 0.0], [0.5, 0.0]])], r=1.0, area=1.0) == 1.0
    assert ripley_k([np.array([[0.0, 0.0], [0.5, 0.0]])], r=0.1) == 0.0
    with pytest.raises(ContractError):
        ripley_k([np.zeros((1, 2))], r=0.1)
    with pytest.raises(ContractError):
        ripley_k([np.zeros((3, 2))], r=0.0)


def test_ripley_poisson_sets():
    rng = np.random.default_rng(0)
    vals = []
    for _ in range(10_000):
        n = max(2, rng.poisson(30))
        vals.append(ripley_k([rng.uniform(size=(n, 2))], 0.1))
    mean = np.mean(vals)
    se = np.std(vals) / np.sqrt(len(vals))
    # uncorrected estimator: expectation is P(|U - V| <= r) for two uniform points in the square
    r = 0.1
    clipped = np.pi * r ** 2 - (8 / 3) * r ** 3 + 0.5 * r ** 4
    assert abs(mean - clipped) < 3 * se
    assert abs(mean - np.pi * r ** 2) < 0.005


@given(st.integers(0, 1000))
def test_ripley_permutation_and_translation(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.2, 0.6, size=(12, 2))
    k = ripley_k([X], 0.1)
    assert ripley_k([X[rng.permutation(12)]], 0.1) == k
    shifted = ripley_k([X + 0.25], 0.1)
    assert abs(shifted - k) < 1e-12


def test_pooled_wasserstein_order_invariant():
    rng = np.random.default_rng(1)
    data = [rng.uniform(size=(k, 2)) for k in (5, 9, 3)]
    model = [rng.uniform(size=(k, 2)) for k in (5, 9, 3)]
    w = pooled_wasserstein(data, model)
    assert w == pooled_wasserstein([s[::-1] for s in data], model)


def _model(seed=None):
    dyns = []
    if seed is not None:
        dyns = [perturb(EquivariantDynamics(DynamicsConfig(hidden_dim=8, between_dim=4), seed=seed), seed=seed)]
    return PointProcessModel(FlowModel(2, dyns, domain=Domain.unit(2), solver=SolverConfig("rk4", steps=8)))


def test_nll_report_single_and_identity():
    m = PointProcessModel(FlowModel(1))
    rep = nll_report(m, [np.array([[0.0], [0.0]])])
    assert rep["std"] == 0.0 and abs(rep["mean"] - 0.9189385332046727) < 1e-12
    rep = nll_report(m, [np.array([[0.0]]), np.array([[1.0]])])
    assert abs(rep["mean"] - (0.9189385332046727 + 0.25)) < 1e-12
    assert abs(rep["std"] - 0.25) < 1e-12


def test_nll_report_closed_form_equals_dense():
    m = _model(seed=3)
    rng = np.random.default_rng(2)
    split = [rng.uniform(0.05, 0.95, size=(k, 2)) for k in (3, 5, 2, 4)]
    a = nll_report(m, split)
    b = nll_report(m, split, trace_mode="exact-dense")
    assert abs(a["mean"] - b["mean"]) < 1e-6
    assert nll_report(m, split) == a


def test_write_metrics(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics([{"dataset": "thomas", "model": "ihp", "metric": "nll", "value": 1 / 3, "std": 0.0,
                    "seed": 0}], path)
    rows = list(csv.DictReader(open(path)))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert float(rows[0]["value"]) == 1 / 3
