import math

import numpy as np
import pytest
import torch
from scipy import stats

from conftest import perturb
from setflow.autodiff import ContractError
from setflow.dynamics import DynamicsConfig, EquivariantDynamics
from setflow.flow import BOUND_EPS, Domain, DomainError, FlowModel, SolverConfig
from setflow.ihp import build_ihp
from setflow.point_process import RATE_FLOOR, PointProcessModel, as_batch, softplus_inverse

LOG_N0 = -0.9189385332046727
RK4 = SolverConfig("rk4", steps=10)


def identity(d=1, domain=None, base="normal", rate=1.0):
    return PointProcessModel(FlowModel(d, domain=domain, base=base, solver=RK4), rate=rate)


def cnf(seed=0, domain=Domain.unit(2)):
    dyn = perturb(EquivariantDynamics(DynamicsConfig(hidden_dim=16, between_dim=8), seed=seed), seed=seed)
    return PointProcessModel(FlowModel(2, [dyn], domain=domain, solver=RK4), rate=5.0)


def test_softplus_rate():
    m = identity(rate=3.5)
    assert abs(float(m.rate) - 3.5) < 1e-12
    assert not m.rate_preactivation.requires_grad


def test_empty_set_likelihood():
    assert abs(float(identity(rate=1.0).log_likelihood(np.zeros((0, 1)))) + 1.0) < 1e-12


def test_likelihood_arithmetic(monkeypatch):
    m = identity(rate=2.0)
    monkeypatch.setattr(m, "log_density_set", lambda X, **kw: torch.tensor(math.log(0.25), dtype=torch.float64))
    p = math.exp(float(m.log_likelihood(np.zeros((2, 1)))))
    assert abs(p - 0.1353352832) < 1e-10


def test_likelihood_rejects_points_outside_domain():
    with pytest.raises(DomainError):
        identity(d=2, domain=Domain.unit(2)).log_likelihood([[0.5, 1.5]])


def test_uniform_equivalent_identity_density():
    m = identity(d=2, domain=Domain.unit(2), base="logistic")
    X = np.array([[0.2, 0.7], [0.9, 0.1], [0.5, 0.5]])
    expected = 3 * 2 * math.log(1 - 2 * BOUND_EPS)
    assert abs(float(m.log_density_set(X)) - expected) < 1e-12


@pytest.mark.parametrize("base", ["normal", "logistic"])
def test_identity_flow_integrates_to_one_on_square(base):
    m = identity(d=2, domain=Domain.unit(2), base=base)
    g = np.linspace(1e-9, 1 - 1e-9, 401)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    lp = m.single_point_log_density(np.stack([gx.ravel(), gy.ravel()], 1)).numpy().reshape(401, 401)
    mass = np.trapezoid(np.trapezoid(np.exp(lp), g, axis=1), g)
    assert abs(mass - 1.0) < 1e-3


def test_per_point_nll_identity():
    m = identity()
    x, mask = as_batch([[[0.0], [0.0]]], 1)
    assert abs(float(m.per_point_nll(x, mask)[0]) - 0.9189385332) < 1e-10
    with_card = float(m.per_point_nll(x, mask, include_cardinality=True)[0])
    assert abs(with_card - (0.9189385332 - (2 * math.log(1.0) - 1.0) / 2)) < 1e-10


def test_per_point_nll_rejects_empty():
    x, mask = as_batch([np.zeros((0, 1))], 1)
    with pytest.raises(ContractError):
        identity().per_point_nll(x, mask)


def test_per_point_nll_permutation_invariant():
    m = cnf()
    rng = np.random.default_rng(0)
    X = rng.uniform(0.1, 0.9, size=(6, 2))
    with torch.no_grad():
        a = m.per_point_nll(*as_batch([X], 2))
        b = m.per_point_nll(*as_batch([X[::-1]], 2))
    assert torch.equal(a, b)


def test_cardinality_consistency_1d():
    lam = 0.5
    m = identity(rate=lam)
    g = np.linspace(-8, 8, 801)
    total = math.exp(float(m.log_likelihood(np.zeros((0, 1)))))
    p1 = np.array([math.exp(float(m.log_likelihood([[v]]))) for v in g])
    total += np.trapezoid(p1, g)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    pts = torch.as_tensor(np.stack([gx.ravel(), gy.ravel()], 1)).reshape(-1, 2, 1)
    with torch.no_grad():
        lp2 = m.log_density(pts, torch.ones(pts.shape[:2], dtype=torch.bool)) + m.cardinality_log_prob(2)
    p2 = np.exp(lp2.numpy()).reshape(len(g), len(g))
    total += np.trapezoid(np.trapezoid(p2, g, axis=1), g) / 2.0
    tail = stats.poisson.sf(2, lam)
    assert abs(total + tail - 1.0) < 1e-6


# -- conditional diagnostics --------------------------------------------------------


def test_iid_conditional_is_independent_of_condition():
    m = build_ihp(domain=Domain.unit(2))
    perturb(m.flow.couplings, seed=3)
    G = np.array([[0.2, 0.2], [0.6, 0.8]])
    a = m.conditional_log_density([[0.5, 0.5]], G)
    b = m.conditional_log_density(np.random.default_rng(0).uniform(size=(9, 2)), G)
    assert torch.equal(a, b)
    assert torch.equal(a, m.single_point_log_density(G))


def test_identity_cnf_conditional_matches_single_point():
    m = PointProcessModel(FlowModel(2, [EquivariantDynamics(DynamicsConfig(), seed=0)], domain=Domain.unit(2),
                                    solver=RK4))
    G = np.array([[0.2, 0.2], [0.6, 0.8]])
    a = m.conditional_log_density([[0.5, 0.5], [0.1, 0.3]], G)
    assert torch.allclose(a, m.single_point_log_density(G), rtol=0, atol=1e-12)


def test_duplicate_queries_equal_scores():
    m = cnf(seed=2)
    s = m.conditional_log_density([[0.4, 0.4], [0.45, 0.5]], [[0.3, 0.6], [0.3, 0.6]])
    assert s[0] == s[1]


def test_conditional_rejects_bad_queries():
    m = cnf()
    with pytest.raises(DomainError):
        m.conditional_log_density([[0.4, 0.4]], [[1.0, 0.5]])
    with pytest.raises(ContractError):
        m.conditional_log_density(np.zeros((0, 2)), [[0.5, 0.5]])


def test_intensity_uniform_equivalent():
    m = identity(d=2, domain=Domain.unit(2), base="logistic", rate=10.0)
    lam = m.intensity(np.random.default_rng(0).uniform(0.01, 0.99, size=(20, 2)))
    assert torch.allclose(lam, torch.full((20,), 10.0, dtype=torch.float64), rtol=1e-4)


def test_intensity_integrates_to_rate_and_scales():
    m = identity(d=2, domain=Domain.unit(2), rate=4.0)
    g = np.linspace(1e-9, 1 - 1e-9, 301)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    G = np.stack([gx.ravel(), gy.ravel()], 1)
    lam = m.intensity(G).numpy().reshape(301, 301)
    assert abs(np.trapezoid(np.trapezoid(lam, g, axis=1), g) - 4.0) < 1e-2
    with torch.no_grad():
        m.rate_preactivation.fill_(softplus_inverse(8.0))
    assert np.allclose(m.intensity(G).numpy().reshape(301, 301), 2 * lam, rtol=1e-12)


# -- rate -------------------------------------------------------------------------


def test_fit_rate_mean_cardinality():
    m = identity()
    assert m.fit_rate([np.zeros((k, 1)) for k in (3, 5, 7)]) == 5.0
    assert abs(float(m.rate) - 5.0) < 1e-12


def test_fit_rate_all_empty_uses_floor():
    m = identity()
    assert m.fit_rate([np.zeros((0, 1))] * 3) == 0.0
    assert abs(float(m.rate) - RATE_FLOOR) < 1e-15
    assert float(m.rate_preactivation) == softplus_inverse(RATE_FLOOR)


def test_fit_rate_monte_carlo():
    counts = np.random.default_rng(0).poisson(15, size=10_000)
    lam = identity().fit_rate([np.zeros((k, 1)) for k in counts])
    assert abs(lam - 15) < 0.5


def test_fit_rate_rejects_empty_dataset():
    with pytest.raises(ContractError):
        identity().fit_rate([])


# -- sampling ---------------------------------------------------------------------


def test_sample_fixed_and_poisson_sizes():
    m = cnf()
    fixed = m.sample(n=5, count=3, generator=torch.Generator().manual_seed(0))
    assert [s.shape for s in fixed] == [(5, 2)] * 3
    assert all(((s > 0) & (s < 1)).all() for s in fixed)
    drawn = m.sample(count=40, generator=torch.Generator().manual_seed(0), np_rng=np.random.default_rng(1))
    sizes = [len(s) for s in drawn]
    assert sizes == list(np.random.default_rng(1).poisson(5.0, size=40))
    with pytest.raises(ContractError):
        m.sample(n=0)
