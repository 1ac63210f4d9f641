"""Finite point-process likelihood: Poisson cardinality times a symmetric location density.

    p(X) = n! p(n) p~(x_1..x_n),   n! Poisson(n; lam) = lam^n e^{-lam}
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import DTYPE, ContractError
from .flow import Domain, DomainError, FlowModel

RATE_FLOOR = 1e-6


def softplus_inverse(y: float) -> float:
    y = max(float(y), RATE_FLOOR)
    return y + math.log(-math.expm1(-y))


def as_batch(sets, point_dim):
    """List of [n_i, d] arrays -> (points [B, n_max, d], mask [B, n_max])."""
    arrays = [np.asarray(s, dtype=np.float64).reshape(-1, point_dim) for s in sets]
    n_max = max([len(a) for a in arrays] + [1])
    pts = np.zeros((len(arrays), n_max, point_dim))
    mask = np.zeros((len(arrays), n_max), dtype=bool)
    for b, a in enumerate(arrays):
        pts[b, :len(a)] = a
        mask[b, :len(a)] = True
    return torch.from_numpy(pts), torch.from_numpy(mask)


class PointProcessModel(nn.Module):
    """Wraps a location density with a learnable Poisson rate ``softplus(theta)``.

    The rate is not trained by the default loss (which ignores cardinality);
    ``fit_rate`` sets it to the Poisson maximum-likelihood estimate.
    """

    def __init__(self, flow: FlowModel, rate: float = 1.0):
        super().__init__()
        self.flow = flow
        self.rate_preactivation = nn.Parameter(torch.tensor(softplus_inverse(rate), dtype=DTYPE),
                                               requires_grad=False)

    @property
    def point_dim(self):
        return self.flow.point_dim

    @property
    def domain(self) -> Domain | None:
        return self.flow.domain

    @property
    def rate(self) -> torch.Tensor:
        return F.softplus(self.rate_preactivation)

    def fit_rate(self, sets) -> float:
        if len(sets) == 0:
            raise ContractError("fit_rate needs at least one realization")
        lam = float(np.mean([len(s) for s in sets]))
        with torch.no_grad():
            self.rate_preactivation.fill_(softplus_inverse(lam))
        return lam

    # -- densities ---------------------------------------------------------

    def log_density(self, points, mask, **kw):
        """log p~ per set of a padded batch."""
        return self.flow.log_density(points, mask, **kw)

    def log_density_set(self, X, **kw):
        X = torch.as_tensor(np.asarray(X, dtype=np.float64)).reshape(-1, self.point_dim)
        if X.shape[0] == 0:
            return torch.zeros((), dtype=DTYPE)
        mask = torch.ones(1, X.shape[0], dtype=torch.bool)
        return self.flow.log_density(X.unsqueeze(0), mask, **kw)[0]

    def cardinality_log_prob(self, n):
        """log(n! Poisson(n; lam)) = n log lam - lam."""
        lam = self.rate
        n = torch.as_tensor(n, dtype=DTYPE)
        return n * torch.log(lam) - lam

    def log_likelihood(self, X, **kw):
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.point_dim)
        return self.cardinality_log_prob(X.shape[0]) + self.log_density_set(X, **kw)

    def per_point_nll(self, points, mask, include_cardinality=False, **kw):
        """-log p~(X) / n per set (optionally with the cardinality term)."""
        n = mask.sum(dim=1).to(DTYPE)
        if bool((n == 0).any()):
            raise ContractError("per-point NLL is undefined for empty sets")
        logp = self.log_density(points, mask, **kw)
        if include_cardinality:
            logp = logp + self.cardinality_log_prob(n)
        return -logp / n

    # -- conditional diagnostics ------------------------------------------

    def _check_queries(self, G):
        G = torch.as_tensor(np.asarray(G, dtype=np.float64)).reshape(-1, self.point_dim)
        if self.domain is not None and not bool(self.domain.contains(G).all()):
            raise DomainError("query outside the domain")
        return G

    @torch.no_grad()
    def conditional_log_density(self, X, G, chunk=512, **kw):
        """log p~(X u {g}) - log p~(X) for each query g (unnormalized score)."""
        X = torch.as_tensor(np.asarray(X, dtype=np.float64)).reshape(-1, self.point_dim)
        if X.shape[0] == 0:
            raise ContractError("conditioning set must be nonempty")
        G = self._check_queries(G)
        if self.domain is not None and not bool(self.domain.contains(X).all()):
            raise DomainError("conditioning point outside the domain")
        if len(self.flow.blocks) == 0:
            # product-form density: the conditional is the single-point density
            return self.single_point_log_density(G, **kw)
        base = self.log_density_set(X, **kw)
        out = []
        for start in range(0, G.shape[0], chunk):
            g = G[start:start + chunk]
            pts = torch.cat([X.unsqueeze(0).expand(g.shape[0], -1, -1), g.unsqueeze(1)], dim=1)
            mask = torch.ones(pts.shape[:2], dtype=torch.bool)
            out.append(self.log_density(pts, mask, **kw) - base)
        return torch.cat(out) if out else torch.zeros(0, dtype=DTYPE)

    @torch.no_grad()
    def single_point_log_density(self, G, chunk=4096, **kw):
        G = self._check_queries(G)
        out = []
        for start in range(0, G.shape[0], chunk):
            g = G[start:start + chunk].unsqueeze(1)
            out.append(self.log_density(g, torch.ones(g.shape[:2], dtype=torch.bool), **kw))
        return torch.cat(out) if out else torch.zeros(0, dtype=DTYPE)

    def intensity(self, G, X=None, **kw):
        """Expected points per unit volume: lam * exp(conditional or single-point log-density)."""
        if X is None or len(X) == 0:
            logp = self.single_point_log_density(G, **kw)
        else:
            logp = self.conditional_log_density(X, G, **kw)
        return self.rate.detach() * torch.exp(logp)

    @torch.no_grad()
    def sample(self, n=None, count=1, generator=None, solver=None, np_rng=None):
        """Draw ``count`` sets; fixed size ``n`` or n ~ Poisson(lam) (empty draws allowed).

        Returns a list of [n_i, d] numpy arrays.
        """
        if n is not None:
            if n < 1:
                raise ContractError("n must be positive")
            lengths = [int(n)] * count
        else:
            rng = np_rng if np_rng is not None else np.random.default_rng()
            lengths = [int(k) for k in rng.poisson(float(self.rate), size=count)]
        nonempty = [k for k in lengths if k > 0]
        drawn = []
        if nonempty:
            pts, mask = self.flow.sample(nonempty, solver=solver, generator=generator)
            drawn = [pts[b, :k].numpy().copy() for b, k in enumerate(nonempty)]
        it = iter(drawn)
        return [next(it) if k > 0 else np.zeros((0, self.point_dim)) for k in lengths]
