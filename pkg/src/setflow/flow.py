"""Continuous normalizing flow over padded batches of sets.

Direction convention: the density pass integrates the states from t=0 (data)
to t=1 (base) and accumulates the divergence integral, so

    log p(x) = log q(z(1)) + int_0^1 Tr(df/dz(t)) dt.

The sample pass integrates from t=1 back to t=0.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
import torch.utils.checkpoint
from torch import nn

from .autodiff import DTYPE, ContractError, EvaluationError
from .dynamics import EquivariantDynamics, TraceMode, rademacher, set_sum

DENSITY = "density"
SAMPLE = "sample"

LOG_2PI = math.log(2 * math.pi)
BOUND_EPS = 1e-5
CHECKPOINT_SLOTS = 2048


class DomainError(ValueError):
    """A point lies on or outside the modelled box."""


class SolverError(RuntimeError):
    """Adaptive solver exceeded its evaluation budget."""


@dataclass
class SolverConfig:
    scheme: str = "rk4"  # "rk4" | "dopri5"
    steps: int = 20
    rtol: float = 1e-5
    atol: float = 1e-5
    max_evals: int = 10000

    def __post_init__(self):
        if self.scheme not in ("rk4", "dopri5"):
            raise ContractError(f"unknown solver scheme {self.scheme!r}")
        if self.steps < 1 or self.rtol <= 0 or self.atol <= 0 or self.max_evals < 1:
            raise ContractError("solver settings must be positive")

    def to_dict(self):
        return asdict(self)


TRAIN_SOLVER = SolverConfig("rk4", steps=20)
EVAL_SOLVER = SolverConfig("dopri5", rtol=1e-5, atol=1e-5, max_evals=10000)


@dataclass
class Domain:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        self.lower = tuple(float(v) for v in self.lower)
        self.upper = tuple(float(v) for v in self.upper)
        if len(self.lower) != len(self.upper) or any(a >= b for a, b in zip(self.lower, self.upper)):
            raise ContractError("domain needs lower < upper in every dimension")

    @classmethod
    def unit(cls, d=2):
        return cls((0.0,) * d, (1.0,) * d)

    @property
    def dim(self):
        return len(self.lower)

    @property
    def volume(self):
        return math.prod(b - a for a, b in zip(self.lower, self.upper))

    def to_dict(self):
        return {"lower": list(self.lower), "upper": list(self.upper)}

    def contains(self, points: torch.Tensor) -> torch.Tensor:
        lo = torch.tensor(self.lower, dtype=DTYPE)
        hi = torch.tensor(self.upper, dtype=DTYPE)
        return ((points > lo) & (points < hi)).all(dim=-1)


class FlowEval(NamedTuple):
    points: torch.Tensor
    delta_logdensity: torch.Tensor
    nfe: int


# --------------------------------------------------------------------------
# bounding transform


def logit_logdet(u: torch.Tensor) -> torch.Tensor:
    """Per-coordinate log |d logit(u) / du| = -log(u (1 - u))."""
    return -torch.log(u) - torch.log1p(-u)


def to_unbounded(x, mask, domain: Domain, eps=BOUND_EPS):
    """Box -> R^d: affine rescale into [eps, 1 - eps], then logit. Returns (y, logdet [B])."""
    if mask.any() and not bool(domain.contains(x)[mask].all()):
        raise DomainError("point on or outside the domain boundary")
    lo = torch.tensor(domain.lower, dtype=DTYPE)
    width = torch.tensor(domain.upper, dtype=DTYPE) - lo
    scale = (1 - 2 * eps) / width
    u = eps + (x - lo) * scale
    u = torch.where(mask.unsqueeze(-1), u, torch.full_like(u, 0.5))
    y = torch.log(u) - torch.log1p(-u)
    ld = logit_logdet(u) + torch.log(scale)
    return y * mask.unsqueeze(-1).to(DTYPE), set_sum(ld, mask)


def to_domain(y, mask, domain: Domain, eps=BOUND_EPS, clip=False):
    """R^d -> box (sigmoid, then undo the rescale). Returns (x, logdet [B]) of this map.

    With ``clip`` the sigmoid output is kept inside [2 eps, 1 - 2 eps] so the
    result is strictly inside the box (used for sampling only).
    """
    lo = torch.tensor(domain.lower, dtype=DTYPE)
    width = torch.tensor(domain.upper, dtype=DTYPE) - lo
    scale = (1 - 2 * eps) / width
    u = torch.sigmoid(y)
    if clip:
        u = u.clamp(2 * eps, 1 - 2 * eps)
    x = lo + (u - eps) / scale
    ld = -(F.softplus(-y) + F.softplus(y)) - torch.log(scale)
    return x * mask.unsqueeze(-1).to(DTYPE), set_sum(ld, mask)


def bounding_transform(x, mask, direction, domain: Domain):
    """``direction`` is "to_unbounded" or "to_domain"."""
    if direction == "to_unbounded":
        return to_unbounded(x, mask, domain)
    if direction == "to_domain":
        return to_domain(x, mask, domain)
    raise ContractError(f"unknown direction {direction!r}")


# --------------------------------------------------------------------------
# solvers

_DP_C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
_DP_B4 = [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
_DP_E = [b - b4 for b, b4 in zip(_DP_B, _DP_B4)]


def _rk4_step(f, x, a, t, h, noise=(None,) * 4):
    v1, d1 = f(t, x, noise[0])
    v2, d2 = f(t + h / 2, x + (h / 2) * v1, noise[1])
    v3, d3 = f(t + h / 2, x + (h / 2) * v2, noise[2])
    v4, d4 = f(t + h, x + h * v3, noise[3])
    return x + (h / 6) * (v1 + 2 * v2 + 2 * v3 + v4), a + (h / 6) * (d1 + 2 * d2 + 2 * d3 + d4)


def _rk4(f, x, a, t0, t1, steps, make_noise=None, checkpoint=False):
    """Classical RK4; with ``checkpoint`` each step is recomputed during backward."""
    h = (t1 - t0) / steps
    for k in range(steps):
        t = t0 + k * h
        noise = tuple(make_noise() for _ in range(4)) if make_noise else (None,) * 4
        if checkpoint:
            x, a = torch.utils.checkpoint.checkpoint(_rk4_step, f, x, a, t, h, noise, use_reentrant=False)
        else:
            x, a = _rk4_step(f, x, a, t, h, noise)
    return x, a


def _rms(ex, ea, mask, count):
    return math.sqrt((float((ex * mask.unsqueeze(-1)).pow(2).sum()) + float(ea.pow(2).sum())) / count)


def _dopri5(f, x, a, t0, t1, solver: SolverConfig, mask, counter):
    sign = 1.0 if t1 > t0 else -1.0
    count = max(1, int(mask.sum()) * x.shape[-1] + a.numel())
    atol, rtol = solver.atol, solver.rtol

    def scaled(ex, ea, yx, ya):
        with torch.no_grad():
            return _rms(ex.detach() / (atol + rtol * yx.detach().abs()),
                        ea.detach() / (atol + rtol * ya.detach().abs()), mask, count)

    k1 = f(t0, x, None)
    # initial step (Hairer, Norsett & Wanner, II.4)
    d0 = scaled(x, a, x, a)
    d1 = scaled(k1[0], k1[1], x, a)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    probe = f(t0 + sign * h0, (x + sign * h0 * k1[0]).detach(), None)
    d2 = scaled(probe[0] - k1[0], probe[1] - k1[1], x, a) / h0
    h1 = max(1e-6, h0 * 1e-3) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
    h = min(100 * h0, h1)

    t = t0
    while sign * (t1 - t) > 0:
        if counter[0] >= solver.max_evals:
            raise SolverError(f"dopri5 exceeded {solver.max_evals} evaluations; last accepted t={t:.6g}")
        step = sign * min(h, abs(t1 - t))
        ks = [k1]
        for i in range(1, 7):
            xi = x + step * sum(c * k[0] for c, k in zip(_DP_A[i], ks) if c != 0.0)
            ai = a + step * sum(c * k[1] for c, k in zip(_DP_A[i], ks) if c != 0.0)
            ks.append(f(t + _DP_C[i] * step, xi, None))
        x_new, a_new = xi, ai  # row 6 of A equals the 5th-order weights
        ex = step * sum(e * k[0] for e, k in zip(_DP_E, ks) if e != 0.0)
        ea = step * sum(e * k[1] for e, k in zip(_DP_E, ks) if e != 0.0)
        with torch.no_grad():
            yx = torch.maximum(x.detach().abs(), x_new.detach().abs())
            ya = torch.maximum(a.detach().abs(), a_new.detach().abs())
            err = _rms(ex.detach() / (atol + rtol * yx), ea.detach() / (atol + rtol * ya), mask, count)
        if not math.isfinite(err):
            raise EvaluationError("non-finite error estimate in dopri5")
        if err <= 1.0:
            t = t1 if abs(t1 - (t + step)) < 1e-14 else t + step
            x, a = x_new, a_new
            k1 = ks[6]
        factor = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        h = abs(step) * factor
    return x, a


def integrate(dynamics: EquivariantDynamics, x, mask, direction=DENSITY, solver: SolverConfig | None = None,
              trace_mode=None, generator=None, create_graph=None, with_divergence=None,
              checkpoint_steps=False) -> FlowEval:
    """Solve one flow block over [0, 1] with the log-density accumulator attached.

    ``delta_logdensity`` is always reported as the amount to *add* to the base
    log-density of the end state at t=1 (for a sample pass with
    ``with_divergence=True`` it is recovered from the backward integral).
    """
    solver = solver or TRAIN_SOLVER
    if direction not in (DENSITY, SAMPLE):
        raise ContractError(f"unknown direction {direction!r}")
    if create_graph is None:
        create_graph = torch.is_grad_enabled()
    track = (direction == DENSITY) if with_divergence is None else with_divergence
    mode = dynamics.check_mode(trace_mode or dynamics.cfg.trace_mode)
    counter = [0]
    B = x.shape[0]
    zeros = torch.zeros(B, dtype=DTYPE)

    def f(t, state, probe):
        counter[0] += 1
        if track:
            return dynamics.velocity_and_divergence(state, mask, t, mode, generator, create_graph, probe=probe)
        return dynamics.velocity(state, mask, t), zeros

    make_noise = None
    if track and mode is TraceMode.HUTCHINSON:
        make_noise = lambda: rademacher(x.shape, generator)  # noqa: E731

    t0, t1 = (0.0, 1.0) if direction == DENSITY else (1.0, 0.0)
    a0 = torch.zeros(B, dtype=DTYPE)
    if solver.scheme == "rk4":
        checkpoint = create_graph and torch.is_grad_enabled() and checkpoint_steps
        xt, at = _rk4(f, x, a0, t0, t1, solver.steps, make_noise, checkpoint)
        counter[0] = 4 * solver.steps
    else:
        xt, at = _dopri5(f, x, a0, t0, t1, solver, mask, counter)
    delta = at if direction == DENSITY else -at
    return FlowEval(xt, delta, counter[0])


# --------------------------------------------------------------------------
# model


class FlowModel(nn.Module):
    """Base density <- couplings <- CNF blocks <- bounding transform (data side).

    Density evaluation runs data -> (logit) -> blocks[0..K-1] -> inverse
    couplings -> base. Sampling runs the same chain backwards.
    ``base="logistic"`` makes the identity flow exactly uniform on a bounded
    domain.
    """

    def __init__(self, point_dim, blocks=(), couplings=(), base="normal", domain: Domain | None = None,
                 solver: SolverConfig | None = None):
        super().__init__()
        if base not in ("normal", "logistic"):
            raise ContractError(f"unknown base density {base!r}")
        if domain is not None and domain.dim != point_dim:
            raise ContractError("domain dimension does not match point_dim")
        self.point_dim = point_dim
        self.blocks = nn.ModuleList(blocks)
        self.couplings = nn.ModuleList(couplings)
        self.base = base
        self.domain = domain
        self.solver = solver or TRAIN_SOLVER
        # recompute RK4 steps during backward: True, False, or None (large batches only)
        self.checkpoint_steps = None

    def base_log_prob(self, z, mask):
        if self.base == "normal":
            per = -0.5 * z * z - 0.5 * LOG_2PI
        else:
            per = -F.softplus(z) - F.softplus(-z)
        return set_sum(per, mask)

    def sample_base(self, shape, generator=None):
        if self.base == "normal":
            return torch.randn(shape, generator=generator, dtype=DTYPE)
        u = torch.rand(shape, generator=generator, dtype=DTYPE).clamp(1e-300, 1 - 1e-16)
        return torch.log(u) - torch.log1p(-u)

    def forward_to_base(self, points, mask, trace_mode=None, solver=None, generator=None):
        """Density pass. Returns (z, logdet [B], nfe) with log p = base(z) + logdet."""
        if points.shape[-1] != self.point_dim:
            raise ContractError("point dimension mismatch")
        solver = solver or self.solver
        m = mask.unsqueeze(-1).to(DTYPE)
        y = points * m
        logdet = torch.zeros(points.shape[0], dtype=DTYPE)
        nfe = 0
        if self.domain is not None:
            y, ld = to_unbounded(points, mask, self.domain)
            logdet = logdet + ld
        ckpt = self.checkpoint_steps
        if ckpt is None:
            ckpt = int(mask.sum()) * self.point_dim > CHECKPOINT_SLOTS
        for block in self.blocks:
            ev = integrate(block, y, mask, DENSITY, solver, trace_mode, generator, checkpoint_steps=ckpt)
            y, logdet, nfe = ev.points * m, logdet + ev.delta_logdensity, nfe + ev.nfe
        for layer in reversed(self.couplings):
            y, ld = layer.inverse(y)
            y = y * m
            logdet = logdet + set_sum(ld, mask)
        return y, logdet, nfe

    def log_density(self, points, mask, trace_mode=None, solver=None, generator=None, return_nfe=False):
        z, logdet, nfe = self.forward_to_base(points, mask, trace_mode, solver, generator)
        logp = self.base_log_prob(z, mask) + logdet
        return (logp, nfe) if return_nfe else logp

    def sample_from_base(self, z, mask, solver=None, clip=True):
        solver = solver or self.solver
        m = mask.unsqueeze(-1).to(DTYPE)
        y = z * m
        for layer in self.couplings:
            y, _ = layer.forward(y)
            y = y * m
        for block in reversed(self.blocks):
            y = integrate(block, y, mask, SAMPLE, solver, create_graph=False).points * m
        if self.domain is not None:
            y, _ = to_domain(y, mask, self.domain, clip=clip)
        return y

    @torch.no_grad()
    def sample(self, lengths, solver=None, generator=None):
        """Draw one set per entry of ``lengths``. Returns (points [B, n_max, d], mask)."""
        lengths = [int(n) for n in lengths]
        if any(n < 1 for n in lengths):
            raise ContractError("set sizes must be positive")
        n_max = max(lengths)
        mask = torch.arange(n_max).unsqueeze(0) < torch.tensor(lengths).unsqueeze(1)
        z = self.sample_base((len(lengths), n_max, self.point_dim), generator)
        return self.sample_from_base(z, mask, solver), mask
