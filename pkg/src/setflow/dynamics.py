"""Permutation-equivariant velocity fields with a decoupled Jacobian.

Every output slot ``v[i, j]`` is produced by a small scalar network

    v[i, j] = tau(x[i, j], g[i, j], c[i(, j)], t)

where ``g[i, j]`` (within-point conditioner) never sees ``x[i, j]`` and ``c``
(between-points conditioner) never sees ``x[i]``. All diagonal entries of the
Jacobian therefore come from the first argument of ``tau`` and the trace is the
sum of one scalar derivative per slot.

Points of a set are processed in a canonical order (sorted by coordinates),
so outputs and parameter gradients do not depend on storage order, bit for
bit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import DTYPE, check_finite


class ConfigError(ValueError):
    pass


class TraceMode(str, Enum):
    CLOSED_FORM = "closed-form"
    ZERO = "zero"
    HUTCHINSON = "hutchinson"
    BLOCK_EXACT = "block"
    EXACT_DENSE = "exact-dense"


class Aggregation(str, Enum):
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"


@dataclass
class DynamicsConfig:
    kind: str = "deepset"  # "deepset" | "attention"
    point_dim: int = 2
    hidden_dim: int = 64
    latent_dim: int = 2  # d_g
    between_dim: int = 64  # d_h
    aggregation: str = "mean"  # sums grow with n and saturate tau on large sets
    num_heads: int = 4
    key_dim: int = 16
    trace_mode: str = TraceMode.CLOSED_FORM.value
    # False: within-point conditioner sees the whole point (closed-form trace unavailable)
    masked_within: bool = True

    def validate(self) -> None:
        if self.kind not in ("deepset", "attention"):
            raise ConfigError(f"unknown dynamics kind {self.kind!r}")
        if self.point_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("point_dim and hidden_dim must be positive")
        if self.latent_dim < 0 or self.between_dim < 0:
            raise ConfigError("latent_dim and between_dim must be non-negative")
        Aggregation(self.aggregation)
        mode = TraceMode(self.trace_mode)
        if self.kind == "attention":
            if self.num_heads < 1 or self.key_dim < 1:
                raise ConfigError("num_heads and key_dim must be positive")
            if self.between_dim == 0 or self.between_dim % self.num_heads:
                raise ConfigError("num_heads must divide between_dim")
        if mode is TraceMode.CLOSED_FORM and not self.masked_within and self.latent_dim > 0:
            raise ConfigError("closed-form trace requires the masked within-point network")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# symmetric reductions


def set_sum(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-set sum of ``values`` [B, n, ...] over valid points and trailing dims.

    Values are sorted before summation so the result is independent of the
    storage order of points.
    """
    v = values * _expand(mask, values).to(values.dtype)
    flat = v.reshape(v.shape[0], -1)
    return torch.sort(flat, dim=1).values.sum(dim=1)


def _expand(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return mask.reshape(mask.shape + (1,) * (like.dim() - mask.dim()))


def canonical_order(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-set index order [B, n]: valid points sorted lexicographically, padding last.

    Points with equal keys are identical, so any tie-break gives the same
    sequence of values; sums taken in this order are permutation invariant
    bit for bit.
    """
    B, n, d = x.shape
    order = torch.arange(n).expand(B, n)
    for j in reversed(range(d)):
        key = torch.gather(x[..., j].detach(), 1, order)
        order = torch.gather(order, 1, torch.argsort(key, dim=1, stable=True))
    pad_key = torch.gather((~mask).to(torch.int8), 1, order)
    return torch.gather(order, 1, torch.argsort(pad_key, dim=1, stable=True))


def aggregate_excluding_self(values: torch.Tensor, mask: torch.Tensor, rule: str,
                             order: torch.Tensor | None = None) -> torch.Tensor:
    """Aggregate ``values`` [B, n, F] over all *other* valid points of each set.

    Sums run over the points in ``order`` (default: sorted values per
    feature), which keeps them independent of storage order. Padded slots and
    sets with a single point receive zeros.
    """
    rule = Aggregation(rule)
    m = mask.unsqueeze(-1)
    counts = mask.sum(dim=1).to(values.dtype)  # [B]
    lonely = (counts <= 1).reshape(-1, 1, 1)
    if rule is Aggregation.MAX:
        neg_inf = torch.tensor(-math.inf, dtype=values.dtype)
        v = torch.where(m, values, neg_inf)
        top = v.amax(dim=1, keepdim=True)
        is_top = (v == top) & m
        # lowest index among the maxima gets the runner-up
        first = torch.argmax(is_top.to(torch.int8), dim=1, keepdim=True)
        idx = torch.arange(values.shape[1]).reshape(1, -1, 1)
        below = torch.where(v < top, v, neg_inf).amax(dim=1, keepdim=True)
        runner_up = torch.where(torch.isinf(below), top, below)
        out = torch.where(idx == first, runner_up, top)
    else:
        vm = values * m.to(values.dtype)
        if order is None:
            ordered = torch.sort(vm, dim=1).values
        else:
            ordered = torch.gather(vm, 1, order.unsqueeze(-1).expand_as(vm))
        total = ordered.sum(dim=1, keepdim=True)
        out = total - vm
        if rule is Aggregation.MEAN:
            out = out / (counts - 1).clamp(min=1).reshape(-1, 1, 1)
    out = torch.where(m & ~lonely, out, torch.zeros((), dtype=values.dtype))
    return out


def _flat_aggregate(ff, bi, ki, ranked, rule):
    """``aggregate_excluding_self`` for features [N, F] of valid points listed set by set.

    ``ki`` is each point's rank inside its set; sums run in rank order.
    """
    B, n = ranked.shape
    feats = torch.zeros(B, n, ff.shape[-1], dtype=ff.dtype).index_put((bi, ki), ff)
    if Aggregation(rule) is Aggregation.MAX:
        return aggregate_excluding_self(feats, ranked, rule)[bi, ki]
    total = feats.sum(dim=1)
    counts = ranked.sum(dim=1).to(ff.dtype)
    out = total[bi] - ff
    if Aggregation(rule) is Aggregation.MEAN:
        out = out / (counts - 1).clamp(min=1)[bi].unsqueeze(-1)
    return out * (counts > 1).to(ff.dtype)[bi].unsqueeze(-1)


# --------------------------------------------------------------------------
# building blocks


def _uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator | None) -> None:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=gen)


class MLP(nn.Module):
    """tanh MLP; ``zero_last`` makes the output identically zero at init."""

    def __init__(self, sizes, zero_last=False, gen=None):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))
        for i, layer in enumerate(self.layers):
            last = i == len(self.layers) - 1
            if last and zero_last:
                nn.init.zeros_(layer.weight)
                nn.init.zeros_(layer.bias)
            else:
                _uniform_(layer.weight, layer.in_features, gen)
                _uniform_(layer.bias, layer.in_features, gen)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.tanh(x)
        return x


class MaskedWithinNet(nn.Module):
    """Per-point network with ``d`` output groups; group j never sees input j.

    Hidden units are split into ``d`` groups, unit group j is wired to every
    input except j and feeds only output group j. Optional extra inputs (time)
    are visible to all groups. For d = 1 the output is a learned constant
    (plus a function of the extra inputs, if any).
    """

    def __init__(self, point_dim, group_dim, hidden_dim, extra_inputs=0, masked=True, gen=None):
        super().__init__()
        d = point_dim
        self.point_dim, self.group_dim, self.extra_inputs = d, group_dim, extra_inputs
        per_group = max(1, hidden_dim // d)
        hidden = per_group * d
        unit_group = torch.arange(hidden) // per_group
        n_in = d + extra_inputs
        m1 = torch.ones(hidden, n_in, dtype=DTYPE)
        m2 = torch.ones(d * group_dim, hidden, dtype=DTYPE)
        if masked:
            m1[:, :d] = (unit_group.reshape(-1, 1) != torch.arange(d).reshape(1, -1)).to(DTYPE)
            out_group = torch.arange(d * group_dim) // group_dim
            m2 = (out_group.reshape(-1, 1) == unit_group.reshape(1, -1)).to(DTYPE)
        self.register_buffer("mask1", m1)
        self.register_buffer("mask2", m2)
        self.w1 = nn.Parameter(torch.empty(hidden, n_in, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.empty(hidden, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.empty(d * group_dim, hidden, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.empty(d * group_dim, dtype=DTYPE))
        fan1 = max(1, d - 1 + extra_inputs) if masked else n_in
        _uniform_(self.w1, fan1, gen)
        _uniform_(self.b1, fan1, gen)
        _uniform_(self.w2, per_group if masked else hidden, gen)
        _uniform_(self.b2, per_group if masked else hidden, gen)

    def forward(self, x, extra=None):
        """x: [..., d] -> [..., d, group_dim]"""
        inp = x if extra is None else torch.cat([x, extra], dim=-1)
        h = torch.tanh(F.linear(inp, self.w1 * self.mask1, self.b1))
        out = F.linear(h, self.w2 * self.mask2, self.b2)
        return out.reshape(x.shape[:-1] + (self.point_dim, self.group_dim))


class TauNet(nn.Module):
    """Scalar per-slot network tau(x_slot, g, c, t) with an exact slot derivative.

    With ``slot_input=False`` the network ignores ``x_slot`` (volume preserving).
    The derivative with respect to the slot input is carried forward through
    the tanh layers alongside the value, so it costs roughly one extra pass.
    """

    def __init__(self, latent_dim, cond_dim, hidden_dim, slot_input=True, gen=None):
        super().__init__()
        self.latent_dim, self.cond_dim, self.slot_input = latent_dim, cond_dim, slot_input
        n_in = int(slot_input) + latent_dim + cond_dim + 1
        self.w_slot = nn.Parameter(torch.empty(hidden_dim, dtype=DTYPE)) if slot_input else None
        self.w_latent = nn.Parameter(torch.empty(hidden_dim, latent_dim, dtype=DTYPE)) if latent_dim else None
        self.w_cond = nn.Parameter(torch.empty(hidden_dim, cond_dim, dtype=DTYPE)) if cond_dim else None
        self.w_time = nn.Parameter(torch.empty(hidden_dim, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.empty(hidden_dim, dtype=DTYPE))
        for p in (self.w_slot, self.w_latent, self.w_cond, self.w_time, self.b1):
            if p is not None:
                _uniform_(p, n_in, gen)
        self.hidden = nn.Linear(hidden_dim, hidden_dim, dtype=DTYPE)
        _uniform_(self.hidden.weight, hidden_dim, gen)
        _uniform_(self.hidden.bias, hidden_dim, gen)
        self.out = nn.Linear(hidden_dim, 1, dtype=DTYPE)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, g, c, t, slot_derivative=False):
        """x: [..., d]; g: [..., d, d_g] or None; c: [..., d_h] or [..., d, d_h] or None.

        Returns (value [..., d], d value / d x [..., d] or None).
        """
        z = self.b1 + self.w_time * t
        if self.w_cond is not None:
            cz = F.linear(c, self.w_cond)
            z = z + (cz.unsqueeze(-2) if c.dim() == x.dim() else cz)
        if self.w_latent is not None:
            z = z + F.linear(g, self.w_latent)
        if self.w_slot is not None:
            z = z + x.unsqueeze(-1) * self.w_slot
        z = z.expand(x.shape + (z.shape[-1],))
        a1 = torch.tanh(z)
        a2 = torch.tanh(self.hidden(a1))
        value = self.out(a2).squeeze(-1)
        if not slot_derivative:
            return value, None
        if self.w_slot is None:
            return value, torch.zeros_like(x)
        da1 = (1 - a1 * a1) * self.w_slot
        da2 = (1 - a2 * a2) * F.linear(da1, self.hidden.weight)
        return value, F.linear(da2, self.out.weight).squeeze(-1)


class AttentionConditioner(nn.Module):
    """Multi-head self-attention with the diagonal masked out.

    Queries come from a masked within-point network (one query group per
    coordinate), keys and values from unrestricted per-point networks. Row i,
    coordinate group j, is thus independent of x[i, j]: it attends only to
    other points, and its query ignores coordinate j.
    """

    def __init__(self, cfg: DynamicsConfig, gen=None):
        super().__init__()
        d, H = cfg.point_dim, cfg.num_heads
        self.d, self.heads, self.key_dim = d, H, cfg.key_dim
        self.value_dim = cfg.between_dim // H
        self.f_q = MaskedWithinNet(d, H * cfg.key_dim, cfg.hidden_dim, extra_inputs=1,
                                   masked=cfg.masked_within, gen=gen)
        self.f_k = MLP([d + 1, cfg.hidden_dim, H * cfg.key_dim], gen=gen)
        self.f_v = MLP([d + 1, cfg.hidden_dim, cfg.between_dim], gen=gen)

    def forward(self, x, mask, t, x_other=None):
        """Returns [B, n, d, between_dim]. ``x_other`` feeds keys/values (detach hook)."""
        B, n, d = x.shape
        x_other = x if x_other is None else x_other
        tt = torch.full(x.shape[:-1] + (1,), float(t), dtype=x.dtype)
        q = self.f_q(x, tt).reshape(B, n, d, self.heads, self.key_dim)
        kv_in = torch.cat([x_other, tt], dim=-1)
        k = self.f_k(kv_in).reshape(B, n, self.heads, self.key_dim)
        v = self.f_v(kv_in).reshape(B, n, self.heads, self.value_dim)
        # scores[b, i, j, h, k]
        scores = torch.einsum("bijhe,bkhe->bijhk", q, k) / math.sqrt(self.key_dim)
        eye = torch.eye(n, dtype=torch.bool).reshape(1, n, 1, 1, n)
        allowed = mask.reshape(B, 1, 1, 1, n) & ~eye
        scores = scores.masked_fill(~allowed, -math.inf)
        top = scores.amax(dim=-1, keepdim=True)
        top = torch.where(torch.isfinite(top), top, torch.zeros_like(top))
        e = torch.exp(scores - top)  # exactly 0 where masked
        denom = e.sum(dim=-1, keepdim=True)
        w = e / torch.where(denom > 0, denom, torch.ones_like(denom))
        out = torch.einsum("bijhk,bkhe->bijhe", w, v)
        out = out.reshape(B, n, d, self.heads * self.value_dim)
        return out * mask.reshape(B, n, 1, 1).to(out.dtype)


class EquivariantDynamics(nn.Module):
    """Velocity field f(X, t) on padded batches of sets with selectable trace mode."""

    def __init__(self, cfg: DynamicsConfig, seed: int | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        d = cfg.point_dim
        self.volume_preserving = TraceMode(cfg.trace_mode) is TraceMode.ZERO
        self.within = (MaskedWithinNet(d, cfg.latent_dim, cfg.hidden_dim, masked=cfg.masked_within, gen=gen)
                       if cfg.latent_dim > 0 else None)
        self.between = None
        self.attention = None
        if cfg.between_dim > 0:
            if cfg.kind == "deepset":
                self.between = MLP([d + 1, cfg.hidden_dim, cfg.between_dim], gen=gen)
            else:
                self.attention = AttentionConditioner(cfg, gen=gen)
        self.tau = TauNet(cfg.latent_dim, cfg.between_dim, cfg.hidden_dim,
                          slot_input=not self.volume_preserving, gen=gen)

    # -- conditioners ------------------------------------------------------

    def within_point(self, x):
        """[..., d] -> [..., d, d_g]; slice [..., j, :] ignores x[..., j] when masked."""
        if self.within is None:
            return None
        return self.within(x)

    def between_points(self, x, mask, t, order=None):
        """[B, n, d] -> [B, n, d_h], aggregate of h(x_j, t) over valid j != i."""
        if self.between is None:
            return None
        if order is None:
            order = canonical_order(x, mask)
        tt = torch.full(x.shape[:-1] + (1,), float(t), dtype=x.dtype)
        feats = self.between(torch.cat([x, tt], dim=-1))
        return aggregate_excluding_self(feats, mask, self.cfg.aggregation, order)

    def attention_conditioner(self, x, mask, t, x_other=None):
        if self.attention is None:
            return None
        return self.attention(x, mask, t, x_other=x_other)

    # -- velocity ------------------------------------------------------------

    def _forward(self, x, mask, t, slot_derivative=False, detach_between=False):
        """Per-slot networks run on the valid points only, in canonical order.

        Points are gathered sorted by coordinates, so a reordered input set
        produces the very same flat arrays; outputs and parameter gradients
        are then identical bit for bit.
        """
        x_other = x.detach() if detach_between else x
        B, n, d = x.shape
        order = canonical_order(x, mask)
        ranked = torch.arange(n).unsqueeze(0) < mask.sum(dim=1, keepdim=True)
        bi, ki = ranked.nonzero(as_tuple=True)
        pi = order[bi, ki]
        xf = x[bi, pi]
        g = self.within_point(xf)
        if self.attention is not None:
            idx = order.unsqueeze(-1).expand(B, n, d)
            xc = torch.gather(x, 1, idx)
            oc = xc if x_other is x else torch.gather(x_other, 1, idx)
            c = self.attention_conditioner(xc, ranked, t, x_other=oc)[bi, ki]
        elif self.between is not None:
            of = x_other[bi, pi]
            tt = torch.full((of.shape[0], 1), float(t), dtype=x.dtype)
            ff = self.between(torch.cat([of, tt], dim=-1))
            c = _flat_aggregate(ff, bi, ki, ranked, self.cfg.aggregation)
        else:
            c = None
        vf, dvf = self.tau(xf, g, c, t, slot_derivative=slot_derivative)
        v = torch.zeros_like(x).index_put((bi, pi), vf)
        dv = None if dvf is None else torch.zeros_like(x).index_put((bi, pi), dvf)
        return v, dv

    def velocity(self, x, mask, t):
        v, _ = self._forward(x, mask, t)
        return check_finite(v, "velocity")

    def check_mode(self, mode) -> TraceMode:
        mode = TraceMode(mode)
        if mode is TraceMode.CLOSED_FORM and not self.cfg.masked_within and (
                self.within is not None or self.attention is not None):
            raise ConfigError("closed-form trace needs masked within-point networks")
        if mode is TraceMode.ZERO and not self.volume_preserving:
            raise ConfigError("zero trace needs volume-preserving dynamics (trace_mode='zero' at build time)")
        return mode

    def velocity_and_divergence(self, x, mask, t, mode=None, generator=None, create_graph=False, probe=None):
        """Return (velocity [B, n, d], divergence [B]).

        ``create_graph`` keeps the graph so the divergence can be
        differentiated with respect to parameters and states. ``probe`` fixes
        the Hutchinson noise (otherwise drawn from ``generator``).
        """
        mode = self.check_mode(mode or self.cfg.trace_mode)
        B = x.shape[0]
        if mode is TraceMode.CLOSED_FORM:
            v, dv = self._forward(x, mask, t, slot_derivative=True)
            div = set_sum(dv, mask)
        elif mode is TraceMode.ZERO:
            v, _ = self._forward(x, mask, t)
            div = torch.zeros(B, dtype=x.dtype)
        else:
            with torch.enable_grad():
                xg = x if x.requires_grad else x.detach().requires_grad_(True)
                if mode is TraceMode.HUTCHINSON:
                    v, _ = self._forward(xg, mask, t)
                    eps = (rademacher(x.shape, generator) if probe is None else probe) * mask.unsqueeze(-1).to(x.dtype)
                    (g,) = torch.autograd.grad(v, xg, eps, create_graph=create_graph, allow_unused=True)
                    g = torch.zeros_like(x) if g is None else g
                    div = set_sum(g * eps, mask)
                elif mode is TraceMode.BLOCK_EXACT:
                    v_blk, _ = self._forward(xg, mask, t, detach_between=True)
                    diag = []
                    for j in range(x.shape[-1]):
                        cot = torch.zeros_like(x)
                        cot[..., j] = 1.0
                        (g,) = torch.autograd.grad(v_blk, xg, cot, create_graph=create_graph,
                                                   retain_graph=True, allow_unused=True)
                        diag.append(torch.zeros_like(x[..., j]) if g is None else g[..., j])
                    div = set_sum(torch.stack(diag, dim=-1), mask)
                    v = self._forward(x, mask, t)[0] if create_graph else v_blk
                else:
                    v, _ = self._forward(xg, mask, t)
                    jac = dense_jacobian(v, xg, create_graph=create_graph)
                    div = dense_trace(jac, mask)
            if not create_graph:
                v, div = v.detach(), div.detach()
        check_finite(v, "velocity")
        check_finite(div, f"divergence ({mode.value})")
        return v, div

    def divergence(self, x, mask, t, mode=None, generator=None, create_graph=False):
        return self.velocity_and_divergence(x, mask, t, mode, generator, create_graph)[1]


def rademacher(shape, generator=None):
    return torch.randint(0, 2, shape, generator=generator).to(DTYPE) * 2 - 1


DENSE_CHUNK_ELEMENTS = 1 << 20


def dense_jacobian(v, x, create_graph=False):
    """Per-set Jacobians [B, n*d, n*d] of v w.r.t. x (sets are independent).

    Row k is obtained with the basis cotangent e_k placed in every set at once.
    Rows are pulled back in chunks through one batched backward each, so the
    cost is the O((n*d)^2) arithmetic rather than per-call overhead.
    """
    B, n, d = x.shape
    nd = n * d
    if nd == 0:
        return torch.zeros(B, 0, 0, dtype=x.dtype)
    chunk = max(1, DENSE_CHUNK_ELEMENTS // max(1, B * nd))
    eye = torch.eye(nd, dtype=x.dtype)
    rows = []
    for k0 in range(0, nd, chunk):
        k1 = min(nd, k0 + chunk)
        cot = eye[k0:k1].unsqueeze(1).expand(k1 - k0, B, nd).reshape(k1 - k0, B, n, d)
        (g,) = torch.autograd.grad(v, x, cot, create_graph=create_graph, retain_graph=True,
                                   allow_unused=True, is_grads_batched=True)
        rows.append(torch.zeros(k1 - k0, B, nd, dtype=x.dtype) if g is None else g.reshape(k1 - k0, B, nd))
    return torch.cat(rows, dim=0).permute(1, 0, 2)


def dense_trace(jac, mask):
    B, nd, _ = jac.shape
    n = mask.shape[1]
    diag = torch.diagonal(jac, dim1=1, dim2=2).reshape(B, n, nd // n if n else 0)
    return set_sum(diag, mask)
