"""Inhomogeneous Poisson process baseline: i.i.d. points through affine couplings."""
from __future__ import annotations

import torch
from torch import nn

from .autodiff import DTYPE, ContractError
from .dynamics import MLP


class CouplingLayer(nn.Module):
    """Affine coupling acting on each point independently.

    ``forward`` maps base to data: the conditioning coordinates are copied and
    the others become ``z * exp(s(z_cond)) + t(z_cond)``. With ``flip`` the
    roles of the leading and trailing coordinates are swapped, which is how
    consecutive layers alternate.
    """

    def __init__(self, point_dim, hidden_dim=64, flip=False, gen=None):
        super().__init__()
        d = point_dim
        if d < 2:
            raise ContractError("coupling layers need at least two coordinates")
        k = d // 2
        order = list(range(d))
        if flip:
            order = order[::-1]
        self.point_dim = d
        self.cond_idx = order[:k]
        self.trans_idx = order[k:]
        self.scale_net = MLP([k, hidden_dim, hidden_dim, d - k], zero_last=True, gen=gen)
        self.shift_net = MLP([k, hidden_dim, hidden_dim, d - k], zero_last=True, gen=gen)

    def _params(self, cond):
        return self.scale_net(cond), self.shift_net(cond)

    def forward(self, z):
        """z: [..., d] -> (x, logdet [...])"""
        cond = z[..., self.cond_idx]
        s, t = self._params(cond)
        x = z.clone()
        x[..., self.trans_idx] = z[..., self.trans_idx] * torch.exp(s) + t
        return x, s.sum(dim=-1)

    def inverse(self, x):
        cond = x[..., self.cond_idx]
        s, t = self._params(cond)
        z = x.clone()
        z[..., self.trans_idx] = (x[..., self.trans_idx] - t) * torch.exp(-s)
        return z, -s.sum(dim=-1)


def coupling_forward(layer: CouplingLayer, z):
    return layer.forward(torch.as_tensor(z, dtype=DTYPE))


def coupling_inverse(layer: CouplingLayer, x):
    return layer.inverse(torch.as_tensor(x, dtype=DTYPE))


def coupling_stack(point_dim, layers=5, hidden_dim=64, seed=None):
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    return nn.ModuleList(CouplingLayer(point_dim, hidden_dim, flip=bool(i % 2), gen=gen) for i in range(layers))


def build_ihp(point_dim=2, layers=5, hidden_dim=64, domain=None, base="normal", seed=0):
    """IHP model: coupling stack + base density + optional bounding, no CNF block."""
    from .flow import FlowModel
    from .point_process import PointProcessModel

    flow = FlowModel(point_dim, blocks=[], couplings=coupling_stack(point_dim, layers, hidden_dim, seed),
                     base=base, domain=domain)
    return PointProcessModel(flow)


def ihp_log_likelihood(model, points, **kw):
    """Location log-density sum_i log p(x_i) of an IHP model for one set [n, d]."""
    return model.log_density_set(points, **kw)
