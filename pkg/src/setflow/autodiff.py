"""Differentiation helpers on top of torch (float64 throughout).

Parameters are kept in plain ordered dicts of tensors (``ParameterSet``) so
gradient vectors line up across runs and checkpoints serialize simply.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from typing import Callable, Mapping

import torch

DTYPE = torch.float64

ParameterSet = OrderedDict[str, torch.Tensor]


class EvaluationError(RuntimeError):
    """Raised when a loss or intermediate quantity is not finite."""


class ContractError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


def tensor(values, shape=None) -> torch.Tensor:
    t = torch.as_tensor(values, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(shape)
    return t


def check_finite(value: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise EvaluationError(f"non-finite value produced by {what}")
    return value


def gradient(loss: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
             params: Mapping[str, torch.Tensor]) -> ParameterSet:
    """Return d loss / d params for every entry of ``params``.

    ``loss`` receives leaf copies of the parameters and must return a scalar.
    """
    leaves = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in params.items())
    value = loss(leaves)
    if value.numel() != 1:
        raise ContractError("loss must be scalar")
    check_finite(value, "loss")
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    out = OrderedDict()
    for (name, leaf), g in zip(leaves.items(), grads):
        out[name] = torch.zeros_like(leaf) if g is None else g.detach()
    return out


def vjp(func: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
        cotangent: torch.Tensor) -> torch.Tensor:
    """Vector-Jacobian product ``cotangent^T J_func(x)``."""
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        y = func(x)
    if y.shape != cotangent.shape:
        raise ContractError(f"cotangent shape {tuple(cotangent.shape)} != output shape {tuple(y.shape)}")
    (g,) = torch.autograd.grad(y, x, cotangent, allow_unused=True)
    return torch.zeros_like(x) if g is None else g.detach()


def full_jacobian(func: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Dense Jacobian over flattened input and output; row k is the vjp with e_k."""
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        y = func(x)
    flat = y.reshape(-1)
    rows = []
    for k in range(flat.numel()):
        (g,) = torch.autograd.grad(flat[k], x, retain_graph=True, allow_unused=True)
        rows.append(torch.zeros(x.numel(), dtype=x.dtype) if g is None else g.reshape(-1))
    if not rows:
        return torch.zeros(0, x.numel(), dtype=x.dtype)
    return torch.stack(rows)


def scalar_partial(func: Callable[..., torch.Tensor], x: torch.Tensor, *side: torch.Tensor) -> torch.Tensor:
    """Exact forward-mode derivative of ``func(x, *side)`` with respect to ``x``.

    ``x`` may be a batch of scalar slots; ``func`` must act elementwise over it
    (each output depends only on the matching entry of ``x``). Side inputs are
    held constant.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    side = tuple(s.detach() for s in side)
    _, tangent = torch.func.jvp(lambda v: func(v, *side), (x,), (torch.ones_like(x),))
    return tangent


def save_parameters(params: Mapping[str, torch.Tensor], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_parameters(params))


def dumps_parameters(params: Mapping[str, torch.Tensor]) -> str:
    payload = OrderedDict()
    for name, value in params.items():
        v = value.detach().cpu()
        payload[name] = {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
    return json.dumps(payload)


def loads_parameters(text: str) -> ParameterSet:
    raw = json.loads(text, object_pairs_hook=OrderedDict)
    out = OrderedDict()
    for name, entry in raw.items():
        out[name] = torch.tensor(entry["values"], dtype=DTYPE).reshape(entry["shape"])
    return out


def load_parameters(path) -> ParameterSet:
    with open(path, encoding="utf-8") as fh:
        return loads_parameters(fh.read())
