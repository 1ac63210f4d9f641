"""Named model families and the on-disk checkpoint format.

A checkpoint is a directory with ``model.json`` (architecture, solver
defaults, domain, base density) and ``params.json`` (every tensor, including
the rate pre-activation).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .autodiff import load_parameters, save_parameters
from .dynamics import ConfigError, DynamicsConfig, EquivariantDynamics, TraceMode
from .flow import EVAL_SOLVER, Domain, FlowModel, SolverConfig
from .ihp import coupling_stack
from .point_process import PointProcessModel

MODEL_KINDS = ("cnf-deepset", "cnf-attention", "ihp", "cnf-zero-trace", "cnf-zero-trace+ihp")
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    model: str = "cnf-deepset"
    point_dim: int = 2
    blocks: int = 1
    dynamics: dict = field(default_factory=dict)  # DynamicsConfig overrides
    coupling_layers: int = 5
    coupling_hidden: int = 64
    base: str = "normal"
    domain: dict | None = field(default_factory=lambda: {"lower": [0.0, 0.0], "upper": [1.0, 1.0]})
    solver: dict = field(default_factory=lambda: asdict(EVAL_SOLVER))
    seed: int = 0

    @property
    def is_cnf(self) -> bool:
        return self.model != "ihp"

    @property
    def has_couplings(self) -> bool:
        return self.model in ("ihp", "cnf-zero-trace+ihp")

    def dynamics_config(self) -> DynamicsConfig:
        over = dict(self.dynamics)
        over.setdefault("point_dim", self.point_dim)
        if self.model == "cnf-attention":
            over.setdefault("kind", "attention")
        if self.model.startswith("cnf-zero-trace"):
            over.setdefault("trace_mode", TraceMode.ZERO.value)
        return DynamicsConfig.from_dict(over)

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {', '.join(MODEL_KINDS)}")
        if self.point_dim < 1:
            raise ConfigError("point_dim must be positive")
        if self.is_cnf and not 1 <= self.blocks <= 12:
            raise ConfigError("blocks must be between 1 and 12")
        if self.has_couplings and (self.coupling_layers < 1 or self.point_dim < 2):
            raise ConfigError("coupling layers need point_dim >= 2 and at least one layer")
        if self.is_cnf:
            dc = self.dynamics_config()
            dc.validate()
            zero = TraceMode(dc.trace_mode) is TraceMode.ZERO
            if self.model.startswith("cnf-zero-trace") and not zero:
                raise ConfigError(f"{self.model} requires trace mode 'zero'")
            if self.model == "cnf-attention" and dc.kind != "attention":
                raise ConfigError("cnf-attention requires attention dynamics")
            if self.model == "cnf-deepset" and dc.kind != "deepset":
                raise ConfigError("cnf-deepset requires deepset dynamics")
        elif self.dynamics:
            raise ConfigError("trace modes and dynamics settings apply to CNF models only")
        if self.domain is not None:
            Domain(self.domain["lower"], self.domain["upper"])
        SolverConfig(**self.solver)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def with_trace(cfg: ModelConfig, trace: str | None) -> ModelConfig:
    """Apply a ``--trace`` choice, rejecting combinations that make no sense."""
    if trace is None:
        return cfg
    try:
        TraceMode(trace)
    except ValueError:
        raise ConfigError(f"unknown trace mode {trace!r}") from None
    if not cfg.is_cnf:
        raise ConfigError("trace modes apply to CNF models only")
    dyn = dict(cfg.dynamics)
    dyn["trace_mode"] = trace
    out = ModelConfig.from_dict({**cfg.to_dict(), "dynamics": dyn})
    out.validate()
    return out


def build_model(cfg: ModelConfig) -> PointProcessModel:
    cfg.validate()
    d = cfg.point_dim
    blocks = []
    if cfg.is_cnf:
        dc = cfg.dynamics_config()
        blocks = [EquivariantDynamics(dc, seed=cfg.seed + 1000 * k) for k in range(cfg.blocks)]
    couplings = []
    if cfg.has_couplings:
        couplings = coupling_stack(d, cfg.coupling_layers, cfg.coupling_hidden, seed=cfg.seed + 7)
    domain = Domain(cfg.domain["lower"], cfg.domain["upper"]) if cfg.domain is not None else None
    flow = FlowModel(d, blocks=blocks, couplings=couplings, base=cfg.base, domain=domain,
                     solver=SolverConfig(**cfg.solver))
    return PointProcessModel(flow)


def save_checkpoint(model: PointProcessModel, cfg: ModelConfig, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "model.json"), "w", encoding="utf-8") as fh:
        json.dump({"format": FORMAT_VERSION, **cfg.to_dict()}, fh, indent=2)
        fh.write("\n")
    save_parameters(model.state_dict(), os.path.join(out_dir, "params.json"))
    return out_dir


def load_checkpoint(path):
    """Returns (model, ModelConfig). Raises ConfigError when files and config disagree."""
    with open(os.path.join(path, "model.json"), encoding="utf-8") as fh:
        raw = json.load(fh)
    version = raw.pop("format", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {version}")
    cfg = ModelConfig.from_dict(raw)
    model = build_model(cfg)
    params = load_parameters(os.path.join(path, "params.json"))
    expected = model.state_dict()
    if set(params) != set(expected):
        raise ConfigError("checkpoint parameters do not match the model config")
    for name, value in params.items():
        if tuple(value.shape) != tuple(expected[name].shape):
            raise ConfigError(f"shape mismatch for {name}")
    model.load_state_dict(params)
    return model, cfg
