"""Mini-batch maximum-likelihood training with a hand-written Adam."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .autodiff import DTYPE, ContractError
from .dynamics import ConfigError, TraceMode
from .flow import SolverConfig, TRAIN_SOLVER

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "mean_nfe", "seconds")


@dataclass
class Batch:
    points: torch.Tensor  # [B, n_max, d], zeros in padded slots
    lengths: list
    mask: torch.Tensor  # [B, n_max] bool


def pad_batch(sets) -> Batch:
    if len(sets) == 0:
        raise ContractError("pad_batch needs at least one set")
    arrays = [np.asarray(s, dtype=np.float64) for s in sets]
    dims = {a.shape[1] for a in arrays if a.ndim == 2}
    if any(a.ndim != 2 for a in arrays) or len(dims) != 1:
        raise ContractError("all sets must be [n, d] arrays with a shared d")
    d = dims.pop()
    lengths = [len(a) for a in arrays]
    n_max = max(lengths)
    pts = np.zeros((len(arrays), n_max, d))
    for b, a in enumerate(arrays):
        pts[b, :len(a)] = a
    mask = torch.arange(n_max).unsqueeze(0) < torch.tensor(lengths).unsqueeze(1)
    return Batch(torch.from_numpy(pts), lengths, mask)


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_halving_period: int = 50
    early_stop_patience: int = 10
    max_epochs: int = 300
    seed: int = 0
    trace_mode: str | None = None  # None: the dynamics' own mode
    solver: dict = field(default_factory=lambda: asdict(TRAIN_SOLVER))
    # optional wall-clock cap; the epoch in progress is finished
    max_seconds: float | None = None

    def validate(self) -> None:
        if self.batch_size < 1 or self.learning_rate <= 0 or self.eps <= 0:
            raise ConfigError("batch_size, learning_rate and eps must be positive")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError("betas must be two numbers in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.lr_halving_period < 1 or self.early_stop_patience < 1 or self.max_epochs < 0:
            raise ConfigError("lr_halving_period and early_stop_patience must be positive")
        if self.trace_mode is not None:
            TraceMode(self.trace_mode)
        SolverConfig(**self.solver)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rejected: int = 0


def adam_step(params, grads, state: AdamState, config: TrainConfig, lr: float | None = None) -> bool:
    """One in-place Adam update with decoupled weight decay.

    ``params`` and ``grads`` map names to tensors of matching shape. Returns
    False (and leaves everything untouched) if any gradient is non-finite.
    """
    lr = config.learning_rate if lr is None else lr
    for name, p in params.items():
        if name not in grads or grads[name].shape != p.shape:
            raise ContractError(f"gradient for {name} is missing or misshapen")
    if not all(bool(torch.isfinite(g).all()) for g in grads.values()):
        state.rejected += 1
        log.warning("non-finite gradient, step %d rejected", state.step + 1)
        return False
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if config.weight_decay:
                p.mul_(1.0 - lr * config.weight_decay)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + config.eps))
    return True


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int | None
    best_val: float
    stop_reason: str
    initial_val: float = math.nan


def batch_loss(model, batch: Batch, trace_mode=None, solver=None, generator=None):
    """Mean per-point NLL over the sets of a batch, plus the solver's nfe."""
    logp, nfe = model.log_density(batch.points, batch.mask, trace_mode=trace_mode, solver=solver,
                                  generator=generator, return_nfe=True)
    n = batch.mask.sum(dim=1).to(DTYPE)
    return (-logp / n).mean(), nfe


def evaluate_loss(model, sets, batch_size=64, trace_mode=None, solver=None, generator=None):
    """Mean per-point NLL over ``sets`` (each set weighted equally) and mean nfe per batch."""
    total, nfes, count = 0.0, [], 0
    with torch.no_grad():
        for start in range(0, len(sets), batch_size):
            chunk = sets[start:start + batch_size]
            loss, nfe = batch_loss(model, pad_batch(chunk), trace_mode, solver, generator)
            total += float(loss) * len(chunk)
            count += len(chunk)
            nfes.append(nfe)
    return total / count, float(np.mean(nfes))


def _trainable(model):
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(model, splits, config: TrainConfig | None = None, history_path=None, progress=None) -> TrainResult:
    """Fit ``model`` on ``splits['train']`` with early stopping on ``splits['val']``.

    The rate is set to its closed-form estimate up front; only the location
    density is trained. The best-validation parameters are loaded back before
    returning.
    """
    config = config or TrainConfig()
    config.validate()
    train_sets = [np.asarray(s, dtype=np.float64) for s in splits["train"]]
    val_sets = [np.asarray(s, dtype=np.float64) for s in splits["val"]]
    if not train_sets or not val_sets:
        raise ContractError("train and val splits must be nonempty")
    model.fit_rate(train_sets)
    skipped = sum(len(s) == 0 for s in train_sets + val_sets)
    if skipped:
        log.warning("ignoring %d empty realizations (per-point loss undefined)", skipped)
        train_sets = [s for s in train_sets if len(s)]
        val_sets = [s for s in val_sets if len(s)]
    solver = SolverConfig(**config.solver)
    mode = config.trace_mode
    # separate streams: data order must not depend on the trace estimator
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    probe_gen = torch.Generator().manual_seed(int(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0]))
    params = _trainable(model)
    state = AdamState()
    history = []
    best_val, best_epoch, best_params = math.inf, None, _snapshot(model)
    stale = 0
    stop = "max_epochs"
    start_time = time.perf_counter()

    val0, _ = evaluate_loss(model, val_sets, config.batch_size, mode, solver, probe_gen)
    if math.isfinite(val0):
        best_val, best_epoch = val0, 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = config.learning_rate * 0.5 ** ((epoch - 1) // config.lr_halving_period)
        order = shuffle_rng.permutation(len(train_sets))
        total, nfes = 0.0, []
        for start in range(0, len(order), config.batch_size):
            chunk = [train_sets[i] for i in order[start:start + config.batch_size]]
            loss, nfe = batch_loss(model, pad_batch(chunk), mode, solver, probe_gen)
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            grads = {k: torch.zeros_like(p) if g is None else g for (k, p), g in zip(params.items(), grads)}
            adam_step(params, grads, state, config, lr)
            total += float(loss.detach()) * len(chunk)
            nfes.append(nfe)
        train_loss = total / len(train_sets)
        val_loss, _ = evaluate_loss(model, val_sets, config.batch_size, mode, solver, probe_gen)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
               "mean_nfe": float(np.mean(nfes)), "seconds": time.perf_counter() - t0}
        history.append(row)
        if progress is not None:
            progress(row)
        if not math.isfinite(val_loss):
            stop = "diverged"
            log.error("validation loss is not finite at epoch %d; restoring last good parameters", epoch)
            break
        if val_loss < best_val:
            best_val, best_epoch, best_params, stale = val_loss, epoch, _snapshot(model), 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                stop = "early_stop"
                break
        if config.max_seconds is not None and time.perf_counter() - start_time > config.max_seconds:
            stop = "time_limit"
            break
    model.load_state_dict(best_params)
    if history_path is not None:
        write_history(history, history_path)
    return TrainResult(model, history, best_epoch, best_val, stop, val0)


def write_history(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in row.items()})
