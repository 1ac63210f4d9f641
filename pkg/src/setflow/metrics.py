"""Evaluation statistics for point-set models."""
from __future__ import annotations

import csv
import warnings

import numpy as np

from .autodiff import ContractError
from .training import pad_batch

METRIC_COLUMNS = ("dataset", "model", "metric", "value", "std", "seed")


class DegenerateSetWarning(UserWarning):
    pass


def pairwise_distances(X) -> np.ndarray:
    """Ascending Euclidean distances over unordered pairs; empty (with a warning) for n < 2."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n < 2:
        warnings.warn("fewer than two points: no pairwise distances", DegenerateSetWarning, stacklevel=2)
        return np.zeros(0)
    i, j = np.triu_indices(n, k=1)
    diff = X[i] - X[j]
    return np.sort(np.sqrt(np.einsum("ij,ij->i", diff, diff)))


def wasserstein1(a, b, seed=0) -> float:
    """1-D W1 between two empirical samples after subsampling the larger one."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ContractError("wasserstein1 needs two nonempty samples")
    rng = np.random.default_rng(seed)
    if a.size > b.size:
        a = rng.choice(a, size=b.size, replace=False)
    elif b.size > a.size:
        b = rng.choice(b, size=a.size, replace=False)
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def pooled_distances(sets) -> np.ndarray:
    parts = [pairwise_distances(s) for s in sets if len(s) >= 2]
    return np.concatenate(parts) if parts else np.zeros(0)


def pooled_wasserstein(data_sets, model_sets, seed=0) -> float:
    """W1 between inter-point distances pooled over all realizations of each side."""
    return wasserstein1(pooled_distances(data_sets), pooled_distances(model_sets), seed=seed)


def ripley_k_set(X, r, area=1.0) -> float:
    d = pairwise_distances(X)
    n = len(X)
    return area * 2.0 * np.count_nonzero(d <= r) / (n * (n - 1))


def ripley_k(sets, r, area=1.0) -> float:
    """Mean over sets (n >= 2) of the uncorrected K estimate at radius r."""
    if r <= 0:
        raise ContractError("radius must be positive")
    vals = [ripley_k_set(s, r, area) for s in sets if len(s) >= 2]
    if not vals:
        raise ContractError("no set has at least two points")
    return float(np.mean(vals))


def per_set_nll(model, sets, batch_size=64, **kw) -> np.ndarray:
    import torch

    out = []
    with torch.no_grad():
        for start in range(0, len(sets), batch_size):
            batch = pad_batch(sets[start:start + batch_size])
            out.append(model.per_point_nll(batch.points, batch.mask, **kw).numpy())
    return np.concatenate(out)


def nll_report(model, split, batch_size=64, **kw) -> dict:
    """Mean and population std of the per-point NLL over realizations."""
    sets = [s for s in split if len(s)]
    if not sets:
        raise ContractError("split has no nonempty realizations")
    vals = per_set_nll(model, sets, batch_size, **kw)
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}


def write_metrics(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in row.items()})
