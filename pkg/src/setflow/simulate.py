"""Synthetic point-process datasets on the unit square.

Cluster processes are simulated on a buffered square and points outside the
observed region (0, 1)^2 are discarded, which removes edge effects. Every
realization has its own rng stream derived from (seed, index).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

KINDS = ("thomas", "matern", "mixture")
MIXTURE_MEANS = ((0.3, 0.3), (0.5, 0.7), (0.7, 0.3))


@dataclass
class SimConfig:
    kind: str = "thomas"
    parent_rate: float = 3.0
    child_rate: float = 5.0
    sigma: float = 0.01
    radius: float = 0.1
    mixture_rate: float = 64.0
    mixture_scale: float = 0.05  # per-coordinate standard deviation
    mixture_means: tuple = field(default=MIXTURE_MEANS)
    buffer: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if min(self.parent_rate, self.child_rate, self.mixture_rate) < 0:
            raise ValueError("rates must be non-negative")
        if self.sigma <= 0 or self.radius <= 0 or self.mixture_scale <= 0:
            raise ValueError("sigma, radius and mixture_scale must be positive")
        if self.buffer is None:
            self.buffer = {"thomas": 0.05, "matern": self.radius, "mixture": 0.0}[self.kind]
        if self.buffer < 0:
            raise ValueError("buffer must be non-negative")


def _inside(points):
    if len(points) == 0:
        return points.reshape(0, 2)
    keep = np.all((points > 0.0) & (points < 1.0), axis=1)
    return points[keep]


def _parents(cfg, rng):
    m = rng.poisson(cfg.parent_rate)
    side = 1.0 + 2.0 * cfg.buffer
    return rng.uniform(size=(m, 2)) * side - cfg.buffer


def simulate_thomas(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    parents = _parents(cfg, rng)
    counts = rng.poisson(cfg.child_rate, size=len(parents))
    centres = np.repeat(parents, counts, axis=0)
    children = centres + cfg.sigma * rng.standard_normal(centres.shape)
    return _inside(children)


def simulate_matern(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    parents = _parents(cfg, rng)
    counts = rng.poisson(cfg.child_rate, size=len(parents))
    centres = np.repeat(parents, counts, axis=0)
    k = len(centres)
    r = cfg.radius * np.sqrt(rng.uniform(size=k))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=k)
    children = centres + np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    return _inside(children)


def simulate_mixture(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    n = rng.poisson(cfg.mixture_rate)
    means = np.asarray(cfg.mixture_means, dtype=float)
    comp = rng.integers(0, len(means), size=n)
    pts = means[comp] + cfg.mixture_scale * rng.standard_normal((n, 2))
    return _inside(pts)


SIMULATORS = {"thomas": simulate_thomas, "matern": simulate_matern, "mixture": simulate_mixture}


def simulate(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    return SIMULATORS[cfg.kind](cfg, rng)


def realization_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def simulate_many(cfg: SimConfig, count: int, seed: int | None = None, redraw_empty=True):
    seed = cfg.seed if seed is None else seed
    sets = []
    for i in range(count):
        rng = realization_rng(seed, i)
        pts = simulate(cfg, rng)
        while redraw_empty and len(pts) == 0:
            pts = simulate(cfg, rng)
        sets.append(pts)
    return sets


def split_sizes(count: int):
    n_train = int(np.floor(0.6 * count))
    n_val = int(np.floor(0.2 * count))
    return n_train, n_val, count - n_train - n_val


def make_dataset(kind: str, count: int = 1000, seed: int = 0, **overrides):
    """Simulate ``count`` non-empty realizations and split 60/20/20."""
    if count < 5:
        raise ValueError("count must be at least 5")
    cfg = SimConfig(kind=kind, seed=seed, **overrides)
    sets = simulate_many(cfg, count, seed)
    n_train, n_val, _ = split_sizes(count)
    return {
        "train": sets[:n_train],
        "val": sets[n_train:n_train + n_val],
        "test": sets[n_train + n_val:],
    }


# --------------------------------------------------------------------------
# files


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_sets(sets) -> str:
    lines = []
    for s in sets:
        pts = ",".join("[" + ",".join(_fmt(v) for v in p) + "]" for p in np.asarray(s).reshape(len(s), -1))
        lines.append('{"points": [' + pts + "]}")
    return "".join(line + "\n" for line in lines)


def write_sets(sets, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_sets(sets))


def read_sets(path, point_dim=None):
    sets = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            pts = np.asarray(json.loads(line)["points"], dtype=np.float64)
            if pts.size == 0:
                pts = pts.reshape(0, point_dim or 2)
            sets.append(pts)
    return sets


def write_dataset(splits, out_dir, kind, seed) -> str:
    """Write one JSONL file per split plus ``manifest.json``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {}
    for name in ("train", "val", "test"):
        # split paths are relative to the manifest so datasets can be moved
        write_sets(splits[name], os.path.join(out_dir, f"{name}.jsonl"))
        manifest[name] = f"{name}.jsonl"
    manifest["seed"] = int(seed)
    manifest["kind"] = kind
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return mpath


def read_dataset(manifest_path):
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    splits = {}
    for name in ("train", "val", "test"):
        splits[name] = read_sets(os.path.join(base, manifest[name]))
    return splits, manifest
