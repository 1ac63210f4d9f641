"""Command-line interface. Every command writes plain files (JSONL, JSON, CSV).

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict

import numpy as np
import torch

from .autodiff import EvaluationError
from .dynamics import ConfigError, DynamicsConfig, EquivariantDynamics, TraceMode
from .flow import EVAL_SOLVER, SolverError
from .metrics import nll_report, pooled_wasserstein, ripley_k, write_metrics
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint, with_trace
from .simulate import KINDS, make_dataset, read_dataset, read_sets, write_dataset, write_sets
from .training import TrainConfig, evaluate_loss, train

log = logging.getLogger("setflow")

BENCH_COLUMNS = ("n", "d", "mode", "median_seconds", "result_value")
NFE_COLUMNS = ("checkpoint", "trace_mode", "nfe", "loss")
DEFAULT_DENSE_CEILING = 4096


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(text, cast=str):
    return [cast(v) for v in text.split(",") if v.strip()]


def _fmt(v):
    return format(v, ".17g") if isinstance(v, float) else v


def _write_csv(path, columns, rows):
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _load_json(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(data) - {"model", "dynamics", "train", "solver"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return data


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    if args.count < 5:
        raise ConfigError("--count must be at least 5")
    splits = make_dataset(args.kind, args.count, args.seed)
    path = write_dataset(splits, args.out, args.kind, args.seed)
    print(path)


def _model_config(args, file_cfg):
    fields = dict(file_cfg.get("model", {}))
    fields["model"] = args.model
    if "dynamics" in file_cfg:
        fields["dynamics"] = {**fields.get("dynamics", {}), **file_cfg["dynamics"]}
    if args.model == "ihp" and fields.get("dynamics"):
        # one config file may serve several families; a trace choice is still an error
        if "trace_mode" in fields["dynamics"]:
            raise ConfigError("trace modes apply to CNF models only")
        log.warning("ignoring dynamics settings for the ihp model")
        fields["dynamics"] = {}
    if "solver" in file_cfg:
        fields["solver"] = {**asdict(EVAL_SOLVER), **file_cfg["solver"]}
    if args.seed is not None:
        fields["seed"] = args.seed
    cfg = ModelConfig.from_dict(fields)
    cfg.validate()
    return with_trace(cfg, args.trace)


def cmd_train(args):
    file_cfg = _load_json(args.config)
    mcfg = _model_config(args, file_cfg)
    tfields = dict(file_cfg.get("train", {}))
    if args.epochs is not None:
        tfields["max_epochs"] = args.epochs
    if args.seed is not None:
        tfields["seed"] = args.seed
    tcfg = TrainConfig.from_dict(tfields)
    tcfg.validate()
    splits, _ = read_dataset(args.data)
    _check_dim(mcfg.point_dim, splits["train"])
    model = build_model(mcfg)
    os.makedirs(args.out, exist_ok=True)

    def progress(row):
        log.info("epoch %d train %.4f val %.4f (%.1fs)", row["epoch"], row["train_loss"], row["val_loss"],
                 row["seconds"])

    res = train(model, splits, tcfg, history_path=os.path.join(args.out, "history.csv"), progress=progress)
    save_checkpoint(res.model, mcfg, args.out)
    with open(os.path.join(args.out, "train.json"), "w", encoding="utf-8") as fh:
        json.dump({**asdict(tcfg), "best_epoch": res.best_epoch, "best_val": res.best_val,
                   "stop_reason": res.stop_reason}, fh, indent=2)
        fh.write("\n")
    if res.stop_reason == "diverged":
        raise EvaluationError("training diverged; last good checkpoint written")
    print(args.out)


def _check_dim(d, sets):
    for s in sets:
        if np.asarray(s).ndim != 2 or np.asarray(s).shape[1] != d:
            if len(s):
                raise ConfigError(f"data dimension does not match the checkpoint (d={d})")


def _sample_matched(model, sets, seed):
    gen = torch.Generator().manual_seed(seed)
    sizes = [len(s) for s in sets]
    out = [np.zeros((0, model.point_dim))] * len(sizes)
    idx = [i for i, n in enumerate(sizes) if n > 0]
    chunk = 64
    for start in range(0, len(idx), chunk):
        part = idx[start:start + chunk]
        pts, _ = model.flow.sample([sizes[i] for i in part], generator=gen)
        for b, i in enumerate(part):
            out[i] = pts[b, :sizes[i]].numpy().copy()
    return out


def cmd_eval(args):
    model, mcfg = load_checkpoint(args.checkpoint)
    splits, manifest = read_dataset(args.data)
    sets = splits[args.split]
    _check_dim(mcfg.point_dim, sets)
    dataset = manifest.get("kind", os.path.basename(os.path.dirname(os.path.abspath(args.data))))
    metrics = _csv_list(args.metrics)
    unknown = set(metrics) - {"nll", "wasserstein", "ripley"}
    if unknown:
        raise ConfigError(f"unknown metrics: {sorted(unknown)}")
    rows = []
    base = {"dataset": dataset, "model": mcfg.model, "seed": args.seed}
    area = model.domain.volume if model.domain is not None else 1.0
    if "nll" in metrics:
        kw = {}
        if args.trace is not None:
            kw["trace_mode"] = args.trace
        if mcfg.is_cnf and (args.trace or mcfg.dynamics_config().trace_mode) == TraceMode.HUTCHINSON.value:
            kw["generator"] = torch.Generator().manual_seed(args.seed)
        rep = nll_report(model, sets, **kw)
        rows.append({**base, "metric": "nll", "value": rep["mean"], "std": rep["std"]})
    if "wasserstein" in metrics or "ripley" in metrics:
        samples = _sample_matched(model, sets, args.seed)
        if "wasserstein" in metrics:
            w = pooled_wasserstein(sets, samples, seed=args.seed)
            rows.append({**base, "metric": "wasserstein", "value": w, "std": 0.0})
        if "ripley" in metrics:
            rows.append({**base, "metric": f"ripley_k_data@{args.r:g}", "value": ripley_k(sets, args.r, area),
                         "std": 0.0})
            rows.append({**base, "metric": f"ripley_k_model@{args.r:g}",
                         "value": ripley_k(samples, args.r, area), "std": 0.0})
    write_metrics(rows, args.out)
    print(args.out)


def cmd_sample(args):
    model, _ = load_checkpoint(args.checkpoint)
    if args.n is not None and args.n < 1:
        raise ConfigError("--n must be positive")
    if args.count < 1:
        raise ConfigError("--count must be positive")
    gen = torch.Generator().manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    sets = model.sample(n=args.n, count=args.count, generator=gen, np_rng=rng)
    _ensure_parent(args.out)
    write_sets(sets, args.out)
    print(args.out)


def density_grid(model, resolution, condition=None):
    """Rows (x, y, log_score, normalized) on an inset grid over the model domain."""
    if resolution < 2:
        raise ConfigError("--resolution must be at least 2")
    if model.point_dim != 2:
        raise ConfigError("density grids need a 2-D model")
    if model.domain is not None:
        lo, hi = np.asarray(model.domain.lower), np.asarray(model.domain.upper)
        inset = 1e-6 * (hi - lo)
        lo, hi = lo + inset, hi - inset
    else:
        lo, hi = np.array([-3.0, -3.0]), np.array([3.0, 3.0])
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    G = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if condition is None or len(condition) == 0:
        score = model.single_point_log_density(G).numpy()
    else:
        score = model.conditional_log_density(condition, G).numpy()
    dens = np.exp(score - score.max()).reshape(resolution, resolution)
    mass = np.trapezoid(np.trapezoid(dens, ys, axis=1), xs)
    norm = (dens / mass).ravel()
    return [{"x": float(a), "y": float(b), "log_score": float(s), "normalized": float(p)}
            for a, b, s, p in zip(G[:, 0], G[:, 1], score, norm)]


def cmd_density_grid(args):
    model, _ = load_checkpoint(args.checkpoint)
    condition = None
    if args.condition and args.condition != "none":
        sets = read_sets(args.condition, model.point_dim)
        if not sets:
            raise ConfigError("condition file holds no set")
        condition = sets[0]
    rows = density_grid(model, args.resolution, condition)
    _write_csv(args.out, ("x", "y", "log_score", "normalized"), rows)
    print(args.out)


def _random_dynamics(d, hidden, seed):
    dyn = EquivariantDynamics(DynamicsConfig(point_dim=d, hidden_dim=hidden, between_dim=hidden), seed=seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in dyn.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return dyn


def bench_trace(n_list, d=2, hidden=64, modes=None, repeats=3, seed=0, dense_ceiling=DEFAULT_DENSE_CEILING):
    modes = modes or [m.value for m in TraceMode if m is not TraceMode.ZERO]
    for m in modes:
        if TraceMode(m) is TraceMode.ZERO:
            raise ConfigError("the zero mode has no trace to time")
    if "exact-dense" in modes:
        worst = max(n_list) * d
        if worst > dense_ceiling:
            raise ConfigError(f"exact-dense refused for n*d = {worst} > ceiling {dense_ceiling}; "
                              "raise --dense-ceiling or drop the mode")
    dyn = _random_dynamics(d, hidden, seed)
    rows = []
    for n in n_list:
        x = torch.randn(1, n, d, generator=torch.Generator().manual_seed(seed + n), dtype=torch.float64)
        mask = torch.ones(1, n, dtype=torch.bool)
        for mode in modes:
            gen = torch.Generator().manual_seed(seed)
            times, value = [], None
            for rep in range(repeats + 1):
                t0 = time.perf_counter()
                _, div = dyn.velocity_and_divergence(x, mask, 0.5, mode, generator=gen)
                elapsed = time.perf_counter() - t0
                if rep > 0:  # first call is warmup
                    times.append(elapsed)
                value = float(div[0].detach())
            rows.append({"n": n, "d": d, "mode": mode, "median_seconds": float(np.median(times)),
                         "result_value": value})
    return rows


def nfe_comparison(checkpoints, sets, solver=None):
    solver = solver or EVAL_SOLVER
    rows = []
    for path in checkpoints:
        model, mcfg = load_checkpoint(path)
        loss, nfe = evaluate_loss(model, sets, solver=solver)
        mode = mcfg.dynamics_config().trace_mode if mcfg.is_cnf else ""
        rows.append({"checkpoint": path, "trace_mode": mode, "nfe": nfe, "loss": loss})
    return rows


def cmd_bench_trace(args):
    torch.set_num_threads(args.threads)
    rows = bench_trace(_csv_list(args.n_list, int), args.d, args.hidden, _csv_list(args.modes), args.repeats,
                       args.seed, args.dense_ceiling)
    _write_csv(args.out, BENCH_COLUMNS, rows)
    if args.checkpoints:
        paths = _csv_list(args.checkpoints)
        if len(paths) != 2 or not args.data:
            raise ConfigError("--checkpoints takes two paths and needs --data")
        splits, _ = read_dataset(args.data)
        root, ext = os.path.splitext(args.out)
        _write_csv(f"{root}_nfe{ext or '.csv'}", NFE_COLUMNS, nfe_comparison(paths, splits["val"]))
    print(args.out)


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="setflow", description="Permutation-invariant flows for point sets")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a synthetic dataset")
    s.add_argument("--kind", choices=KINDS, required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True, help="dataset manifest.json")
    s.add_argument("--model", required=True, choices=("cnf-deepset", "cnf-attention", "ihp", "cnf-zero-trace",
                                                      "cnf-zero-trace+ihp"))
    s.add_argument("--trace", choices=[m.value for m in TraceMode])
    s.add_argument("--config", help="JSON file with model/dynamics/train/solver sections")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--metrics", default="nll,wasserstein,ripley")
    s.add_argument("--r", type=float, default=0.1)
    s.add_argument("--trace", choices=[m.value for m in TraceMode])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw sets from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--poisson", action="store_true")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("density-grid", help="(conditional) density on a 2-D grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--condition", default="none", help="JSONL file (first set is used) or 'none'")
    s.add_argument("--resolution", type=int, default=50)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_density_grid)

    s = sub.add_parser("bench-trace", help="time divergence evaluation per trace mode")
    s.add_argument("--n-list", default="50,200,1000")
    s.add_argument("--d", type=int, default=2)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--modes", default="closed-form,hutchinson,block,exact-dense")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dense-ceiling", type=int, default=DEFAULT_DENSE_CEILING)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--checkpoints", help="two checkpoint dirs for an nfe comparison")
    s.add_argument("--data", help="dataset manifest for the nfe comparison")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench_trace)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (EvaluationError, SolverError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
