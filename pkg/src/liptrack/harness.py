"""Experiment orchestration: sweeps over width, depth, sample count, and label noise.

A sweep trains a (size x seed) grid, evaluates the Lipschitz bounds at a
fixed epoch cadence, and writes a run directory named by the config hash:
the effective config, raw records as JSONL, and a seed-averaged summary
CSV.  Everything is deterministic per (config, seeds), so re-running a
config reproduces the files byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bounds import lower_bound, upper_bound
from .datasets import (DataPair, load_cifar10, load_mnist1d, shuffle_labels, subsample,
                       synthetic_fallback)
from .linalg import PowerIterSettings
from .models import init_cnn, init_ff, param_distance
from .training import (DivergenceError, LrSchedule, StopRule, STOP_THRESHOLDS, dataset_loss,
                       make_optimizer, param_grad, train, updates_per_epoch)

SWEEP_AXES = ("width", "depth", "samples", "noise")

SUMMARY_METRICS = ("train_loss", "test_loss", "c_lower", "c_avg_norm", "c_upper",
                   "param_dist", "grad_norm")

RECORD_KEYS = ("config_hash", "size", "seed", "epoch", "train_loss", "test_loss",
               "c_lower", "c_avg_norm", "c_upper", "param_dist", "grad_norm", "eta")

ENV_WORKERS = "LIPTRACK_WORKERS"


def _default_dataset() -> dict:
    return {"kind": "synthetic", "path": None, "n_train": 4000, "n_test": 1000,
            "d": 40, "num_classes": 10, "seed": 0,
            "subsample": None, "subsample_seed": 0,
            "label_noise": None, "noise_seed": 0, "corrupt_test": False}


@dataclass
class ExperimentConfig:
    """Everything a sweep needs; round-trips losslessly through JSON."""

    family: str = "ff"
    widths: list = field(default_factory=lambda: [16, 32, 64, 80, 96, 128, 256, 512, 1024])
    depth: int = 1
    width: int = 64
    depths: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    samples_list: list = field(default_factory=lambda: [100, 500, 1000, 4000])
    noise_list: list = field(default_factory=lambda: [0.0, 0.1, 0.15, 0.2, 0.25, 0.5, 0.75, 1.0])
    dataset: dict = field(default_factory=_default_dataset)
    loss: str = "ce"
    optimizer: str = "sgd"
    base_lr: float = 0.005
    schedule: str = "constant"
    grad_norm_threshold: float | None = None
    min_epochs: int = 0
    max_epochs: int = 100
    batch_size: int = 512
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    eval_every: int = 10
    probe_pairs: int = 10000
    probe_seed: int = 0
    power_iter: dict = field(default_factory=lambda: {"max_iters": 1000, "rel_tol": 1e-9, "seed": 0})

    def stop_rule(self) -> StopRule:
        thr = self.grad_norm_threshold
        if thr is None:
            thr = STOP_THRESHOLDS[self.loss]
        return StopRule(thr, self.min_epochs, self.max_epochs)

    def settings(self) -> PowerIterSettings:
        return PowerIterSettings(**self.power_iter)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config key: {sorted(unknown)[0]}")
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: not valid JSON ({err})") from None
    return ExperimentConfig.from_dict(raw)


def apply_overrides(d: dict, overrides: dict) -> dict:
    """Apply dotted-key overrides (e.g. ``dataset.label_noise=0.2``) to a config dict."""
    for key, value in overrides.items():
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return d


# Profiles: `desk` shows the full-scale trends in minutes, `paper` carries
# the overnight full-scale settings.  The desk recipe was validated over 4
# seeds: its 300-epoch runs stay inside the warmup ramp (peak coefficient
# about 0.48), which is what lets one learning rate train widths 16..1024
# without detaching the widest nets, and the 0.2 label noise keeps the
# teacher non-realizable so the mid widths overfit visibly.
PROFILES = {
    "desk": {
        "widths": [16, 32, 64, 80, 96, 128, 256, 512, 1024],
        "max_epochs": 300, "min_epochs": 0, "eval_every": 50,
        "schedule": "warmup20000step25", "base_lr": 1.0, "batch_size": 128,
        "probe_pairs": 10000, "dataset.label_noise": 0.2,
    },
    "paper": {
        "widths": [16, 32, 64, 80, 96, 128, 256, 512, 1024, 2048, 4096,
                   8192, 16384, 32768, 65536, 131072],
        "max_epochs": 300000, "min_epochs": 10000, "eval_every": 1000,
        "schedule": "warmup20000step25", "base_lr": 0.005, "batch_size": 512,
        "probe_pairs": 100000,
    },
}


def apply_profile(d: dict, profile: str) -> dict:
    if profile not in PROFILES:
        raise KeyError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    return apply_overrides(d, PROFILES[profile])


# ---------------------------------------------------------------------------
# Parameter counts and the interpolation threshold


def ff_param_count(input_dim: int, widths, output_dim: int) -> int:
    dims = [int(input_dim), *[int(w) for w in widths], int(output_dim)]
    return sum(dims[i] * dims[i + 1] for i in range(len(dims) - 1))


def cnn_param_count(width: int) -> int:
    # 4 conv kernels (27w + 18w^2 + 72w^2 + 288w^2) plus the 10-way head (80w).
    w = int(width)
    return 378 * w * w + 107 * w


def interpolation_threshold(n_samples: int, input_dim: int, output_dim: int,
                            loss: str, depth: int = 1, family: str = "ff") -> int:
    """Smallest width whose parameter count reaches the interpolation target.

    The target is n for cross-entropy and K·n for MSE (K outputs can
    each be interpolated).  Width-uniform depth-d stacks are solved by
    bisection on the monotone parameter count.
    """
    if loss not in STOP_THRESHOLDS:
        raise ValueError(f"unknown loss kind {loss!r}")
    target = int(n_samples) * (int(output_dim) if loss == "mse" else 1)

    if family == "cnn":
        count = cnn_param_count
    elif family == "ff":
        def count(w: int) -> int:
            return ff_param_count(input_dim, [w] * depth, output_dim)
    else:
        raise ValueError(f"unknown family {family!r}")

    lo, hi = 1, 1
    while count(hi) < target:
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if count(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


# ---------------------------------------------------------------------------
# Data and cell construction


def build_data(cfg: ExperimentConfig) -> DataPair:
    ds = cfg.dataset
    kind = ds["kind"]
    if kind == "synthetic":
        train_d, test_d = synthetic_fallback(ds["n_train"], ds["n_test"], ds["d"],
                                             ds["num_classes"], ds["seed"])
    elif kind == "mnist1d":
        train_d, test_d = load_mnist1d(ds["path"])
    elif kind == "cifar10":
        train_d, test_d = load_cifar10(ds["path"])
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if ds.get("subsample"):
        train_d = subsample(train_d, ds["subsample"], ds.get("subsample_seed", 0))
    noise = ds.get("label_noise")
    if noise:
        train_d = shuffle_labels(train_d, noise, ds.get("noise_seed", 0))
        if ds.get("corrupt_test"):
            test_d = shuffle_labels(test_d, noise, ds.get("noise_seed", 0))
    return DataPair(train_d, test_d)


def _axis_sizes(cfg: ExperimentConfig, axis: str) -> list:
    if axis == "width":
        return list(cfg.widths)
    if axis == "depth":
        return list(cfg.depths)
    if axis == "samples":
        return list(cfg.samples_list)
    if axis == "noise":
        return list(cfg.noise_list)
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _cell_config(cfg: ExperimentConfig, axis: str, size) -> ExperimentConfig:
    """Specialize the sweep config to one grid cell along the axis."""
    if axis in ("width", "depth"):
        return cfg
    ds = dict(cfg.dataset)
    if axis == "samples":
        ds["subsample"] = int(size)
    else:
        ds["label_noise"] = float(size)
    return replace(cfg, dataset=ds)


def _cell_net(cfg: ExperimentConfig, axis: str, size, seed: int, input_dim: int, k: int):
    if cfg.family == "cnn":
        width = int(size) if axis == "width" else cfg.width
        return init_cnn(width, seed)
    if axis == "width":
        widths = [int(size)] * cfg.depth
    elif axis == "depth":
        widths = [cfg.width] * int(size)
    else:
        widths = [cfg.width] * cfg.depth
    return init_ff(input_dim, widths, k, seed)


def run_cell(cfg: ExperimentConfig, axis: str, size, seed: int):
    """Train one grid cell and return its SweepRecord dicts (epoch 0 included)."""
    cell_cfg = _cell_config(cfg, axis, size)
    data = build_data(cell_cfg)
    net = _cell_net(cfg, axis, size, seed, data.train_x.shape[1], data.num_classes)
    chash = cfg.config_hash()
    settings = cfg.settings()
    # The samples axis can shrink the train set below the configured batch
    # size; the cell then runs full-batch.
    batch_size = min(cfg.batch_size, data.train_x.shape[0])
    upe = updates_per_epoch(data.train_x.shape[0], batch_size)
    schedule = LrSchedule(cfg.schedule, upe)
    theta0 = net.param_vector()

    records = []

    def log(epoch: int, current, train_loss, test_loss, grad_norm, eta):
        c_low, c_avg, _ = lower_bound(current, data.train_x)
        records.append({
            "config_hash": chash, "size": size, "seed": seed, "epoch": epoch,
            "train_loss": train_loss, "test_loss": test_loss,
            "c_lower": c_low, "c_avg_norm": c_avg,
            "c_upper": upper_bound(current, settings),
            "param_dist": param_distance(current, theta0),
            "grad_norm": grad_norm, "eta": eta})

    loss0, grad0 = param_grad(net, data.train_x, data.train_y, cfg.loss)
    log(0, net, loss0, dataset_loss(net, data.test_x, data.test_y, cfg.loss),
        float(np.linalg.norm(grad0)), schedule.coeff(0))

    def on_epoch(epoch, current, rec):
        if epoch % cfg.eval_every == 0:
            log(epoch, current, rec.train_loss, rec.test_loss, rec.grad_norm, rec.eta)

    opt = make_optimizer(cfg.optimizer, cfg.base_lr)
    trace = train(net, data, cfg.loss, opt, cfg.schedule, cfg.stop_rule(),
                  batch_size, seed, on_epoch=on_epoch)
    final = trace.final
    if final.epoch % cfg.eval_every != 0:
        log(final.epoch, net, final.train_loss, final.test_loss,
            final.grad_norm, final.eta)
    return records


def _cell_worker(args):
    cfg_dict, axis, size, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        return run_cell(cfg, axis, size, seed), None
    except DivergenceError as err:
        return [], {"size": size, "seed": seed, "epoch": err.epoch, "error": str(err)}


def run_sweep(cfg: ExperimentConfig, axis: str, out_dir=None):
    """Run the full grid for one axis; returns (records, summary, failures).

    Cells run on a process pool when the LIPTRACK_WORKERS environment
    variable asks for more than one worker; output order is fixed either
    way so results are reproducible.
    """
    sizes = _axis_sizes(cfg, axis)
    tasks = [(cfg.to_dict(), axis, size, seed) for size in sizes for seed in cfg.seeds]
    workers = int(os.environ.get(ENV_WORKERS, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_worker, tasks))
    else:
        results = [_cell_worker(t) for t in tasks]
    records = []
    failures = []
    for recs, failure in results:
        records.extend(recs)
        if failure is not None:
            failures.append(failure)
    summary = summarize(records)
    if out_dir is not None:
        write_run_dir(cfg, axis, records, summary, failures, out_dir)
    return records, summary, failures


def run_width_sweep(cfg: ExperimentConfig, out_dir=None):
    return run_sweep(cfg, "width", out_dir)


def run_depth_sweep(cfg: ExperimentConfig, out_dir=None):
    return run_sweep(cfg, "depth", out_dir)


def run_samples_sweep(cfg: ExperimentConfig, out_dir=None):
    return run_sweep(cfg, "samples", out_dir)


def run_noise_sweep(cfg: ExperimentConfig, out_dir=None):
    return run_sweep(cfg, "noise", out_dir)


# ---------------------------------------------------------------------------
# Aggregation and output files


def final_records(records) -> dict:
    """Last logged record per (size, seed) cell."""
    finals = {}
    for rec in records:
        key = (rec["size"], rec["seed"])
        if key not in finals or rec["epoch"] > finals[key]["epoch"]:
            finals[key] = rec
    return finals


def summarize(records) -> list[dict]:
    """Seed-averaged summary: mean/min/max of each final-epoch metric per size."""
    finals = final_records(records)
    by_size: dict = {}
    for (size, _seed), rec in sorted(finals.items(), key=lambda kv: (float(kv[0][0]), kv[0][1])):
        by_size.setdefault(size, []).append(rec)
    rows = []
    for size in sorted(by_size, key=lambda s: float(s)):
        cell = by_size[size]
        row = {"size": size, "seeds": len(cell)}
        for metric in SUMMARY_METRICS:
            values = [r[metric] for r in cell]
            row[f"{metric}_mean"] = float(np.mean(values))
            row[f"{metric}_min"] = float(np.min(values))
            row[f"{metric}_max"] = float(np.max(values))
        rows.append(row)
    return rows


def summary_columns() -> list[str]:
    cols = ["size", "seeds"]
    for metric in SUMMARY_METRICS:
        cols += [f"{metric}_mean", f"{metric}_min", f"{metric}_max"]
    return cols


def write_records_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in RECORD_KEYS}) + "\n")


def read_records_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_summary_csv(rows, path) -> None:
    cols = summary_columns()
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in cols})


def write_run_dir(cfg: ExperimentConfig, axis: str, records, summary, failures, out_dir) -> Path:
    run_dir = Path(out_dir) / f"run-{cfg.config_hash()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps({"axis": axis, "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    write_records_jsonl(records, run_dir / "records.jsonl")
    write_summary_csv(summary, run_dir / "summary.csv")
    if failures:
        (run_dir / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return run_dir


PLOT_KINDS = ("bounds-vs-width", "bounds-vs-epoch", "variance-vs-width", "param-dist-vs-width")


def emit_plot_data(rows, plot_kind: str, path, size=None) -> None:
    """Write a log-scale-ready CSV for one figure family.

    ``rows`` is the summary table (or raw records for the vs-epoch kind,
    filtered to one ``size``); values are written untransformed.
    """
    if plot_kind == "bounds-vs-width":
        cols = ["size", "test_loss_mean", "train_loss_mean", "c_lower_mean", "c_lower_min",
                "c_lower_max", "c_avg_norm_mean", "c_upper_mean"]
        out = [{k: row[k] for k in cols} for row in rows]
    elif plot_kind == "param-dist-vs-width":
        cols = ["size", "param_dist_mean", "param_dist_min", "param_dist_max"]
        out = [{k: row[k] for k in cols} for row in rows]
    elif plot_kind == "variance-vs-width":
        cols = ["width", "bias_sq", "variance", "test_loss", "bound_v1_lower",
                "bound_v2_lower", "bound_v1_upper", "bound_v2_upper"]
        out = [{k: row[k] for k in cols} for row in rows]
    elif plot_kind == "bounds-vs-epoch":
        picked = [r for r in rows if size is None or r["size"] == size]
        by_epoch: dict = {}
        for rec in picked:
            by_epoch.setdefault(rec["epoch"], []).append(rec)
        cols = ["epoch", "train_loss_mean", "test_loss_mean", "c_lower_mean",
                "c_avg_norm_mean", "c_upper_mean", "param_dist_mean"]
        out = []
        for epoch in sorted(by_epoch):
            cell = by_epoch[epoch]
            row = {"epoch": epoch}
            for metric in ("train_loss", "test_loss", "c_lower", "c_avg_norm",
                           "c_upper", "param_dist"):
                row[f"{metric}_mean"] = float(np.mean([r[metric] for r in cell]))
            out.append(row)
    else:
        raise ValueError(f"unknown plot kind {plot_kind!r}; expected one of {PLOT_KINDS}")
    if not out:
        raise ValueError(f"no rows to plot for {plot_kind!r}")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in out:
            writer.writerow(row)
