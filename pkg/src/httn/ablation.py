"""Grid runner for ablation sweeps over model axes."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import time
from concurrent.futures import ProcessPoolExecutor

from .episodes import evaluate
from .errors import ConfigError
from .gtmt import elstc_dims
from .model import ADAPTER_MODES, HTTN, MOMENT_MODES, ModelConfig
from .trainer import TrainConfig, count_trainable, train

AXES = {
    "moment_mode": set(MOMENT_MODES),
    "adapter_mode": set(ADAPTER_MODES),
    "L": {0, 1, 2, 3, 4},
    "G": {1, 2, 4, 8},
    "share_down": {True, False},
}

COLUMNS = ["cell", "moment_mode", "adapter_mode", "L", "G", "share_down", "cov_dim",
           "accuracy", "ci95", "trainable_params", "peak_memory_bytes", "wall_time_s"]


def expand_grid(axes: dict, base: ModelConfig) -> list:
    """Every cell's ModelConfig, validated before anything runs."""
    if not axes:
        raise ConfigError("ablation needs at least one axis")
    for name, values in axes.items():
        if name not in AXES:
            raise ConfigError(f"unknown ablation axis {name!r}; expected one of {sorted(AXES)}")
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"axis {name!r} needs a non-empty list of values")
        bad = [v for v in values if v not in AXES[name] or type(v) is not type(next(iter(AXES[name])))]
        if bad:
            raise ConfigError(f"invalid values {bad} for axis {name!r}; allowed {sorted(AXES[name], key=str)}")
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        cfg = dataclasses.replace(base, **dict(zip(names, combo)))
        if cfg.adapter_mode == "TAA" and cfg.L > cfg.depth:
            cfg = dataclasses.replace(cfg, depth=cfg.L)
        cells.append(cfg.validate())
    return cells


def cov_dim(cfg: ModelConfig):
    if cfg.moment_mode == "GAP":
        return ""
    return elstc_dims(cfg.T, cfg.C, cfg.tau, cfg.group_count)[1]


def run_cell(index: int, cfg: ModelConfig, train_cfg: TrainConfig, eval_cfg, train_manifest, eval_manifest,
             train_features=None, eval_features=None, dry_run: bool = False) -> dict:
    row = {
        "cell": index, "moment_mode": cfg.moment_mode, "adapter_mode": cfg.adapter_mode, "L": cfg.L,
        "G": cfg.G, "share_down": cfg.share_down, "cov_dim": cov_dim(cfg),
        "accuracy": "", "ci95": "", "trainable_params": cfg.closed_form_trainable(),
        "peak_memory_bytes": "", "wall_time_s": "",
    }
    if dry_run:
        return row
    t0 = time.perf_counter()
    model = HTTN(cfg, seed=train_cfg.seed)
    row["trainable_params"] = count_trainable(model)
    result = train(train_cfg, train_manifest, model, features=train_features)
    report = evaluate(model, eval_manifest, eval_cfg.episodes, eval_cfg.N, eval_cfg.K, eval_cfg.Q,
                      seed=train_cfg.seed, features=eval_features)
    row.update(accuracy=round(report.mean_accuracy, 4), ci95=round(report.ci95, 4),
               peak_memory_bytes=result.peak_bytes, wall_time_s=round(time.perf_counter() - t0, 3))
    return row


def _run_cell_star(args):
    return run_cell(*args)


def run_ablation(cells: list, train_cfg, eval_cfg, train_manifest=None, eval_manifest=None,
                 dry_run: bool = False, workers: int = 1, train_features=None, eval_features=None) -> list:
    if not dry_run and (train_manifest is None or eval_manifest is None):
        raise ConfigError("ablation needs data.train_manifest and data.eval_manifest unless ablate.dry_run is set")
    if not dry_run:
        train_features = train_features if train_features is not None else train_manifest.load_all()
        eval_features = eval_features if eval_features is not None else eval_manifest.load_all()
    jobs = [(i, c, train_cfg, eval_cfg, train_manifest, eval_manifest, train_features, eval_features, dry_run)
            for i, c in enumerate(cells)]
    if workers > 1 and not dry_run:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_cell_star, jobs))
    else:
        rows = [_run_cell_star(j) for j in jobs]
    return sorted(rows, key=lambda r: r["cell"])


def write_rows(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        w.writerows(rows)
