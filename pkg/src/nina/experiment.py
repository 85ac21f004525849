"""Train / evaluate / sweep orchestration on top of the library modules."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import taskgen
from .config import RunConfig
from .decoder import NinaDecoder, heldout_nll, train
from .diffusion import DdpmDecoder, matched_hidden, train_ddpm
from .training import RunRecord

ABLATION_GRID = {
    "noise": [0.0, 0.01, 0.03, 0.05, 0.1],
    "depth": [4, 8, 18, 28],
    "hidden": [16, 32, 64, 128, 256],
}
ABLATION_FIELDS = {"noise": "sigma_noise", "depth": "depth", "hidden": "hidden"}
CSV_COLUMNS = ["axis", "value", "seed", "heldout_nll", "success_rate", "params", "train_wall_s"]


def make_data(cfg: RunConfig) -> tuple[taskgen.TaskDataset, taskgen.TaskDataset]:
    spec = taskgen.get_task(cfg.task)
    return taskgen.generate_dataset(spec, cfg.dataset_size, cfg.seed).split()


def matched_ddpm_width(cfg: RunConfig, spec: taskgen.TaskSpec) -> int:
    """DDPM width whose size matches a nina-transformer with the same depth/width/N."""
    nina = NinaDecoder.build(replace(cfg, model="nina-transformer", seed=cfg.seed)
                             .flow_config(spec.horizon, spec.action_dim, spec.ctx_dim))
    return matched_hidden(nina.num_parameters(), cfg.ddpm_config(spec.horizon, spec.action_dim,
                                                                 spec.ctx_dim))


def train_model(cfg: RunConfig, data=None):
    """Returns ``(model, record, train_set, heldout_set)``."""
    train_set, held = data if data is not None else make_data(cfg)
    spec = train_set.spec
    tc = cfg.train_config(len(train_set))
    heldout = (held.actions, held.contexts)
    if cfg.model == "ddpm":
        dcfg = cfg.ddpm_config(spec.horizon, spec.action_dim, spec.ctx_dim)
        if cfg.match_params:
            dcfg = replace(dcfg, hidden=matched_ddpm_width(cfg, spec))
        model, record = train_ddpm(train_set.actions, train_set.contexts, dcfg, tc, heldout)
    else:
        fcfg = cfg.flow_config(spec.horizon, spec.action_dim, spec.ctx_dim)
        model, record = train(train_set.actions, train_set.contexts, fcfg, tc, heldout)
    record.config = {**cfg.to_dict(), **record.config, "model": cfg.model}
    return model, record, train_set, held


def evaluate(model, cfg: RunConfig, held: taskgen.TaskDataset) -> dict:
    """Held-out NLL and gap to the task entropy (flows only) plus success rate."""
    spec = held.spec
    out = {}
    if isinstance(model, NinaDecoder):
        nll = heldout_nll(model, held.actions, held.contexts)
        out["heldout_nll"] = nll
        out["entropy"] = taskgen.entropy(spec)
        out["nll_gap"] = nll - out["entropy"]
    count = min(cfg.eval_samples, len(held))
    rng = np.random.default_rng(cfg.seed + 12345)
    samples = model.sample(held.contexts[:count], rng)
    out["success_rate"] = taskgen.success_rate(samples, held.contexts[:count], spec, cfg.radius)
    return out


def save_run(out_dir: str | Path, model, record: RunRecord, cfg: RunConfig) -> Path:
    from .checkpoint import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", model, cfg.to_dict())
    record.write_jsonl(out / "run.jsonl")
    (out / "config.txt").write_text(cfg.to_text())
    return out


def ablate(cfg: RunConfig, axis: str, values=None, seeds=(0, 1, 2), log=print) -> list[dict]:
    """Train one model per (value, seed) cell and collect the sweep rows."""
    if axis not in ABLATION_GRID:
        raise ValueError(f"axis must be one of {sorted(ABLATION_GRID)}")
    values = ABLATION_GRID[axis] if values is None else list(values)
    field = ABLATION_FIELDS[axis]
    rows = []
    for value in values:
        for seed in seeds:
            cell = replace(cfg, **{field: type(getattr(cfg, field))(value), "seed": int(seed)}).validate()
            t0 = time.perf_counter()
            model, _, _, held = train_model(cell)
            wall = time.perf_counter() - t0
            metrics = evaluate(model, cell, held)
            row = {"axis": axis, "value": value, "seed": seed,
                   "heldout_nll": metrics.get("heldout_nll", float("nan")),
                   "success_rate": metrics["success_rate"], "params": model.num_parameters(),
                   "train_wall_s": round(wall, 3)}
            rows.append(row)
            if log:
                log(", ".join(f"{k}={v}" for k, v in row.items()))
    return rows


def write_sweep_csv(path: str | Path, rows: list[dict], cfg: RunConfig) -> None:
    """Comment lines carry the code version and base config; then a fixed-column table."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# code_version={__version__}\n")
        fh.write(f"# run_config={json.dumps(cfg.to_dict(), sort_keys=True)}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def noise_summary(rows: list[dict]) -> dict:
    """Mean held-out NLL per noise level, and whether 0.03 beats 0."""
    by = {}
    for r in rows:
        by.setdefault(float(r["value"]), []).append(float(r["heldout_nll"]))
    means = {k: float(np.mean(v)) for k, v in sorted(by.items())}
    beats = means.get(0.03, np.inf) < means.get(0.0, -np.inf) if 0.03 in means and 0.0 in means else None
    return {"mean_heldout_nll": means, "sigma_0.03_beats_0": beats}
