"""Train-once cache for the slow tests: runs are keyed by config text and source digest."""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import nina
from nina.checkpoint import load_checkpoint
from nina.config import RunConfig, load_config
from nina.experiment import make_data, save_run, train_model
from nina.training import RunRecord

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
CACHE = Path(os.environ.get("NINA_TEST_CACHE", ROOT / ".cache" / "runs"))
RETRAIN = os.environ.get("NINA_TEST_RETRAIN") == "1"


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(nina.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()


def config(name: str, *overrides: str) -> RunConfig:
    return load_config(CONFIGS / f"{name}.txt", list(overrides))


def trained(cfg: RunConfig):
    """Returns ``(model, record, train_set, heldout_set, train_wall_s)``; trains on a cache miss."""
    key = hashlib.sha256((cfg.to_text() + _source_digest()).encode()).hexdigest()[:20]
    out = CACHE / key
    meta = out / "meta.json"
    if meta.is_file() and not RETRAIN:
        model, _ = load_checkpoint(out / "checkpoint.json")
        record = RunRecord.read_jsonl(out / "run.jsonl")
        train_set, held = make_data(cfg)
        return model, record, train_set, held, json.loads(meta.read_text())["train_wall_s"]
    t0 = time.perf_counter()
    model, record, train_set, held = train_model(cfg)
    wall = time.perf_counter() - t0
    save_run(out, model, record, cfg)
    meta.write_text(json.dumps({"train_wall_s": wall}))
    return model, record, train_set, held, wall
