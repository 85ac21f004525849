"""Minibatch training loop shared by the flow decoder and the diffusion baseline."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import diffcore as dc
from .diffcore import Module, Tensor
from .optim import AdamW, clip_grad_norm, cosine_lr


class DivergenceError(RuntimeError):
    """Loss became non-finite or grew past the divergence threshold."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 80
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    clip: float = 1.0
    eval_every: int = 500
    seed: int = 0
    divergence_factor: float = 10.0


@dataclass
class RunRecord:
    """Ordered metric events plus the configuration that produced them."""

    config: dict = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def log(self, step: int, name: str, value: float) -> None:
        wall_ms = (time.perf_counter() - self._t0) * 1e3
        self.events.append({"step": int(step), "wall_ms": round(wall_ms, 3),
                            "metric_name": name, "value": float(value)})

    def values(self, name: str) -> list[float]:
        return [e["value"] for e in self.events if e["metric_name"] == name]

    def metrics(self) -> list[tuple[int, str, float]]:
        """Events without wall times; equal for equal config and seed."""
        return [(e["step"], e["metric_name"], e["value"]) for e in self.events]

    def write_jsonl(self, path: str | Path) -> None:
        header = {"step": -1, "wall_ms": 0.0, "metric_name": "run_config",
                  "value": {**self.config, "code_version": __version__}}
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for event in self.events:
                fh.write(json.dumps(event) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "RunRecord":
        rec = cls()
        with open(path) as fh:
            for line in fh:
                event = json.loads(line)
                if event["metric_name"] == "run_config":
                    rec.config = event["value"]
                else:
                    rec.events.append(event)
        return rec


def fit(model: Module, loss_fn: Callable[[np.ndarray, np.random.Generator], Tensor],
        n_train: int, cfg: TrainConfig, record: RunRecord | None = None,
        evaluate: Callable[[], dict] | None = None,
        after_step: Callable[[], None] | None = None) -> RunRecord:
    """Run ``cfg.steps`` AdamW updates on shuffled minibatches of ``range(n_train)``.

    ``loss_fn(indices, rng)`` must build the loss; it is called inside a fresh tape.
    """
    if n_train < 1:
        raise ValueError("training set is empty")
    record = record if record is not None else RunRecord()
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    batch = min(cfg.batch, n_train)
    order = rng.permutation(n_train)
    cursor = 0
    initial = None
    for step in range(cfg.steps):
        if cursor + batch > n_train:
            order, cursor = rng.permutation(n_train), 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        opt.zero_grad()
        with dc.Tape() as tape:
            try:
                loss = loss_fn(idx, rng)
            except dc.NonFiniteError as err:
                raise DivergenceError(f"step {step}: {err}") from err
            value = float(loss.data)
            if initial is None:
                initial = value
            if not math.isfinite(value) or value > cfg.divergence_factor * abs(initial) + 1e-12 and step:
                raise DivergenceError(
                    f"step {step}: loss {value:.4g} exceeds {cfg.divergence_factor}x initial {initial:.4g}")
            tape.backward(loss)
        gnorm = clip_grad_norm(params, cfg.clip)
        opt.step(cosine_lr(step, cfg.steps, cfg.lr))
        if after_step is not None:
            after_step()
        record.log(step, "loss", value)
        record.log(step, "grad_norm", gnorm)
        last = step == cfg.steps - 1
        if evaluate is not None and cfg.eval_every > 0 and ((step + 1) % cfg.eval_every == 0 or last):
            for name, val in evaluate().items():
                record.log(step, name, val)
    return record


def config_dict(*configs) -> dict:
    out = {}
    for c in configs:
        out.update(asdict(c) if hasattr(c, "__dataclass_fields__") else dict(c))
    return out
