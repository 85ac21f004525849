"""Per-sample generation latency at batch size 1, single-threaded."""

from __future__ import annotations

import csv
import gc
import platform
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .decoder import NinaDecoder
from .diffusion import DdpmDecoder

MIN_TRIALS = 100
MIN_WARMUP = 10


@dataclass
class BenchResult:
    model_id: str
    params: int
    times_ns: list[int] = field(repr=False)
    calls_per_sample: float
    host: str = ""

    @property
    def p50(self) -> float:
        return float(np.percentile(self.times_ns, 50))

    @property
    def p99(self) -> float:
        return float(np.percentile(self.times_ns, 99))

    def row(self) -> dict:
        return {"model_id": self.model_id, "params": self.params, "trials": len(self.times_ns),
                "p50_ms": self.p50 / 1e6, "p99_ms": self.p99 / 1e6,
                "calls_per_sample": self.calls_per_sample, "host": self.host}


def _calls(model) -> int:
    if isinstance(model, NinaDecoder):
        return model.stack.counts["coupling"]
    return model.calls


def time_model(model_id: str, model, h: np.ndarray, trials: int = MIN_TRIALS,
               warmup: int = MIN_WARMUP, seed: int = 0) -> BenchResult:
    """Time ``trials`` single-sample draws after ``warmup`` untimed draws.

    Only the sampling call sits inside the timed region.
    """
    if trials < MIN_TRIALS or warmup < MIN_WARMUP:
        raise ValueError(f"need >= {MIN_TRIALS} trials and >= {MIN_WARMUP} warmup samples")
    if not isinstance(model, (NinaDecoder, DdpmDecoder)):
        raise TypeError(f"cannot benchmark {type(model).__name__}")
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    rng = np.random.default_rng(seed)
    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            model.sample(h, rng)
        before = _calls(model)
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for _ in range(trials):
                t0 = time.perf_counter_ns()
                model.sample(h, rng)
                times.append(time.perf_counter_ns() - t0)
        finally:
            if gc_was_enabled:
                gc.enable()
        calls = (_calls(model) - before) / trials
    return BenchResult(model_id, model.num_parameters(), times, calls, host=platform.node())


def bench_latency(models: Sequence[tuple[str, object]], h: np.ndarray, trials: int = MIN_TRIALS,
                  warmup: int = MIN_WARMUP, seed: int = 0) -> list[BenchResult]:
    return [time_model(name, m, h, trials, warmup, seed) for name, m in models]


def ratio_table(results: Sequence[BenchResult]) -> list[dict]:
    """Median-time ratio of every flow result against every diffusion result."""
    flows = [r for r in results if r.model_id.startswith("nina")]
    diffs = [r for r in results if not r.model_id.startswith("nina")]
    return [{"flow": f.model_id, "baseline": d.model_id, "median_ratio": f.p50 / d.p50}
            for f in flows for d in diffs]


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return float(1 - np.sum(resid ** 2) / ss_tot) if ss_tot > 0 else 1.0


def write_csv(path, results: Sequence[BenchResult], extra: dict | None = None) -> None:
    rows = [{**r.row(), **(extra or {})} for r in results]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def format_table(results: Sequence[BenchResult]) -> str:
    lines = [f"{'model':<28}{'params':>10}{'p50 ms':>10}{'p99 ms':>10}{'calls':>8}"]
    for r in results:
        lines.append(f"{r.model_id:<28}{r.params:>10d}{r.p50 / 1e6:>10.3f}{r.p99 / 1e6:>10.3f}"
                     f"{r.calls_per_sample:>8.1f}")
    for row in ratio_table(results):
        lines.append(f"ratio {row['flow']} / {row['baseline']}: {row['median_ratio']:.3f}")
    return "\n".join(lines)
