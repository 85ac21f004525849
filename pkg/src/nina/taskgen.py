"""Synthetic conditional imitation tasks with closed-form mixture densities.

Each task has a handful of contexts; context ``c`` owns a diagonal Gaussian
mixture over ``(H, D)`` action chunks. The context embedding carries a
one-hot identity block in token 0, optionally followed by per-sample
Gaussian distractor coordinates.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2 * math.pi)
MAGIC = b"NINADS1\n"


@dataclass
class TaskSpec:
    name: str
    horizon: int
    action_dim: int
    ctx_dim: int
    ctx_tokens: int
    means: np.ndarray      # (contexts, modes, H, D)
    stds: np.ndarray       # (contexts, modes, H, D)
    weights: np.ndarray    # (contexts, modes)
    distractors: int = 0
    context_probs: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.context_probs is None:
            self.context_probs = np.full(self.n_contexts, 1.0 / self.n_contexts)
        self.context_probs = np.asarray(self.context_probs, dtype=np.float64)
        self.validate()

    @property
    def n_contexts(self) -> int:
        return self.means.shape[0]

    @property
    def n_modes(self) -> int:
        return self.means.shape[1]

    @property
    def n(self) -> int:
        return self.horizon * self.action_dim

    def validate(self) -> None:
        shape = (self.n_contexts, self.n_modes, self.horizon, self.action_dim)
        if self.means.shape != shape or self.stds.shape != shape:
            raise ValueError(f"means/stds must have shape {shape}")
        if self.weights.shape != shape[:2]:
            raise ValueError(f"weights must have shape {shape[:2]}")
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("mode weights must be nonnegative and sum to 1 per context")
        if np.any(self.stds < 0):
            raise ValueError("mode standard deviations must be >= 0")
        if self.ctx_dim < self.n_contexts + self.distractors:
            raise ValueError("ctx_dim too small for identity and distractor coordinates")
        if self.ctx_tokens < 1 or self.horizon < 1 or self.action_dim < 1:
            raise ValueError("dimensions must be positive")
        if not np.isclose(self.context_probs.sum(), 1.0):
            raise ValueError("context probabilities must sum to 1")

    def context_embedding(self, context_id: int) -> np.ndarray:
        """Noise-free ``(M, C)`` embedding for a context."""
        h = np.zeros((self.ctx_tokens, self.ctx_dim))
        h[0, context_id] = 1.0
        return h

    def decode_context(self, h: np.ndarray) -> np.ndarray:
        """Recover context ids from ``(B, M, C)`` or ``(M, C)`` embeddings."""
        h = np.asarray(h)
        if h.ndim == 2:
            h = h[None]
        return np.argmax(h[:, 0, :self.n_contexts], axis=1)

    def to_json(self) -> dict:
        return {"name": self.name, "horizon": self.horizon, "action_dim": self.action_dim,
                "ctx_dim": self.ctx_dim, "ctx_tokens": self.ctx_tokens,
                "means": self.means.tolist(), "stds": self.stds.tolist(),
                "weights": self.weights.tolist(), "distractors": self.distractors,
                "context_probs": self.context_probs.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "TaskSpec":
        return cls(**doc)


@dataclass
class TaskSample:
    h: np.ndarray
    a: np.ndarray
    mode_id: int


@dataclass
class TaskDataset:
    spec: TaskSpec
    contexts: np.ndarray     # (N, M, C)
    actions: np.ndarray      # (N, H, D)
    mode_ids: np.ndarray     # (N,)
    context_ids: np.ndarray  # (N,)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> TaskSample:
        return TaskSample(self.contexts[i], self.actions[i], int(self.mode_ids[i]))

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(self.spec, self.contexts[idx], self.actions[idx],
                           self.mode_ids[idx], self.context_ids[idx], self.seed)

    def split(self, fraction: float = 0.1) -> tuple["TaskDataset", "TaskDataset"]:
        """(train, heldout) by a seed-stable hash of each sample index."""
        held = heldout_mask(len(self), self.seed, fraction)
        return self.subset(~held), self.subset(held)


def heldout_mask(count: int, seed: int, fraction: float = 0.1) -> np.ndarray:
    buckets = 10_000
    cut = int(round(fraction * buckets))
    out = np.empty(count, dtype=bool)
    for i in range(count):
        digest = hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest()
        out[i] = int.from_bytes(digest, "little") % buckets < cut
    return out


# -------------------------------------------------------------------- suite


def _min_separation(means: np.ndarray) -> float:
    flat = means.reshape(means.shape[0], -1)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    return float(d[~np.eye(len(flat), dtype=bool)].min()) if len(flat) > 1 else math.inf


def bimodal2d(sigma: float = 0.1, radius: float = 1.5) -> TaskSpec:
    """Two contexts, each with two antipodal modes in the plane."""
    angles = [0.0, math.pi / 2]
    means = np.array([[[[radius * math.cos(t), radius * math.sin(t)]],
                       [[-radius * math.cos(t), -radius * math.sin(t)]]] for t in angles])
    return TaskSpec("bimodal2d", 1, 2, 2, 1, means, np.full(means.shape, sigma),
                    np.full((2, 2), 0.5))


def chunked8(sigma: float = 0.1, distractors: int = 0, seed: int = 7) -> TaskSpec:
    """Four contexts x three modes of smooth 8-step, 4-dim trajectories."""
    rng = np.random.default_rng(seed)
    horizon, dim, contexts, modes = 8, 4, 4, 3
    ramp = (np.arange(1, horizon + 1) / horizon)[:, None]
    means = np.empty((contexts, modes, horizon, dim))
    for c in range(contexts):
        while True:
            start = 0.5 * rng.standard_normal(dim)
            goals = rng.standard_normal((modes, dim))
            block = start + ramp[None] * goals[:, None, :]
            if _min_separation(block) >= 20 * sigma:
                break
        means[c] = block
    name = "distractor" if distractors else "chunked8"
    return TaskSpec(name, horizon, dim, contexts + distractors, 1, means,
                    np.full(means.shape, sigma), np.full((contexts, modes), 1.0 / modes),
                    distractors=distractors)


def distractor(sigma: float = 0.1) -> TaskSpec:
    return chunked8(sigma, distractors=16)


TASKS = {"bimodal2d": bimodal2d, "chunked8": chunked8, "distractor": distractor}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]()
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


# ----------------------------------------------------------------- sampling


def generate_dataset(spec: TaskSpec, count: int, seed: int) -> TaskDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    spec.validate()
    rng = np.random.default_rng(seed)
    ctx = rng.choice(spec.n_contexts, size=count, p=spec.context_probs)
    u = rng.random(count)
    cdf = np.cumsum(spec.weights[ctx], axis=1)
    modes = np.minimum((u[:, None] >= cdf).sum(axis=1), spec.n_modes - 1)
    noise = rng.standard_normal((count, spec.horizon, spec.action_dim))
    actions = spec.means[ctx, modes] + spec.stds[ctx, modes] * noise
    contexts = np.zeros((count, spec.ctx_tokens, spec.ctx_dim))
    contexts[np.arange(count), 0, ctx] = 1.0
    if spec.distractors:
        lo = spec.n_contexts
        contexts[:, 0, lo:lo + spec.distractors] = rng.standard_normal((count, spec.distractors))
    return TaskDataset(spec, contexts, actions, modes, ctx, seed)


def sample_true(spec: TaskSpec, context_id: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw actions from the generating mixture of one context."""
    modes = rng.choice(spec.n_modes, size=count, p=spec.weights[context_id])
    noise = rng.standard_normal((count, spec.horizon, spec.action_dim))
    return spec.means[context_id, modes] + spec.stds[context_id, modes] * noise


# ------------------------------------------------------------------- oracles


def component_log_probs(a: np.ndarray, context_ids: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """``log w_k + log N(a; mu_k, diag sd_k^2)`` per sample and mode, shape ``(B, modes)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1, spec.horizon, spec.action_dim)
    mu = spec.means[context_ids]
    sd = spec.stds[context_ids]
    if np.any(sd <= 0):
        raise ValueError("log-density undefined for zero-variance modes")
    z = (a - mu) / sd
    lp = -0.5 * (z * z) - np.log(sd) - 0.5 * LOG_2PI
    with np.errstate(divide="ignore"):
        logw = np.log(spec.weights[context_ids])
    return lp.sum(axis=(2, 3)) + logw


def true_log_prob(a: np.ndarray, h: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Exact mixture log-density of each chunk under its context's mixture."""
    ctx = spec.decode_context(h)
    a = np.asarray(a, dtype=np.float64).reshape(-1, spec.horizon, spec.action_dim)
    if len(ctx) == 1 and len(a) > 1:
        ctx = np.repeat(ctx, len(a))
    return logsumexp(component_log_probs(a, ctx, spec), axis=1)


def entropy(spec: TaskSpec) -> float:
    """Conditional differential entropy ``H(a | h)`` in nats.

    Uses ``sum_k w_k H(N_k) - sum_k w_k log w_k``, which is exact up to terms
    that vanish with mode overlap; the suite keeps modes >= 20 sd apart.
    """
    comp = np.sum(np.log(spec.stds), axis=(2, 3)) + 0.5 * spec.n * (1 + LOG_2PI)
    w = spec.weights
    with np.errstate(divide="ignore", invalid="ignore"):
        mix = -np.where(w > 0, w * np.log(w), 0.0).sum(axis=1)
    per_context = (w * comp).sum(axis=1) + mix
    return float(spec.context_probs @ per_context)


def entropy_mc(spec: TaskSpec, count: int, seed: int) -> float:
    data = generate_dataset(spec, count, seed)
    return float(-true_log_prob(data.actions, data.contexts, spec).mean())


def mode_distance(a: np.ndarray, context_ids: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Per-dimension RMS of ``(a - mu_k) / sd_k`` to the nearest valid mode, ``(B,)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1, spec.horizon, spec.action_dim)
    z = (a - spec.means[context_ids]) / spec.stds[context_ids]
    rms = np.sqrt((z * z).mean(axis=(2, 3)))
    rms = np.where(spec.weights[context_ids] > 0, rms, np.inf)
    return rms.min(axis=1)


def success_rate(samples: np.ndarray, h: np.ndarray, spec: TaskSpec, radius: float = 3.0) -> float:
    """Fraction of chunks within ``radius`` standard deviations of a valid mode.

    Distance is the Mahalanobis distance divided by ``sqrt(H * D)``, i.e. the
    typical per-coordinate deviation, so a draw from the mode itself sits
    near 1 regardless of chunk size.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, spec.horizon, spec.action_dim)
    ctx = spec.decode_context(h)
    if len(ctx) == 1 and len(samples) > 1:
        ctx = np.repeat(ctx, len(samples))
    return float(np.mean(mode_distance(samples, ctx, spec) <= radius))


# ------------------------------------------------------------------ file I/O


def write_dataset(path: str | Path, data: TaskDataset) -> None:
    """Header line of JSON, then one little-endian f64 record per sample.

    Record layout: ``context_id, mode_id, h (M*C), a (H*D)``.
    """
    spec = data.spec
    header = {"spec": spec.to_json(), "count": len(data), "seed": data.seed,
              "record": ["context_id", "mode_id", f"h[{spec.ctx_tokens}x{spec.ctx_dim}]",
                         f"a[{spec.horizon}x{spec.action_dim}]"]}
    rows = np.concatenate([data.context_ids[:, None].astype(np.float64),
                           data.mode_ids[:, None].astype(np.float64),
                           data.contexts.reshape(len(data), -1),
                           data.actions.reshape(len(data), -1)], axis=1)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(struct.pack("<Q", rows.size))
        fh.write(rows.astype("<f8").tobytes())


def read_dataset(path: str | Path) -> TaskDataset:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a dataset file")
        header = json.loads(fh.readline())
        (size,) = struct.unpack("<Q", fh.read(8))
        rows = np.frombuffer(fh.read(8 * size), dtype="<f8").astype(np.float64)
    spec = TaskSpec.from_json(header["spec"])
    count = header["count"]
    rows = rows.reshape(count, -1)
    mc = spec.ctx_tokens * spec.ctx_dim
    return TaskDataset(spec,
                       rows[:, 2:2 + mc].reshape(count, spec.ctx_tokens, spec.ctx_dim).copy(),
                       rows[:, 2 + mc:].reshape(count, spec.horizon, spec.action_dim).copy(),
                       rows[:, 1].astype(np.int64), rows[:, 0].astype(np.int64), header["seed"])
