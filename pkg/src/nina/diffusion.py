"""Small DDPM action decoder used as the iterative-sampling baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .conditioners import AttentionTrunk, Linear, sinusoidal
from .diffcore import Module, Tensor
from .training import RunRecord, TrainConfig, config_dict, fit

REFERENCE_STEPS = 1000


@dataclass
class DdpmConfig:
    horizon: int = 8
    action_dim: int = 4
    ctx_dim: int = 4
    hidden: int = 128
    cond_layers: int = 3
    heads: int = 4
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0


def beta_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> np.ndarray:
    """Betas of a ``steps``-long chain respaced from a 1000-step linear schedule.

    ``alpha_bar`` is read off the reference chain at evenly spaced steps, so
    short chains still end near pure noise without any beta hitting 1.
    """
    if steps < 1:
        raise ValueError("need at least one denoising step")
    ref = np.cumprod(1.0 - np.linspace(beta_start, beta_end, REFERENCE_STEPS))
    keep = np.round(np.linspace(0, REFERENCE_STEPS, steps + 1)[1:]).astype(int) - 1
    alpha_bar = ref[keep]
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    return 1.0 - alpha_bar / prev


class DdpmDecoder(Module):
    """Noise predictor over whole chunks with cross-attention to context tokens.

    The diffusion timestep enters through a sinusoidal embedding added to
    every projected context token.
    """

    def __init__(self, config: DdpmConfig) -> None:
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.net = AttentionTrunk(config.action_dim, config.ctx_dim, config.action_dim,
                                  config.hidden, config.cond_layers, config.heads, rng)
        self.time_embed = Linear(config.hidden, config.hidden, rng)
        self.betas = beta_schedule(config.steps, config.beta_start, config.beta_end)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)
        # sigma_t^2 = beta_t; the posterior variance under-disperses short chains
        self.sample_var = self.betas.copy()
        self.calls = 0

    @property
    def steps(self) -> int:
        return self.config.steps

    def predict_noise(self, x_t, t: np.ndarray, h) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        h = h if isinstance(h, Tensor) else Tensor(h)
        self.calls += 1
        batch, m = h.shape[0], h.shape[1]
        temb = self.time_embed(Tensor(sinusoidal(t, self.config.hidden)))
        temb = dc.gather(dc.reshape(temb, (batch, 1, self.config.hidden)), np.zeros(m, dtype=np.intp), 1)
        memory = self.net.memory(h) + temb
        return self.net.run(x_t, np.arange(self.config.horizon), memory)

    def loss(self, a: np.ndarray, h: np.ndarray, rng: np.random.Generator) -> Tensor:
        """Noise-prediction MSE at one uniformly drawn timestep per sample."""
        a = np.asarray(a, dtype=np.float64)
        t = rng.integers(0, self.steps, size=len(a))
        eps = rng.standard_normal(a.shape)
        ab = self.alpha_bar[t][:, None, None]
        x_t = np.sqrt(ab) * a + np.sqrt(1.0 - ab) * eps
        diff = self.predict_noise(x_t, t, h) - eps
        return dc.mean(diff * diff)

    def sample(self, h, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
        """Ancestral sampling: exactly ``steps`` noise-predictor calls."""
        h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
        if h.ndim == 2:
            h = np.repeat(h[None], count or 1, axis=0)
        cfg = self.config
        ht = Tensor(h)
        x = rng.standard_normal((h.shape[0], cfg.horizon, cfg.action_dim))
        for t in reversed(range(self.steps)):
            with dc.no_tape():
                eps = self.predict_noise(x, np.full(len(x), t), ht).data
            coef = self.betas[t] / np.sqrt(1.0 - self.alpha_bar[t])
            x = (x - coef * eps) / np.sqrt(self.alphas[t])
            if t > 0:
                x = x + np.sqrt(self.sample_var[t]) * rng.standard_normal(x.shape)
        return x


def train_ddpm(actions: np.ndarray, contexts: np.ndarray, config: DdpmConfig, cfg: TrainConfig,
               heldout: tuple[np.ndarray, np.ndarray] | None = None,
               model: DdpmDecoder | None = None) -> tuple[DdpmDecoder, RunRecord]:
    actions = np.asarray(actions, dtype=np.float64)
    contexts = np.asarray(contexts, dtype=np.float64)
    model = model if model is not None else DdpmDecoder(config)
    record = RunRecord(config=config_dict(config, cfg))

    def loss_fn(idx, rng):
        return model.loss(actions[idx], contexts[idx], rng)

    evaluate = None
    if heldout is not None:
        def evaluate():
            rng = np.random.default_rng(cfg.seed + 1)
            n = min(len(heldout[0]), 1000)
            with dc.no_tape():
                mse = model.loss(heldout[0][:n], heldout[1][:n], rng)
            return {"heldout_denoise_mse": float(mse.data)}

    fit(model, loss_fn, len(actions), cfg, record=record, evaluate=evaluate)
    return model, record


def count_parameters(config: DdpmConfig, hidden: int | None = None) -> int:
    """Trainable parameters of a DdpmDecoder, without building it."""
    d = config.hidden if hidden is None else hidden
    a, c = config.action_dim, config.ctx_dim
    embed = a * d + d + c * d + d
    # per block: three norms, self/cross attention (4d^2 + 4d each), 4x feedforward
    block = 6 * d + 2 * (4 * d * d + 4 * d) + (8 * d * d + 5 * d)
    head = 2 * d + d * a + a
    time = d * d + d
    return embed + config.cond_layers * block + head + time


def matched_hidden(target_params: int, config: DdpmConfig) -> int:
    """Hidden width (multiple of ``heads``) whose parameter count is closest to the target."""
    step = config.heads
    widths = range(step, 4096 + step, step)
    return min(widths, key=lambda w: abs(count_parameters(config, w) - target_params))
