"""Normalizing-flow action decoder: exact log-likelihood, one-pass sampling, training."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Tensor
from .flows import FlowStack, build_stack
from .training import DivergenceError, RunRecord, TrainConfig, config_dict, fit

LOG_2PI = math.log(2 * math.pi)

VARIANTS = ("mlp", "transformer")


def perturb_actions(a: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma^2)`` noise to every action entry."""
    if not np.isfinite(sigma) or sigma < 0:
        raise ValueError(f"noise sigma must be finite and >= 0, got {sigma}")
    a = np.asarray(a, dtype=np.float64)
    if sigma == 0:
        return a.copy()
    return a + sigma * rng.standard_normal(a.shape)


def base_log_density(z) -> np.ndarray | Tensor:
    """Standard-normal log-density summed over the last axis."""
    if isinstance(z, Tensor):
        n = z.shape[-1]
        return dc.sum(z * z, axis=-1) * -0.5 - 0.5 * n * LOG_2PI
    z = np.asarray(z)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


@dataclass
class FlowConfig:
    variant: str = "mlp"
    horizon: int = 1
    action_dim: int = 2
    ctx_dim: int = 2
    depth: int = 28
    hidden: int = 64
    cond_layers: int = 3
    heads: int = 4
    sigma_noise: float = 0.03
    use_plu: bool = True
    seed: int = 0


class NinaDecoder(Module):
    """Conditional flow ``p(a | h)`` with a fixed ``N(0, I)`` base over ``n = H * D``."""

    def __init__(self, stack: FlowStack, config: FlowConfig) -> None:
        self.stack = stack
        self.config = config

    @classmethod
    def build(cls, config: FlowConfig, permute_plu: bool = True) -> "NinaDecoder":
        if config.variant not in VARIANTS:
            raise ValueError(f"unknown variant {config.variant!r}; expected one of {VARIANTS}")
        if config.sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")
        rng = np.random.default_rng(config.seed)
        stack = build_stack(config.variant, config.horizon, config.action_dim, config.ctx_dim,
                            config.depth, config.hidden, config.cond_layers, rng,
                            use_plu=config.use_plu, heads=config.heads, permute_plu=permute_plu)
        return cls(stack, config)

    @property
    def n(self) -> int:
        return self.stack.base_dim

    def _inputs(self, a, h) -> tuple[Tensor, Tensor]:
        cfg = self.config
        a = a if isinstance(a, Tensor) else Tensor(a)
        h = h if isinstance(h, Tensor) else Tensor(h)
        if a.ndim == 2:
            a = dc.reshape(a, (1,) + a.shape)
        # a lone (M, C) or (C,) context is shared by every sample in the batch
        if h.ndim < 3:
            h = dc.reshape(h, (1,) * (3 - h.ndim) + h.shape)
        if h.shape[0] != a.shape[0]:
            if h.shape[0] != 1:
                raise dc.ShapeError(f"context batch {h.shape} does not match actions {a.shape}")
            h = Tensor(np.repeat(h.data, a.shape[0], axis=0))
        if a.shape[1:] != (cfg.horizon, cfg.action_dim):
            raise dc.ShapeError(f"actions must be (B, {cfg.horizon}, {cfg.action_dim}), got {a.shape}")
        return a, h

    def latent(self, a, h) -> tuple[Tensor, Tensor]:
        """Map actions to ``(z0, log|det dz0/da|)``."""
        a, h = self._inputs(a, h)
        return self.stack.forward(a, h)

    def log_prob(self, a, h) -> Tensor:
        """``log p(a | h) = log N(z0; 0, I) + log|det dz0/da|``, one value per sample."""
        z, logdet = self.latent(a, h)
        return base_log_density(z) + logdet

    def sample(self, h, rng: np.random.Generator, count: int | None = None,
               return_latent: bool = False):
        """Draw ``z0 ~ N(0, I)`` and run the stack once in reverse.

        ``h`` is ``(M, C)`` (one context, ``count`` samples) or ``(B, M, C)``.
        """
        h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
        if h.ndim == 2:
            h = np.repeat(h[None], count or 1, axis=0)
        elif count is not None and count != h.shape[0]:
            raise ValueError("count must match the context batch")
        z = rng.standard_normal((h.shape[0], self.n))
        with dc.no_tape():
            a = self.stack.inverse(Tensor(z), Tensor(h)).data
        return (a, z) if return_latent else a

    def nll_loss(self, a, h, rng: np.random.Generator, sigma: float | None = None) -> Tensor:
        """Mean negative log-likelihood of noise-perturbed actions."""
        sigma = self.config.sigma_noise if sigma is None else sigma
        a = np.asarray(a, dtype=np.float64)
        if a.shape[0] < 1:
            raise ValueError("empty batch")
        noisy = perturb_actions(a, sigma, rng)
        try:
            lp = self.log_prob(noisy, h)
        except dc.NonFiniteError as err:
            bad = self._first_bad(noisy, h)
            raise DivergenceError(f"non-finite log-likelihood at batch index {bad}: {err}") from err
        return dc.mean(lp) * -1.0

    def _first_bad(self, a: np.ndarray, h) -> int:
        h = np.asarray(h)
        for i in range(a.shape[0]):
            hi = h[i:i + 1] if h.ndim == 3 else h
            try:
                with dc.no_tape():
                    self.log_prob(a[i:i + 1], hi)
            except dc.NonFiniteError:
                return i
        return -1

    def clamp_(self) -> None:
        self.stack.clamp_()


def heldout_nll(dec: NinaDecoder, actions: np.ndarray, contexts: np.ndarray,
                batch: int = 1000) -> float:
    """Mean clean-action NLL, evaluated without recording."""
    total = 0.0
    for i in range(0, len(actions), batch):
        with dc.no_tape():
            lp = dec.log_prob(actions[i:i + batch], contexts[i:i + batch])
        total += float(-lp.data.sum())
    return total / len(actions)


def train(actions: np.ndarray, contexts: np.ndarray, flow: FlowConfig, cfg: TrainConfig,
          heldout: tuple[np.ndarray, np.ndarray] | None = None,
          decoder: NinaDecoder | None = None) -> tuple[NinaDecoder, RunRecord]:
    """Maximum-likelihood training on noise-perturbed actions.

    Logs per-step loss and, every ``cfg.eval_every`` steps, the clean held-out NLL.
    """
    actions = np.asarray(actions, dtype=np.float64)
    contexts = np.asarray(contexts, dtype=np.float64)
    if len(actions) == 0 or len(actions) != len(contexts):
        raise ValueError("need a nonempty dataset with one context per action chunk")
    dec = decoder if decoder is not None else NinaDecoder.build(flow)
    record = RunRecord(config=config_dict(flow, cfg))

    def loss_fn(idx, rng):
        return dec.nll_loss(actions[idx], contexts[idx], rng)

    evaluate = None
    if heldout is not None:
        def evaluate():
            return {"heldout_nll": heldout_nll(dec, *heldout)}

    fit(dec, loss_fn, len(actions), cfg, record=record, evaluate=evaluate, after_step=dec.clamp_)
    return dec, record
