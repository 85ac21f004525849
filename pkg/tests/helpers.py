"""Shared fixtures: randomized models and a numeric-Jacobian oracle."""

from __future__ import annotations

import numpy as np

from nina import diffcore as dc
from nina.decoder import FlowConfig, NinaDecoder
from nina.flows import PLULayer


def randomize(module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Overwrite every parameter with Gaussian noise so no layer sits at identity."""
    for _, p in module.named_parameters():
        p.data[...] = scale * rng.standard_normal(p.data.shape)


def random_decoder(variant: str, horizon: int, action_dim: int, ctx_dim: int = 3, depth: int = 2,
                   hidden: int = 8, cond_layers: int = 2, seed: int = 0, scale: float = 0.3,
                   use_plu: bool = True) -> NinaDecoder:
    cfg = FlowConfig(variant=variant, horizon=horizon, action_dim=action_dim, ctx_dim=ctx_dim,
                     depth=depth, hidden=hidden, cond_layers=cond_layers, use_plu=use_plu,
                     seed=seed)
    dec = NinaDecoder.build(cfg)
    randomize(dec, np.random.default_rng(seed + 1000), scale)
    # random unit-triangular factors are exponentially ill-conditioned unless shrunk with n
    for layer in dec.stack.layers:
        if layer.plu is not None:
            layer.plu.lower.data /= np.sqrt(layer.plu.dim)
            layer.plu.upper.data /= np.sqrt(layer.plu.dim)
    return dec


def random_plu(n: int, rng: np.random.Generator, s_range: float = 1.0) -> PLULayer:
    layer = PLULayer(n, rng)
    off = 0.5 / np.sqrt(n)
    layer.lower.data[:] = off * rng.standard_normal(layer.lower.data.shape)
    layer.upper.data[:] = off * rng.standard_normal(layer.upper.data.shape)
    layer.s_log.data[:] = rng.uniform(-s_range, s_range, n)
    layer.sign = rng.choice([-1.0, 1.0], n)
    return layer


def numeric_jacobian(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector map ``f: R^n -> R^m``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((f(x + e) - f(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def stack_map(dec: NinaDecoder, h: np.ndarray):
    """Single-sample ``a -> z0`` as a plain function of a flat vector."""
    shape = (1, dec.config.horizon, dec.config.action_dim)

    def f(flat):
        with dc.no_tape():
            z, _ = dec.latent(flat.reshape(shape), h[None])
        return z.data[0]

    return f


def jacobian_logdet(dec: NinaDecoder, a: np.ndarray, h: np.ndarray) -> tuple[float, float]:
    """``(analytic, numeric)`` log|det dz0/da| at one point."""
    with dc.no_tape():
        _, ld = dec.latent(a[None], h[None])
    jac = numeric_jacobian(stack_map(dec, h), a.ravel())
    return float(ld.data[0]), float(np.linalg.slogdet(jac)[1])
