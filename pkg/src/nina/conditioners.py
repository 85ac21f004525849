"""Networks that map the untouched half of a coupling input plus context to (s, b).

Both conditioners zero-initialize their output head so a freshly built flow
is the identity map.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Tensor, ShapeError


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False) -> None:
        bound = 1.0 / math.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        b = np.zeros(n_out) if zero else rng.uniform(-bound, bound, n_out)
        self.weight = dc.parameter(w)
        self.bias = dc.parameter(b)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int) -> None:
        self.gain = dc.parameter(np.ones(dim))
        self.bias = dc.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layer_norm(x, self.gain, self.bias)


def sinusoidal(positions, dim: int) -> np.ndarray:
    """Fixed sin/cos encoding, shape ``(len(positions), dim)``."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = pos * freqs
    enc = np.zeros((pos.shape[0], dim))
    enc[:, 0:2 * half:2] = np.sin(ang)
    enc[:, 1:2 * half:2] = np.cos(ang)
    return enc


def pool_context(h: Tensor) -> Tensor:
    """Reduce a ``(B, M, C)`` token sequence to ``(B, C)`` by mean pooling."""
    if h.ndim == 2:
        return h
    if h.shape[1] == 1:
        return dc.reshape(h, (h.shape[0], h.shape[2]))
    return dc.mean(h, axis=1)


class MlpConditioner(Module):
    """Concatenates ``x1`` with the pooled context and runs an N-layer MLP.

    The last layer emits ``2 * out_dim`` values: raw scales then shifts.
    """

    def __init__(self, in_dim: int, ctx_dim: int, out_dim: int, hidden: int, depth: int,
                 rng: np.random.Generator) -> None:
        if depth < 1:
            raise ValueError("MLP conditioner needs at least one layer")
        self.in_dim, self.ctx_dim, self.out_dim = in_dim, ctx_dim, out_dim
        dims = [in_dim + ctx_dim] + [hidden] * (depth - 1) + [2 * out_dim]
        self.layers = [Linear(dims[i], dims[i + 1], rng, zero=(i == depth - 1))
                       for i in range(depth)]

    def __call__(self, x1: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        ctx = pool_context(h)
        if x1.ndim != 2 or x1.shape[1] != self.in_dim or ctx.shape[-1] != self.ctx_dim:
            raise ShapeError(f"mlp conditioner expects x1 (B, {self.in_dim}) and context "
                             f"(B, M, {self.ctx_dim}); got {x1.shape} and {h.shape}")
        out = dc.concat([x1, ctx], axis=1)
        for i, layer in enumerate(self.layers):
            if i:
                out = dc.silu(out)
            out = layer(out)
        k = self.out_dim
        return dc.tanh(out[:, :k]), out[:, k:]


class Attention(Module):
    """Multi-head attention; ``kv`` defaults to ``x`` (self-attention)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, cross: bool) -> None:
        if dim % heads:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.cross = dim, heads, cross
        if cross:
            self.q = Linear(dim, dim, rng)
            self.kv = Linear(dim, 2 * dim, rng)
        else:
            self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        x = dc.reshape(x, (b, t, self.heads, self.dim // self.heads))
        return dc.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        d = self.dim
        if self.cross:
            q = self.q(x)
            kv = self.kv(memory)
            k, v = kv[..., :d], kv[..., d:]
        else:
            qkv = self.qkv(x)
            q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        scores = (q @ dc.swap_last(k)) * (1.0 / math.sqrt(d // self.heads))
        weights = dc.softmax(scores, axis=-1)
        self.last_weights = weights.data
        out = dc.transpose(weights @ v, (0, 2, 1, 3))
        b, t = out.shape[:2]
        return self.out(dc.reshape(out, (b, t, d)))


class AttentionBlock(Module):
    """Pre-norm self-attention, cross-attention to memory, then a 4x feedforward."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator) -> None:
        self.norm_self = LayerNorm(dim)
        self.self_attn = Attention(dim, heads, rng, cross=False)
        self.norm_cross = LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, rng, cross=True)
        self.norm_ff = LayerNorm(dim)
        self.ff_in = Linear(dim, 4 * dim, rng)
        self.ff_out = Linear(4 * dim, dim, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = x + self.self_attn(self.norm_self(x))
        x = x + self.cross_attn(self.norm_cross(x), memory)
        return x + self.ff_out(dc.silu(self.ff_in(self.norm_ff(x))))


class AttentionTrunk(Module):
    """Token embedding, N attention blocks and a zero-initialized per-token head."""

    def __init__(self, token_dim: int, ctx_dim: int, out_dim: int, hidden: int, depth: int,
                 heads: int, rng: np.random.Generator) -> None:
        self.token_dim, self.ctx_dim, self.hidden = token_dim, ctx_dim, hidden
        self.embed = Linear(token_dim, hidden, rng)
        self.ctx_embed = Linear(ctx_dim, hidden, rng)
        self.blocks = [AttentionBlock(hidden, heads, rng) for _ in range(depth)]
        self.norm_out = LayerNorm(hidden)
        self.head = Linear(hidden, out_dim, rng, zero=True)

    def memory(self, h: Tensor) -> Tensor:
        if h.ndim != 3 or h.shape[2] != self.ctx_dim or h.shape[1] < 1:
            raise ShapeError(f"context must be (B, M>=1, {self.ctx_dim}), got {h.shape}")
        return self.ctx_embed(h)

    def run(self, tokens: Tensor, positions, memory: Tensor) -> Tensor:
        if tokens.ndim != 3 or tokens.shape[2] != self.token_dim or tokens.shape[1] < 1:
            raise ShapeError(f"tokens must be (B, T>=1, {self.token_dim}), got {tokens.shape}")
        x = self.embed(tokens) + sinusoidal(positions, self.hidden)
        for block in self.blocks:
            x = block(x, memory)
        return self.head(self.norm_out(x))


class AttnConditioner(Module):
    """Self-attention over ``x1`` timesteps and cross-attention to context tokens.

    Returns per-token ``(s, b)`` of shape ``(B, T, D)``; ``s`` is already
    squashed through tanh.
    """

    def __init__(self, action_dim: int, ctx_dim: int, hidden: int, depth: int,
                 rng: np.random.Generator, heads: int = 4) -> None:
        self.action_dim = action_dim
        self.trunk = AttentionTrunk(action_dim, ctx_dim, 2 * action_dim, hidden, depth, heads, rng)

    @property
    def blocks(self) -> list[AttentionBlock]:
        return self.trunk.blocks

    def __call__(self, x1_tokens: Tensor, h: Tensor, positions=None) -> tuple[Tensor, Tensor]:
        if positions is None:
            positions = np.arange(x1_tokens.shape[1])
        raw = self.trunk.run(x1_tokens, positions, self.trunk.memory(h))
        d = self.action_dim
        return dc.tanh(raw[..., :d]), raw[..., d:]
