"""Affine coupling and PLU layers composed into a conditional flow stack.

All layers are written in the density direction (actions to latent):
``forward`` returns the transformed value plus ``log|det J|`` per sample and
``inverse`` undoes it exactly. Chunks travel as ``(B, H, D)``; PLU layers act
on the flattened ``(B, H*D)`` vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import diffcore as dc
from .conditioners import AttnConditioner, MlpConditioner
from .diffcore import Module, Tensor, ShapeError

ELEMENT = "element"
SEQUENCE = "sequence"

S_LOG_BOUND = 7.0


@dataclass(frozen=True)
class SplitMask:
    """Fixed partition of positions: ``x1`` is the first ``half_size`` permuted entries."""

    permutation: tuple[int, ...]
    half_size: int

    def __post_init__(self) -> None:
        if sorted(self.permutation) != list(range(len(self.permutation))):
            raise ValueError("split permutation is not a bijection")
        if not 0 < self.half_size < len(self.permutation):
            raise ValueError(f"half_size {self.half_size} leaves an empty side")

    @classmethod
    def random(cls, size: int, rng: np.random.Generator, axis: str = ELEMENT) -> "SplitMask":
        half = size // 2 if axis == ELEMENT else (size + 1) // 2
        return cls(tuple(int(i) for i in rng.permutation(size)), half)

    @property
    def first(self) -> np.ndarray:
        return np.asarray(self.permutation[:self.half_size], dtype=np.intp)

    @property
    def second(self) -> np.ndarray:
        return np.asarray(self.permutation[self.half_size:], dtype=np.intp)

    @property
    def inverse(self) -> np.ndarray:
        return np.argsort(self.permutation).astype(np.intp)


class CouplingLayer(Module):
    """``y2 = exp(s) * x2 + b`` with ``(s, b)`` computed from ``x1`` and the context.

    ``element`` splits the flattened chunk entrywise (MLP conditioner);
    ``sequence`` splits whole timesteps (attention conditioner).
    """

    def __init__(self, mask: SplitMask, conditioner, split_axis: str, horizon: int,
                 action_dim: int) -> None:
        self.mask = mask
        self.conditioner = conditioner
        self.split_axis = split_axis
        self.horizon, self.action_dim = horizon, action_dim

    def _check(self, x: Tensor) -> None:
        if x.ndim != 3 or x.shape[1:] != (self.horizon, self.action_dim):
            raise ShapeError(f"coupling expects (B, {self.horizon}, {self.action_dim}), got {x.shape}")

    def _params(self, x1: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        if self.split_axis == ELEMENT:
            return self.conditioner(x1, h)
        s, b = self.conditioner(x1, h, positions=self.mask.first)
        n2 = len(self.mask.second)
        if s.shape[1] != n2:
            s, b = s[:, :n2], b[:, :n2]
        return s, b

    def forward(self, x: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        self._check(x)
        batch = x.shape[0]
        if self.split_axis == ELEMENT:
            flat = dc.reshape(x, (batch, -1))
            x1, x2 = dc.gather(flat, self.mask.first, 1), dc.gather(flat, self.mask.second, 1)
            s, b = self._params(x1, h)
            y2 = dc.exp(s) * x2 + b
            y = dc.gather(dc.concat([x1, y2], axis=1), self.mask.inverse, 1)
            return dc.reshape(y, x.shape), dc.sum(s, axis=1)
        x1, x2 = dc.gather(x, self.mask.first, 1), dc.gather(x, self.mask.second, 1)
        s, b = self._params(x1, h)
        y2 = dc.exp(s) * x2 + b
        y = dc.gather(dc.concat([x1, y2], axis=1), self.mask.inverse, 1)
        return y, dc.sum(s, axis=(1, 2))

    def inverse(self, y: Tensor, h: Tensor) -> Tensor:
        self._check(y)
        batch = y.shape[0]
        if self.split_axis == ELEMENT:
            flat = dc.reshape(y, (batch, -1))
            y1, y2 = dc.gather(flat, self.mask.first, 1), dc.gather(flat, self.mask.second, 1)
            s, b = self._params(y1, h)
            x2 = (y2 - b) * dc.exp(-s)
            x = dc.gather(dc.concat([y1, x2], axis=1), self.mask.inverse, 1)
            return dc.reshape(x, y.shape)
        y1, y2 = dc.gather(y, self.mask.first, 1), dc.gather(y, self.mask.second, 1)
        s, b = self._params(y1, h)
        x2 = (y2 - b) * dc.exp(-s)
        return dc.gather(dc.concat([y1, x2], axis=1), self.mask.inverse, 1)


def _tri_index(n: int, upper: bool) -> np.ndarray:
    i, j = np.tril_indices(n, -1) if not upper else np.triu_indices(n, 1)
    flat = np.zeros((n, n), dtype=np.intp)
    flat[i, j] = np.arange(len(i))
    return flat, (i, j)


class PLULayer(Module):
    """Invertible linear map ``W = P L (U + diag(sign * exp(s_log)))``.

    ``L`` is unit lower triangular and ``U`` strictly upper triangular; only
    their off-diagonal entries are stored. ``P`` and the signs are fixed.
    """

    def __init__(self, dim: int, rng: np.random.Generator | None = None,
                 permute: bool = True) -> None:
        self.dim = dim
        perm = rng.permutation(dim) if (permute and rng is not None) else np.arange(dim)
        self.perm = perm.astype(np.intp)
        self.sign = np.ones(dim)
        m = dim * (dim - 1) // 2
        self.lower = dc.parameter(np.zeros(m))
        self.upper = dc.parameter(np.zeros(m))
        self.s_log = dc.parameter(np.zeros(dim))
        self._build_index()

    def _build_index(self) -> None:
        n, m = self.dim, self.dim * (self.dim - 1) // 2
        lo, (li, lj) = _tri_index(n, upper=False)
        up, (ui, uj) = _tri_index(n, upper=True)
        # lookup into concat([entries, diag, 0, 1]): zero at m + n, one at m + n + 1
        l_idx = np.full((n, n), m + n, dtype=np.intp)
        l_idx[li, lj] = lo[li, lj]
        l_idx[np.arange(n), np.arange(n)] = m + n + 1
        u_idx = np.full((n, n), m + n, dtype=np.intp)
        u_idx[ui, uj] = up[ui, uj]
        u_idx[np.arange(n), np.arange(n)] = m + np.arange(n)
        self._l_idx, self._u_idx = l_idx.ravel(), u_idx.ravel()

    @classmethod
    def from_matrices(cls, perm, lower: np.ndarray, upper: np.ndarray, sign, s_log) -> "PLULayer":
        """Build from explicit factors; strict triangles are read from ``lower``/``upper``."""
        n = len(perm)
        layer = cls(n, permute=False)
        layer.perm = np.asarray(perm, dtype=np.intp)
        layer.sign = np.asarray(sign, dtype=np.float64)
        layer.lower.data[:] = lower[np.tril_indices(n, -1)]
        layer.upper.data[:] = upper[np.triu_indices(n, 1)]
        layer.s_log.data[:] = s_log
        return layer

    def diag(self) -> np.ndarray:
        return self.sign * np.exp(self.s_log.data)

    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense ``(P, L, U_full)`` with ``W = P @ L @ U_full``."""
        n = self.dim
        p = np.eye(n)[self.perm]
        lower = np.eye(n)
        lower[np.tril_indices(n, -1)] = self.lower.data
        upper = np.diag(self.diag())
        upper[np.triu_indices(n, 1)] = self.upper.data
        return p, lower, upper

    def weight(self) -> np.ndarray:
        p, lower, upper = self.factors()
        return p @ lower @ upper

    def logdet(self) -> Tensor:
        return dc.sum(self.s_log)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"PLU layer of size {self.dim} got input {x.shape}")
        n = self.dim
        const = Tensor([0.0, 1.0])
        diag = dc.exp(self.s_log) * self.sign
        lower = dc.reshape(dc.gather(dc.concat([self.lower, diag, const], 0), self._l_idx, 0), (n, n))
        upper = dc.reshape(dc.gather(dc.concat([self.upper, diag, const], 0), self._u_idx, 0), (n, n))
        lu = lower @ upper
        y = dc.gather(x @ dc.swap_last(lu), self.perm, 1)
        return y, self.logdet()

    def inverse(self, y: Tensor) -> Tensor:
        """Undo the permutation, then forward- and back-substitute."""
        if y.ndim != 2 or y.shape[1] != self.dim:
            raise ShapeError(f"PLU layer of size {self.dim} got input {y.shape}")
        _, lower, upper = self.factors()
        w = y.data[:, np.argsort(self.perm)].T
        u = solve_triangular(lower, w, lower=True, unit_diagonal=True, check_finite=False)
        x = solve_triangular(upper, u, lower=False, check_finite=False).T
        if not np.isfinite(x).all():
            raise dc.NonFiniteError("PLU inverse produced non-finite values")
        return Tensor(np.ascontiguousarray(x))

    def clamp_(self) -> None:
        np.clip(self.s_log.data, -S_LOG_BOUND, S_LOG_BOUND, out=self.s_log.data)


class FlowLayer(Module):
    def __init__(self, coupling: CouplingLayer, plu: PLULayer | None) -> None:
        self.coupling = coupling
        self.plu = plu


class FlowStack(Module):
    """K flow layers; each is a coupling followed by an optional PLU."""

    def __init__(self, layers: list[FlowLayer], horizon: int, action_dim: int) -> None:
        self.layers = layers
        self.horizon, self.action_dim = horizon, action_dim
        self.base_dim = horizon * action_dim
        self.counts = {"coupling": 0, "plu": 0}

    def reset_counts(self) -> None:
        self.counts = {"coupling": 0, "plu": 0}

    def forward(self, a: Tensor, h: Tensor, per_layer: list | None = None) -> tuple[Tensor, Tensor]:
        """Actions ``(B, H, D)`` to latent ``(B, n)`` and summed log-determinant ``(B,)``.

        When ``per_layer`` is a list, each layer's log-det terms are appended to it.
        """
        x = a
        total = None
        for layer in self.layers:
            x, ld = layer.coupling.forward(x, h)
            self.counts["coupling"] += 1
            total = ld if total is None else total + ld
            if per_layer is not None:
                per_layer.append(ld)
            if layer.plu is not None:
                flat, ld = layer.plu.forward(dc.reshape(x, (x.shape[0], self.base_dim)))
                self.counts["plu"] += 1
                x = dc.reshape(flat, a.shape)
                total = total + ld
                if per_layer is not None:
                    per_layer.append(ld)
        z = dc.reshape(x, (a.shape[0], self.base_dim))
        if total is None:
            total = Tensor(np.zeros(a.shape[0]))
        return z, total

    def inverse(self, z: Tensor, h: Tensor) -> Tensor:
        batch = z.shape[0]
        if z.ndim != 2 or z.shape[1] != self.base_dim:
            raise ShapeError(f"latent must be (B, {self.base_dim}), got {z.shape}")
        x = z
        for layer in reversed(self.layers):
            if layer.plu is not None:
                x = layer.plu.inverse(dc.reshape(x, (batch, self.base_dim)))
                self.counts["plu"] += 1
            x = layer.coupling.inverse(dc.reshape(x, (batch, self.horizon, self.action_dim)), h)
            self.counts["coupling"] += 1
        return dc.reshape(x, (batch, self.horizon, self.action_dim))

    def clamp_(self) -> None:
        for layer in self.layers:
            if layer.plu is not None:
                layer.plu.clamp_()


def build_stack(variant: str, horizon: int, action_dim: int, ctx_dim: int, depth: int,
                hidden: int, cond_layers: int, rng: np.random.Generator, use_plu: bool = True,
                heads: int = 4, permute_plu: bool = True) -> FlowStack:
    """Assemble a stack; split permutations and PLU permutations are drawn from ``rng``."""
    n = horizon * action_dim
    layers = []
    for _ in range(depth):
        if variant == "mlp":
            if n < 2:
                raise ValueError("element-wise coupling needs at least two action entries")
            mask = SplitMask.random(n, rng, ELEMENT)
            cond = MlpConditioner(len(mask.first), ctx_dim, len(mask.second), hidden, cond_layers, rng)
            coupling = CouplingLayer(mask, cond, ELEMENT, horizon, action_dim)
        elif variant == "transformer":
            if horizon < 2:
                raise ValueError("sequence-wise coupling needs a horizon of at least two timesteps")
            mask = SplitMask.random(horizon, rng, SEQUENCE)
            cond = AttnConditioner(action_dim, ctx_dim, hidden, cond_layers, rng, heads=heads)
            coupling = CouplingLayer(mask, cond, SEQUENCE, horizon, action_dim)
        else:
            raise ValueError(f"unknown flow variant {variant!r}")
        plu = PLULayer(n, rng, permute=permute_plu) if use_plu else None
        layers.append(FlowLayer(coupling, plu))
    return FlowStack(layers, horizon, action_dim)
