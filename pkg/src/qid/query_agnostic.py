"""Query-agnostic bias: a learned function of a fixed sinusoidal code,
added to the vision tokens after each injected layer.

The code table P is the classic interleaved sinusoid over patch index i and
channel pair k:

    P[i, 2k]   = sin(i / 10000^(2k / d_p))
    P[i, 2k+1] = cos(i / 10000^(2k / d_p))

P is fixed and never trained. Each participating layer owns an independent
two-layer GELU MLP phi whose final layer starts at exactly zero, so the bias
is an exact no-op until training moves it. Because phi never sees the query,
phi(P) can be evaluated once after training and frozen into the checkpoint;
the frozen forward path then performs only the addition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import VisionTokenGrid
from .errors import ConfigError, ContractError
from .numerics import (
    Rng,
    Tensor,
    add,
    add_rowvec,
    flop_scope,
    gelu,
    matmul,
    no_tape,
)


def sinusoidal_table(t_v: int, d_p: int, dtype=np.float32) -> Tensor:
    """The (t_v, d_p) sinusoidal code, computed in float64 then cast."""
    if t_v < 1:
        raise ConfigError(f"sinusoidal_table: need at least one position, got {t_v}")
    if d_p < 2 or d_p % 2 != 0:
        raise ConfigError(f"sinusoidal_table: d_p must be a positive even number, got {d_p}")
    i = np.arange(t_v, dtype=np.float64)[:, None]
    two_k = np.arange(0, d_p, 2, dtype=np.float64)[None, :]
    angle = i / np.power(10000.0, two_k / d_p)
    table = np.empty((t_v, d_p), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return Tensor(table, dtype=dtype)


@dataclass
class SinusoidalBiasCache:
    """Per-layer bias state: the code table, the phi weights, and, once
    precomputed, the frozen bias matrix."""

    table: Tensor  # (t_v, d_p), fixed
    w1: Tensor  # (d_p, d_v)
    b1: Tensor
    w2: Tensor  # (d_v, d_v), zero at init
    b2: Tensor
    cached_bias: Tensor | None = None
    frozen: bool = False

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


def make_bias_cache(
    rng: Rng, t_v: int, d_p: int, d_v: int, dtype, zero_table: bool = False
) -> SinusoidalBiasCache:
    """Build one layer's bias module. ``zero_table`` swaps P for zeros (the
    "no sinusoid" ablation), leaving phi free to learn a constant shift."""
    if zero_table:
        table = Tensor(np.zeros((t_v, d_p)), dtype=dtype)
    else:
        table = sinusoidal_table(t_v, d_p, dtype=dtype)
    return SinusoidalBiasCache(
        table=table,
        w1=Tensor(rng.normal((d_p, d_v)) * 0.02, dtype=dtype, requires_grad=True),
        b1=Tensor(np.zeros(d_v), dtype=dtype, requires_grad=True),
        # zero final layer: the bias starts as an exact no-op
        w2=Tensor(np.zeros((d_v, d_v)), dtype=dtype, requires_grad=True),
        b2=Tensor(np.zeros(d_v), dtype=dtype, requires_grad=True),
    )


def _phi(cache: SinusoidalBiasCache) -> Tensor:
    hidden = gelu(add_rowvec(matmul(cache.table, cache.w1), cache.b1))
    return add_rowvec(matmul(hidden, cache.w2), cache.b2)


def apply_bias(grid: VisionTokenGrid, cache: SinusoidalBiasCache, t_v: int) -> VisionTokenGrid:
    """z + phi(P) over the vision grid. Refuses grids still carrying a query
    row. On the frozen path the only arithmetic is the addition itself."""
    if grid.tokens.shape[0] != t_v:
        raise ContractError(
            f"apply_bias: grid has {grid.tokens.shape[0]} rows, expected {t_v}; "
            "strip the query row first"
        )
    with flop_scope("query_agnostic"):
        if cache.frozen:
            if cache.cached_bias is None:
                raise ContractError("apply_bias: cache marked frozen without a cached bias")
            bias = cache.cached_bias
        else:
            bias = _phi(cache)
        out = add(grid.tokens, bias)
    return VisionTokenGrid(tokens=out, layer_index=grid.layer_index)


def precompute_bias(cache: SinusoidalBiasCache) -> Tensor:
    """Evaluate phi(P) once, freeze it, and return the bias matrix.

    Bit-identical to what the live path would add, because it runs the same
    ops in the same order, just without the tape.
    """
    if cache.frozen:
        raise ContractError("precompute_bias: cache is already frozen")
    with no_tape():
        bias = _phi(cache)
    cache.cached_bias = bias.detach()
    cache.frozen = True
    return cache.cached_bias
