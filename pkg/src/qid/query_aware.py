"""Query-aware path: fuse the query into a unit vector, project it into the
vision width, inject it as an extra token row, and regularize its attention.

Fuse draws a random direction on the sphere and tilts the query toward it by
a factor sigma of its own norm before renormalizing, so the result stays
within a fixed cone of the clean query: for sigma < 1 the cosine against the
original never drops below (1 - sigma) / sqrt((1 - sigma)^2 + sigma^2). With
augmentation disabled the output is exactly the normalized query, which is
also the inference-time path.

Defuse works on the injected row of each returned attention matrix: the
entries attending to the vision tokens form a sub-row that sums to at most 1
and is deliberately not renormalized. Its entropy, -sum p*log(p + 1e-12),
summed over heads and averaged over injected layers, is the regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import VisionTokenGrid
from .errors import ContractError, DegenerateInputError, DimensionError
from .numerics import (
    Rng,
    Tensor,
    add,
    add_rowvec,
    as_row,
    as_vector,
    div_scalar,
    gelu,
    log_shift,
    matmul,
    mul,
    neg,
    scale,
    slice_block,
    sum_all,
    vstack,
)


@dataclass
class FuseConfig:
    sigma: float = 0.16
    enabled: bool = True


def fuse_augment(q_eos: Tensor, cfg: FuseConfig, rng: Rng | None) -> Tensor:
    """Spherical augmentation of the query summary vector.

    q' = (q + sigma * ||q|| * eps/||eps||) normalized, eps standard normal.
    Disabled, it returns q / ||q|| exactly. The input is frozen upstream, so
    the result is a constant leaf as far as the tape is concerned.
    """
    if q_eos.data.ndim != 1:
        raise DimensionError(f"fuse_augment: expected a vector, got shape {q_eos.shape}")
    v = q_eos.data
    norm = float(np.linalg.norm(v))
    if not norm > 0.0:
        raise DegenerateInputError("fuse_augment: zero-norm query vector")
    if not cfg.enabled:
        return Tensor(v / norm)
    if not cfg.sigma > 0.0:
        raise ContractError(f"fuse_augment: sigma must be positive, got {cfg.sigma}")
    if rng is None:
        raise ContractError("fuse_augment: augmentation enabled but no rng given")
    while True:
        eps = rng.normal(v.shape[0]).astype(v.dtype)
        eps_norm = float(np.linalg.norm(eps))
        if eps_norm > 0.0:
            break
    tilted = v + cfg.sigma * norm * (eps / eps_norm)
    tilted_norm = float(np.linalg.norm(tilted))
    if not tilted_norm > 0.0:
        # reachable only at sigma >= 1 with eps exactly opposite q
        raise DegenerateInputError("fuse_augment: augmented vector collapsed to zero")
    return Tensor(tilted / tilted_norm)


def cosine_floor(sigma: float) -> float:
    """Deterministic lower bound on cos(fused, original) for sigma < 1."""
    return (1.0 - sigma) / float(np.sqrt((1.0 - sigma) ** 2 + sigma**2))


# ---------------------------------------------------------------------------
# projector
# ---------------------------------------------------------------------------


@dataclass
class PsiProjector:
    """Two affine layers with a GELU between, mapping d_t -> d_v."""

    w1: Tensor  # (d_t, d_v)
    b1: Tensor  # (d_v,)
    w2: Tensor  # (d_v, d_v)
    b2: Tensor  # (d_v,)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


def init_psi(rng: Rng, d_t: int, d_v: int, dtype) -> PsiProjector:
    # small gaussian weights, zero biases; trainable
    def w(shape):
        return Tensor(rng.normal(shape) * 0.02, dtype=dtype, requires_grad=True)

    return PsiProjector(
        w1=w((d_t, d_v)),
        b1=Tensor(np.zeros(d_v), dtype=dtype, requires_grad=True),
        w2=w((d_v, d_v)),
        b2=Tensor(np.zeros(d_v), dtype=dtype, requires_grad=True),
    )


def project_query(q: Tensor, psi: PsiProjector) -> Tensor:
    """psi(q): (d_t,) -> (d_v,), differentiable into the projector weights."""
    if q.data.ndim != 1 or q.shape[0] != psi.w1.shape[0]:
        raise DimensionError(
            f"project_query: query shape {q.shape} does not match psi input {psi.w1.shape[0]}"
        )
    hidden = gelu(add_rowvec(matmul(as_row(q), psi.w1), psi.b1))
    return as_vector(add_rowvec(matmul(hidden, psi.w2), psi.b2))


# ---------------------------------------------------------------------------
# inject / strip
# ---------------------------------------------------------------------------


def inject(tokens: Tensor, pq: Tensor, t_v: int) -> Tensor:
    """Append the projected query as the last row of the token matrix."""
    if tokens.data.ndim != 2 or tokens.shape[0] != t_v:
        raise ContractError(
            f"inject: expected exactly {t_v} vision rows, got {tokens.shape}; "
            "a query token may already be present"
        )
    if pq.data.ndim != 1 or pq.shape[0] != tokens.shape[1]:
        raise DimensionError(f"inject: query width {pq.shape} vs token width {tokens.shape[1]}")
    return vstack([tokens, as_row(pq)])


def inject_rows(tokens: Tensor, pq_rows: list[Tensor], t_v: int) -> Tensor:
    """Append several projected query vectors (full-token ablation path)."""
    if tokens.data.ndim != 2 or tokens.shape[0] != t_v:
        raise ContractError(f"inject_rows: expected exactly {t_v} vision rows, got {tokens.shape}")
    return vstack([tokens] + [as_row(p) for p in pq_rows])


def strip_query(tokens: Tensor, t_v: int, layer_index: int, n_query: int = 1) -> VisionTokenGrid:
    """Drop the injected row(s), returning a pure vision grid."""
    if tokens.data.ndim != 2 or tokens.shape[0] != t_v + n_query:
        raise ContractError(
            f"strip_query: expected {t_v + n_query} rows ({t_v} vision + {n_query} query), "
            f"got {tokens.shape}"
        )
    vision = slice_block(tokens, 0, t_v, 0, tokens.shape[1])
    return VisionTokenGrid(tokens=vision, layer_index=layer_index)


# ---------------------------------------------------------------------------
# cross-attention records and the entropy objective
# ---------------------------------------------------------------------------


@dataclass
class CrossAttentionRecord:
    """One head's query-row attention over the vision tokens.

    ``entropy_node`` stays on the tape for the loss; ``entropy`` is its float
    value for logging, clamped at zero (the log shift can leave a residual of
    about -1e-12 on a one-hot row).
    """

    layer: int
    head: int
    a_cross: Tensor  # (t_v,)
    entropy_node: Tensor = field(repr=False)

    @property
    def entropy(self) -> float:
        return max(0.0, self.entropy_node.item())


ROW_SUM_TOL = 1e-4


def extract_cross_attention(
    attention: Tensor,
    layer: int,
    head: int,
    t_v: int | None = None,
    query_row: int | None = None,
    renormalize: bool = False,
) -> CrossAttentionRecord:
    """Slice the query row's attention over the vision tokens and score it.

    ``attention`` is one head's full square attention matrix for a grid with
    at least one injected row; the query row defaults to the last one and the
    vision tokens to everything before it. The sub-row is NOT renormalized
    unless asked: its mass over vision tokens is at most 1 by construction,
    and the entropy -sum p*log(p + 1e-12) is taken on it directly.
    """
    if attention.data.ndim != 2 or attention.shape[0] != attention.shape[1]:
        raise DimensionError(f"extract_cross_attention: expected square matrix, got {attention.shape}")
    n = attention.shape[0]
    if t_v is None:
        t_v = n - 1
    if query_row is None:
        query_row = n - 1
    if not (0 < t_v < n and t_v <= query_row < n):
        raise ContractError(
            f"extract_cross_attention: t_v {t_v} / query row {query_row} invalid for {n} rows"
        )
    row_sums = attention.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
        worst = float(np.abs(row_sums - 1.0).max())
        raise ContractError(f"extract_cross_attention: attention row sums off by {worst:.3g}")

    a_cross = as_vector(slice_block(attention, query_row, query_row + 1, 0, t_v))
    if renormalize:
        a_cross = div_scalar(a_cross, sum_all(a_cross))
    entropy_node = neg(sum_all(mul(a_cross, log_shift(a_cross, 1e-12))))

    mass = float(a_cross.data.sum())
    if not -1e-6 <= mass <= 1.0 + 1e-6:
        raise ContractError(f"extract_cross_attention: sub-row mass {mass} outside [0, 1]")
    if float(entropy_node.data) < -1e-9:
        raise ContractError(f"extract_cross_attention: negative entropy {float(entropy_node.data)}")
    return CrossAttentionRecord(layer=layer, head=head, a_cross=a_cross, entropy_node=entropy_node)


def entropy_loss(
    records: list[CrossAttentionRecord], layers_q: tuple[int, ...], head_count: int
) -> Tensor:
    """Sum head entropies, average over injected layers.

    Requires exactly one record per (layer in layers_q, head); anything
    missing or duplicated is a wiring bug, not a soft condition.
    """
    expected = {(layer, head) for layer in layers_q for head in range(head_count)}
    seen = [(r.layer, r.head) for r in records]
    if len(seen) != len(set(seen)):
        raise ContractError("entropy_loss: duplicate (layer, head) records")
    if set(seen) != expected:
        missing = sorted(expected - set(seen))
        extra = sorted(set(seen) - expected)
        raise ContractError(f"entropy_loss: coverage mismatch, missing {missing}, extra {extra}")
    total = records[0].entropy_node
    for record in records[1:]:
        total = add(total, record.entropy_node)
    return scale(total, 1.0 / len(layers_q))
