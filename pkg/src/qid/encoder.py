"""Frozen backbone: patch embedding, pre-norm transformer blocks, and the
query-side embedding surrogate.

The vision blocks deliberately carry no positional embedding of their own, so
that any positional signal the model uses is supplied externally (see
query_agnostic). A config flag can re-enable a standard learned positional
embedding at the patch stage; it stays frozen like the rest of the backbone.

The query encoder stands in for a text encoder: a frozen embedding table, one
vector per query token id, with the summary vector taken as the mean of the
looked-up rows. That summary plays the role of an end-of-sequence feature and
is appended to the token matrix as its last column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import ConfigError, ContractError, DimensionError, FormatError, VocabularyError
from .numerics import (
    Rng,
    Tensor,
    add,
    add_rowvec,
    gelu,
    hstack,
    layernorm,
    matmul,
    scale,
    softmax_rows,
    transpose,
)


@dataclass
class VisionTokenGrid:
    """Vision tokens after some number of blocks. Never contains a query row:
    anything holding an injected row travels as a bare Tensor instead."""

    tokens: Tensor  # (T_v, d_v)
    layer_index: int

    @property
    def t_v(self) -> int:
        return self.tokens.shape[0]


@dataclass
class VitBlockWeights:
    """One pre-norm block: per-head q/k/v projections, output projection,
    a GELU feed-forward, and two layernorm parameter pairs."""

    wq: list[Tensor]  # per head, (d_v, head_dim)
    wk: list[Tensor]
    wv: list[Tensor]
    w_proj: Tensor  # (d_v, d_v)
    ffn_w1: Tensor  # (d_v, ffn_hidden)
    ffn_b1: Tensor
    ffn_w2: Tensor  # (ffn_hidden, d_v)
    ffn_b2: Tensor
    ln1_gain: Tensor
    ln1_shift: Tensor
    ln2_gain: Tensor
    ln2_shift: Tensor

    @property
    def d_v(self) -> int:
        return self.wq[0].shape[0]

    @property
    def head_count(self) -> int:
        return len(self.wq)

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for h in range(self.head_count):
            out[f"{prefix}.wq{h}"] = self.wq[h]
            out[f"{prefix}.wk{h}"] = self.wk[h]
            out[f"{prefix}.wv{h}"] = self.wv[h]
        out[f"{prefix}.w_proj"] = self.w_proj
        out[f"{prefix}.ffn_w1"] = self.ffn_w1
        out[f"{prefix}.ffn_b1"] = self.ffn_b1
        out[f"{prefix}.ffn_w2"] = self.ffn_w2
        out[f"{prefix}.ffn_b2"] = self.ffn_b2
        out[f"{prefix}.ln1_gain"] = self.ln1_gain
        out[f"{prefix}.ln1_shift"] = self.ln1_shift
        out[f"{prefix}.ln2_gain"] = self.ln2_gain
        out[f"{prefix}.ln2_shift"] = self.ln2_shift
        return out


def init_vit_block(rng: Rng, d_v: int, heads: int, ffn_hidden: int, dtype) -> VitBlockWeights:
    """Random frozen block. Projection scales follow 1/sqrt(fan_in) so the
    untrained backbone still produces O(1) activations."""
    if d_v % heads != 0:
        raise ConfigError(f"d_v {d_v} not divisible by head count {heads}")
    head_dim = d_v // heads
    w_std = d_v**-0.5

    def w(shape, std):
        return Tensor(rng.normal(shape) * std, dtype=dtype)

    return VitBlockWeights(
        wq=[w((d_v, head_dim), w_std) for _ in range(heads)],
        wk=[w((d_v, head_dim), w_std) for _ in range(heads)],
        wv=[w((d_v, head_dim), w_std) for _ in range(heads)],
        w_proj=w((d_v, d_v), w_std),
        ffn_w1=w((d_v, ffn_hidden), w_std),
        ffn_b1=Tensor(np.zeros(ffn_hidden), dtype=dtype),
        ffn_w2=w((ffn_hidden, d_v), ffn_hidden**-0.5),
        ffn_b2=Tensor(np.zeros(d_v), dtype=dtype),
        ln1_gain=Tensor(np.ones(d_v), dtype=dtype),
        ln1_shift=Tensor(np.zeros(d_v), dtype=dtype),
        ln2_gain=Tensor(np.ones(d_v), dtype=dtype),
        ln2_shift=Tensor(np.zeros(d_v), dtype=dtype),
    )


def patchify(image: np.ndarray, patch_side: int, embed: Tensor) -> VisionTokenGrid:
    """Cut a square image into non-overlapping patches, row-major, and embed
    each flattened patch. Patch index p covers image rows
    (p // n)*patch_side.. and columns (p % n)*patch_side.., n = side/patch."""
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise DimensionError(f"patchify: expected a square image, got {image.shape}")
    side = image.shape[0]
    if side % patch_side != 0:
        raise DimensionError(f"patchify: side {side} not divisible by patch {patch_side}")
    n = side // patch_side
    pixels = patch_side * patch_side
    if embed.shape != (pixels, embed.shape[1]):
        raise DimensionError(f"patchify: embed shape {embed.shape} does not take {pixels} pixels")
    patches = (
        image.reshape(n, patch_side, n, patch_side)
        .transpose(0, 2, 1, 3)
        .reshape(n * n, pixels)
    )
    tokens = matmul(Tensor(patches, dtype=embed.dtype), embed)
    return VisionTokenGrid(tokens=tokens, layer_index=0)


def vit_block(tokens: Tensor, w: VitBlockWeights) -> tuple[Tensor, list[Tensor]]:
    """Run one pre-norm block over a (T, d_v) token matrix.

    Attention per head h: A_h = softmax(Q_h K_h^T / sqrt(head_dim)), rows over
    columns of the score matrix. Returns the block output together with each
    head's full (T, T) attention so callers can inspect cross-attention rows.
    Works for any T, including grids carrying an injected query row.
    """
    if tokens.data.ndim != 2 or tokens.shape[1] != w.d_v:
        raise DimensionError(
            f"vit_block: token channels {tokens.shape} do not match block width {w.d_v}"
        )
    y = layernorm(tokens, w.ln1_gain, w.ln1_shift)
    head_outs = []
    attentions = []
    inv_sqrt = w.head_dim**-0.5
    for h in range(w.head_count):
        q = matmul(y, w.wq[h])
        k = matmul(y, w.wk[h])
        v = matmul(y, w.wv[h])
        a = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt))
        attentions.append(a)
        head_outs.append(matmul(a, v))
    mixed = add(tokens, matmul(hstack(head_outs), w.w_proj))
    y2 = layernorm(mixed, w.ln2_gain, w.ln2_shift)
    hid = gelu(add_rowvec(matmul(y2, w.ffn_w1), w.ffn_b1))
    out = add(mixed, add_rowvec(matmul(hid, w.ffn_w2), w.ffn_b2))
    return out, attentions


# ---------------------------------------------------------------------------
# query side
# ---------------------------------------------------------------------------


@dataclass
class QueryEmbedding:
    """Query features: per-token columns plus the summary vector.

    ``eos`` always equals column ``eos_index`` of ``full_tokens`` when the
    token matrix is present; externally loaded summaries come alone.
    """

    eos: Tensor  # (d_t,)
    full_tokens: Tensor | None  # (d_t, T_t), summary appended as last column
    eos_index: int


def init_query_table(rng: Rng, vocab: int, d_t: int, dtype) -> Tensor:
    return Tensor(rng.normal((vocab, d_t)), dtype=dtype)


def encode_query(ids, table: Tensor) -> QueryEmbedding:
    """Look up each id and summarize by the mean of the looked-up rows."""
    ids = [int(i) for i in ids]
    if not ids:
        raise ContractError("encode_query: empty id list")
    vocab = table.shape[0]
    for i in ids:
        if not 0 <= i < vocab:
            raise VocabularyError(f"encode_query: id {i} outside table of {vocab} rows")
    rows = table.data[ids]  # (T, d_t)
    eos_vec = rows.mean(axis=0)
    full = np.concatenate([rows, eos_vec[None, :]], axis=0).T  # (d_t, T + 1)
    return QueryEmbedding(
        eos=Tensor(eos_vec, dtype=table.dtype),
        full_tokens=Tensor(full, dtype=table.dtype),
        eos_index=len(ids),
    )


def load_external_query_embedding(path: str, expected_d_t: int | None = None) -> QueryEmbedding:
    """Load a summary vector produced by some external encoder.

    The file is a weight file holding a single rank-1 entry named "q_eos".
    """
    entries = checkpoint.load_checkpoint(path)
    if set(entries) != {"q_eos"}:
        raise FormatError(
            f"{path}: expected exactly one entry named 'q_eos', found {sorted(entries)}"
        )
    vec = entries["q_eos"]
    if vec.ndim != 1:
        raise FormatError(f"{path}: 'q_eos' must have rank 1, got rank {vec.ndim}")
    if expected_d_t is not None and vec.shape[0] != expected_d_t:
        raise ConfigError(
            f"{path}: query vector width {vec.shape[0]} does not match configured d_t {expected_d_t}"
        )
    return QueryEmbedding(eos=Tensor(vec), full_tokens=None, eos_index=0)
