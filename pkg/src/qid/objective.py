"""Model assembly, the training objective, and the loops around it.

The overall loss is L = L_ce + alpha * L_enp: cross entropy on the answer
plus the weighted cross-attention entropy regularizer. Only the query
projector(s) psi, the positional bias MLP(s) phi, and the readout head ever
receive gradients; the backbone, the patch embedding, the query table, and
the sinusoidal code stay frozen, which the training loop verifies by hashing
them before and after.

The readout stands in for a decoder: mean-pool the final vision grid and
apply one linear map to class logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import (
    QueryEmbedding,
    VisionTokenGrid,
    VitBlockWeights,
    encode_query,
    init_query_table,
    init_vit_block,
    patchify,
    vit_block,
)
from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError, NumericsError
from .numerics import (
    AdamW,
    Rng,
    Tape,
    Tensor,
    add,
    add_rowvec,
    as_row,
    as_vector,
    backward,
    matmul,
    mean_rows,
    no_tape,
    record_op,
    scale,
    tensor_digest,
)
from .query_agnostic import SinusoidalBiasCache, apply_bias, make_bias_cache
from .query_aware import (
    CrossAttentionRecord,
    FuseConfig,
    PsiProjector,
    entropy_loss,
    extract_cross_attention,
    fuse_augment,
    init_psi,
    inject,
    inject_rows,
    project_query,
    strip_query,
)
from .synthdoc import SynthSample

VAL_FRACTION = 0.2


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class AblationFlags:
    no_fuse: bool = False
    no_defuse: bool = False
    no_query_agnostic: bool = False
    zero_sinusoid: bool = False
    full_token_q: bool = False
    no_injection: bool = False

    NAMES = ("no_fuse", "no_defuse", "no_query_agnostic", "zero_sinusoid", "full_token_q", "no_injection")


@dataclass
class ModelConfig:
    image_side: int = 32
    patch_side: int = 8
    d_v: int = 32
    layers: int = 2
    heads: int = 2
    d_t: int = 32
    d_p: int = 64
    n_classes: int = 8
    query_vocab: int = 8
    ffn_width: int = 0  # 0 means 4 * d_v
    layers_q: tuple[int, ...] = ()  # empty means {layers}, the last block
    learned_pos_embed: bool = False
    renormalize_cross: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ConfigError(f"image side {self.image_side} not divisible by patch {self.patch_side}")
        if self.layers < 1:
            raise ConfigError(f"need at least one block, got {self.layers}")
        if self.d_v % self.heads != 0:
            raise ConfigError(f"d_v {self.d_v} not divisible by {self.heads} heads")
        if self.d_p < 2 or self.d_p % 2 != 0:
            raise ConfigError(f"d_p must be even and positive, got {self.d_p}")
        if self.n_classes < 2:
            raise ConfigError(f"need at least two classes, got {self.n_classes}")
        if self.ffn_width == 0:
            self.ffn_width = 4 * self.d_v
        if not self.layers_q:
            self.layers_q = (self.layers,)
        self.layers_q = tuple(sorted(set(int(l) for l in self.layers_q)))
        bad = [l for l in self.layers_q if not 1 <= l <= self.layers]
        if bad:
            raise ConfigError(f"layers_q {bad} outside 1..{self.layers}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype '{self.dtype}'")

    @property
    def t_v(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class TrainConfig:
    alpha: float = 1e-2
    sigma: float = 0.16
    base_lr: float = 2e-5
    warmup_steps: int = 100
    batch_size: int = 8
    max_epochs: int = 5
    early_stop_patience: int = 1
    weight_decay: float = 0.0
    seed: int = 42
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.sigma <= 0 and not self.flags.no_fuse:
            raise ConfigError(f"sigma must be positive while fuse is enabled, got {self.sigma}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, max_epochs, early_stop_patience must be positive")


@dataclass
class HeadWeights:
    """Linear readout d_v -> n_classes over the mean-pooled grid."""

    w: Tensor
    b: Tensor

    def named(self, prefix: str = "head") -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-softmax of the true class, max-shifted for stability."""
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy: expected a logit vector, got shape {logits.shape}")
    k = logits.shape[0]
    label = int(label)
    if not 0 <= label < k:
        raise ContractError(f"cross_entropy: label {label} outside {k} classes")
    x = logits.data
    m = float(x.max())
    z = np.exp(x - m)
    lse = m + math.log(float(z.sum()))
    probs = (z / z.sum()).astype(logits.dtype)
    out = Tensor(np.asarray(lse - float(x[label]), dtype=logits.dtype))

    def bw(g):
        grad = probs.copy()
        grad[label] -= 1.0
        return (g * grad,)

    return record_op(out, (logits,), bw)


def total_loss(ce: Tensor, enp: Tensor, alpha: float) -> Tensor:
    """L = ce + alpha * enp. With alpha = 0 the value equals ce exactly and
    the entropy term contributes zero gradient."""
    alpha = float(alpha)
    if alpha < 0:
        raise ContractError(f"total_loss: negative alpha {alpha}")
    if ce.shape != () or enp.shape != ():
        raise ContractError("total_loss: both terms must be scalars")
    # the log shift can leave a ~1e-12 negative residual on one-hot rows
    if float(enp.data) < -1e-8:
        raise ContractError(f"total_loss: negative entropy term {float(enp.data)}")
    return add(ce, scale(enp, alpha))


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class QidModel:
    """Frozen backbone plus the trainable query/positional adapters."""

    def __init__(
        self,
        cfg: ModelConfig,
        flags: AblationFlags,
        patch_embed: Tensor,
        pos_embed: Tensor | None,
        blocks: list[VitBlockWeights],
        query_table: Tensor,
        psi: dict[int, PsiProjector],
        qagn: dict[int, SinusoidalBiasCache] | None,
        head: HeadWeights,
    ) -> None:
        self.cfg = cfg
        self.flags = flags
        self.patch_embed = patch_embed
        self.pos_embed = pos_embed
        self.blocks = blocks
        self.query_table = query_table
        self.psi = psi
        self.qagn = qagn
        self.head = head

    @classmethod
    def build(cls, cfg: ModelConfig, flags: AblationFlags, seed: int) -> "QidModel":
        rng = Rng(seed)
        dtype = cfg.np_dtype
        pixels = cfg.patch_side**2
        patch_embed = Tensor(
            rng.child("patch_embed").normal((pixels, cfg.d_v)) * pixels**-0.5, dtype=dtype
        )
        pos_embed = None
        if cfg.learned_pos_embed:
            pos_embed = Tensor(rng.child("pos_embed").normal((cfg.t_v, cfg.d_v)) * 0.2, dtype=dtype)
        blocks = [
            init_vit_block(rng.child(f"block{l}"), cfg.d_v, cfg.heads, cfg.ffn_width, dtype)
            for l in range(1, cfg.layers + 1)
        ]
        query_table = init_query_table(rng.child("query_table"), cfg.query_vocab, cfg.d_t, dtype)
        psi = {
            l: init_psi(rng.child(f"psi.layer{l}"), cfg.d_t, cfg.d_v, dtype) for l in cfg.layers_q
        }
        qagn = None
        if not flags.no_query_agnostic:
            qagn = {
                l: make_bias_cache(
                    rng.child(f"qagn.layer{l}"), cfg.t_v, cfg.d_p, cfg.d_v, dtype,
                    zero_table=flags.zero_sinusoid,
                )
                for l in cfg.layers_q
            }
        head_rng = rng.child("head")
        head = HeadWeights(
            w=Tensor(head_rng.normal((cfg.d_v, cfg.n_classes)) * 0.02, dtype=dtype, requires_grad=True),
            b=Tensor(np.zeros(cfg.n_classes), dtype=dtype, requires_grad=True),
        )
        return cls(cfg, flags, patch_embed, pos_embed, blocks, query_table, psi, qagn, head)

    # -- weight bookkeeping -------------------------------------------------

    def named_weights(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"patch_embed": self.patch_embed}
        if self.pos_embed is not None:
            out["pos_embed"] = self.pos_embed
        for l, block in enumerate(self.blocks, start=1):
            out.update(block.named(f"block{l}"))
        out["query_table"] = self.query_table
        for l in sorted(self.psi):
            out.update(self.psi[l].named(f"psi.layer{l}"))
        if self.qagn is not None:
            for l in sorted(self.qagn):
                out.update(self.qagn[l].named(f"qagn.layer{l}"))
        out.update(self.head.named())
        return out

    def checkpoint_entries(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_weights().items()}

    _RESERVED_PREFIXES = ("opt.", "train.", "best.", "qagn_bias.")

    def load_entries(self, entries: dict[str, np.ndarray]) -> None:
        """Overwrite weights from checkpoint entries; install any precomputed
        bias matrices. Shape or name mismatches mean the config used to build
        this model disagrees with the checkpoint."""
        expected = self.named_weights()
        for name, t in expected.items():
            if name not in entries:
                raise ConfigError(f"checkpoint is missing entry '{name}'")
            arr = np.asarray(entries[name])
            if arr.shape != t.shape:
                raise ConfigError(
                    f"checkpoint entry '{name}' has shape {arr.shape}, model expects {t.shape}"
                )
            t.data = np.ascontiguousarray(arr, dtype=self.cfg.np_dtype)
        for name in entries:
            if name in expected or name.startswith(self._RESERVED_PREFIXES):
                continue
            raise ConfigError(f"checkpoint entry '{name}' does not belong to this configuration")
        if self.qagn is not None:
            bias_names = [n for n in entries if n.startswith("qagn_bias.")]
            if bias_names:
                for l in self.cfg.layers_q:
                    name = f"qagn_bias.layer{l}"
                    if name not in entries:
                        raise ConfigError(f"checkpoint has partial precomputed bias, missing '{name}'")
                    cache = self.qagn[l]
                    cache.cached_bias = Tensor(entries[name], dtype=self.cfg.np_dtype)
                    cache.frozen = True

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        image: np.ndarray,
        query_ids,
        *,
        fuse: FuseConfig,
        rng: Rng | None,
        query: QueryEmbedding | None = None,
    ) -> tuple[Tensor, list[CrossAttentionRecord]]:
        """One sample through the full stack. Returns class logits and the
        cross-attention records of every injected (layer, head)."""
        cfg = self.cfg
        flags = self.flags
        grid = patchify(image, cfg.patch_side, self.patch_embed)
        if self.pos_embed is not None:
            grid = VisionTokenGrid(add(grid.tokens, self.pos_embed), 0)

        qvecs: list[Tensor] = []
        eos_offset = 0
        if not flags.no_injection:
            qe = query if query is not None else encode_query(query_ids, self.query_table)
            if flags.full_token_q:
                if qe.full_tokens is None:
                    raise ContractError("full_token_q needs the per-token query matrix")
                cols = qe.full_tokens.data
                for j in range(cols.shape[1]):
                    v = cols[:, j]
                    nrm = float(np.linalg.norm(v))
                    if not nrm > 0.0:
                        raise DegenerateInputError(f"full_token_q: query column {j} has zero norm")
                    qvecs.append(Tensor(v / nrm, dtype=cfg.np_dtype))
                eos_offset = qe.eos_index
            else:
                qvecs = [fuse_augment(qe.eos, fuse, rng)]
                eos_offset = 0

        records: list[CrossAttentionRecord] = []
        for layer in range(1, cfg.layers + 1):
            block = self.blocks[layer - 1]
            if layer in cfg.layers_q and qvecs:
                projector = self.psi[layer]
                pqs = [project_query(v, projector) for v in qvecs]
                if len(pqs) == 1:
                    stacked = inject(grid.tokens, pqs[0], cfg.t_v)
                else:
                    stacked = inject_rows(grid.tokens, pqs, cfg.t_v)
                out, attentions = vit_block(stacked, block)
                for h, attn in enumerate(attentions):
                    records.append(
                        extract_cross_attention(
                            attn,
                            layer=layer,
                            head=h,
                            t_v=cfg.t_v,
                            query_row=cfg.t_v + eos_offset,
                            renormalize=cfg.renormalize_cross,
                        )
                    )
                grid = strip_query(out, cfg.t_v, layer, n_query=len(pqs))
            else:
                out, _ = vit_block(grid.tokens, block)
                grid = VisionTokenGrid(out, layer)
            if layer in cfg.layers_q and self.qagn is not None:
                grid = apply_bias(grid, self.qagn[layer], cfg.t_v)

        pooled = mean_rows(grid.tokens)
        logits = as_vector(add_rowvec(matmul(as_row(pooled), self.head.w), self.head.b))
        return logits, records


def partition_params(model: QidModel) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Split weights into (trainable, frozen) by name.

    Trainable: every psi, every phi, and the head. Frozen: the backbone
    blocks, the patch embedding, the query table, any positional embedding,
    and the sinusoidal tables. The sinusoidal code P never trains.
    """
    trainable: dict[str, Tensor] = {}
    for l in sorted(model.psi):
        trainable.update(model.psi[l].named(f"psi.layer{l}"))
    if model.qagn is not None:
        for l in sorted(model.qagn):
            trainable.update(model.qagn[l].named(f"qagn.layer{l}"))
    trainable.update(model.head.named())

    frozen: dict[str, Tensor] = {"patch_embed": model.patch_embed, "query_table": model.query_table}
    if model.pos_embed is not None:
        frozen["pos_embed"] = model.pos_embed
    for l, block in enumerate(model.blocks, start=1):
        frozen.update(block.named(f"block{l}"))
    if model.qagn is not None:
        for l in sorted(model.qagn):
            frozen[f"qagn.layer{l}.table"] = model.qagn[l].table

    for t in trainable.values():
        t.requires_grad = True
    for t in frozen.values():
        t.requires_grad = False
    return trainable, frozen


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss_total: float
    loss_ce: float
    loss_enp: float
    mean_entropy: float
    val_loss: float | None = None
    val_accuracy: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "epoch": self.epoch,
                "loss_total": self.loss_total,
                "loss_ce": self.loss_ce,
                "loss_enp": self.loss_enp,
                "mean_entropy": self.mean_entropy,
                "val_loss": self.val_loss,
                "val_accuracy": self.val_accuracy,
            },
            separators=(",", ":"),
        )


@dataclass
class EvalReport:
    accuracy: float
    mean_entropy: float
    n: int

    def to_json(self) -> str:
        return json.dumps(
            {"accuracy": self.accuracy, "mean_entropy": self.mean_entropy, "n": self.n},
            separators=(",", ":"),
        )


@dataclass
class TrainResult:
    metrics: list[MetricsRecord]
    best_entries: dict[str, np.ndarray]
    last_state: dict[str, np.ndarray]
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    early_stopped: bool


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def split_dataset(samples: list[SynthSample]) -> tuple[list[SynthSample], list[SynthSample]]:
    """Deterministic split: the last 20% of the samples, in generation order,
    are validation."""
    if len(samples) < 5:
        raise ConfigError(f"dataset of {len(samples)} samples is too small to split")
    n_val = max(1, round(len(samples) * VAL_FRACTION))
    return samples[:-n_val], samples[-n_val:]


def _sample_loss(
    model: QidModel, sample: SynthSample, cfg: TrainConfig, rng: Rng | None
) -> tuple[Tensor, float, float, list[CrossAttentionRecord]]:
    fuse = FuseConfig(sigma=cfg.sigma, enabled=not cfg.flags.no_fuse)
    logits, records = model.forward(sample.image, sample.query_ids, fuse=fuse, rng=rng)
    ce = cross_entropy(logits, sample.answer)
    if records:
        enp = entropy_loss(records, model.cfg.layers_q, model.cfg.heads)
    else:
        enp = Tensor(np.asarray(0.0, dtype=model.cfg.np_dtype))
    alpha_eff = 0.0 if cfg.flags.no_defuse else cfg.alpha
    total = total_loss(ce, enp, alpha_eff)
    return total, float(ce.data), float(enp.data), records


def _fold_sum(parts: list[Tensor]) -> Tensor:
    acc = parts[0]
    for p in parts[1:]:
        acc = add(acc, p)
    return acc


def train(
    cfg: TrainConfig,
    model: QidModel,
    samples: list[SynthSample],
    *,
    sink=None,
    resume_state: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Optimize the trainable adapters on the given samples.

    Emits one MetricsRecord per optimizer step and one per epoch (the latter
    carrying validation loss and accuracy). Stops early after
    ``early_stop_patience`` consecutive epochs without a validation-loss
    decrease. The returned best_entries snapshot the weights at the best
    validation epoch; last_state additionally carries optimizer moments and
    loop counters so a run can resume at the epoch boundary and reproduce
    the uninterrupted run's next steps exactly.
    """
    train_samples, val_samples = split_dataset(samples)
    trainable, frozen = partition_params(model)
    frozen_digest = tensor_digest(frozen)
    opt = AdamW(
        sorted(trainable.items()),
        base_lr=cfg.base_lr,
        warmup_steps=cfg.warmup_steps,
        weight_decay=cfg.weight_decay,
    )

    metrics: list[MetricsRecord] = []

    def emit(record: MetricsRecord) -> None:
        metrics.append(record)
        if sink is not None:
            sink(record)

    step = 0
    start_epoch = 1
    best_val = math.inf
    best_epoch = 0
    streak = 0
    best_entries = model.checkpoint_entries()
    if resume_state is not None:
        model.load_entries(resume_state)
        opt.load_state_entries(resume_state)

        # counters come back rank-1 after a file roundtrip
        def counter(name: str) -> float:
            return float(np.asarray(resume_state[name]).ravel()[0])

        step = int(round(counter("train.step")))
        start_epoch = int(round(counter("train.epoch_next")))
        best_val = counter("train.best_val")
        best_epoch = int(round(counter("train.best_epoch")))
        streak = int(round(counter("train.streak")))
        best_entries = {
            name[len("best.") :]: arr for name, arr in resume_state.items() if name.startswith("best.")
        }

    early_stopped = False
    epochs_run = start_epoch - 1
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        order = Rng(cfg.seed).child(f"shuffle.epoch{epoch}").permutation(len(train_samples))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            try:
                with Tape() as tape:
                    totals = []
                    ce_vals = []
                    enp_vals = []
                    ent_vals = []
                    for di in batch:
                        di = int(di)
                        rng = Rng(cfg.seed).child(f"fuse.epoch{epoch}.sample{di}")
                        total, ce_v, enp_v, records = _sample_loss(
                            model, train_samples[di], cfg, rng
                        )
                        totals.append(total)
                        ce_vals.append(ce_v)
                        enp_vals.append(enp_v)
                        ent_vals.extend(r.entropy for r in records)
                    batch_loss = scale(_fold_sum(totals), 1.0 / len(totals))
                    backward(batch_loss, tape)
                opt.step()
                opt.zero_grad()
            except NumericsError as exc:
                raise NumericsError(
                    f"training aborted at step {step + 1} (epoch {epoch}): {exc}"
                ) from exc
            step += 1
            emit(
                MetricsRecord(
                    step=step,
                    epoch=epoch,
                    loss_total=float(batch_loss.data),
                    loss_ce=float(np.mean(ce_vals)),
                    loss_enp=float(np.mean(enp_vals)),
                    mean_entropy=float(np.mean(ent_vals)) if ent_vals else 0.0,
                )
            )

        val_loss, val_accuracy, val_entropy = _validate(model, val_samples)
        epoch_steps = [m for m in metrics if m.epoch == epoch and m.val_loss is None]
        emit(
            MetricsRecord(
                step=step,
                epoch=epoch,
                loss_total=float(np.mean([m.loss_total for m in epoch_steps])),
                loss_ce=float(np.mean([m.loss_ce for m in epoch_steps])),
                loss_enp=float(np.mean([m.loss_enp for m in epoch_steps])),
                mean_entropy=val_entropy,
                val_loss=val_loss,
                val_accuracy=val_accuracy,
            )
        )
        epochs_run = epoch
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_entries = model.checkpoint_entries()
            streak = 0
        else:
            streak += 1
        if streak >= cfg.early_stop_patience:
            early_stopped = epoch < cfg.max_epochs
            break

    if tensor_digest(frozen) != frozen_digest:
        raise ContractError("frozen weights changed during training")

    last_state = model.checkpoint_entries()
    last_state.update(opt.state_entries())
    last_state["train.step"] = np.asarray(float(step), dtype=np.float32)
    last_state["train.epoch_next"] = np.asarray(float(epochs_run + 1), dtype=np.float32)
    last_state["train.best_val"] = np.asarray(best_val, dtype=np.float32)
    last_state["train.best_epoch"] = np.asarray(float(best_epoch), dtype=np.float32)
    last_state["train.streak"] = np.asarray(float(streak), dtype=np.float32)
    for name, arr in best_entries.items():
        last_state[f"best.{name}"] = arr
    return TrainResult(
        metrics=metrics,
        best_entries=best_entries,
        last_state=last_state,
        best_val_loss=best_val,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        early_stopped=early_stopped,
    )


def _validate(model: QidModel, samples: list[SynthSample]) -> tuple[float, float, float]:
    """Inference-path validation: fuse disabled, loss is plain cross entropy."""
    losses = []
    entropies = []
    correct = 0
    fuse = FuseConfig(enabled=False)
    with no_tape():
        for s in samples:
            logits, records = model.forward(s.image, s.query_ids, fuse=fuse, rng=None)
            losses.append(float(cross_entropy(logits, s.answer).data))
            entropies.extend(r.entropy for r in records)
            if int(np.argmax(logits.data)) == s.answer:
                correct += 1
    mean_entropy = float(np.mean(entropies)) if entropies else 0.0
    return float(np.mean(losses)), correct / len(samples), mean_entropy


def evaluate(model: QidModel, samples: list[SynthSample]) -> EvalReport:
    """Deterministic inference over a sample list: accuracy plus the mean
    cross-attention entropy across samples, injected layers, and heads."""
    if not samples:
        raise ContractError("evaluate: empty sample list")
    fuse = FuseConfig(enabled=False)
    correct = 0
    entropies = []
    with no_tape():
        for s in samples:
            logits, records = model.forward(s.image, s.query_ids, fuse=fuse, rng=None)
            if int(np.argmax(logits.data)) == s.answer:
                correct += 1
            entropies.extend(r.entropy for r in records)
    mean_entropy = float(np.mean(entropies)) if entropies else 0.0
    return EvalReport(accuracy=correct / len(samples), mean_entropy=mean_entropy, n=len(samples))


def attention_hit_rate(model: QidModel, samples: list[SynthSample], grid_size: int) -> float:
    """Fraction of samples whose head-averaged cross-attention at the deepest
    injected layer peaks exactly on the queried patch."""
    if model.flags.no_injection:
        raise ContractError("attention_hit_rate: model never injects a query")
    deepest = max(model.cfg.layers_q)
    fuse = FuseConfig(enabled=False)
    hits = 0
    with no_tape():
        for s in samples:
            _, records = model.forward(s.image, s.query_ids, fuse=fuse, rng=None)
            rows = [r.a_cross.data for r in records if r.layer == deepest]
            mean_row = np.mean(rows, axis=0)
            if int(np.argmax(mean_row)) == s.query_patch(grid_size):
                hits += 1
    return hits / len(samples)


def dump_attention(model: QidModel, sample: SynthSample, grid_size: int) -> tuple[list[dict], dict]:
    """Inference-path cross-attention for one sample: one dict per
    (layer, head) record, plus a summary naming the ground-truth patch and
    whether the deepest layer's head-averaged argmax hits it."""
    if model.flags.no_injection:
        raise ContractError("dump_attention: model never injects a query")
    fuse = FuseConfig(enabled=False)
    with no_tape():
        _, records = model.forward(sample.image, sample.query_ids, fuse=fuse, rng=None)
    rows = [
        {
            "layer": r.layer,
            "head": r.head,
            "entropy": r.entropy,
            "a_cross": [float(v) for v in r.a_cross.data],
        }
        for r in records
    ]
    deepest = max(model.cfg.layers_q)
    mean_row = np.mean([r.a_cross.data for r in records if r.layer == deepest], axis=0)
    truth = sample.query_patch(grid_size)
    summary = {
        "truth_patch": truth,
        "argmax": int(np.argmax(mean_row)),
        "hit": bool(int(np.argmax(mean_row)) == truth),
        "records": len(rows),
    }
    return rows, summary
