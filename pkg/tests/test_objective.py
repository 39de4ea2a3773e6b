"""Model assembly and the training loop: loss pieces, parameter partition,
determinism, resume semantics, and the inference-path reports."""

import math

import numpy as np
import pytest

from qid.errors import ConfigError, ContractError, NumericsError
from qid.numerics import Rng, Tensor, grad_check, tensor_digest
from qid.objective import (
    AblationFlags,
    ModelConfig,
    QidModel,
    TrainConfig,
    attention_hit_rate,
    cross_entropy,
    dump_attention,
    evaluate,
    partition_params,
    split_dataset,
    total_loss,
    train,
    _sample_loss,
)
from qid.query_aware import FuseConfig
from qid.synthdoc import generate_dataset

RNG = np.random.default_rng(13)


def tiny_config(**overrides):
    base = dict(d_v=8, layers=2, heads=2, d_t=6, d_p=4, query_vocab=8, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


def build_tiny(seed=0, flags=None, **overrides):
    flags = flags or AblationFlags()
    return QidModel.build(tiny_config(**overrides), flags, seed=seed)


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_logits_is_log_k():
    loss = cross_entropy(Tensor(np.zeros(8)), 3)
    assert loss.item() == pytest.approx(math.log(8.0), rel=1e-12)


def test_cross_entropy_matches_log_softmax_oracle():
    logits = RNG.normal(size=8)
    for label in range(8):
        z = np.exp(logits - logits.max())
        expected = -math.log(z[label] / z.sum())
        got = cross_entropy(Tensor(logits), label).item()
        assert got == pytest.approx(expected, rel=1e-10)


def test_cross_entropy_gradient_against_finite_differences():
    logits = Tensor(RNG.normal(size=8), requires_grad=True)
    assert grad_check(lambda: cross_entropy(logits, 2), [logits]) < 1e-4


def test_cross_entropy_validation():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros(8)), 8)
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros(8)), -1)


def test_total_loss_decomposes_exactly():
    ce = Tensor(np.asarray(1.7))
    enp = Tensor(np.asarray(2.3))
    assert total_loss(ce, enp, 0.01).item() == pytest.approx(1.7 + 0.01 * 2.3, rel=1e-12)
    # alpha 0 leaves the value bit-identical to the bare cross entropy
    assert total_loss(ce, enp, 0.0).item() == 1.7
    with pytest.raises(ContractError):
        total_loss(ce, enp, -0.1)
    with pytest.raises(ContractError):
        total_loss(ce, Tensor(np.asarray(-1.0)), 0.1)


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


def test_model_config_defaults_injection_to_last_block():
    cfg = ModelConfig(layers=3)
    assert cfg.layers_q == (3,)
    assert cfg.t_v == 16
    assert cfg.ffn_width == 4 * cfg.d_v


def test_model_config_sorts_and_dedupes_layers_q():
    cfg = ModelConfig(layers=3, layers_q=(2, 1, 2))
    assert cfg.layers_q == (1, 2)


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(layers=2, layers_q=(3,))
    with pytest.raises(ConfigError):
        ModelConfig(d_p=7)
    with pytest.raises(ConfigError):
        ModelConfig(d_v=9, heads=2)
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16")


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(alpha=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(sigma=0.0)
    TrainConfig(sigma=0.0, flags=AblationFlags(no_fuse=True))  # legal without fuse
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------------------
# parameter partition
# ---------------------------------------------------------------------------


def test_partition_counts_for_default_wiring():
    model = build_tiny()
    trainable, frozen = partition_params(model)
    # one injected layer: psi (4) + phi (4) + head (2)
    assert sorted(trainable) == [
        "head.b",
        "head.w",
        "psi.layer2.b1",
        "psi.layer2.b2",
        "psi.layer2.w1",
        "psi.layer2.w2",
        "qagn.layer2.b1",
        "qagn.layer2.b2",
        "qagn.layer2.w1",
        "qagn.layer2.w2",
    ]
    # backbone: patch embed + query table + 15 tensors per block + code table
    assert len(frozen) == 2 + 15 * 2 + 1
    assert all(t.requires_grad for t in trainable.values())
    assert not any(t.requires_grad for t in frozen.values())


def test_partition_includes_pos_embed_when_enabled():
    model = build_tiny(learned_pos_embed=True)
    _, frozen = partition_params(model)
    assert "pos_embed" in frozen


def test_partition_without_query_agnostic():
    model = build_tiny(flags=AblationFlags(no_query_agnostic=True))
    trainable, frozen = partition_params(model)
    assert not any(n.startswith("qagn") for n in trainable)
    assert not any(n.startswith("qagn") for n in frozen)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_shapes_and_record_coverage():
    model = build_tiny(layers_q=(1, 2))
    sample = generate_dataset(1, seed=1)[0]
    logits, records = model.forward(
        sample.image, sample.query_ids, fuse=FuseConfig(enabled=False), rng=None
    )
    assert logits.shape == (8,)
    assert {(r.layer, r.head) for r in records} == {(1, 0), (1, 1), (2, 0), (2, 1)}
    assert all(r.a_cross.shape == (16,) for r in records)


def test_no_injection_model_is_query_blind():
    model = build_tiny(flags=AblationFlags(no_injection=True))
    sample = generate_dataset(1, seed=1)[0]
    fuse = FuseConfig(enabled=False)
    a, rec_a = model.forward(sample.image, [0, 4], fuse=fuse, rng=None)
    b, rec_b = model.forward(sample.image, [3, 7], fuse=fuse, rng=None)
    np.testing.assert_array_equal(a.data, b.data)
    assert rec_a == [] and rec_b == []


def test_injection_makes_output_query_dependent():
    model = build_tiny()
    sample = generate_dataset(1, seed=1)[0]
    fuse = FuseConfig(enabled=False)
    a, _ = model.forward(sample.image, [0, 4], fuse=fuse, rng=None)
    b, _ = model.forward(sample.image, [3, 7], fuse=fuse, rng=None)
    assert not np.array_equal(a.data, b.data)


def test_forward_is_deterministic_without_fuse():
    model = build_tiny()
    sample = generate_dataset(1, seed=1)[0]
    fuse = FuseConfig(enabled=False)
    a, _ = model.forward(sample.image, sample.query_ids, fuse=fuse, rng=None)
    b, _ = model.forward(sample.image, sample.query_ids, fuse=fuse, rng=None)
    np.testing.assert_array_equal(a.data, b.data)


def test_sample_loss_decomposition_holds_end_to_end():
    model = build_tiny()
    sample = generate_dataset(1, seed=1)[0]
    cfg = TrainConfig(alpha=0.01)
    total, ce, enp, records = _sample_loss(model, sample, cfg, Rng(0))
    assert total.item() == pytest.approx(ce + 0.01 * enp, abs=1e-9)
    assert len(records) == 2  # one injected layer, two heads


def test_full_token_ablation_injects_one_row_per_token():
    model = build_tiny(flags=AblationFlags(full_token_q=True))
    sample = generate_dataset(1, seed=1)[0]
    logits, records = model.forward(
        sample.image, sample.query_ids, fuse=FuseConfig(enabled=False), rng=None
    )
    assert logits.shape == (8,)
    # entropy is still scored on the summary row only
    assert {(r.layer, r.head) for r in records} == {(2, 0), (2, 1)}


def test_whole_model_gradients_against_finite_differences():
    model = build_tiny(seed=3)
    sample = generate_dataset(1, seed=4)[0]
    cfg = TrainConfig(alpha=0.01, flags=AblationFlags(no_fuse=True))
    trainable, _ = partition_params(model)

    def loss():
        total, *_ = _sample_loss(model, sample, cfg, None)
        return total

    assert grad_check(loss, list(trainable.values())) < 1e-4


# ---------------------------------------------------------------------------
# checkpoint entries
# ---------------------------------------------------------------------------


def test_load_entries_roundtrip_preserves_forward():
    model = build_tiny(seed=5)
    sample = generate_dataset(1, seed=2)[0]
    fuse = FuseConfig(enabled=False)
    ref, _ = model.forward(sample.image, sample.query_ids, fuse=fuse, rng=None)
    entries = model.checkpoint_entries()
    other = build_tiny(seed=99)  # different init, then overwritten
    other.load_entries(entries)
    got, _ = other.forward(sample.image, sample.query_ids, fuse=fuse, rng=None)
    np.testing.assert_array_equal(got.data, ref.data)


def test_load_entries_rejects_mismatches():
    model = build_tiny()
    entries = model.checkpoint_entries()
    missing = dict(entries)
    del missing["head.w"]
    with pytest.raises(ConfigError):
        model.load_entries(missing)

    wrong_shape = dict(entries)
    wrong_shape["head.w"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ConfigError):
        model.load_entries(wrong_shape)

    foreign = dict(entries)
    foreign["psi.layer1.w1"] = np.zeros((6, 8), dtype=np.float32)
    with pytest.raises(ConfigError):
        model.load_entries(foreign)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _quick_train(max_epochs=2, seed=0, model_seed=1, n=20, resume_state=None, **cfg_kw):
    data = generate_dataset(n, seed=7)
    cfg = TrainConfig(
        base_lr=1e-3,
        warmup_steps=5,
        batch_size=4,
        max_epochs=max_epochs,
        early_stop_patience=max_epochs,
        seed=seed,
        **cfg_kw,
    )
    model = QidModel.build(tiny_config(dtype="float32"), cfg.flags, seed=model_seed)
    result = train(cfg, model, data, resume_state=resume_state)
    return model, result


def test_train_emits_step_and_epoch_records():
    _, result = _quick_train(max_epochs=2)
    steps = [m for m in result.metrics if m.val_loss is None]
    epochs = [m for m in result.metrics if m.val_loss is not None]
    assert len(steps) == 2 * 4  # 16 train samples, batch 4, 2 epochs
    assert len(epochs) == 2
    assert all(m.val_accuracy is not None for m in epochs)
    assert result.epochs_run == 2 and not result.early_stopped


def test_train_is_bit_reproducible():
    _, a = _quick_train(max_epochs=2)
    _, b = _quick_train(max_epochs=2)
    assert [m.to_json() for m in a.metrics] == [m.to_json() for m in b.metrics]
    for name in a.best_entries:
        np.testing.assert_array_equal(a.best_entries[name], b.best_entries[name])


def test_train_never_touches_frozen_weights():
    model, _ = _quick_train(max_epochs=1)
    reference = QidModel.build(tiny_config(dtype="float32"), AblationFlags(), seed=1)
    _, frozen = partition_params(model)
    _, frozen_ref = partition_params(reference)
    assert tensor_digest(frozen) == tensor_digest(frozen_ref)


def test_resume_reproduces_the_uninterrupted_run():
    _, full = _quick_train(max_epochs=4)
    _, half = _quick_train(max_epochs=2)
    _, resumed = _quick_train(max_epochs=4, resume_state=half.last_state)

    tail_full = [m.to_json() for m in full.metrics if m.epoch > 2]
    tail_resumed = [m.to_json() for m in resumed.metrics]
    assert tail_resumed == tail_full
    assert resumed.epochs_run == 4
    for name in full.best_entries:
        np.testing.assert_array_equal(resumed.best_entries[name], full.best_entries[name])


def test_train_aborts_loudly_on_non_finite_values():
    data = generate_dataset(10, seed=7)
    cfg = TrainConfig(batch_size=4, max_epochs=1, warmup_steps=1)
    model = QidModel.build(tiny_config(dtype="float32"), cfg.flags, seed=1)
    model.psi[2].w1.data[:] = 1e30  # overflow bait on the first injection
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericsError, match="step 1"):
            train(cfg, model, data)


def test_alpha_zero_and_no_defuse_agree():
    _, by_alpha = _quick_train(max_epochs=1, alpha=0.0)
    _, by_flag = _quick_train(max_epochs=1, alpha=0.01, flags=AblationFlags(no_defuse=True))
    assert [m.loss_total for m in by_alpha.metrics] == [m.loss_total for m in by_flag.metrics]


# ---------------------------------------------------------------------------
# splits and reports
# ---------------------------------------------------------------------------


def test_split_takes_last_fifth_for_validation():
    samples = generate_dataset(20, seed=1)
    tr, va = split_dataset(samples)
    assert len(tr) == 16 and len(va) == 4
    np.testing.assert_array_equal(va[0].image, samples[16].image)
    with pytest.raises(ConfigError):
        split_dataset(samples[:4])


def test_evaluate_reports_accuracy_and_entropy():
    model = build_tiny()
    samples = generate_dataset(10, seed=3)
    report = evaluate(model, samples)
    assert report.n == 10
    assert 0.0 <= report.accuracy <= 1.0
    assert report.mean_entropy >= 0.0
    again = evaluate(model, samples)
    assert (report.accuracy, report.mean_entropy) == (again.accuracy, again.mean_entropy)
    with pytest.raises(ContractError):
        evaluate(model, [])


def test_attention_reports_require_injection():
    blind = build_tiny(flags=AblationFlags(no_injection=True))
    samples = generate_dataset(3, seed=3)
    with pytest.raises(ContractError):
        attention_hit_rate(blind, samples, grid_size=4)
    with pytest.raises(ContractError):
        dump_attention(blind, samples[0], grid_size=4)


def test_dump_attention_structure():
    model = build_tiny(layers_q=(1, 2))
    sample = generate_dataset(1, seed=3)[0]
    rows, summary = dump_attention(model, sample, grid_size=4)
    assert len(rows) == 4  # two layers, two heads
    assert all(len(r["a_cross"]) == 16 for r in rows)
    assert summary["truth_patch"] == sample.query_patch(4)
    assert summary["records"] == 4
    assert isinstance(summary["hit"], bool)
    rate = attention_hit_rate(model, [sample], grid_size=4)
    assert rate in (0.0, 1.0)
    assert (rate == 1.0) == summary["hit"]
