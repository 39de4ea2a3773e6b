"""Command-line front end.

Five subcommands: gen-data, train, eval, precompute-bias, dump-attn. All of
them share one flat key=value configuration namespace, resolved in a fixed
order: built-in defaults, then --config FILE, then the QID_SEED environment
variable (seed only), then repeated --set KEY=VALUE, then repeated
--ablation NAME. The fully resolved configuration is written next to each
command's primary output as "<output>.config" so any artifact can be traced
back to the exact settings that produced it.

Exit codes: 0 success, 2 contract or configuration error, 3 I/O or file
format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, FormatError, NumericsError
from .objective import (
    AblationFlags,
    ModelConfig,
    QidModel,
    TrainConfig,
    dump_attention,
    evaluate,
    split_dataset,
    train,
)
from .query_agnostic import precompute_bias
from .synthdoc import encode_query_cell, generate_dataset, read_dataset, write_dataset

# key -> (type tag, default as a raw string)
SCHEMA: dict[str, tuple[str, str]] = {
    "seed": ("int", "42"),
    # model dims
    "image_side": ("int", "32"),
    "patch_side": ("int", "8"),
    "d_v": ("int", "32"),
    "layers": ("int", "2"),
    "heads": ("int", "2"),
    "d_t": ("int", "32"),
    "d_p": ("int", "64"),
    "n_classes": ("int", "8"),
    "ffn_width": ("int", "0"),
    "layers_q": ("str", "last"),
    "learned_pos_embed": ("bool", "false"),
    "renormalize_cross": ("bool", "false"),
    "dtype": ("str", "float32"),
    # synthetic documents
    "grid_size": ("int", "4"),
    "noise": ("float", "0.1"),
    "composition": ("str", "balanced"),
    "n_samples": ("int", "10000"),
    # optimization
    "alpha": ("float", "0.01"),
    "sigma": ("float", "0.16"),
    "base_lr": ("float", "2e-05"),
    "warmup_steps": ("int", "100"),
    "batch_size": ("int", "8"),
    "max_epochs": ("int", "5"),
    "early_stop_patience": ("int", "1"),
    "weight_decay": ("float", "0.0"),
    # ablation switches
    "no_fuse": ("bool", "false"),
    "no_defuse": ("bool", "false"),
    "no_query_agnostic": ("bool", "false"),
    "zero_sinusoid": ("bool", "false"),
    "full_token_q": ("bool", "false"),
    "no_injection": ("bool", "false"),
    # paths and selectors
    "data": ("str", ""),
    "checkpoint": ("str", ""),
    "out": ("str", ""),
    "resume": ("str", ""),
    "eval_split": ("str", "val"),
    "sample_index": ("int", "0"),
    "query": ("str", ""),
}

_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, raw: str):
    tag, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key '{key}' expects {tag}, got '{raw}'") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected KEY=VALUE, got '{line}'")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            out[key] = raw.strip()
    return out


def resolve_config(args: argparse.Namespace) -> dict[str, object]:
    raw = {key: default for key, (_, default) in SCHEMA.items()}
    if args.config:
        raw.update(_read_config_file(args.config))
    env_seed = os.environ.get("QID_SEED")
    if env_seed:
        raw["seed"] = env_seed
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        raw[key] = value.strip()
    for name in args.ablation or []:
        if name not in AblationFlags.NAMES:
            raise ConfigError(
                f"unknown ablation '{name}' (choose from {', '.join(AblationFlags.NAMES)})"
            )
        raw[name] = "true"
    return {key: _coerce(key, raw[key]) for key in SCHEMA}


def write_resolved_config(cfg: dict[str, object], primary_output: str) -> str:
    path = primary_output + ".config"
    lines = [f"{key}={_format(cfg[key])}" for key in sorted(SCHEMA)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------


def _parse_layers_q(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if raw in ("", "last"):
        return ()
    try:
        return tuple(int(part) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"layers_q expects 'last' or comma-separated integers, got '{raw}'") from None


def _flags(cfg: dict[str, object]) -> AblationFlags:
    return AblationFlags(**{name: bool(cfg[name]) for name in AblationFlags.NAMES})


def _model_config(cfg: dict[str, object]) -> ModelConfig:
    return ModelConfig(
        image_side=cfg["image_side"],
        patch_side=cfg["patch_side"],
        d_v=cfg["d_v"],
        layers=cfg["layers"],
        heads=cfg["heads"],
        d_t=cfg["d_t"],
        d_p=cfg["d_p"],
        n_classes=cfg["n_classes"],
        query_vocab=2 * cfg["grid_size"],
        ffn_width=cfg["ffn_width"],
        layers_q=_parse_layers_q(cfg["layers_q"]),
        learned_pos_embed=cfg["learned_pos_embed"],
        renormalize_cross=cfg["renormalize_cross"],
        dtype=cfg["dtype"],
    )


def _train_config(cfg: dict[str, object]) -> TrainConfig:
    return TrainConfig(
        alpha=cfg["alpha"],
        sigma=cfg["sigma"],
        base_lr=cfg["base_lr"],
        warmup_steps=cfg["warmup_steps"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        early_stop_patience=cfg["early_stop_patience"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        flags=_flags(cfg),
    )


def _require(cfg: dict[str, object], key: str) -> str:
    value = str(cfg[key])
    if not value:
        raise ConfigError(f"this command requires '{key}' to be set")
    return value


def _load_model(cfg: dict[str, object]) -> QidModel:
    model = QidModel.build(_model_config(cfg), _flags(cfg), int(cfg["seed"]))
    entries = load_checkpoint(_require(cfg, "checkpoint"))
    model.load_entries(entries)
    return model


def _select_split(cfg: dict[str, object], samples):
    split = cfg["eval_split"]
    if split == "all":
        return samples
    train_part, val_part = split_dataset(samples)
    if split == "train":
        return train_part
    if split == "val":
        return val_part
    raise ConfigError(f"eval_split must be train, val, or all, got '{split}'")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: dict[str, object]) -> int:
    out = _require(cfg, "out")
    samples = generate_dataset(
        cfg["n_samples"],
        grid_size=cfg["grid_size"],
        n_classes=cfg["n_classes"],
        seed=cfg["seed"],
        noise=cfg["noise"],
        composition=cfg["composition"],
    )
    write_dataset(samples, out)
    write_resolved_config(cfg, out)
    print(json.dumps({"written": len(samples), "path": out}, separators=(",", ":")))
    return 0


def cmd_train(cfg: dict[str, object]) -> int:
    out = _require(cfg, "out")
    samples = read_dataset(_require(cfg, "data"))
    model = QidModel.build(_model_config(cfg), _flags(cfg), int(cfg["seed"]))
    resume_state = None
    if cfg["resume"]:
        resume_state = load_checkpoint(str(cfg["resume"]))
        if "train.step" not in resume_state:
            raise ConfigError(f"'{cfg['resume']}' is not a resumable training state")
    metrics_path = out + ".metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        result = train(
            _train_config(cfg),
            model,
            samples,
            sink=lambda rec: fh.write(rec.to_json() + "\n"),
            resume_state=resume_state,
        )
    save_checkpoint(out, result.best_entries)
    save_checkpoint(out + ".last", result.last_state)
    write_resolved_config(cfg, out)
    print(
        json.dumps(
            {
                "best_val_loss": result.best_val_loss,
                "best_epoch": result.best_epoch,
                "epochs_run": result.epochs_run,
                "early_stopped": result.early_stopped,
                "steps": result.metrics[-1].step if result.metrics else 0,
                "path": out,
            },
            separators=(",", ":"),
        )
    )
    return 0


def cmd_eval(cfg: dict[str, object]) -> int:
    samples = _select_split(cfg, read_dataset(_require(cfg, "data")))
    model = _load_model(cfg)
    report = evaluate(model, samples)
    line = report.to_json()
    if cfg["out"]:
        with open(str(cfg["out"]), "w", encoding="utf-8") as fh:
            fh.write(line + "\n")
        write_resolved_config(cfg, str(cfg["out"]))
    print(line)
    return 0


def cmd_precompute_bias(cfg: dict[str, object]) -> int:
    out = _require(cfg, "out")
    model = _load_model(cfg)
    if model.qagn is None:
        raise ContractError("this configuration has no positional bias to precompute")
    entries = load_checkpoint(str(cfg["checkpoint"]))
    added = []
    for layer in sorted(model.qagn):
        cache = model.qagn[layer]
        bias = precompute_bias(cache)
        entries[f"qagn_bias.layer{layer}"] = bias.data
        added.append(layer)
    save_checkpoint(out, entries)
    write_resolved_config(cfg, out)
    print(json.dumps({"layers": added, "path": out}, separators=(",", ":")))
    return 0


def cmd_dump_attn(cfg: dict[str, object]) -> int:
    out = _require(cfg, "out")
    samples = read_dataset(_require(cfg, "data"))
    index = int(cfg["sample_index"])
    if not 0 <= index < len(samples):
        raise ContractError(f"sample_index {index} outside dataset of {len(samples)}")
    sample = samples[index]
    if cfg["query"]:
        try:
            r_s, c_s = str(cfg["query"]).split(",")
            row, col = int(r_s), int(c_s)
        except ValueError:
            raise ConfigError(f"query expects 'ROW,COL', got '{cfg['query']}'") from None
        sample = dataclasses.replace(
            sample, query_ids=encode_query_cell(row, col, int(cfg["grid_size"]))
        )
    model = _load_model(cfg)
    rows, summary = dump_attention(model, sample, int(cfg["grid_size"]))
    with open(out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    write_resolved_config(cfg, out)
    print(json.dumps(summary, separators=(",", ":")))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "precompute-bias": cmd_precompute_bias,
    "dump-attn": cmd_dump_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qid",
        description="Query injection into a frozen toy vision encoder: data, training, probes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file, one per line")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument(
            "--ablation",
            action="append",
            metavar="NAME",
            help="enable one ablation switch (repeatable)",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg)
    except (ContractError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
