"""Experiment configuration: strict `key = value` sections, overrides, snapshots.

One file drives every subcommand. Parsing is strict (unknown sections or
keys are errors), every key has a default, and the resolved configuration
can be re-serialized to a snapshot that parses back to the exact same
values, which is what makes reruns reproducible.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Any, Callable

from .distill import GRANULARITIES, KL_DIRECTIONS, TabConfig, tab_from_ms
from .models import FULL, EncoderConfig, LossWeights
from .nn_core import TrainConfig
from .synthdata import CorpusConfig


class ConfigError(ValueError):
    """Bad configuration file, key, or override."""


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _parse_str(text: str) -> str:
    return text.strip()


def _parse_chunk(text: str):
    text = text.strip()
    if text == FULL:
        return FULL
    value = _parse_int(text)
    if value < 1:
        raise ConfigError(f"chunk_size must be >= 1 or {FULL!r}, got {text!r}")
    return value


def _parse_opt_chunk(text: str):
    return None if not text.strip() else _parse_chunk(text)


def _parse_int_pair(text: str) -> tuple[int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected 'min,max', got {text!r}")
    return (_parse_int(parts[0]), _parse_int(parts[1]))


def _parse_float_list(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"expected a comma-separated list, got {text!r}")
    return tuple(_parse_float(p) for p in parts)


def _parse_choice(choices: tuple[str, ...]) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in choices:
            raise ConfigError(f"expected one of {choices}, got {text!r}")
        return text

    return parse


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "rng_seed": (_parse_int, 7),
    },
    "corpus": {
        "vocab_size": (_parse_int, 16),
        "train_utterances": (_parse_int, 200),
        "test_utterances": (_parse_int, 50),
        "tokens_per_utt": (_parse_int_pair, (3, 8)),
        "frames_per_token": (_parse_int_pair, (8, 16)),
        "noise_std": (_parse_float, 0.3),
        "crossfade_frames": (_parse_int, 6),
        "embed_dim": (_parse_int, 16),
        "frame_shift_ms": (_parse_float, 10.0),
    },
    "encoder": {
        "input_dim": (_parse_int, 16),
        "model_dim": (_parse_int, 32),
        "layers": (_parse_int, 2),
        "heads": (_parse_int, 2),
        "subsample": (_parse_int, 4),
        "chunk_size": (_parse_chunk, 1),
    },
    "decoder": {
        "heads": (_parse_int, 2),
    },
    "loss": {
        "alpha": (_parse_float, 100.0),
        "lam": (_parse_float, 0.3),
    },
    "tab": {
        "tab_ms": (_parse_float, 80.0),
        "granularity": (_parse_choice(GRANULARITIES), "per_chunk"),
        "kl_direction": (_parse_choice(KL_DIRECTIONS), "student_teacher"),
    },
    "train": {
        "base_lr": (_parse_float, 1e-3),
        "warmup_steps": (_parse_int, 100),
        "clip_norm": (_parse_float, 5.0),
        "beta1": (_parse_float, 0.9),
        "beta2": (_parse_float, 0.999),
        "eps": (_parse_float, 1e-8),
        "label_smoothing": (_parse_float, 0.01),
        "total_steps": (_parse_int, 800),
        "batch_size": (_parse_int, 8),
    },
    "decode": {
        "beam": (_parse_int, 8),
        "mode": (_parse_choice(("streaming", "rescoring")), "rescoring"),
        "rescore_ctc_weight": (_parse_float, 0.3),
        "chunk_size": (_parse_opt_chunk, None),
    },
    "sweep": {
        "tab_ms": (_parse_float_list, (0.0, 80.0, 160.0)),
        "alpha": (_parse_float_list, (100.0,)),
    },
    "paths": {
        "train_corpus": (_parse_str, ""),
        "test_corpus": (_parse_str, ""),
        "teacher_ckpt": (_parse_str, ""),
        "student_ckpt": (_parse_str, ""),
        "decode_file": (_parse_str, ""),
    },
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    # ------------------------------------------------------------- builders

    @property
    def rng_seed(self) -> int:
        return self.values["run"]["rng_seed"]

    def corpus_config(self, split: str) -> CorpusConfig:
        c = self.values["corpus"]
        if split not in ("train", "test"):
            raise ConfigError(f"unknown corpus split {split!r}")
        return CorpusConfig(
            vocab_size=c["vocab_size"],
            utterances=c[f"{split}_utterances"],
            tokens_per_utt=c["tokens_per_utt"],
            frames_per_token=c["frames_per_token"],
            noise_std=c["noise_std"],
            crossfade_frames=c["crossfade_frames"],
            embed_dim=c["embed_dim"],
            frame_shift_ms=c["frame_shift_ms"],
            rng_seed=self.rng_seed,
        )

    def encoder_config(self, chunk_size=None) -> EncoderConfig:
        e = self.values["encoder"]
        return EncoderConfig(
            input_dim=e["input_dim"],
            model_dim=e["model_dim"],
            layers=e["layers"],
            heads=e["heads"],
            subsample=e["subsample"],
            chunk_size=e["chunk_size"] if chunk_size is None else chunk_size,
            rng_seed=self.rng_seed,
        )

    def teacher_encoder_config(self) -> EncoderConfig:
        return self.encoder_config(chunk_size=FULL)

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            base_lr=t["base_lr"],
            warmup_steps=t["warmup_steps"],
            clip_norm=t["clip_norm"],
            beta1=t["beta1"],
            beta2=t["beta2"],
            eps=t["eps"],
            label_smoothing=t["label_smoothing"],
            total_steps=t["total_steps"],
            batch_size=t["batch_size"],
            rng_seed=self.rng_seed,
        )

    def loss_weights(self, alpha: float | None = None) -> LossWeights:
        lo = self.values["loss"]
        return LossWeights(
            alpha=lo["alpha"] if alpha is None else alpha, lam=lo["lam"]
        )

    def tab_config(self, tab_ms: float | None = None) -> TabConfig:
        chunk = self.values["encoder"]["chunk_size"]
        if chunk == FULL:
            raise ConfigError("tab settings require a finite encoder chunk_size")
        ms = self.values["tab"]["tab_ms"] if tab_ms is None else tab_ms
        d = tab_from_ms(
            ms,
            self.values["corpus"]["frame_shift_ms"],
            self.values["encoder"]["subsample"],
            chunk,
        )
        return TabConfig(
            max_delay_chunks=d,
            chunk_frames=chunk,
            granularity=self.values["tab"]["granularity"],
            kl_direction=self.values["tab"]["kl_direction"],
        )

    def frame_duration_ms(self) -> float:
        return self.values["corpus"]["frame_shift_ms"] * self.values["encoder"]["subsample"]

    def decode_chunk_size(self):
        chosen = self.values["decode"]["chunk_size"]
        return self.values["encoder"]["chunk_size"] if chosen is None else chosen

    def path(self, key: str) -> str:
        value = self.values["paths"][key]
        if not value:
            raise ConfigError(f"paths.{key} is required but not set")
        return value

    # ----------------------------------------------------------- snapshot

    def snapshot(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {_fmt(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)


def default_config() -> ExperimentConfig:
    return ExperimentConfig(
        values={s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    )


def _apply(cfg: ExperimentConfig, section: str, key: str, raw: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    parser_fn = SCHEMA[section][key][0]
    cfg.values[section][key] = parser_fn(raw)


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    cfg = default_config()
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(cfg, section, key, raw)
    return cfg


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a config file and apply `section.key=value` overrides in order."""
    try:
        with open(path) as f:
            cfg = parse_config_text(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} is not of the form section.key")
        section, key = dotted.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), raw.strip())
    return cfg


def write_snapshot(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as f:
        f.write(cfg.snapshot())


def snapshot_roundtrips(cfg: ExperimentConfig) -> bool:
    """True when re-parsing the snapshot reproduces the exact values."""
    reparsed = parse_config_text(cfg.snapshot())
    return reparsed.values == cfg.values
