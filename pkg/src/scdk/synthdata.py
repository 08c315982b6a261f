"""Deterministic synthetic corpus with exact per-token end times.

Each token owns a contiguous span of feature frames built from its fixed
unit-norm embedding plus Gaussian noise. The first ``crossfade_frames`` of a
span ramp from the previous token's embedding to the current one, imitating
coarticulation: a span's early frames are ambiguous mixtures and the clean
evidence sits in its tail. A full-context model can resolve a boundary from
the pure frames on both sides, while a left-context model has to wait for
the tail, which is precisely the emission-delay/accuracy structure the
training pipeline is meant to exercise. Ground-truth end times fall out of
the construction exactly, replacing an external forced aligner.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .nn_core import named_rng


class CorpusFormatError(ValueError):
    """Corpus file cannot be parsed; message carries the offending line."""


@dataclass
class UtteranceSample:
    utt_id: str
    features: np.ndarray
    tokens: list[int]
    token_end_ms: list[float]
    frame_shift_ms: float


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 16
    utterances: int = 200
    tokens_per_utt: tuple[int, int] = (3, 8)
    frames_per_token: tuple[int, int] = (8, 16)
    noise_std: float = 0.3
    crossfade_frames: int = 6
    embed_dim: int = 16
    frame_shift_ms: float = 10.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        lo, hi = self.tokens_per_utt
        if not (1 <= lo <= hi):
            raise ValueError(f"bad tokens_per_utt range {self.tokens_per_utt}")
        lo, hi = self.frames_per_token
        if not (1 <= lo <= hi):
            raise ValueError(f"bad frames_per_token range {self.frames_per_token}")
        if self.crossfade_frames < 0:
            raise ValueError(f"crossfade_frames must be >= 0, got {self.crossfade_frames}")


def token_embeddings(cfg: CorpusConfig) -> np.ndarray:
    """Per-token unit-norm embeddings, row 0 unused (blank has no sound)."""
    rng = named_rng(cfg.rng_seed, "data", "embeddings")
    emb = rng.normal(size=(cfg.vocab_size + 1, cfg.embed_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return emb


def generate_corpus(cfg: CorpusConfig, id_prefix: str = "utt") -> list[UtteranceSample]:
    """Deterministic corpus; the id prefix also seeds the noise stream."""
    emb = token_embeddings(cfg)
    rng = named_rng(cfg.rng_seed, "data", id_prefix)
    samples = []
    for i in range(cfg.utterances):
        n_tokens = int(rng.integers(cfg.tokens_per_utt[0], cfg.tokens_per_utt[1] + 1))
        tokens = [int(t) for t in rng.integers(1, cfg.vocab_size + 1, size=n_tokens)]
        spans = [
            int(rng.integers(cfg.frames_per_token[0], cfg.frames_per_token[1] + 1))
            for _ in tokens
        ]
        n_frames = sum(spans)
        features = np.zeros((n_frames, cfg.embed_dim))
        token_end_ms = []
        frame = 0
        prev = np.zeros(cfg.embed_dim)  # utterances start from silence
        for tok, span in zip(tokens, spans):
            cur = emb[tok]
            features[frame : frame + span] = cur
            fade = min(cfg.crossfade_frames, span)
            for i in range(fade):
                w = (i + 1.0) / (cfg.crossfade_frames + 1.0)
                features[frame + i] = (1.0 - w) * prev + w * cur
            frame += span
            token_end_ms.append(frame * cfg.frame_shift_ms)
            prev = cur
        if cfg.noise_std > 0:
            features += rng.normal(0.0, cfg.noise_std, size=features.shape)
        samples.append(
            UtteranceSample(
                utt_id=f"{id_prefix}{i:04d}",
                features=features,
                tokens=tokens,
                token_end_ms=token_end_ms,
                frame_shift_ms=cfg.frame_shift_ms,
            )
        )
    return samples


def write_corpus(samples: Iterable[UtteranceSample], out: IO[str], cfg: CorpusConfig) -> None:
    out.write(
        f"SCDK-CORPUS1 V={cfg.vocab_size} DIM={cfg.embed_dim} SHIFT_MS={cfg.frame_shift_ms!r}\n"
    )
    for s in samples:
        out.write(f"#utt {s.utt_id}\n")
        out.write("tokens " + " ".join(str(t) for t in s.tokens) + "\n")
        out.write("ends_ms " + " ".join(repr(float(e)) for e in s.token_end_ms) + "\n")
        for row in s.features:
            out.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_corpus(lines: Iterable[str]) -> tuple[list[UtteranceSample], dict]:
    """Parse a corpus file; returns the samples and the header fields."""
    it = enumerate(lines, start=1)
    try:
        lineno, header = next(it)
    except StopIteration:
        raise CorpusFormatError("line 1: empty corpus file") from None
    parts = header.split()
    if not parts or parts[0] != "SCDK-CORPUS1":
        raise CorpusFormatError(f"line 1: bad corpus header {header.strip()!r}")
    fields = {}
    for item in parts[1:]:
        if "=" not in item:
            raise CorpusFormatError(f"line 1: bad header field {item!r}")
        key, value = item.split("=", 1)
        fields[key] = value
    try:
        dim = int(fields["DIM"])
        shift_ms = float(fields["SHIFT_MS"])
        vocab = int(fields["V"])
    except (KeyError, ValueError) as exc:
        raise CorpusFormatError(f"line 1: incomplete header: {exc}") from None

    samples: list[UtteranceSample] = []
    state = "await_utt"
    utt_id = ""
    last_lineno = 1
    tokens: list[int] = []
    ends: list[float] = []
    rows: list[list[float]] = []

    def flush(lineno: int) -> None:
        if state == "await_utt":
            return
        if state != "features" or not rows:
            raise CorpusFormatError(f"line {lineno}: record {utt_id!r} is incomplete")
        samples.append(
            UtteranceSample(
                utt_id=utt_id,
                features=np.array(rows, dtype=np.float64).reshape(len(rows), dim),
                tokens=list(tokens),
                token_end_ms=list(ends),
                frame_shift_ms=shift_ms,
            )
        )

    for lineno, raw in it:
        last_lineno = lineno
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#utt "):
            flush(lineno)
            utt_id = line[5:].strip()
            tokens, ends, rows = [], [], []
            state = "await_tokens"
        elif state == "await_tokens":
            if not line.startswith("tokens"):
                raise CorpusFormatError(f"line {lineno}: expected tokens line for {utt_id!r}")
            try:
                tokens = [int(x) for x in line.split()[1:]]
            except ValueError as exc:
                raise CorpusFormatError(f"line {lineno}: bad token: {exc}") from None
            if any(t < 1 or t > vocab for t in tokens):
                raise CorpusFormatError(f"line {lineno}: token outside [1, {vocab}]")
            state = "await_ends"
        elif state == "await_ends":
            if not line.startswith("ends_ms"):
                raise CorpusFormatError(f"line {lineno}: expected ends_ms line for {utt_id!r}")
            try:
                ends = [float(x) for x in line.split()[1:]]
            except ValueError as exc:
                raise CorpusFormatError(f"line {lineno}: bad end time: {exc}") from None
            if len(ends) != len(tokens):
                raise CorpusFormatError(
                    f"line {lineno}: {len(ends)} end times for {len(tokens)} tokens"
                )
            state = "features"
        elif state == "features":
            values = line.split()
            if len(values) != dim:
                raise CorpusFormatError(
                    f"line {lineno}: expected {dim} feature values, got {len(values)}"
                )
            try:
                rows.append([float(v) for v in values])
            except ValueError as exc:
                raise CorpusFormatError(f"line {lineno}: bad feature value: {exc}") from None
        else:
            raise CorpusFormatError(f"line {lineno}: unexpected content outside a record")
    flush(last_lineno)
    return samples, {"V": vocab, "DIM": dim, "SHIFT_MS": shift_ms}


def write_corpus_file(samples: Iterable[UtteranceSample], path: str, cfg: CorpusConfig) -> None:
    with open(path, "w") as f:
        write_corpus(samples, f, cfg)


def read_corpus_file(path: str) -> tuple[list[UtteranceSample], dict]:
    with open(path) as f:
        return read_corpus(f)
