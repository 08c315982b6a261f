"""Two-phase training: full-context teacher first, then the chunked student.

The teacher minimizes the plain ASR loss (lam*CTC + (1-lam)*AED) and is
frozen afterwards. The student minimizes the same ASR loss plus
alpha * delayed distillation against the frozen teacher's CTC posteriors,
computed on the same minibatch with a single joint backward per step.

Batch items are processed one at a time in batch order (mathematically the
same as padding to the batch max and masking the padded frames out of every
loss, with none of the bookkeeping), so padded frames can never leak into
the CTC or distillation sums.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .ctc import CtcShapeError, LogProbMatrix, ctc_loss, extract_spikes
from .decode import Hypothesis, PrefixBeamState, attention_rescore
from .distill import DistillResult, TabConfig, delayed_kd_loss
from .metrics import (
    LatencyRecord,
    corpus_error_rate,
    emission_time_ms,
    ftd_ltd,
    percentile,
    spike_lag,
)
from .models import FULL, AsrModel, EncoderConfig, LossWeights, build_student_teacher, joint_loss
from .nn_core import TrainConfig, adam_step, clip_grad_norm, named_rng, warmup_lr
from .synthdata import UtteranceSample

PHASES = ("teacher", "student_baseline", "student_kd")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class StepRecord:
    step: int
    lr: float
    l_ctc: float
    l_aed: float
    l_distill: float
    l_joint: float
    grad_norm: float


@dataclass
class RunManifest:
    phase: str
    enc_cfg: EncoderConfig
    train_cfg: TrainConfig
    weights: LossWeights
    vocab_size: int
    dec_heads: int = 2
    tab: TabConfig | None = None
    teacher_ckpt: str | None = None
    loss_log: list[StepRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.phase == "teacher":
            if self.weights.alpha != 0.0:
                raise ValueError("teacher phase requires alpha = 0")
            if self.tab is not None:
                raise ValueError("teacher phase takes no tab config")
        if self.phase == "student_kd":
            if self.teacher_ckpt is None:
                raise ValueError("student_kd phase requires a teacher checkpoint")
            if self.tab is None:
                raise ValueError("student_kd phase requires a tab config")
            if self.weights.alpha <= 0.0:
                raise ValueError("student_kd phase requires alpha > 0")


def _batches(n_items: int, batch_size: int, total_steps: int, rng) -> Iterable[list[int]]:
    """Shuffled-epoch batches, deterministic under the given generator."""
    order: list[int] = []
    for _ in range(total_steps):
        while len(order) < batch_size:
            order.extend(rng.permutation(n_items).tolist())
        yield order[:batch_size]
        order = order[batch_size:]


def _train(
    model: AsrModel,
    corpus: Sequence[UtteranceSample],
    manifest: RunManifest,
    teacher: AsrModel | None,
) -> AsrModel:
    cfg = manifest.train_cfg
    w = manifest.weights
    distilling = teacher is not None and w.alpha > 0.0
    rng = named_rng(cfg.rng_seed, "batch", manifest.phase)
    model.store.zero_grads()

    for step, batch in enumerate(
        _batches(len(corpus), cfg.batch_size, cfg.total_steps, rng), start=1
    ):
        staged = []
        for idx in batch:
            utt = corpus[idx]
            enc, ecache = model.encoder.forward(utt.features)
            logp, hcache = model.ctc_head(enc)
            try:
                l_ctc, dlogp_ctc = ctc_loss(logp, utt.tokens)
            except CtcShapeError as exc:
                warnings.warn(f"skipping {utt.utt_id}: {exc}")
                continue
            if math.isinf(l_ctc):
                warnings.warn(f"skipping {utt.utt_id}: label sequence has zero probability")
                continue
            l_aed, acache = model.aed_loss(enc, utt.tokens, cfg.label_smoothing)
            dist: DistillResult | None = None
            if distilling:
                t_enc, _ = teacher.encoder.forward(utt.features)
                t_logp, _ = teacher.ctc_head(t_enc)
                dist = delayed_kd_loss(logp, t_logp, manifest.tab)
            staged.append((ecache, hcache, acache, dlogp_ctc, l_ctc, l_aed, dist))

        if not staged:
            raise DivergenceError(f"step {step}: no usable utterances in batch")
        used = len(staged)
        sum_ctc = sum_aed = sum_dist = 0.0
        for ecache, hcache, acache, dlogp_ctc, l_ctc, l_aed, dist in staged:
            sum_ctc += l_ctc
            sum_aed += l_aed
            dlogp = (w.lam / used) * dlogp_ctc
            if dist is not None:
                sum_dist += dist.loss
                dlogp += (w.alpha / used) * dist.grad_student
            denc = model.ctc_head_backward(hcache, dlogp)
            denc += model.aed_backward(acache, scale=(1.0 - w.lam) / used)
            model.encoder.backward(ecache, denc)

        l_ctc_mean = sum_ctc / used
        l_aed_mean = sum_aed / used
        l_dist_mean = sum_dist / used
        l_joint = joint_loss(l_ctc_mean, l_aed_mean, l_dist_mean, w)
        if not math.isfinite(l_joint):
            raise DivergenceError(f"step {step}: non-finite joint loss {l_joint}")
        grad_norm = clip_grad_norm(model.store, cfg.clip_norm)
        lr = warmup_lr(step, cfg)
        adam_step(model.store, lr, cfg)
        manifest.loss_log.append(
            StepRecord(step, lr, l_ctc_mean, l_aed_mean, l_dist_mean, l_joint, grad_norm)
        )
    return model


def train_teacher(corpus: Sequence[UtteranceSample], manifest: RunManifest) -> AsrModel:
    if manifest.enc_cfg.chunk_size != FULL:
        raise ValueError(f"teacher encoder chunk_size must be {FULL!r}")
    model = AsrModel(manifest.enc_cfg, manifest.vocab_size, manifest.dec_heads)
    return _train(model, corpus, manifest, teacher=None)


def train_student(corpus: Sequence[UtteranceSample], manifest: RunManifest) -> AsrModel:
    """Train the chunked student, distilling when the manifest says so."""
    teacher = None
    if manifest.phase == "student_kd":
        teacher, student = build_student_teacher(
            EncoderConfig(
                input_dim=manifest.enc_cfg.input_dim,
                model_dim=manifest.enc_cfg.model_dim,
                layers=manifest.enc_cfg.layers,
                heads=manifest.enc_cfg.heads,
                subsample=manifest.enc_cfg.subsample,
                chunk_size=FULL,
                rng_seed=manifest.enc_cfg.rng_seed,
            ),
            manifest.enc_cfg,
            manifest.vocab_size,
            manifest.teacher_ckpt,
            manifest.dec_heads,
        )
    else:
        student = AsrModel(manifest.enc_cfg, manifest.vocab_size, manifest.dec_heads)
    return _train(student, corpus, manifest, teacher)


def write_loss_log(out: IO[str], records: Iterable[StepRecord]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["step", "lr", "l_ctc", "l_aed", "l_distill", "l_joint", "grad_norm"])
    for r in records:
        writer.writerow(
            [r.step, repr(r.lr), repr(r.l_ctc), repr(r.l_aed), repr(r.l_distill),
             repr(r.l_joint), repr(r.grad_norm)]
        )


# --------------------------------------------------------------- evaluation


def decode_utterance(
    model: AsrModel,
    features: np.ndarray,
    beam: int,
    rescore_weight: float | None = None,
) -> tuple[list[Hypothesis], list[Hypothesis] | None]:
    """First-pass beam search fed chunk by chunk, plus optional second pass."""
    state = PrefixBeamState(beam)
    blocks = []
    for rows, block in model.stream_log_prob_chunks(features):
        state.advance(rows)
        blocks.append(block)
    nbest = state.finalize()
    if rescore_weight is None:
        return nbest, None
    encodings = np.concatenate(blocks, axis=0)
    return nbest, attention_rescore(nbest, model, encodings, rescore_weight)


@dataclass
class EvalResult:
    metrics: dict[str, float]
    latency: list[LatencyRecord]
    streaming_rows: list[tuple[str, Hypothesis]]
    rescoring_rows: list[tuple[str, Hypothesis]]


def latency_summary(records: Sequence[LatencyRecord]) -> dict[str, float]:
    valid = [r for r in records if r.valid]
    out = {"excluded_utts": float(len(records) - len(valid))}
    if valid:
        ftds = [r.ftd_ms for r in valid]
        ltds = [r.ltd_ms for r in valid]
        out.update(
            ftd_p50=percentile(ftds, 50), ftd_p90=percentile(ftds, 90),
            ltd_p50=percentile(ltds, 50), ltd_p90=percentile(ltds, 90),
        )
    else:
        out.update(ftd_p50=math.nan, ftd_p90=math.nan, ltd_p50=math.nan, ltd_p90=math.nan)
    return out


def evaluate_model(
    model: AsrModel,
    corpus: Sequence[UtteranceSample],
    beam: int,
    rescore_weight: float | None,
    frame_duration_ms: float,
    teacher: AsrModel | None = None,
    latency_mode: str = "streaming",
) -> EvalResult:
    """Decode a corpus and aggregate CER, latency and spike lag.

    The second pass runs only when ``rescore_weight`` is given (the first
    pass is shared either way). Latency uses the top-1 hypothesis of
    ``latency_mode``; emission times are chunk ends on the encoder grid.
    """
    if rescore_weight is None and latency_mode != "streaming":
        raise ValueError("latency_mode=rescoring requires a rescore weight")
    chunk = model.enc_cfg.chunk_size
    stream_rows: list[tuple[str, Hypothesis]] = []
    rescore_rows: list[tuple[str, Hypothesis]] = []
    latency: list[LatencyRecord] = []
    lags: list[float] = []
    for utt in corpus:
        nbest, rescored = decode_utterance(model, utt.features, beam, rescore_weight)
        stream_rows.append((utt.utt_id, nbest[0]))
        if rescored is not None:
            rescore_rows.append((utt.utt_id, rescored[0]))
        top = nbest[0] if latency_mode == "streaming" else rescored[0]
        eff_chunk = chunk if chunk != FULL else max(1, len(utt.features) // model.enc_cfg.subsample)
        emission = [emission_time_ms(f, eff_chunk, frame_duration_ms) for f in top.emit_frames]
        delays = ftd_ltd(emission, utt.token_end_ms)
        if delays is None:
            latency.append(LatencyRecord(utt.utt_id, math.nan, math.nan, valid=False))
        else:
            latency.append(LatencyRecord(utt.utt_id, delays[0], delays[1], valid=True))
        if teacher is not None:
            s_spikes = extract_spikes(model.streaming_log_probs(utt.features))
            t_spikes = extract_spikes(teacher.streaming_log_probs(utt.features))
            lags.extend(spike_lag(s_spikes, t_spikes, frame_duration_ms))

    metrics = {
        "cer_streaming": corpus_error_rate(
            (hyp.tokens, utt.tokens) for (_, hyp), utt in zip(stream_rows, corpus)
        ),
        "cer_rescoring": corpus_error_rate(
            (hyp.tokens, utt.tokens) for (_, hyp), utt in zip(rescore_rows, corpus)
        )
        if rescore_rows
        else math.nan,
        "mean_spike_lag_ms": float(np.mean(lags)) if lags else math.nan,
    }
    metrics.update(latency_summary(latency))
    return EvalResult(metrics, latency, stream_rows, rescore_rows)


# -------------------------------------------------------------------- sweep

SWEEP_COLUMNS = (
    "tab_ms",
    "d_chunks",
    "alpha",
    "cer_streaming",
    "cer_rescoring",
    "ftd_p50",
    "ftd_p90",
    "ltd_p50",
    "ltd_p90",
    "mean_spike_lag_ms",
)


def student_manifest(
    alpha: float,
    tab: TabConfig,
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    lam: float,
    vocab_size: int,
    teacher_ckpt: str,
    dec_heads: int = 2,
) -> RunManifest:
    """Manifest for one student run; alpha = 0 is the no-distillation baseline."""
    if alpha == 0.0:
        return RunManifest(
            phase="student_baseline",
            enc_cfg=enc_cfg,
            train_cfg=train_cfg,
            weights=LossWeights(alpha=0.0, lam=lam),
            vocab_size=vocab_size,
            dec_heads=dec_heads,
        )
    return RunManifest(
        phase="student_kd",
        enc_cfg=enc_cfg,
        train_cfg=train_cfg,
        weights=LossWeights(alpha=alpha, lam=lam),
        vocab_size=vocab_size,
        dec_heads=dec_heads,
        tab=tab,
        teacher_ckpt=teacher_ckpt,
    )


def sweep_pair(
    train_corpus: Sequence[UtteranceSample],
    test_corpus: Sequence[UtteranceSample],
    teacher: AsrModel,
    teacher_ckpt: str,
    tab_ms: float,
    alpha: float,
    tab: TabConfig,
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    lam: float,
    beam: int,
    rescore_weight: float,
    frame_duration_ms: float,
    dec_heads: int = 2,
) -> dict[str, float]:
    """Train and evaluate one (tab_ms, alpha) configuration; returns a CSV row."""
    manifest = student_manifest(
        alpha, tab, enc_cfg, train_cfg, lam, teacher.vocab_size, teacher_ckpt, dec_heads
    )
    student = train_student(train_corpus, manifest)
    result = evaluate_model(
        student, test_corpus, beam, rescore_weight, frame_duration_ms, teacher=teacher
    )
    row = {"tab_ms": tab_ms, "d_chunks": float(tab.max_delay_chunks), "alpha": alpha}
    row.update({k: result.metrics[k] for k in SWEEP_COLUMNS if k in result.metrics})
    return row


def tab_sweep(
    train_corpus: Sequence[UtteranceSample],
    test_corpus: Sequence[UtteranceSample],
    teacher: AsrModel,
    teacher_ckpt: str,
    tab_ms_list: Sequence[float],
    alpha_list: Sequence[float],
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    lam: float,
    tab_builder,
    beam: int,
    rescore_weight: float,
    frame_duration_ms: float,
    dec_heads: int = 2,
) -> list[dict[str, float]]:
    """One student per (tab_ms, alpha) pair, all sharing the same seed.

    ``tab_builder(tab_ms)`` maps the delay budget to a TabConfig.
    """
    if not tab_ms_list or not alpha_list:
        raise ValueError("tab_ms and alpha lists must be non-empty")
    return [
        sweep_pair(
            train_corpus, test_corpus, teacher, teacher_ckpt, tab_ms, alpha,
            tab_builder(tab_ms), enc_cfg, train_cfg, lam, beam, rescore_weight,
            frame_duration_ms, dec_heads,
        )
        for tab_ms in tab_ms_list
        for alpha in alpha_list
    ]


def write_sweep_csv(out: IO[str], rows: Iterable[dict[str, float]]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([repr(float(row[c])) for c in SWEEP_COLUMNS])
