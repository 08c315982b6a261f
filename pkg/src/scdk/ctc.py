"""Log-domain CTC loss with analytic gradient, plus decoding diagnostics.

The loss runs the standard forward-backward recursion over the
blank-interleaved extended label sequence, entirely in the log domain
(linear-domain CTC underflows beyond T of about 30). The enumeration oracle
recomputes the same quantity by brute force over all C^T frame paths and is
the ground truth for the loss in the test suite.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

BLANK = 0

NEG_INF = -np.inf


class CtcShapeError(ValueError):
    """Label sequence cannot be emitted in the available frames."""


@dataclass
class LogProbMatrix:
    """Per-utterance T x C matrix of log posteriors; class 0 is blank."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got shape {self.values.shape}")
        if self.T < 1 or self.C < 2:
            raise ValueError(f"need T >= 1 and C >= 2, got {self.values.shape}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    def validate_rows(self, tol: float = 1e-6) -> None:
        sums = np.exp(self.values).sum(axis=1)
        bad = np.abs(sums - 1.0) > tol
        if bad.any():
            row = int(np.nonzero(bad)[0][0])
            raise ValueError(f"row {row} exponentiates to {sums[row]}, not a distribution")


@dataclass(frozen=True)
class SpikeEvent:
    """First frame of a maximal run of identical non-blank argmax frames."""

    token_id: int
    frame: int
    log_prob: float


def _check_labels(labels: Sequence[int], C: int) -> None:
    for lab in labels:
        if not (1 <= lab <= C - 1):
            raise ValueError(f"label {lab} out of range [1, {C - 1}]")


def _min_frames(labels: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extended(labels: Sequence[int]) -> list[int]:
    ext = [BLANK]
    for lab in labels:
        ext.append(lab)
        ext.append(BLANK)
    return ext


def ctc_loss(log_probs: LogProbMatrix, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log probability of ``labels`` plus gradient wrt the log-probs.

    The gradient treats every entry of the matrix as a free variable (inputs
    are assumed to be already log-softmaxed; composing with the softmax
    backward is the caller's job). Impossible labels return +inf loss and a
    zero gradient so training can skip degenerate items.
    """
    lp = log_probs.values
    T, C = log_probs.T, log_probs.C
    labels = list(labels)
    _check_labels(labels, C)
    need = _min_frames(labels)
    if T < need:
        raise CtcShapeError(
            f"{len(labels)} labels with repeats require at least {need} frames, got {T}"
        )

    ext = np.array(_extended(labels), dtype=np.int64)
    S = ext.size
    emit = lp[:, ext]  # (T, S) emission log-probs along the extended sequence

    # skip2[s]: the alpha/beta recursion may jump over the blank between two
    # distinct labels but never between a label and itself.
    skip2 = np.zeros(S, dtype=bool)
    if S > 2:
        skip2[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        move1 = np.concatenate(([NEG_INF], prev[:-1]))
        move2 = np.full(S, NEG_INF)
        if S > 2:
            move2[2:] = np.where(skip2[2:], prev[:-2], NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, move1), move2) + emit[t]

    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = np.logaddexp(log_p, alpha[T - 1, S - 2])
    if log_p == NEG_INF:
        return np.inf, np.zeros_like(lp)

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip2_fwd = np.zeros(S, dtype=bool)
    if S > 2:
        skip2_fwd[:-2] = (ext[:-2] != BLANK) & (ext[:-2] != ext[2:])
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        move1 = np.concatenate((nxt[1:], [NEG_INF]))
        move2 = np.full(S, NEG_INF)
        if S > 2:
            move2[:-2] = np.where(skip2_fwd[:-2], nxt[2:], NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(nxt, move1), move2) + emit[t]

    # d loss / d lp[t, c] = -exp(lse_{s: ext[s]=c}(alpha + beta) - lp[t,c] - log_p);
    # alpha and beta both include the emission at t, hence the single division.
    ab = alpha + beta
    grad = np.zeros_like(lp)
    for c in sorted(set(ext.tolist())):
        cols = np.nonzero(ext == c)[0]
        stacked = ab[:, cols]
        m = stacked.max(axis=1)
        occ = np.full(T, NEG_INF)
        ok = m != NEG_INF
        if ok.any():
            occ[ok] = m[ok] + np.log(np.exp(stacked[ok] - m[ok, None]).sum(axis=1))
        # occ = -inf means no surviving path emits c at t: zero gradient there,
        # even when lp itself is -inf (avoids -inf minus -inf).
        grad[:, c] = np.where(occ > NEG_INF, -np.exp(occ - lp[:, c] - log_p), 0.0)
    return float(-log_p), grad


def collapse_path(path: Sequence[int]) -> tuple[int, ...]:
    """CTC collapse: merge adjacent repeats first, then drop blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev:
            out.append(sym)
        prev = sym
    return tuple(sym for sym in out if sym != BLANK)


def ctc_enumerate_oracle(log_probs: LogProbMatrix, labels: Sequence[int]) -> float:
    """Brute-force CTC loss by summing every frame path that collapses to labels."""
    T, C = log_probs.T, log_probs.C
    if C**T > 10**7:
        raise ValueError(f"enumeration over {C}^{T} paths is too large")
    _check_labels(labels, C)
    target = tuple(labels)
    lp = log_probs.values
    total = NEG_INF
    for path in itertools.product(range(C), repeat=T):
        if collapse_path(path) != target:
            continue
        score = sum(lp[t, sym] for t, sym in enumerate(path))
        total = np.logaddexp(total, score)
    return float(-total)


def greedy_collapse(log_probs: LogProbMatrix) -> list[int]:
    """Per-frame argmax followed by CTC collapse."""
    path = np.argmax(log_probs.values, axis=1)
    return list(collapse_path(path))


def extract_spikes(log_probs: LogProbMatrix) -> list[SpikeEvent]:
    """One event per maximal non-blank argmax run, anchored at its first frame."""
    path = np.argmax(log_probs.values, axis=1)
    spikes: list[SpikeEvent] = []
    prev = BLANK
    for frame, sym in enumerate(path):
        sym = int(sym)
        if sym != BLANK and sym != prev:
            spikes.append(
                SpikeEvent(token_id=sym, frame=frame, log_prob=float(log_probs.values[frame, sym]))
            )
        prev = sym
    return spikes


def write_spike_csv(
    out: IO[str],
    rows: Iterable[tuple[str, SpikeEvent]],
    frame_duration_ms: float,
) -> None:
    """Spike dump: time_ms is the end of the emitting encoder frame."""
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["utt_id", "token_id", "frame", "time_ms", "log_prob"])
    for utt_id, spike in rows:
        time_ms = (spike.frame + 1) * frame_duration_ms
        writer.writerow([utt_id, spike.token_id, spike.frame, repr(time_ms), repr(spike.log_prob)])
