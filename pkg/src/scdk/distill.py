"""Delayed distillation: per-frame KL with a searched right-shift of the student.

The streaming student's non-blank posteriors lag the full-context teacher's,
so matching them frame by frame punishes the student for a delay it cannot
avoid. Instead, each selection unit of teacher frames may pair with student
frames shifted right by up to ``max_delay_chunks`` whole chunks; the shift
minimizing the summed KL is selected per unit and the loss is the frame-mean
of the winning costs.

Delay selection granularity is configurable: ``per_chunk`` (default) picks
one shift per chunk of frames, ``per_frame`` searches independently per
frame, ``per_utterance`` applies a single shift to the whole utterance. The
shift unit is always one chunk regardless of granularity.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .ctc import LogProbMatrix

GRANULARITIES = ("per_chunk", "per_frame", "per_utterance")
KL_DIRECTIONS = ("student_teacher", "teacher_student")


@dataclass(frozen=True)
class TabConfig:
    """Delay-search window: shifts 0..max_delay_chunks, each one chunk wide."""

    max_delay_chunks: int
    chunk_frames: int = 1
    granularity: str = "per_chunk"
    kl_direction: str = "student_teacher"

    def __post_init__(self) -> None:
        if self.max_delay_chunks < 0:
            raise ValueError(f"max_delay_chunks must be >= 0, got {self.max_delay_chunks}")
        if self.chunk_frames < 1:
            raise ValueError(f"chunk_frames must be >= 1, got {self.chunk_frames}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}, got {self.kl_direction!r}")


@dataclass
class DistillResult:
    loss: float
    grad_student: np.ndarray
    chosen_delays: list[tuple[int, int]] = field(default_factory=list)
    frames_used: int = 0
    unit_kls: list[float] = field(default_factory=list)


def kl_frame(student_row: np.ndarray, teacher_row: np.ndarray) -> float:
    """KL(student || teacher) between two log-probability rows.

    Terms where the student probability is exactly zero contribute nothing; a
    teacher zero under student mass yields +inf, which is legal.
    """
    s = np.asarray(student_row, dtype=np.float64)
    t = np.asarray(teacher_row, dtype=np.float64)
    ps = np.exp(s)
    terms = np.where(ps > 0.0, ps * (s - t), 0.0)
    return float(terms.sum())


def tab_from_ms(tab_ms: float, frame_shift_ms: float, subsample: int, chunk_size: int) -> int:
    """Convert a delay budget in milliseconds to whole chunks (half-up rounding)."""
    if tab_ms < 0:
        raise ValueError(f"tab_ms must be >= 0, got {tab_ms}")
    if frame_shift_ms <= 0:
        raise ValueError(f"frame_shift_ms must be > 0, got {frame_shift_ms}")
    chunk_ms = frame_shift_ms * subsample * chunk_size
    return int(math.floor(tab_ms / chunk_ms + 0.5))


def _frame_kl_vector(student: np.ndarray, teacher: np.ndarray, direction: str) -> np.ndarray:
    """Row-wise KL between aligned slices; student rows may be shifted."""
    if direction == "student_teacher":
        p = np.exp(student)
        terms = np.where(p > 0.0, p * (student - teacher), 0.0)
    else:
        p = np.exp(teacher)
        terms = np.where(p > 0.0, p * (teacher - student), 0.0)
    return terms.sum(axis=1)


def _frame_kl_grad(student: np.ndarray, teacher: np.ndarray, direction: str) -> np.ndarray:
    """d KL / d student log-probs, rows aligned as in :func:`_frame_kl_vector`."""
    if direction == "student_teacher":
        p = np.exp(student)
        return np.where(p > 0.0, p * (student - teacher + 1.0), 0.0)
    return -np.exp(teacher)


def _units(T: int, tab: TabConfig) -> list[range]:
    if tab.granularity == "per_frame":
        return [range(t, t + 1) for t in range(T)]
    if tab.granularity == "per_utterance":
        return [range(0, T)]
    cf = tab.chunk_frames
    return [range(start, min(start + cf, T)) for start in range(0, T, cf)]


def delayed_kd_loss(student: LogProbMatrix, teacher: LogProbMatrix, tab: TabConfig) -> DistillResult:
    """Minimum-KL delayed match of student posteriors onto teacher posteriors.

    For unit U and shift tau, teacher frame t pairs with student frame
    t + tau*chunk_frames. A shift is admissible only if every frame in the
    unit has a partner inside the utterance (tau = 0 always is), so no frame
    is ever dropped and the normalizer stays the full frame count. Ties break
    toward the smallest shift; the chosen shifts are treated as constants by
    the gradient.
    """
    if student.values.shape != teacher.values.shape:
        raise ValueError(
            f"student shape {student.values.shape} != teacher shape {teacher.values.shape}"
        )
    T = teacher.T
    s = student.values
    tv = teacher.values
    cf = tab.chunk_frames
    d = tab.max_delay_chunks

    # kl_by_tau[tau][t] = KL(student[t + tau*cf], teacher[t]) for valid t.
    kl_by_tau: list[np.ndarray] = []
    for tau in range(d + 1):
        shift = tau * cf
        if shift >= T and tau > 0:
            kl_by_tau.append(np.empty(0))
            continue
        kl_by_tau.append(_frame_kl_vector(s[shift:], tv[: T - shift], tab.kl_direction))

    grad = np.zeros_like(s)
    chosen: list[tuple[int, int]] = []
    unit_kls: list[float] = []
    total = 0.0
    for unit_index, unit in enumerate(_units(T, tab)):
        last = unit[-1]
        best_tau = 0
        best_cost = float(kl_by_tau[0][unit.start : unit.stop].sum())
        for tau in range(1, d + 1):
            if last + tau * cf >= T:
                continue
            cost = float(kl_by_tau[tau][unit.start : unit.stop].sum())
            if cost < best_cost:
                best_cost = cost
                best_tau = tau
        chosen.append((unit_index, best_tau))
        unit_kls.append(best_cost)
        total += best_cost
        shift = best_tau * cf
        grad[unit.start + shift : unit.stop + shift] += _frame_kl_grad(
            s[unit.start + shift : unit.stop + shift], tv[unit.start : unit.stop], tab.kl_direction
        )

    frames_used = T
    grad /= frames_used
    return DistillResult(
        loss=total / frames_used,
        grad_student=grad,
        chosen_delays=chosen,
        frames_used=frames_used,
        unit_kls=unit_kls,
    )


def brute_force_delay_oracle(student: LogProbMatrix, teacher: LogProbMatrix, tab: TabConfig) -> float:
    """Independent re-derivation of the delayed loss with naive nested loops."""
    T = teacher.T
    if T > 64:
        raise ValueError(f"oracle limited to T <= 64, got {T}")
    s = student.values
    tv = teacher.values
    total = 0.0
    for unit in _units(T, tab):
        best = None
        for tau in range(tab.max_delay_chunks + 1):
            shift = tau * tab.chunk_frames
            if unit[-1] + shift >= T and tau > 0:
                continue
            cost = 0.0
            for t in unit:
                srow = s[t + shift]
                trow = tv[t]
                if tab.kl_direction == "student_teacher":
                    for i in range(srow.size):
                        p = math.exp(srow[i])
                        if p > 0.0:
                            cost += p * (srow[i] - trow[i])
                else:
                    for i in range(srow.size):
                        p = math.exp(trow[i])
                        if p > 0.0:
                            cost += p * (trow[i] - srow[i])
            if best is None or cost < best:
                best = cost
        total += best
    return total / T


def write_delay_trace_csv(out: IO[str], rows: Iterable[tuple[str, DistillResult]]) -> None:
    """Diagnostic dump of the chosen shift and per-unit KL for each utterance."""
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["utt_id", "unit_index", "chosen_delay_chunks", "unit_kl"])
    for utt_id, result in rows:
        for (unit_index, tau), cost in zip(result.chosen_delays, result.unit_kls):
            writer.writerow([utt_id, unit_index, tau, repr(cost)])
