"""Token error rate and emission-latency metrics.

Latency follows the chunk-end convention: a token's emission time is the end
of the chunk containing its emission frame, and its delay is that time minus
the token's ground-truth end time. Utterances whose hypothesis/reference
token counts differ (or whose hypothesis is empty) have no token-level
correspondence and are excluded from the percentiles as invalid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

from .ctc import SpikeEvent


@dataclass
class LatencyRecord:
    utt_id: str
    ftd_ms: float
    ltd_ms: float
    valid: bool


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> tuple[int, int]:
    """Levenshtein errors against the reference, plus the reference length."""
    m, n = len(hyp), len(ref)
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            sub = prev[j - 1] + (hyp[i - 1] != ref[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[n], n


def corpus_error_rate(pairs: Iterable[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Total errors over total reference length, as a fraction."""
    errors = 0
    total = 0
    for hyp, ref in pairs:
        e, n = token_error_rate(hyp, ref)
        errors += e
        total += n
    if total == 0:
        raise ValueError("empty reference corpus")
    return errors / total


def emission_time_ms(emit_frame: int, chunk_size: int, frame_duration_ms: float) -> float:
    """Wall-clock end of the chunk containing ``emit_frame``."""
    if emit_frame < 0:
        raise ValueError(f"emit_frame must be >= 0, got {emit_frame}")
    return (emit_frame // chunk_size + 1) * chunk_size * frame_duration_ms


def ftd_ltd(
    emission_ms: Sequence[float], truth_ms: Sequence[float]
) -> tuple[float, float] | None:
    """First/last token delay, or None when there is no 1:1 correspondence."""
    if not emission_ms or not truth_ms or len(emission_ms) != len(truth_ms):
        return None
    return emission_ms[0] - truth_ms[0], emission_ms[-1] - truth_ms[-1]


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile for p in (0, 100]."""
    if not values:
        raise ValueError("percentile of an empty list")
    if not (0.0 < p <= 100.0):
        raise ValueError(f"p must be in (0, 100], got {p}")
    ordered = sorted(values)
    rank = math.ceil(p / 100.0 * len(ordered))
    return ordered[rank - 1]


def _lcs_pairs(a: Sequence[int], b: Sequence[int]) -> list[tuple[int, int]]:
    """Index pairs of one longest common subsequence (deterministic backtrack)."""
    m, n = len(a), len(b)
    dp = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m - 1, -1, -1):
        for j in range(n - 1, -1, -1):
            if a[i] == b[j]:
                dp[i][j] = dp[i + 1][j + 1] + 1
            else:
                dp[i][j] = max(dp[i + 1][j], dp[i][j + 1])
    pairs = []
    i = j = 0
    while i < m and j < n:
        if a[i] == b[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def spike_lag(
    student_spikes: Sequence[SpikeEvent],
    teacher_spikes: Sequence[SpikeEvent],
    frame_duration_ms: float,
) -> list[float]:
    """Per matched token: (student frame - teacher frame) * frame duration.

    Spikes are matched by token identity in order (longest common
    subsequence); unmatched spikes on either side are skipped.
    """
    s_ids = [s.token_id for s in student_spikes]
    t_ids = [s.token_id for s in teacher_spikes]
    return [
        (student_spikes[i].frame - teacher_spikes[j].frame) * frame_duration_ms
        for i, j in _lcs_pairs(s_ids, t_ids)
    ]


REPORT_METRICS = (
    "cer_streaming",
    "cer_rescoring",
    "ftd_p50",
    "ftd_p90",
    "ltd_p50",
    "ltd_p90",
    "mean_spike_lag_ms",
    "excluded_utts",
)


def write_metrics_report(out: IO[str], values: Mapping[str, float]) -> None:
    """`metric,value` rows in the fixed REPORT_METRICS order; absent -> nan."""
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for name in REPORT_METRICS:
        value = values.get(name, float("nan"))
        writer.writerow([name, repr(float(value))])


def write_latency_detail(out: IO[str], records: Iterable[LatencyRecord]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["utt_id", "valid", "ftd_ms", "ltd_ms"])
    for rec in records:
        writer.writerow(
            [rec.utt_id, int(rec.valid), repr(float(rec.ftd_ms)), repr(float(rec.ltd_ms))]
        )
