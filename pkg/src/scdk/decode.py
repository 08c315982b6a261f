"""First-pass CTC prefix beam search, exhaustive oracle, attention rescoring.

Beam search tracks, per collapsed label prefix, the probability mass of
alignments ending in blank and ending in the prefix's last token. With a
beam at least the number of reachable prefixes it is exact, which is how the
oracle checks it. All score ties break by lexicographic token sequence so
runs are reproducible.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .ctc import BLANK, LogProbMatrix, collapse_path

NEG_INF = -np.inf


@dataclass
class Hypothesis:
    """A collapsed label prefix with its two alignment masses and scores."""

    tokens: tuple[int, ...]
    log_p_blank: float
    log_p_nonblank: float
    emit_frames: tuple[int, ...] = ()
    s_aed: float | None = None
    s_final: float | None = None

    @property
    def s_ctc(self) -> float:
        return float(np.logaddexp(self.log_p_blank, self.log_p_nonblank))


class PrefixBeamState:
    """Frame-synchronous search state; feed frames via :meth:`advance`."""

    def __init__(self, beam: int) -> None:
        if beam < 1:
            raise ValueError(f"beam must be >= 1, got {beam}")
        self.beam = beam
        self.frame = 0
        # prefix -> (log mass ending in blank, log mass ending in last token)
        self._mass: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
        # prefix -> frame each token was appended when the prefix first
        # received mass; carried over unchanged while the prefix survives
        self._emit: dict[tuple[int, ...], tuple[int, ...]] = {(): ()}

    def advance(self, log_prob_rows: np.ndarray) -> None:
        rows = np.atleast_2d(np.asarray(log_prob_rows, dtype=np.float64))
        for row in rows:
            self._step(row)
            self.frame += 1

    def _step(self, row: np.ndarray) -> None:
        t = self.frame
        next_mass: dict[tuple[int, ...], list[float]] = {}
        next_emit: dict[tuple[int, ...], tuple[int, ...]] = {}

        def bump(prefix, blank_add, nonblank_add, parent_emit, appended):
            entry = next_mass.get(prefix)
            if entry is None:
                entry = [NEG_INF, NEG_INF]
                next_mass[prefix] = entry
                prev = self._emit.get(prefix)
                if prev is not None:
                    next_emit[prefix] = prev
                else:
                    next_emit[prefix] = parent_emit + (t,) if appended else parent_emit
            if blank_add != NEG_INF:
                entry[0] = np.logaddexp(entry[0], blank_add)
            if nonblank_add != NEG_INF:
                entry[1] = np.logaddexp(entry[1], nonblank_add)

        for prefix in sorted(self._mass):
            pb, pnb = self._mass[prefix]
            emit = self._emit[prefix]
            total = np.logaddexp(pb, pnb)
            last = prefix[-1] if prefix else None
            for c in range(row.size):
                ps = row[c]
                if c == BLANK:
                    bump(prefix, total + ps, NEG_INF, emit, appended=False)
                elif c == last:
                    # staying on the same symbol extends the run; crossing a
                    # blank first emits the symbol again
                    bump(prefix, NEG_INF, pnb + ps, emit, appended=False)
                    bump(prefix + (c,), NEG_INF, pb + ps, emit, appended=True)
                else:
                    bump(prefix + (c,), NEG_INF, total + ps, emit, appended=True)

        ranked = sorted(
            next_mass.items(),
            key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]),
        )[: self.beam]
        self._mass = {prefix: (m[0], m[1]) for prefix, m in ranked}
        self._emit = {prefix: next_emit[prefix] for prefix, _ in ranked}

    def finalize(self) -> list[Hypothesis]:
        hyps = [
            Hypothesis(
                tokens=prefix,
                log_p_blank=pb,
                log_p_nonblank=pnb,
                emit_frames=self._emit[prefix],
            )
            for prefix, (pb, pnb) in self._mass.items()
        ]
        hyps.sort(key=lambda h: (-h.s_ctc, h.tokens))
        return hyps


def prefix_beam_search(log_probs: LogProbMatrix, beam: int) -> list[Hypothesis]:
    """N-best collapsed prefixes ordered by CTC score, best first."""
    state = PrefixBeamState(beam)
    state.advance(log_probs.values)
    return state.finalize()


def exhaustive_decode_oracle(log_probs: LogProbMatrix) -> list[tuple[tuple[int, ...], float]]:
    """Exact mass of every collapsed label sequence, by path enumeration."""
    T, C = log_probs.T, log_probs.C
    if C**T > 10**6:
        raise ValueError(f"enumeration over {C}^{T} paths is too large")
    lp = log_probs.values
    masses: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(C), repeat=T):
        score = sum(lp[t, sym] for t, sym in enumerate(path))
        seq = collapse_path(path)
        prev = masses.get(seq, NEG_INF)
        masses[seq] = float(np.logaddexp(prev, score))
    return sorted(masses.items(), key=lambda kv: (-kv[1], kv[0]))


def attention_rescore(
    nbest: list[Hypothesis],
    model,
    encodings: np.ndarray,
    ctc_weight: float,
) -> list[Hypothesis]:
    """Second pass: s_final = ctc_weight * s_ctc + s_aed, re-sorted."""
    if not nbest:
        raise ValueError("nbest must be non-empty")
    rescored = []
    for hyp in nbest:
        s_aed = model.aed_score(encodings, list(hyp.tokens))
        rescored.append(
            Hypothesis(
                tokens=hyp.tokens,
                log_p_blank=hyp.log_p_blank,
                log_p_nonblank=hyp.log_p_nonblank,
                emit_frames=hyp.emit_frames,
                s_aed=s_aed,
                s_final=ctc_weight * hyp.s_ctc + s_aed,
            )
        )
    rescored.sort(key=lambda h: (-h.s_final, h.tokens))
    return rescored


def format_decode_line(utt_id: str, hyp: Hypothesis) -> str:
    tokens = " ".join(str(t) for t in hyp.tokens)
    s_aed = "" if hyp.s_aed is None else repr(hyp.s_aed)
    s_final = "" if hyp.s_final is None else repr(hyp.s_final)
    emits = ",".join(str(f) for f in hyp.emit_frames)
    return f"{utt_id}\t{tokens}\t{hyp.s_ctc!r}\t{s_aed}\t{s_final}\t{emits}"


def write_decode_file(out: IO[str], rows: Iterable[tuple[str, Hypothesis]]) -> None:
    for utt_id, hyp in rows:
        out.write(format_decode_line(utt_id, hyp) + "\n")


@dataclass
class DecodeLine:
    utt_id: str
    tokens: tuple[int, ...]
    s_ctc: float
    s_aed: float | None
    s_final: float | None
    emit_frames: tuple[int, ...] = field(default_factory=tuple)


def read_decode_file(lines: Iterable[str]) -> list[DecodeLine]:
    parsed = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ValueError(f"decode line {lineno}: expected 6 fields, got {len(parts)}")
        utt_id, tok_s, ctc_s, aed_s, final_s, emit_s = parts
        parsed.append(
            DecodeLine(
                utt_id=utt_id,
                tokens=tuple(int(x) for x in tok_s.split()) if tok_s else (),
                s_ctc=float(ctc_s),
                s_aed=float(aed_s) if aed_s else None,
                s_final=float(final_s) if final_s else None,
                emit_frames=tuple(int(x) for x in emit_s.split(",")) if emit_s else (),
            )
        )
    return parsed
