"""Time-constrained permutation word error rate over speaker-attributed transcripts.

Each speaker's words form one time-ordered stream; hypothesis streams are
assigned to reference streams by solving an assignment problem over
time-constrained Levenshtein costs, with unmatched reference streams counted
as deletions and unmatched hypothesis streams as insertions. A word-level
diagonal (match/substitution) move is admissible only when the reference
interval and the collar-widened hypothesis interval overlap, touching
included; outside the collar only insertions and deletions are available.

The rate is (S + D + I) / reference words and is deliberately not clamped:
insertion-heavy hypotheses can exceed 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import LanguageId, Segment, TimedWord, UndefinedMetricError, tokenize

__all__ = [
    "DEFAULT_TCP_COLLAR",
    "EditCounts",
    "ReportRow",
    "ScoreReport",
    "TcpConfig",
    "TcpResult",
    "aggregate",
    "language_sort_key",
    "pseudo_word_times",
    "tc_levenshtein",
    "tcp_wer_session",
]

DEFAULT_TCP_COLLAR = 5.0


@dataclass(frozen=True)
class TcpConfig:
    """Scoring knobs: temporal collar (seconds, may be ``inf``) and tokenizer."""

    collar: float = DEFAULT_TCP_COLLAR
    tokenizer: Callable[[str], list[str]] = tokenize

    def __post_init__(self) -> None:
        if math.isnan(self.collar) or self.collar < 0:
            raise ValueError("collar must be >= 0")


@dataclass(frozen=True)
class EditCounts:
    """Minimum edit distance and its substitution/deletion/insertion split."""

    distance: int
    substitutions: int
    deletions: int
    insertions: int

    def __post_init__(self) -> None:
        if min(self.distance, self.substitutions, self.deletions, self.insertions) < 0:
            raise ValueError("negative edit count")
        if self.substitutions + self.deletions + self.insertions != self.distance:
            raise ValueError("edit counts do not sum to the distance")


@dataclass(frozen=True)
class TcpResult:
    """Session-level counts, the resulting rate, and the speaker assignment."""

    substitutions: int
    deletions: int
    insertions: int
    ref_words: int
    tcpwer: float
    assignment: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if min(self.substitutions, self.deletions, self.insertions) < 0:
            raise ValueError("negative count")
        if self.ref_words <= 0:
            raise ValueError("ref_words must be positive")
        total = self.substitutions + self.deletions + self.insertions
        if abs(self.tcpwer - total / self.ref_words) > 1e-12:
            raise ValueError("tcpwer does not match its counts")
        if len(set(self.assignment.values())) != len(self.assignment):
            raise ValueError("assignment is not injective")


def pseudo_word_times(
    segment: Segment, tokenizer: Callable[[str], list[str]] = tokenize
) -> list[TimedWord]:
    """Spread a segment's words uniformly over its interval.

    Word ``i`` of ``n`` occupies the ``i``-th equal subdivision of
    ``[start, end]``; a segment with no words yields an empty list.
    """
    if segment.text is None:
        raise ValueError("segment has no text")
    tokens = tokenizer(segment.text)
    n = len(tokens)
    span = segment.end - segment.start
    return [
        TimedWord(
            token=token,
            start=segment.start + i * span / n,
            end=segment.start + (i + 1) * span / n,
            speaker=segment.speaker,
        )
        for i, token in enumerate(tokens)
    ]


def _require_sorted(words: list[TimedWord], side: str) -> None:
    for prev, cur in zip(words, words[1:]):
        if cur.start < prev.start:
            raise ValueError(f"{side} words are not time-sorted")


def _admissible(ref: TimedWord, hyp: TimedWord, collar: float) -> bool:
    # Closed-interval overlap of [ref.start, ref.end] with the hypothesis
    # interval widened by the collar; touching counts.
    return ref.start <= hyp.end + collar and hyp.start - collar <= ref.end


def tc_levenshtein(
    ref: list[TimedWord], hyp: list[TimedWord], collar: float
) -> EditCounts:
    """Time-constrained edit distance between two time-sorted word streams.

    Ties in total cost are broken by preferring fewer substitutions, then
    fewer deletions, making the decomposition deterministic.
    """
    if math.isnan(collar) or collar < 0:
        raise ValueError("collar must be >= 0")
    _require_sorted(ref, "reference")
    _require_sorted(hyp, "hypothesis")
    n, m = len(ref), len(hyp)

    # DP over (cost, substitutions, deletions) tuples; lexicographic minimum
    # is preserved by the additive transitions, so prefix optimality holds.
    previous = [(j, 0, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        current = [(i, 0, i)]
        ref_word = ref[i - 1]
        for j in range(1, m + 1):
            hyp_word = hyp[j - 1]
            up = previous[j]
            left = current[j - 1]
            best = (up[0] + 1, up[1], up[2] + 1)  # delete ref word
            insert = (left[0] + 1, left[1], left[2])  # insert hyp word
            if insert < best:
                best = insert
            if _admissible(ref_word, hyp_word, collar):
                diag = previous[j - 1]
                if ref_word.token == hyp_word.token:
                    diag_move = diag
                else:
                    diag_move = (diag[0] + 1, diag[1] + 1, diag[2])
                if diag_move < best:
                    best = diag_move
            current.append(best)
        previous = current
    cost, subs, dels = previous[m]
    return EditCounts(
        distance=cost,
        substitutions=subs,
        deletions=dels,
        insertions=cost - subs - dels,
    )


def _speaker_streams(
    segments: list[Segment], tokenizer: Callable[[str], list[str]]
) -> dict[str, list[TimedWord]]:
    """One time-ordered word stream per speaker; start ties keep input order."""
    streams: dict[str, list[TimedWord]] = {}
    for segment in segments:
        streams.setdefault(segment.speaker, []).extend(
            pseudo_word_times(segment, tokenizer)
        )
    for words in streams.values():
        words.sort(key=lambda w: w.start)  # stable
    return streams


def _require_one_session(ref: list[Segment], hyp: list[Segment]) -> None:
    ids = {seg.session_id for seg in ref} | {seg.session_id for seg in hyp}
    if len(ids) > 1:
        raise ValueError(f"segments span multiple sessions: {sorted(ids)}")


def tcp_wer_session(
    reference: list[Segment],
    hypothesis: list[Segment],
    config: TcpConfig = TcpConfig(),
) -> TcpResult:
    """Score one session's speaker-attributed hypothesis against its reference.

    Builds per-speaker word streams, solves the reference/hypothesis stream
    assignment minimizing total time-constrained edit cost (an unassigned
    reference stream costs its word count as deletions, an unassigned
    hypothesis stream its word count as insertions), and accumulates the
    counts of the chosen pairing. Assignment-level ties reuse the
    fewer-substitutions-then-fewer-deletions preference.
    """
    _require_one_session(reference, hypothesis)
    ref_streams = _speaker_streams(reference, config.tokenizer)
    hyp_streams = _speaker_streams(hypothesis, config.tokenizer)
    ref_words = sum(len(words) for words in ref_streams.values())
    hyp_words = sum(len(words) for words in hyp_streams.values())
    if ref_words == 0:
        raise UndefinedMetricError("reference has no words: tcpWER is undefined")

    ref_names = sorted(ref_streams)
    hyp_names = sorted(hyp_streams)
    n_ref, n_hyp = len(ref_names), len(hyp_names)
    size = max(n_ref, n_hyp)

    # Scalarize (cost, substitutions, deletions) so the assignment solver
    # minimizes them lexicographically; bounds keep int64 exact for any
    # realistic session (< ~2e6 total words).
    scale = ref_words + hyp_words + 1
    costs = np.zeros((size, size), dtype=np.int64)
    pair_counts: dict[tuple[int, int], EditCounts] = {}
    for i, r in enumerate(ref_names):
        for j, h in enumerate(hyp_names):
            counts = tc_levenshtein(ref_streams[r], hyp_streams[h], config.collar)
            pair_counts[(i, j)] = counts
            costs[i, j] = (
                counts.distance * scale + counts.substitutions
            ) * scale + counts.deletions
    for i, r in enumerate(ref_names):
        word_count = len(ref_streams[r])
        for j in range(n_hyp, size):
            costs[i, j] = (word_count * scale) * scale + word_count
    for j, h in enumerate(hyp_names):
        word_count = len(hyp_streams[h])
        for i in range(n_ref, size):
            costs[i, j] = (word_count * scale) * scale

    substitutions = deletions = insertions = 0
    assignment: dict[str, str] = {}
    if size:
        rows, cols = linear_sum_assignment(costs)
        for i, j in zip(rows, cols):
            if i < n_ref and j < n_hyp:
                counts = pair_counts[(i, j)]
                substitutions += counts.substitutions
                deletions += counts.deletions
                insertions += counts.insertions
                assignment[hyp_names[j]] = ref_names[i]
            elif i < n_ref:
                deletions += len(ref_streams[ref_names[i]])
            elif j < n_hyp:
                insertions += len(hyp_streams[hyp_names[j]])

    total = substitutions + deletions + insertions
    return TcpResult(
        substitutions=substitutions,
        deletions=deletions,
        insertions=insertions,
        ref_words=ref_words,
        tcpwer=total / ref_words,
        assignment=assignment,
    )


@dataclass(frozen=True)
class ReportRow:
    """Per-language (or overall) error counts and rate."""

    language: LanguageId
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int
    tcpwer: float

    def __post_init__(self) -> None:
        if min(self.substitutions, self.deletions, self.insertions, self.ref_words) < 0:
            raise ValueError("negative count")


@dataclass(frozen=True)
class ScoreReport:
    """Per-language rows plus the aggregated overall row.

    In micro mode the overall counts are the sums of the row counts and the
    overall rate is recomputable from them; in macro mode the overall rate is
    the unweighted mean of the row rates.
    """

    rows: tuple[ReportRow, ...]
    overall: ReportRow | None
    mode: str = "micro"


def language_sort_key(language: LanguageId) -> tuple[int, str]:
    """Report ordering: English variants first, then alphabetical."""
    return (0 if language.startswith("English") else 1, language)


def aggregate(
    results: list[tuple[LanguageId, TcpResult]], mode: str = "micro"
) -> ScoreReport:
    """Fold session results into a per-language report plus an overall row.

    Micro averaging sums counts before dividing; macro averaging (behind the
    ``mode`` switch) averages the per-language rates instead.
    """
    if mode not in ("micro", "macro"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    groups: dict[str, list[TcpResult]] = {}
    for language, result in results:
        groups.setdefault(language, []).append(result)

    rows = []
    for language in sorted(groups, key=language_sort_key):
        subs = sum(r.substitutions for r in groups[language])
        dels = sum(r.deletions for r in groups[language])
        ins = sum(r.insertions for r in groups[language])
        words = sum(r.ref_words for r in groups[language])
        rows.append(
            ReportRow(
                language=language,
                substitutions=subs,
                deletions=dels,
                insertions=ins,
                ref_words=words,
                tcpwer=(subs + dels + ins) / words,
            )
        )

    overall = None
    if rows:
        subs = sum(r.substitutions for r in rows)
        dels = sum(r.deletions for r in rows)
        ins = sum(r.insertions for r in rows)
        words = sum(r.ref_words for r in rows)
        if mode == "micro":
            rate = (subs + dels + ins) / words
        else:
            rate = sum(r.tcpwer for r in rows) / len(rows)
        overall = ReportRow(
            language="Overall",
            substitutions=subs,
            deletions=dels,
            insertions=ins,
            ref_words=words,
            tcpwer=rate,
        )
    return ScoreReport(rows=tuple(rows), overall=overall, mode=mode)
