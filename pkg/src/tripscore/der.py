"""Diarization error rate with optimal reference/hypothesis speaker mapping.

The scorer decomposes the timeline into elementary intervals between segment
boundaries, excludes a no-score collar around every reference boundary, maps
hypothesis speakers to reference speakers by solving an assignment problem on
the overlap-time matrix, and integrates missed speech, false alarm, and
speaker confusion per interval. Overlapping speech is scored per speaker: an
interval with two active reference speakers contributes twice its duration to
the scored reference total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import Segment, UndefinedMetricError

__all__ = ["DEFAULT_DER_COLLAR", "DerBreakdown", "compute_der"]

# Applied as +-collar/2 around each reference segment boundary.
DEFAULT_DER_COLLAR = 0.25


@dataclass(frozen=True)
class DerBreakdown:
    """Scored-time components of the diarization error rate, in seconds."""

    missed: float
    false_alarm: float
    confusion: float
    total_ref: float

    def __post_init__(self) -> None:
        for name in ("missed", "false_alarm", "confusion"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.total_ref <= 0:
            raise ValueError("total_ref must be positive for a defined rate")

    @property
    def der(self) -> float:
        return (self.missed + self.false_alarm + self.confusion) / self.total_ref


def _require_one_session(reference: list[Segment], hypothesis: list[Segment]) -> None:
    ids = {seg.session_id for seg in reference} | {seg.session_id for seg in hypothesis}
    if len(ids) > 1:
        raise ValueError(f"segments span multiple sessions: {sorted(ids)}")


def _active_speakers(
    by_speaker: dict[str, list[tuple[float, float]]], midpoint: float
) -> frozenset[str]:
    return frozenset(
        speaker
        for speaker, intervals in by_speaker.items()
        if any(start < midpoint < end for start, end in intervals)
    )


def compute_der(
    reference: list[Segment],
    hypothesis: list[Segment],
    collar: float = DEFAULT_DER_COLLAR,
) -> DerBreakdown:
    """Score one session's diarization against its reference.

    The speaker mapping is the one-to-one assignment maximizing correctly
    attributed time within the scored (collar-excluded) regions; per scored
    interval with ``n_ref`` / ``n_hyp`` active speakers and ``n_correct``
    co-active mapped pairs, the components accumulate
    ``max(0, n_ref - n_hyp)`` missed, ``max(0, n_hyp - n_ref)`` false alarm,
    and ``min(n_ref, n_hyp) - n_correct`` confusion speaker-seconds.

    Raises :class:`UndefinedMetricError` when no reference speech remains in
    scored regions.
    """
    if collar < 0:
        raise ValueError("collar must be >= 0")
    _require_one_session(reference, hypothesis)
    if not reference:
        raise UndefinedMetricError("empty reference timeline: DER is undefined")

    half = collar / 2.0
    zones: list[tuple[float, float]] = []
    if collar > 0:
        zones = sorted(
            (bound - half, bound + half)
            for seg in reference
            for bound in (seg.start, seg.end)
        )

    points = sorted(
        {p for seg in (*reference, *hypothesis) for p in (seg.start, seg.end)}
        | {edge for zone in zones for edge in zone}
    )

    ref_by_speaker: dict[str, list[tuple[float, float]]] = {}
    for seg in reference:
        ref_by_speaker.setdefault(seg.speaker, []).append((seg.start, seg.end))
    hyp_by_speaker: dict[str, list[tuple[float, float]]] = {}
    for seg in hypothesis:
        hyp_by_speaker.setdefault(seg.speaker, []).append((seg.start, seg.end))

    # Elementary intervals whose midpoint is outside all exclusion zones;
    # activity is constant within each because every boundary is a point.
    scored: list[tuple[float, frozenset[str], frozenset[str]]] = []
    for t0, t1 in zip(points, points[1:]):
        if t1 <= t0:
            continue
        midpoint = 0.5 * (t0 + t1)
        if any(z0 < midpoint < z1 for z0, z1 in zones):
            continue
        active_ref = _active_speakers(ref_by_speaker, midpoint)
        active_hyp = _active_speakers(hyp_by_speaker, midpoint)
        if active_ref or active_hyp:
            scored.append((t1 - t0, active_ref, active_hyp))

    ref_speakers = sorted(ref_by_speaker)
    hyp_speakers = sorted(hyp_by_speaker)
    ref_index = {s: i for i, s in enumerate(ref_speakers)}
    hyp_index = {s: i for i, s in enumerate(hyp_speakers)}

    overlap = np.zeros((len(ref_speakers), len(hyp_speakers)))
    for duration, active_ref, active_hyp in scored:
        for r in active_ref:
            for h in active_hyp:
                overlap[ref_index[r], hyp_index[h]] += duration

    pairs: set[tuple[str, str]] = set()
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        pairs = {(ref_speakers[i], hyp_speakers[j]) for i, j in zip(rows, cols)}

    missed = false_alarm = confusion = total_ref = 0.0
    for duration, active_ref, active_hyp in scored:
        n_ref, n_hyp = len(active_ref), len(active_hyp)
        n_correct = sum(1 for r, h in pairs if r in active_ref and h in active_hyp)
        missed += max(0, n_ref - n_hyp) * duration
        false_alarm += max(0, n_hyp - n_ref) * duration
        confusion += (min(n_ref, n_hyp) - n_correct) * duration
        total_ref += n_ref * duration

    if total_ref == 0:
        raise UndefinedMetricError(
            "collar excluded all reference speech: DER is undefined"
        )
    return DerBreakdown(
        missed=missed, false_alarm=false_alarm, confusion=confusion, total_ref=total_ref
    )
