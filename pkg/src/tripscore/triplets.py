"""Turn diarization segments into speaker-enrollment triplets and decoding requests.

Post-processing merges each speaker's near-adjacent segments and drops
too-short ones, embeddings are attached from a precomputed archive (the
embedding extractor is an external, frozen model), and the session timeline is
partitioned into fixed-length windows so several triplets can be decoded
jointly per request. Triplets straddling a window boundary appear clipped in
every window they intersect, tiling their original interval exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .formats import EmbeddingArchive
from .model import LanguageId, Segment, Session, SpeakerTriplet

__all__ = [
    "DecodingRequest",
    "KEY_SCHEMES",
    "MissingEmbeddingsError",
    "TripletBuildConfig",
    "attach_embeddings",
    "crop_span",
    "postprocess_segments",
    "window_requests",
]

KEY_SCHEMES = ("per-speaker", "per-utterance")


class MissingEmbeddingsError(LookupError):
    """Embedding archive lacks keys for some segments; no partial output."""

    def __init__(self, keys: list[str]):
        super().__init__(f"missing embedding keys: {', '.join(keys)}")
        self.keys = tuple(keys)


@dataclass(frozen=True)
class TripletBuildConfig:
    """Segment hygiene and windowing knobs, all in seconds."""

    min_duration: float = 0.20
    merge_gap: float = 0.50
    window_length: float = 30.0

    def __post_init__(self) -> None:
        if min(self.min_duration, self.merge_gap, self.window_length) < 0:
            raise ValueError("all durations must be >= 0")
        if self.window_length <= self.min_duration:
            raise ValueError("window_length must exceed min_duration")


@dataclass(frozen=True)
class DecodingRequest:
    """One windowed transcription request: audio span plus its triplets.

    Every triplet interval intersects the window with positive overlap, and
    triplets are sorted by start time.
    """

    session_id: str
    audio: str
    language: LanguageId
    window: tuple[float, float]
    triplets: tuple[SpeakerTriplet, ...]

    def __post_init__(self) -> None:
        start, end = self.window
        if not (math.isfinite(start) and math.isfinite(end)) or end <= start:
            raise ValueError("window must be a non-empty finite interval")
        object.__setattr__(self, "window", (float(start), float(end)))
        object.__setattr__(self, "triplets", tuple(self.triplets))
        previous = None
        for triplet in self.triplets:
            if min(triplet.end, end) <= max(triplet.start, start):
                raise ValueError(
                    f"triplet [{triplet.start}, {triplet.end}] does not "
                    f"intersect window [{start}, {end}]"
                )
            if previous is not None and triplet.start < previous:
                raise ValueError("triplets are not sorted by start time")
            previous = triplet.start


def postprocess_segments(
    segments: list[Segment], config: TripletBuildConfig = TripletBuildConfig()
) -> list[Segment]:
    """Merge then filter one session's diarization segments.

    Per speaker, consecutive segments whose gap is below ``merge_gap`` merge
    into one spanning segment (text and language are dropped on merged spans);
    segments shorter than ``min_duration`` are then removed. Output is sorted
    by start time, ties by speaker label. Idempotent.
    """
    ids = {seg.session_id for seg in segments}
    if len(ids) > 1:
        raise ValueError(f"segments span multiple sessions: {sorted(ids)}")

    by_speaker: dict[str, list[Segment]] = {}
    for seg in segments:
        by_speaker.setdefault(seg.speaker, []).append(seg)

    merged: list[Segment] = []
    for speaker, segs in by_speaker.items():
        segs = sorted(segs, key=lambda s: s.start)  # stable
        run: list[Segment] = [segs[0]]
        run_end = segs[0].end
        for seg in segs[1:]:
            if seg.start - run_end < config.merge_gap:
                run.append(seg)
                run_end = max(run_end, seg.end)
            else:
                merged.append(_collapse_run(run, run_end))
                run = [seg]
                run_end = seg.end
        merged.append(_collapse_run(run, run_end))

    kept = [seg for seg in merged if seg.duration >= config.min_duration]
    kept.sort(key=lambda s: (s.start, s.speaker))
    return kept


def _collapse_run(run: list[Segment], run_end: float) -> Segment:
    if len(run) == 1 and run[0].end == run_end:
        return run[0]
    first = run[0]
    return Segment(
        session_id=first.session_id,
        speaker=first.speaker,
        start=first.start,
        end=run_end,
    )


def attach_embeddings(
    segments: list[Segment],
    archive: EmbeddingArchive,
    scheme: str = "per-speaker",
    expected_dim: int | None = None,
) -> list[SpeakerTriplet]:
    """Look up each segment's embedding and emit enrollment triplets.

    Keys are ``session/speaker`` under the per-speaker scheme (one pooled
    vector per speaker) or ``session/speaker/index`` under the per-utterance
    scheme, where ``index`` counts that speaker's segments in input order.
    All missing keys are reported together; nothing is returned partially.
    """
    if scheme not in KEY_SCHEMES:
        raise ValueError(f"unknown key scheme {scheme!r}; expected one of {KEY_SCHEMES}")
    if expected_dim is not None and archive.dim != expected_dim:
        raise ValueError(
            f"archive dimension {archive.dim} does not match configured {expected_dim}"
        )

    keys: list[str] = []
    utterance_index: dict[tuple[str, str], int] = {}
    for seg in segments:
        if scheme == "per-speaker":
            keys.append(f"{seg.session_id}/{seg.speaker}")
        else:
            ident = (seg.session_id, seg.speaker)
            index = utterance_index.get(ident, 0)
            utterance_index[ident] = index + 1
            keys.append(f"{seg.session_id}/{seg.speaker}/{index}")

    missing = sorted({key for key in keys if key not in archive.entries})
    if missing:
        raise MissingEmbeddingsError(missing)
    return [
        SpeakerTriplet(
            speaker=seg.speaker, start=seg.start, end=seg.end, embedding=archive.entries[key]
        )
        for seg, key in zip(segments, keys)
    ]


def window_requests(
    triplets: list[SpeakerTriplet],
    session: Session,
    config: TripletBuildConfig = TripletBuildConfig(),
) -> list[DecodingRequest]:
    """Partition the session timeline into windows and distribute triplets.

    Windows of ``window_length`` seconds cover ``[0, max end]`` (the last may
    be shorter). A triplet lands, clipped, in every window it intersects;
    windows without triplets are omitted.
    """
    for prev, cur in zip(triplets, triplets[1:]):
        if cur.start < prev.start:
            raise ValueError("triplets are not sorted by start time")
    if not triplets:
        return []

    length = config.window_length
    horizon = max(t.end for t in triplets)
    count = max(1, math.ceil(horizon / length))
    requests: list[DecodingRequest] = []
    for k in range(count):
        window_start = k * length
        window_end = min((k + 1) * length, horizon)
        if window_end <= window_start:
            continue
        clipped = [
            replace(
                t,
                start=max(t.start, window_start),
                end=min(t.end, window_end),
            )
            for t in triplets
            if t.start < window_end and t.end > window_start
        ]
        if not clipped:
            continue
        clipped.sort(key=lambda t: (t.start, t.speaker))
        requests.append(
            DecodingRequest(
                session_id=session.session_id,
                audio=session.audio,
                language=session.language,
                window=(window_start, window_end),
                triplets=tuple(clipped),
            )
        )
    return requests


def crop_span(
    total_duration: float, start: float, end: float, rate: int = 16000
) -> tuple[int, int]:
    """Convert a time span to sample indices at ``rate`` Hz.

    Returns ``(floor(start * rate), ceil(end * rate))`` clamped to the
    duration's sample range; the span must satisfy
    ``0 <= start < end <= total_duration``.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    if not (0 <= start < end <= total_duration):
        raise ValueError(
            f"span [{start}, {end}] out of range for duration {total_duration}"
        )
    limit = math.floor(total_duration * rate)
    first = min(max(math.floor(start * rate), 0), limit)
    last = min(max(math.ceil(end * rate), 0), limit)
    return first, last
