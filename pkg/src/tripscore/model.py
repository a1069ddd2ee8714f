"""Shared domain types for diarization-aware multi-speaker transcription scoring.

All times are real-valued seconds, and interval comparisons are exact float
comparisons: the scorers apply their own collars, which absorb timing fuzz.
Speaker labels are opaque strings; reference and hypothesis label spaces are
unrelated, and any mapping between them is computed by the scorers, never
assumed. Every type is an immutable value after construction and safe to
share between concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DEFAULT_EMBEDDING_DIM",
    "KNOWN_LANGUAGES",
    "LanguageId",
    "Segment",
    "Session",
    "SpeakerTriplet",
    "TimedWord",
    "UndefinedMetricError",
    "tokenize",
    "validate_segment",
]

DEFAULT_EMBEDDING_DIM = 256

#: Language categories used in the challenge-style reports, in report order.
#: Any other non-empty tag is accepted as an opaque extension.
KNOWN_LANGUAGES: tuple[str, ...] = (
    "English-American",
    "English-Australian",
    "English-British",
    "English-Filipino",
    "English-Indian",
    "French",
    "German",
    "Italian",
    "Japanese",
    "Korean",
    "Portuguese",
    "Russian",
    "Spanish",
    "Thai",
    "Vietnamese",
)

# Compared by exact byte equality; no case folding.
LanguageId = str


class UndefinedMetricError(ValueError):
    """A metric's denominator is empty (no reference speech or words)."""


def tokenize(text: str) -> list[str]:
    """Split ``text`` on Unicode whitespace runs, dropping empty tokens.

    Order is preserved and no other normalization is applied. Scripts
    without word separators need a custom tokenizer (see
    ``TcpConfig.tokenizer``); none ships here.
    """
    return text.split()


def validate_segment(segment) -> str | None:
    """Return the first violated segment invariant, or ``None`` if valid.

    Total function: accepts any object exposing ``start``, ``end``, ``text``
    and ``language`` attributes, so candidates can be checked before a
    :class:`Segment` is constructed.
    """
    start, end = segment.start, segment.end
    if not (isinstance(start, (int, float)) and isinstance(end, (int, float))):
        return "non-numeric time"
    if not (math.isfinite(start) and math.isfinite(end)):
        return "non-finite time"
    if start < 0:
        return "negative start"
    if end <= start:
        return "non-positive duration"
    text = getattr(segment, "text", None)
    if text is not None and not isinstance(text, str):
        return "text is not a string"
    language = getattr(segment, "language", None)
    if language is not None and not language:
        return "empty language tag"
    return None


@dataclass(frozen=True)
class Segment:
    """One speaker-attributed time interval, optionally carrying text.

    The unit of both diarization (RTTM) and transcript (SegLST) files.
    """

    session_id: str
    speaker: str
    start: float
    end: float
    text: str | None = None
    language: LanguageId | None = None

    def __post_init__(self) -> None:
        violation = validate_segment(self)
        if violation is not None:
            raise ValueError(f"invalid segment: {violation}")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def words(self) -> list[str]:
        """Whitespace tokens of the segment text (empty when text is absent)."""
        return tokenize(self.text) if self.text is not None else []


@dataclass(frozen=True)
class TimedWord:
    """A word token with a pseudo time interval, the atom of word alignment."""

    token: str
    start: float
    end: float
    speaker: str

    def __post_init__(self) -> None:
        if not self.token or any(ch.isspace() for ch in self.token):
            raise ValueError("token must be non-empty and whitespace-free")
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError("non-finite word time")
        if self.end < self.start:
            raise ValueError("word end precedes start")


@dataclass(frozen=True)
class SpeakerTriplet:
    """Enrollment triplet: who to transcribe, when, identified by an embedding.

    The embedding is stored as a read-only 1-D float array; its dimension is
    whatever the producing archive used (:data:`DEFAULT_EMBEDDING_DIM` by
    convention).
    """

    speaker: str
    start: float
    end: float
    embedding: np.ndarray

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError("non-finite triplet time")
        if self.end <= self.start:
            raise ValueError("non-positive triplet duration")
        arr = np.array(self.embedding, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding has non-finite components")
        arr.flags.writeable = False
        object.__setattr__(self, "embedding", arr)

    @property
    def dim(self) -> int:
        return int(self.embedding.size)


@dataclass(frozen=True)
class Session:
    """One raw conversation audio file with its metadata and transcripts.

    ``reference_path`` / ``rttm_path`` carry manifest-resolved file locations
    for lazily loaded inputs; ``reference`` / ``hypothesis`` hold segments
    once loaded or produced.
    """

    session_id: str
    audio: str
    language: LanguageId
    reference: tuple[Segment, ...] | None = None
    hypothesis: tuple[Segment, ...] | None = None
    reference_path: str | None = None
    rttm_path: str | None = None

    def __post_init__(self) -> None:
        if not self.session_id:
            raise ValueError("empty session_id")
        if not self.language:
            raise ValueError("empty language tag")
        for name in ("reference", "hypothesis"):
            segs = getattr(self, name)
            if segs is None:
                continue
            segs = tuple(segs)
            for seg in segs:
                if seg.session_id != self.session_id:
                    raise ValueError(
                        f"{name} segment belongs to session "
                        f"{seg.session_id!r}, not {self.session_id!r}"
                    )
            object.__setattr__(self, name, segs)
