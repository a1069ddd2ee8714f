"""Bit-exact readers and writers for the harness's on-disk formats.

Covers RTTM diarization files, SegLST transcript JSON, session manifests,
verification trial lists, and a fixed-layout binary embedding archive.
All text formats are UTF-8 with LF line separators; CR is tolerated and
stripped on read. Every writer followed by its parser is an identity
(RTTM up to 0.0005 s rounding; SegLST and the archive exact), and every
parser either returns a value or raises :class:`ParseError` -- never an
unstructured crash, whatever the input bytes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Segment, Session

__all__ = [
    "EMBEDDING_MAGIC",
    "EmbeddingArchive",
    "ParseError",
    "parse_manifest",
    "parse_rttm",
    "parse_seglst",
    "parse_trials",
    "read_embeddings",
    "read_manifest",
    "write_embeddings",
    "write_rttm",
    "write_seglst",
]

EMBEDDING_MAGIC = b"EMB1"

_TRIAL_LABELS = ("target", "nontarget")


class ParseError(ValueError):
    """Structured parse failure with optional line or array-index context."""

    def __init__(self, message: str, *, line: int | None = None, index: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        elif index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)
        self.line = line
        self.index = index


def _parse_float(token: str, what: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"non-numeric {what} {token!r}", line=lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {what} {token!r}", line=lineno)
    return value


def parse_rttm(text: str) -> list[Segment]:
    """Parse RTTM diarization lines into segments, in input order.

    Non-empty, non-comment (``;;``-prefixed) lines must have at least nine
    whitespace-separated fields; lines whose type field is not ``SPEAKER``
    are skipped. Field layout: type, session, channel, onset, duration,
    ``<NA>``, ``<NA>``, speaker, ...
    """
    segments: list[Segment] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";;"):
            continue
        fields = line.split()
        if len(fields) < 9:
            raise ParseError(f"expected >= 9 fields, got {len(fields)}", line=lineno)
        if fields[0] != "SPEAKER":
            continue
        onset = _parse_float(fields[3], "onset", lineno)
        duration = _parse_float(fields[4], "duration", lineno)
        if duration <= 0:
            raise ParseError(f"non-positive duration {fields[4]!r}", line=lineno)
        try:
            segments.append(
                Segment(
                    session_id=fields[1],
                    speaker=fields[7],
                    start=onset,
                    end=onset + duration,
                )
            )
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
    return segments


def write_rttm(segments: list[Segment]) -> str:
    """Render segments as RTTM, onset/duration with exactly 3 decimals."""
    lines = []
    for seg in segments:
        for label, value in (("session_id", seg.session_id), ("speaker", seg.speaker)):
            if not value or any(ch.isspace() for ch in value):
                raise ValueError(f"{label} {value!r} is not representable in RTTM")
        lines.append(
            f"SPEAKER {seg.session_id} 1 {seg.start:.3f} {seg.duration:.3f} "
            f"<NA> <NA> {seg.speaker} <NA> <NA>"
        )
    return "".join(line + "\n" for line in lines)


def _require_json_array(text: str, what: str) -> list:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {what}: {exc.msg}", line=exc.lineno) from None
    except (UnicodeDecodeError, RecursionError) as exc:
        raise ParseError(f"invalid JSON in {what}: {exc}") from None
    if not isinstance(doc, list):
        raise ParseError(f"{what} must be a JSON array")
    return doc


def _field(obj: dict, key: str, kind, index: int, optional: bool = False):
    if key not in obj:
        if optional:
            return None
        raise ParseError(f"missing key {key!r}", index=index)
    value = obj[key]
    if kind is float:
        # JSON numbers; bool is an int subclass and not a valid time.
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ParseError(f"key {key!r} is not a number", index=index)
        return float(value)
    if not isinstance(value, kind):
        raise ParseError(f"key {key!r} is not a {kind.__name__}", index=index)
    return value


def parse_seglst(text: str) -> list[Segment]:
    """Parse SegLST transcript JSON into segments, in array order.

    Each record requires ``session_id``, ``speaker``, ``start_time``,
    ``end_time`` (seconds) and ``words``; ``language`` is optional.
    """
    doc = _require_json_array(text, "SegLST")
    segments: list[Segment] = []
    for index, obj in enumerate(doc):
        if not isinstance(obj, dict):
            raise ParseError("entry is not a JSON object", index=index)
        session_id = _field(obj, "session_id", str, index)
        speaker = _field(obj, "speaker", str, index)
        start = _field(obj, "start_time", float, index)
        end = _field(obj, "end_time", float, index)
        words = _field(obj, "words", str, index)
        language = _field(obj, "language", str, index, optional=True)
        if end <= start:
            raise ParseError("end_time <= start_time", index=index)
        try:
            segments.append(
                Segment(
                    session_id=session_id,
                    speaker=speaker,
                    start=start,
                    end=end,
                    text=words,
                    language=language,
                )
            )
        except ValueError as exc:
            raise ParseError(str(exc), index=index) from None
    return segments


def write_seglst(segments: list[Segment]) -> str:
    """Render segments as SegLST JSON; every segment must carry text."""
    records = []
    for seg in segments:
        if seg.text is None:
            raise ValueError(
                f"segment {seg.session_id}/{seg.speaker} at {seg.start:.3f} has no text"
            )
        record = {
            "session_id": seg.session_id,
            "speaker": seg.speaker,
            "start_time": seg.start,
            "end_time": seg.end,
            "words": seg.text,
        }
        if seg.language is not None:
            record["language"] = seg.language
        records.append(record)
    return json.dumps(records, ensure_ascii=False, indent=2)


@dataclass(frozen=True)
class EmbeddingArchive:
    """In-memory form of the binary embedding archive.

    Maps key strings (conventionally ``session/speaker`` or
    ``session/speaker/index``) to float32 vectors of one shared dimension.
    Entries keep insertion order so write/read round-trips are bit-exact.
    """

    dim: int
    entries: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("archive dimension must be >= 1")
        normalized: dict[str, np.ndarray] = {}
        for key, vec in self.entries.items():
            if not isinstance(key, str):
                raise ValueError("archive keys must be strings")
            arr = np.asarray(vec, dtype=np.float32)
            if arr.shape != (self.dim,):
                raise ValueError(
                    f"entry {key!r} has {arr.size} components, expected {self.dim}"
                )
            arr = arr.copy()
            arr.flags.writeable = False
            normalized[key] = arr
        object.__setattr__(self, "entries", normalized)

    def __len__(self) -> int:
        return len(self.entries)


def read_embeddings(data: bytes) -> EmbeddingArchive:
    """Decode the binary embedding archive format.

    Layout: magic ``EMB1``; u32-LE dim; u32-LE count; then ``count`` records
    of [u32-LE key byte length, UTF-8 key bytes, dim x f32-LE].
    """
    if len(data) < 4:
        raise ParseError("truncated archive: missing magic")
    if data[:4] != EMBEDDING_MAGIC:
        raise ParseError("bad magic")
    if len(data) < 12:
        raise ParseError("truncated archive: missing header")
    dim, count = struct.unpack_from("<II", data, 4)
    if dim == 0:
        raise ParseError("archive dimension is zero")
    offset = 12
    vector_bytes = dim * 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 4 > len(data):
            raise ParseError("truncated archive: missing key length")
        (key_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + key_len > len(data):
            raise ParseError("truncated archive: missing key bytes")
        try:
            key = data[offset : offset + key_len].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("archive key is not valid UTF-8") from None
        offset += key_len
        if offset + vector_bytes > len(data):
            raise ParseError(f"truncated archive: missing vector for key {key!r}")
        if key in entries:
            raise ParseError(f"duplicate key {key!r}")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += vector_bytes
        entries[key] = vec
    if offset != len(data):
        raise ParseError(f"trailing data: {len(data) - offset} unread bytes")
    try:
        return EmbeddingArchive(dim=int(dim), entries=entries)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def write_embeddings(archive: EmbeddingArchive) -> bytes:
    """Encode an archive; ``read_embeddings`` recovers it bit-exactly."""
    parts = [EMBEDDING_MAGIC, struct.pack("<II", archive.dim, len(archive.entries))]
    for key, vec in archive.entries.items():
        key_bytes = key.encode("utf-8")
        parts.append(struct.pack("<I", len(key_bytes)))
        parts.append(key_bytes)
        parts.append(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_manifest(text: str, base_dir: str | Path = ".") -> list[Session]:
    """Parse a session manifest: a JSON array of session records.

    Each record requires ``session_id``, ``audio`` and ``language``;
    ``reference`` (SegLST path) and ``rttm`` are optional. Relative paths are
    resolved against ``base_dir`` (the manifest file's directory). Session
    ids must be unique and usable as file names (no path separators).
    """
    base = Path(base_dir)

    def resolve(p: str) -> str:
        path = Path(p)
        return str(path if path.is_absolute() else base / path)

    doc = _require_json_array(text, "manifest")
    sessions: list[Session] = []
    seen: set[str] = set()
    for index, obj in enumerate(doc):
        if not isinstance(obj, dict):
            raise ParseError("entry is not a JSON object", index=index)
        session_id = _field(obj, "session_id", str, index)
        audio = _field(obj, "audio", str, index)
        language = _field(obj, "language", str, index)
        reference = _field(obj, "reference", str, index, optional=True)
        rttm = _field(obj, "rttm", str, index, optional=True)
        if not session_id or any(sep in session_id for sep in ("/", "\\")) or session_id in (".", ".."):
            raise ParseError(f"session_id {session_id!r} is not a safe file name", index=index)
        if session_id in seen:
            raise ParseError(f"duplicate session_id {session_id!r}", index=index)
        seen.add(session_id)
        try:
            sessions.append(
                Session(
                    session_id=session_id,
                    audio=resolve(audio),
                    language=language,
                    reference_path=resolve(reference) if reference else None,
                    rttm_path=resolve(rttm) if rttm else None,
                )
            )
        except ValueError as exc:
            raise ParseError(str(exc), index=index) from None
    return sessions


def read_manifest(path: str | Path) -> list[Session]:
    """Load a manifest file, resolving relative paths against its directory."""
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), base_dir=path.parent)


def parse_trials(text: str) -> list[tuple[str, float]]:
    """Parse verification trials: one ``label score`` pair per line.

    Labels are ``target`` or ``nontarget``; scores must be finite reals.
    Blank lines are skipped.
    """
    trials: list[tuple[str, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"expected 'label score', got {len(parts)} fields", line=lineno)
        label, score_text = parts
        if label not in _TRIAL_LABELS:
            raise ParseError(f"unknown label {label!r}", line=lineno)
        trials.append((label, _parse_float(score_text, "score", lineno)))
    return trials
