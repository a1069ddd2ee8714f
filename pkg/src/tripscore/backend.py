"""Line-delimited JSON protocol with an external transcription backend.

The backend is any executable that reads one JSON request per line on stdin
and writes one JSON response per line on stdout:

  request:  {"id": str, "audio": str, "language": str,
             "window": [start, end],
             "triplets": [{"speaker", "start", "end", "embedding": [...]}]}
  response: {"id": str, "segments": [{"speaker", "start", "end", "text"}]}

The response id must echo the request id; returned speakers must come from
the request's triplet set and returned intervals must lie within the window
(0.1 s tolerance). Any violation, malformed line, timeout, or stream closure
raises :class:`BackendProtocolError`.
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
from typing import Sequence

from .model import Segment
from .triplets import DecodingRequest

__all__ = [
    "BackendClient",
    "BackendProtocolError",
    "DEFAULT_REQUEST_TIMEOUT",
    "WINDOW_TOLERANCE",
    "backend_invoke",
    "request_to_wire",
    "segments_from_response",
]

DEFAULT_REQUEST_TIMEOUT = 300.0
WINDOW_TOLERANCE = 0.1


class BackendProtocolError(RuntimeError):
    """Backend violated the request/response protocol."""


def request_to_wire(request: DecodingRequest, request_id: str) -> dict:
    """Serialize a decoding request for the wire; embeddings are inlined."""
    return {
        "id": request_id,
        "audio": request.audio,
        "language": request.language,
        "window": [request.window[0], request.window[1]],
        "triplets": [
            {
                "speaker": t.speaker,
                "start": t.start,
                "end": t.end,
                "embedding": [float(x) for x in t.embedding],
            }
            for t in request.triplets
        ],
    }


def segments_from_response(
    payload,
    request: DecodingRequest,
    request_id: str,
    language: str | None = None,
) -> list[Segment]:
    """Validate a response payload and convert it to hypothesis segments."""
    if not isinstance(payload, dict):
        raise BackendProtocolError("response is not a JSON object")
    if payload.get("id") != request_id:
        raise BackendProtocolError(
            f"response id {payload.get('id')!r} does not match request {request_id!r}"
        )
    raw_segments = payload.get("segments")
    if not isinstance(raw_segments, list):
        raise BackendProtocolError("response lacks a 'segments' array")

    allowed = {t.speaker for t in request.triplets}
    window_start, window_end = request.window
    segments: list[Segment] = []
    for entry in raw_segments:
        if not isinstance(entry, dict):
            raise BackendProtocolError("segment entry is not a JSON object")
        speaker = entry.get("speaker")
        start = entry.get("start")
        end = entry.get("end")
        text = entry.get("text")
        if (
            not isinstance(speaker, str)
            or not isinstance(text, str)
            or not isinstance(start, (int, float))
            or not isinstance(end, (int, float))
            or isinstance(start, bool)
            or isinstance(end, bool)
        ):
            raise BackendProtocolError(f"malformed segment entry: {entry!r}")
        if speaker not in allowed:
            raise BackendProtocolError(
                f"speaker {speaker!r} is not among the request's triplet speakers"
            )
        if start < window_start - WINDOW_TOLERANCE or end > window_end + WINDOW_TOLERANCE:
            raise BackendProtocolError(
                f"segment [{start}, {end}] lies outside window "
                f"[{window_start}, {window_end}] (tolerance {WINDOW_TOLERANCE})"
            )
        try:
            segments.append(
                Segment(
                    session_id=request.session_id,
                    speaker=speaker,
                    start=float(start),
                    end=float(end),
                    text=text,
                    language=language,
                )
            )
        except ValueError as exc:
            raise BackendProtocolError(f"invalid segment in response: {exc}") from None
    return segments


class BackendClient:
    """One backend subprocess speaking the line protocol.

    A daemon thread pumps stdout lines into a queue so each request can be
    awaited with a timeout. The client is not thread-safe; use one per worker.
    """

    def __init__(self, command: Sequence[str], timeout: float = DEFAULT_REQUEST_TIMEOUT):
        if not command:
            raise ValueError("empty backend command")
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        self._timeout = timeout
        self._proc = subprocess.Popen(
            list(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
        )
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def transcribe(
        self,
        request: DecodingRequest,
        request_id: str,
        language: str | None = None,
    ) -> list[Segment]:
        """Send one request and return its validated hypothesis segments."""
        wire = json.dumps(request_to_wire(request, request_id), ensure_ascii=False)
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(wire + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendProtocolError(f"backend closed its input: {exc}") from None
        try:
            line = self._lines.get(timeout=self._timeout)
        except queue.Empty:
            raise BackendProtocolError(
                f"backend timed out after {self._timeout:g} s"
            ) from None
        if line is None:
            raise BackendProtocolError("backend closed its output stream")
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendProtocolError(f"malformed response line: {exc.msg}") from None
        return segments_from_response(payload, request, request_id, language=language)

    def close(self) -> None:
        """Close the backend's stdin and reap the process."""
        if self._proc.stdin is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
        try:
            self._proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()

    def __enter__(self) -> "BackendClient":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def backend_invoke(
    request: DecodingRequest,
    command: Sequence[str],
    timeout: float = DEFAULT_REQUEST_TIMEOUT,
    request_id: str | None = None,
) -> list[Segment]:
    """One-shot convenience: spawn the backend, send one request, close."""
    with BackendClient(command, timeout=timeout) as client:
        return client.transcribe(
            request, request_id or f"{request.session_id}/0", language=request.language
        )
