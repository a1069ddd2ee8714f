"""End-to-end orchestration: manifest in, per-language score report out.

For every session the runner ingests diarization (an RTTM file or an external
diarizer command), post-processes segments, attaches embeddings, windows the
triplets into decoding requests, sends them to the external backend, collects
the hypothesis transcript, and finally scores sessions that have references.
Failures isolate to sessions: a failed session is recorded in the report and
the run continues (exit code 2 for partial failures, 0 when everything
scored, 1 for configuration errors).

Two runs with identical inputs, configuration, and a deterministic backend
produce byte-identical artifacts: outputs are sorted by session id and start
time, never by completion order.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .backend import BackendClient, DEFAULT_REQUEST_TIMEOUT, request_to_wire
from .formats import ParseError, parse_rttm, parse_seglst, read_embeddings, read_manifest, write_rttm, write_seglst
from .fusion import AdapterRegistry, load_adapter_registry
from .model import DEFAULT_EMBEDDING_DIM, Segment, Session
from .tcpwer import (
    DEFAULT_TCP_COLLAR,
    ReportRow,
    ScoreReport,
    TcpConfig,
    aggregate,
    language_sort_key,
    tcp_wer_session,
)
from .triplets import TripletBuildConfig, attach_embeddings, postprocess_segments, window_requests

__all__ = [
    "ConfigError",
    "RunConfig",
    "RunOutcome",
    "load_run_config",
    "render_report",
    "report_from_dict",
    "report_to_dict",
    "run",
    "validate_config",
]

logger = logging.getLogger("tripscore")

_CONFIG_KEYS = {
    "manifest",
    "output_dir",
    "backend_command",
    "embeddings",
    "embedder_command",
    "diarizer_command",
    "registry",
    "tcp_collar",
    "triplet",
    "key_scheme",
    "embedding_dim",
    "workers",
    "request_timeout",
    "aggregate_mode",
}
_TRIPLET_KEYS = {"min_duration", "merge_gap", "window_length"}


class ConfigError(ValueError):
    """Run configuration failed validation; carries all violations."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = tuple(violations)


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs, with paths already resolved."""

    manifest: str
    output_dir: str
    backend_command: tuple[str, ...]
    embeddings: str | None = None
    embedder_command: tuple[str, ...] | None = None
    diarizer_command: tuple[str, ...] | None = None
    registry: str | None = None
    tcp_collar: float = DEFAULT_TCP_COLLAR
    triplet: TripletBuildConfig = TripletBuildConfig()
    key_scheme: str = "per-speaker"
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    workers: int = 1
    request_timeout: float = DEFAULT_REQUEST_TIMEOUT
    aggregate_mode: str = "micro"


def load_run_config(path: str | Path) -> RunConfig:
    """Load a run configuration, resolving relative paths against its directory."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError("run config must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in ("manifest", "output_dir", "backend_command"):
        if key not in doc:
            raise ValueError(f"config lacks required key {key!r}")

    base = path.parent

    def resolve(p: str) -> str:
        candidate = Path(p)
        return str(candidate if candidate.is_absolute() else base / candidate)

    def command(key: str) -> tuple[str, ...] | None:
        value = doc.get(key)
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
            raise ValueError(f"{key} must be a list of strings")
        return tuple(value)

    triplet_doc = doc.get("triplet", {})
    if not isinstance(triplet_doc, dict) or set(triplet_doc) - _TRIPLET_KEYS:
        raise ValueError(f"triplet config accepts keys {sorted(_TRIPLET_KEYS)}")

    collar = doc.get("tcp_collar", DEFAULT_TCP_COLLAR)
    if isinstance(collar, str):
        collar = float(collar)  # accepts "inf"

    return RunConfig(
        manifest=resolve(doc["manifest"]),
        output_dir=resolve(doc["output_dir"]),
        backend_command=command("backend_command") or (),
        embeddings=resolve(doc["embeddings"]) if doc.get("embeddings") else None,
        embedder_command=command("embedder_command"),
        diarizer_command=command("diarizer_command"),
        registry=resolve(doc["registry"]) if doc.get("registry") else None,
        tcp_collar=float(collar),
        triplet=TripletBuildConfig(**triplet_doc),
        key_scheme=doc.get("key_scheme", "per-speaker"),
        embedding_dim=int(doc.get("embedding_dim", DEFAULT_EMBEDDING_DIM)),
        workers=int(doc.get("workers", 1)),
        request_timeout=float(doc.get("request_timeout", DEFAULT_REQUEST_TIMEOUT)),
        aggregate_mode=doc.get("aggregate_mode", "micro"),
    )


def validate_config(config: RunConfig) -> list[str]:
    """Check a configuration end to end; returns all violations, not the first."""
    violations: list[str] = []
    if config.workers < 1:
        violations.append("worker count must be >= 1")
    if math.isnan(config.tcp_collar) or config.tcp_collar < 0:
        violations.append("tcp_collar must be >= 0")
    if config.request_timeout <= 0:
        violations.append("request_timeout must be positive")
    if config.embedding_dim < 1:
        violations.append("embedding_dim must be >= 1")
    if config.key_scheme not in ("per-speaker", "per-utterance"):
        violations.append(f"unknown key_scheme {config.key_scheme!r}")
    if config.aggregate_mode not in ("micro", "macro"):
        violations.append(f"unknown aggregate_mode {config.aggregate_mode!r}")

    if not config.backend_command:
        violations.append("backend_command is empty")
    else:
        program = config.backend_command[0]
        if shutil.which(program) is None and not Path(program).exists():
            violations.append(f"backend command {program!r} is not resolvable")

    if config.embeddings is None and not config.embedder_command:
        violations.append("neither an embeddings archive nor an embedder command is configured")
    if config.embeddings is not None and not Path(config.embeddings).exists():
        violations.append(f"embeddings archive {config.embeddings!r} does not exist")

    sessions: list[Session] = []
    if not Path(config.manifest).exists():
        violations.append(f"manifest {config.manifest!r} does not exist")
    else:
        try:
            sessions = read_manifest(config.manifest)
        except ParseError as exc:
            violations.append(f"manifest is unreadable: {exc}")

    for session in sessions:
        if not Path(session.audio).exists():
            violations.append(f"session {session.session_id}: audio {session.audio!r} does not exist")
        if session.rttm_path is None:
            if not config.diarizer_command:
                violations.append(
                    f"session {session.session_id}: no rttm path and no diarizer command"
                )
        elif not Path(session.rttm_path).exists():
            violations.append(
                f"session {session.session_id}: rttm {session.rttm_path!r} does not exist"
            )
        if session.reference_path is not None and not Path(session.reference_path).exists():
            violations.append(
                f"session {session.session_id}: reference {session.reference_path!r} does not exist"
            )

    if config.registry is not None:
        if not Path(config.registry).exists():
            violations.append(f"registry {config.registry!r} does not exist")
        else:
            try:
                registry = load_adapter_registry(config.registry)
            except (ValueError, ParseError, OSError, KeyError) as exc:
                violations.append(f"registry is unreadable: {exc}")
            else:
                for language in sorted({s.language for s in sessions}):
                    if not registry.covers(language):
                        violations.append(
                            f"language {language!r} has no adapter bundle and no fallback"
                        )
    return violations


@dataclass(frozen=True)
class RunOutcome:
    """Result of one pipeline run; artifacts live under ``output_dir``."""

    report: ScoreReport
    scored: tuple[str, ...]
    unscored: tuple[str, ...]
    failed: tuple[tuple[str, str], ...]
    exit_code: int
    output_dir: str


@dataclass(frozen=True)
class _SessionWork:
    session_id: str
    hypothesis: tuple[Segment, ...]
    error: str | None


def _run_command_text(command: tuple[str, ...], timeout: float) -> str:
    proc = subprocess.run(
        list(command), capture_output=True, timeout=timeout, check=True, text=True
    )
    return proc.stdout


def _run_command_bytes(command: tuple[str, ...], timeout: float) -> bytes:
    proc = subprocess.run(list(command), capture_output=True, timeout=timeout, check=True)
    return proc.stdout


def _requests_to_json(requests) -> str:
    payload = []
    for k, request in enumerate(requests):
        wire = request_to_wire(request, request_id=f"{request.session_id}/{k}")
        wire["session_id"] = request.session_id
        payload.append(wire)
    return json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def _process_session(
    session: Session, config: RunConfig, archive, output_dir: Path
) -> _SessionWork:
    sid = session.session_id
    try:
        if session.rttm_path is not None:
            raw = parse_rttm(Path(session.rttm_path).read_text(encoding="utf-8"))
        else:
            raw = parse_rttm(
                _run_command_text(
                    config.diarizer_command + (session.audio,), config.request_timeout
                )
            )
        raw = [seg for seg in raw if seg.session_id == sid]
        segments = postprocess_segments(raw, config.triplet)

        rttm_artifact = output_dir / "rttm" / f"{sid}.rttm"
        rttm_artifact.write_text(write_rttm(segments), encoding="utf-8")

        if archive is not None:
            session_archive = archive
        else:
            session_archive = read_embeddings(
                _run_command_bytes(
                    config.embedder_command + (session.audio, str(rttm_artifact)),
                    config.request_timeout,
                )
            )
        triplets = attach_embeddings(
            segments,
            session_archive,
            scheme=config.key_scheme,
            expected_dim=config.embedding_dim,
        )
        requests = window_requests(triplets, session, config.triplet)
        (output_dir / "requests" / f"{sid}.json").write_text(
            _requests_to_json(requests), encoding="utf-8"
        )

        hypothesis: list[Segment] = []
        with BackendClient(config.backend_command, timeout=config.request_timeout) as client:
            for k, request in enumerate(requests):
                hypothesis.extend(
                    client.transcribe(request, f"{sid}/{k}", language=session.language)
                )
        hypothesis.sort(key=lambda seg: seg.start)  # stable: ties keep arrival order
        logger.info("session %s: %d hypothesis segments", sid, len(hypothesis))
        return _SessionWork(sid, tuple(hypothesis), None)
    except Exception as exc:  # failures isolate to the session, run continues
        logger.warning("session %s failed: %s", sid, exc)
        return _SessionWork(sid, (), f"{type(exc).__name__}: {exc}")


def run(config: RunConfig) -> RunOutcome:
    """Execute the whole pipeline for every manifest session.

    Raises :class:`ConfigError` when validation fails; per-session errors are
    collected instead of raised. Artifacts written under the output
    directory: ``rttm/``, ``requests/``, ``hyp.seglst.json``, ``report.json``
    and ``report.txt``.
    """
    violations = validate_config(config)
    if violations:
        raise ConfigError(violations)

    sessions = read_manifest(config.manifest)
    archive = None
    if config.embeddings is not None:
        archive = read_embeddings(Path(config.embeddings).read_bytes())

    output_dir = Path(config.output_dir)
    (output_dir / "rttm").mkdir(parents=True, exist_ok=True)
    (output_dir / "requests").mkdir(parents=True, exist_ok=True)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        work = list(
            pool.map(lambda s: _process_session(s, config, archive, output_dir), sessions)
        )
    work.sort(key=lambda w: w.session_id)
    by_id = {s.session_id: s for s in sessions}

    hypothesis_all = [seg for w in work if w.error is None for seg in w.hypothesis]
    (output_dir / "hyp.seglst.json").write_text(
        write_seglst(hypothesis_all) + "\n", encoding="utf-8"
    )

    results = []
    scored: list[str] = []
    unscored: list[str] = []
    failed: list[tuple[str, str]] = []
    for w in work:
        if w.error is not None:
            failed.append((w.session_id, w.error))
            continue
        session = by_id[w.session_id]
        if session.reference_path is None:
            unscored.append(w.session_id)
            continue
        try:
            reference = parse_seglst(Path(session.reference_path).read_text(encoding="utf-8"))
            result = tcp_wer_session(
                reference, list(w.hypothesis), TcpConfig(collar=config.tcp_collar)
            )
        except (ValueError, OSError) as exc:
            failed.append((w.session_id, f"scoring failed: {type(exc).__name__}: {exc}"))
            continue
        results.append((session.language, result))
        scored.append(w.session_id)

    report = aggregate(results, mode=config.aggregate_mode)
    outcome = RunOutcome(
        report=report,
        scored=tuple(scored),
        unscored=tuple(unscored),
        failed=tuple(failed),
        exit_code=2 if failed else 0,
        output_dir=str(output_dir),
    )
    _write_report_artifacts(outcome, config, output_dir)
    return outcome


def _write_report_artifacts(outcome: RunOutcome, config: RunConfig, output_dir: Path) -> None:
    document = report_to_dict(outcome.report)
    document["collar"] = config.tcp_collar
    document["sessions"] = {
        "scored": list(outcome.scored),
        "unscored": list(outcome.unscored),
        "failed": [
            {"session_id": sid, "error": message} for sid, message in outcome.failed
        ],
    }
    (output_dir / "report.json").write_text(
        json.dumps(document, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    text = render_report(outcome.report)
    if outcome.failed:
        lines = [f"failed: {sid}: {message}" for sid, message in outcome.failed]
        text += "\n" + "\n".join(lines) + "\n"
    (output_dir / "report.txt").write_text(text, encoding="utf-8")


def _row_to_dict(row: ReportRow) -> dict:
    return {
        "language": row.language,
        "substitutions": row.substitutions,
        "deletions": row.deletions,
        "insertions": row.insertions,
        "ref_words": row.ref_words,
        "tcpwer": row.tcpwer,
    }


def _row_from_dict(doc: dict) -> ReportRow:
    return ReportRow(
        language=doc["language"],
        substitutions=int(doc["substitutions"]),
        deletions=int(doc["deletions"]),
        insertions=int(doc["insertions"]),
        ref_words=int(doc["ref_words"]),
        tcpwer=float(doc["tcpwer"]),
    )


def report_to_dict(report: ScoreReport) -> dict:
    return {
        "mode": report.mode,
        "rows": [_row_to_dict(row) for row in report.rows],
        "overall": _row_to_dict(report.overall) if report.overall else None,
    }


def report_from_dict(doc: dict) -> ScoreReport:
    return ScoreReport(
        rows=tuple(_row_from_dict(row) for row in doc.get("rows", [])),
        overall=_row_from_dict(doc["overall"]) if doc.get("overall") else None,
        mode=doc.get("mode", "micro"),
    )


def render_report(report: ScoreReport) -> str:
    """Render the aligned per-language table.

    English variants sort first, remaining languages alphabetically; the
    rate prints as a percentage with two decimals; the final row is Overall
    (a ``-`` placeholder when nothing was scored).
    """
    headers = ("Language", "tcpWER(%)", "Sub", "Del", "Ins", "Words")
    rows = sorted(report.rows, key=lambda r: language_sort_key(r.language))

    def cells(row: ReportRow | None, label: str) -> tuple[str, ...]:
        if row is None:
            return (label, "-", "-", "-", "-", "-")
        return (
            label,
            f"{row.tcpwer * 100:.2f}",
            str(row.substitutions),
            str(row.deletions),
            str(row.insertions),
            str(row.ref_words),
        )

    table = [cells(row, row.language) for row in rows]
    table.append(cells(report.overall, "Overall"))

    widths = [
        max(len(headers[col]), *(len(line[col]) for line in table))
        for col in range(len(headers))
    ]

    def format_line(parts: tuple[str, ...]) -> str:
        first = parts[0].ljust(widths[0])
        rest = "  ".join(parts[i].rjust(widths[i]) for i in range(1, len(parts)))
        return f"{first}  {rest}"

    lines = [format_line(headers)]
    lines.append("-" * len(lines[0]))
    lines.extend(format_line(parts) for parts in table)
    return "\n".join(lines) + "\n"
