"""Desk-scale math for the speaker-aware recognizer's trainable pieces.

Implements, exactly and in double precision: gated cross-attention that lets
a semantic feature stream attend over a speaker feature stream behind a
per-frame scalar gate (the semantic stream passes through unchanged when the
gate closes), the frame-stacking adapter projection, low-rank additive weight
updates and their merge arithmetic, the per-language parameter router, and
hand-derived reverse-mode gradients for the fusion layer so its
trainability can be verified against finite differences.

Parameter sets persist in the binary embedding-archive format: tensors are
flattened, zero-padded to one shared vector length, and stored under reserved
key names ("W_q", "W_k", ...), with a JSON sidecar recording true shapes and
non-tensor metadata. A registry manifest maps language tags to bundle files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .formats import EmbeddingArchive, read_embeddings, write_embeddings
from .model import LanguageId

__all__ = [
    "AdapterBundle",
    "AdapterParams",
    "AdapterRegistry",
    "FusionGradients",
    "FusionParams",
    "LoraDelta",
    "UnknownLanguageError",
    "adapter_project",
    "attention_weights",
    "fusion_gradient",
    "gated_fusion",
    "load_adapter_bundle",
    "load_adapter_registry",
    "load_fusion_params",
    "load_tensor_archive",
    "lora_merge",
    "route",
    "save_adapter_bundle",
    "save_fusion_params",
    "save_tensor_archive",
]

NONLINEARITIES = ("relu", "gelu")


class UnknownLanguageError(LookupError):
    """No parameter bundle for the requested language and no fallback given."""


def _as_matrix(name: str, value, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FusionParams:
    """Gated cross-attention parameters.

    ``w_q`` projects the semantic stream to queries; ``w_k``/``w_v`` project
    the speaker stream to keys and values in the semantic width; ``w_g`` and
    ``b_g`` parameterize the scalar per-frame gate on the semantic stream.
    """

    w_q: np.ndarray  # (semantic_dim, semantic_dim)
    w_k: np.ndarray  # (speaker_dim, semantic_dim)
    w_v: np.ndarray  # (speaker_dim, semantic_dim)
    w_g: np.ndarray  # (semantic_dim,)
    b_g: float

    def __post_init__(self) -> None:
        w_q = np.asarray(self.w_q, dtype=np.float64)
        if w_q.ndim != 2 or w_q.shape[0] != w_q.shape[1]:
            raise ValueError("w_q must be square")
        d_s = w_q.shape[0]
        w_k = np.asarray(self.w_k, dtype=np.float64)
        if w_k.ndim != 2 or w_k.shape[1] != d_s:
            raise ValueError("w_k must map speaker features to the semantic width")
        d_p = w_k.shape[0]
        object.__setattr__(self, "w_q", _as_matrix("w_q", w_q, (d_s, d_s)))
        object.__setattr__(self, "w_k", _as_matrix("w_k", w_k, (d_p, d_s)))
        object.__setattr__(self, "w_v", _as_matrix("w_v", self.w_v, (d_p, d_s)))
        object.__setattr__(self, "w_g", _as_matrix("w_g", self.w_g, (d_s,)))
        if not math.isfinite(self.b_g):
            raise ValueError("b_g must be finite")
        object.__setattr__(self, "b_g", float(self.b_g))

    @property
    def semantic_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def speaker_dim(self) -> int:
        return self.w_k.shape[0]


def _check_stream(name: str, stream, dim: int) -> np.ndarray:
    arr = np.asarray(stream, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have shape (frames >= 1, {dim}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _sigmoid(u: np.ndarray) -> np.ndarray:
    # Stable in both tails; saturates to exactly 0.0 / 1.0 far out.
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def attention_weights(
    semantic: np.ndarray, speaker: np.ndarray, params: FusionParams
) -> np.ndarray:
    """Row-stochastic attention of semantic frames over speaker frames."""
    s = _check_stream("semantic", semantic, params.semantic_dim)
    p = _check_stream("speaker", speaker, params.speaker_dim)
    queries = s @ params.w_q
    keys = p @ params.w_k
    return _row_softmax(queries @ keys.T / math.sqrt(params.semantic_dim))


def gated_fusion(
    semantic: np.ndarray, speaker: np.ndarray, params: FusionParams
) -> np.ndarray:
    """Blend speaker-stream context into the semantic stream behind a gate.

    Per frame ``t``: output ``semantic[t] + g_t * context[t]`` where
    ``context`` is scaled-dot-product attention of the semantic queries over
    speaker keys/values and ``g_t`` is the logistic gate of the semantic
    frame. A closed gate reproduces the semantic stream exactly.
    """
    s = _check_stream("semantic", semantic, params.semantic_dim)
    p = _check_stream("speaker", speaker, params.speaker_dim)
    weights = attention_weights(s, p, params)
    context = weights @ (p @ params.w_v)
    gate = _sigmoid(s @ params.w_g + params.b_g)
    return s + gate[:, None] * context


@dataclass(frozen=True)
class FusionGradients:
    """Reverse-mode gradients of ``gated_fusion`` for one upstream cotangent."""

    d_semantic: np.ndarray
    d_speaker: np.ndarray
    d_w_q: np.ndarray
    d_w_k: np.ndarray
    d_w_v: np.ndarray
    d_w_g: np.ndarray
    d_b_g: float


def fusion_gradient(
    semantic: np.ndarray,
    speaker: np.ndarray,
    params: FusionParams,
    upstream: np.ndarray,
) -> FusionGradients:
    """Exact gradients of ``sum(upstream * gated_fusion(...))``.

    Hand-derived reverse mode; matches central finite differences to
    < 1e-4 relative error in double precision.
    """
    s = _check_stream("semantic", semantic, params.semantic_dim)
    p = _check_stream("speaker", speaker, params.speaker_dim)
    g_up = np.asarray(upstream, dtype=np.float64)
    if g_up.shape != s.shape:
        raise ValueError(f"upstream cotangent must have shape {s.shape}, got {g_up.shape}")

    scale = 1.0 / math.sqrt(params.semantic_dim)
    queries = s @ params.w_q
    keys = p @ params.w_k
    values = p @ params.w_v
    weights = _row_softmax(queries @ keys.T * scale)
    context = weights @ values
    pre_gate = s @ params.w_g + params.b_g
    gate = _sigmoid(pre_gate)

    # output = s + gate[:, None] * context
    d_context = gate[:, None] * g_up
    d_gate = (g_up * context).sum(axis=1)
    d_pre = d_gate * gate * (1.0 - gate)
    d_w_g = s.T @ d_pre
    d_b_g = float(d_pre.sum())

    d_weights = d_context @ values.T
    d_values = weights.T @ d_context
    # softmax backward, rows independent
    d_scores = weights * (d_weights - (d_weights * weights).sum(axis=1, keepdims=True))
    d_queries = d_scores @ keys * scale
    d_keys = d_scores.T @ queries * scale

    d_semantic = g_up + d_pre[:, None] * params.w_g[None, :] + d_queries @ params.w_q.T
    d_speaker = d_keys @ params.w_k.T + d_values @ params.w_v.T
    return FusionGradients(
        d_semantic=d_semantic,
        d_speaker=d_speaker,
        d_w_q=s.T @ d_queries,
        d_w_k=p.T @ d_keys,
        d_w_v=p.T @ d_values,
        d_w_g=d_w_g,
        d_b_g=d_b_g,
    )


@dataclass(frozen=True)
class AdapterParams:
    """Two-layer affine projection applied to stacks of fused frames."""

    w_in: np.ndarray  # (input_dim * stack, hidden_dim)
    b_in: np.ndarray  # (hidden_dim,)
    w_out: np.ndarray  # (hidden_dim, out_dim)
    b_out: np.ndarray  # (out_dim,)
    stack: int = 1
    nonlinearity: str = "relu"

    def __post_init__(self) -> None:
        if self.stack < 1:
            raise ValueError("stack must be >= 1")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(
                f"unknown nonlinearity {self.nonlinearity!r}; expected one of {NONLINEARITIES}"
            )
        w_in = np.asarray(self.w_in, dtype=np.float64)
        if w_in.ndim != 2:
            raise ValueError("w_in must be a matrix")
        hidden = w_in.shape[1]
        w_out = np.asarray(self.w_out, dtype=np.float64)
        if w_out.ndim != 2 or w_out.shape[0] != hidden:
            raise ValueError("w_out rows must match w_in columns")
        object.__setattr__(self, "w_in", _as_matrix("w_in", w_in, w_in.shape))
        object.__setattr__(self, "b_in", _as_matrix("b_in", self.b_in, (hidden,)))
        object.__setattr__(self, "w_out", _as_matrix("w_out", w_out, w_out.shape))
        object.__setattr__(self, "b_out", _as_matrix("b_out", self.b_out, (w_out.shape[1],)))

    @property
    def input_dim(self) -> int:
        if self.w_in.shape[0] % self.stack:
            raise ValueError("w_in rows are not a multiple of the stack size")
        return self.w_in.shape[0] // self.stack

    @property
    def out_dim(self) -> int:
        return self.w_out.shape[1]


def _nonlinear(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    # tanh-approximated gelu
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def adapter_project(features: np.ndarray, adapter: AdapterParams) -> np.ndarray:
    """Project fused frames through the adapter, ``stack`` frames at a time.

    Frames are grouped into consecutive blocks of ``stack`` rows (the last
    block zero-padded), concatenated, and passed through
    affine -> nonlinearity -> affine. Output has ``ceil(frames / stack)`` rows.
    """
    f = _check_stream("features", features, adapter.input_dim)
    frames = f.shape[0]
    blocks = -(-frames // adapter.stack)
    padded = np.zeros((blocks * adapter.stack, adapter.input_dim))
    padded[:frames] = f
    stacked = padded.reshape(blocks, adapter.stack * adapter.input_dim)
    hidden = _nonlinear(adapter.nonlinearity, stacked @ adapter.w_in + adapter.b_in)
    return hidden @ adapter.w_out + adapter.b_out


@dataclass(frozen=True)
class LoraDelta:
    """Low-rank additive update ``(alpha / rank) * up @ down`` to a square weight."""

    down: np.ndarray  # (rank, dim)
    up: np.ndarray  # (dim, rank)
    alpha: float
    rank: int

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        down = np.asarray(self.down, dtype=np.float64)
        if down.ndim != 2 or down.shape[0] != self.rank:
            raise ValueError(f"down must have {self.rank} rows")
        dim = down.shape[1]
        if self.rank > dim:
            raise ValueError("rank must not exceed the target dimension")
        object.__setattr__(self, "down", _as_matrix("down", down, (self.rank, dim)))
        object.__setattr__(self, "up", _as_matrix("up", self.up, (dim, self.rank)))
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def dim(self) -> int:
        return self.down.shape[1]

    def scaled_update(self) -> np.ndarray:
        return (self.alpha / self.rank) * (self.up @ self.down)


def lora_merge(weight: np.ndarray, delta: LoraDelta) -> np.ndarray:
    """Return ``weight + (alpha / rank) * up @ down``.

    A zero ``up`` factor or zero ``alpha`` leaves the weight bitwise intact.
    """
    w = np.asarray(weight, dtype=np.float64)
    if w.shape != (delta.dim, delta.dim):
        raise ValueError(f"weight has shape {w.shape}, expected {(delta.dim, delta.dim)}")
    if delta.alpha == 0.0 or not delta.up.any():
        return w.copy()
    return w + delta.scaled_update()


@dataclass(frozen=True)
class AdapterBundle:
    """Per-language adapter plus named low-rank updates."""

    language: LanguageId
    adapter: AdapterParams
    loras: tuple[tuple[str, LoraDelta], ...] = ()

    def __post_init__(self) -> None:
        if not self.language:
            raise ValueError("empty language tag")
        object.__setattr__(self, "loras", tuple(self.loras))
        names = [name for name, _ in self.loras]
        if len(set(names)) != len(names):
            raise ValueError("duplicate low-rank target names")


def route(
    bundles: Mapping[str, AdapterBundle] | Iterable[AdapterBundle],
    language: LanguageId,
    fallback: AdapterBundle | None = None,
) -> AdapterBundle:
    """Select the bundle for a language by exact tag match.

    Unknown languages get the fallback bundle (the shared, non-specialized
    parameters) when one is provided, otherwise
    :class:`UnknownLanguageError`. Pure: identical inputs return the
    identical bundle object.
    """
    if isinstance(bundles, Mapping):
        table = dict(bundles)
    else:
        table = {}
        for bundle in bundles:
            if bundle.language in table:
                raise ValueError(f"duplicate bundle for language {bundle.language!r}")
            table[bundle.language] = bundle
    if not table:
        raise ValueError("empty bundle registry")
    if language in table:
        return table[language]
    if fallback is not None:
        return fallback
    raise UnknownLanguageError(f"no bundle for language {language!r} and no fallback")


# ---------------------------------------------------------------------------
# Persistence: tensors ride in the embedding-archive format, padded to one
# shared vector length; a JSON sidecar holds true shapes and metadata.
# ---------------------------------------------------------------------------


def _sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_tensor_archive(
    path: str | Path,
    tensors: Mapping[str, np.ndarray],
    meta: Mapping | None = None,
) -> None:
    """Persist named float tensors plus a metadata sidecar."""
    if not tensors:
        raise ValueError("no tensors to save")
    flats = {name: np.ravel(np.asarray(t, dtype=np.float32)) for name, t in tensors.items()}
    dim = max(max(f.size for f in flats.values()), 1)
    entries = {}
    for name, flat in flats.items():
        padded = np.zeros(dim, dtype=np.float32)
        padded[: flat.size] = flat
        entries[name] = padded
    Path(path).write_bytes(write_embeddings(EmbeddingArchive(dim=dim, entries=entries)))
    sidecar = {
        "shapes": {name: list(np.asarray(t).shape) for name, t in tensors.items()},
        "meta": dict(meta or {}),
    }
    _sidecar_path(path).write_text(
        json.dumps(sidecar, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_tensor_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load named tensors (as float64, true shapes restored) and metadata."""
    archive = read_embeddings(Path(path).read_bytes())
    sidecar = json.loads(_sidecar_path(path).read_text(encoding="utf-8"))
    shapes = sidecar["shapes"]
    tensors: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name not in archive.entries:
            raise ValueError(f"archive {path} lacks tensor {name!r}")
        size = int(np.prod(shape)) if shape else 1
        flat = archive.entries[name][:size].astype(np.float64)
        tensors[name] = flat.reshape(shape)
    return tensors, sidecar.get("meta", {})


def save_fusion_params(path: str | Path, params: FusionParams) -> None:
    save_tensor_archive(
        path,
        {
            "W_q": params.w_q,
            "W_k": params.w_k,
            "W_v": params.w_v,
            "w_g": params.w_g,
            "b_g": np.asarray(params.b_g),
        },
    )


def load_fusion_params(path: str | Path) -> FusionParams:
    tensors, _ = load_tensor_archive(path)
    return FusionParams(
        w_q=tensors["W_q"],
        w_k=tensors["W_k"],
        w_v=tensors["W_v"],
        w_g=tensors["w_g"],
        b_g=float(tensors["b_g"]),
    )


def save_adapter_bundle(path: str | Path, bundle: AdapterBundle) -> None:
    tensors: dict[str, np.ndarray] = {
        "adapter.w_in": bundle.adapter.w_in,
        "adapter.b_in": bundle.adapter.b_in,
        "adapter.w_out": bundle.adapter.w_out,
        "adapter.b_out": bundle.adapter.b_out,
    }
    lora_meta = []
    for name, delta in bundle.loras:
        tensors[f"lora.{name}.A"] = delta.down
        tensors[f"lora.{name}.B"] = delta.up
        lora_meta.append({"target": name, "alpha": delta.alpha, "rank": delta.rank})
    save_tensor_archive(
        path,
        tensors,
        meta={
            "language": bundle.language,
            "stack": bundle.adapter.stack,
            "nonlinearity": bundle.adapter.nonlinearity,
            "loras": lora_meta,
        },
    )


def load_adapter_bundle(path: str | Path) -> AdapterBundle:
    tensors, meta = load_tensor_archive(path)
    adapter = AdapterParams(
        w_in=tensors["adapter.w_in"],
        b_in=tensors["adapter.b_in"],
        w_out=tensors["adapter.w_out"],
        b_out=tensors["adapter.b_out"],
        stack=int(meta.get("stack", 1)),
        nonlinearity=meta.get("nonlinearity", "relu"),
    )
    loras = tuple(
        (
            entry["target"],
            LoraDelta(
                down=tensors[f"lora.{entry['target']}.A"],
                up=tensors[f"lora.{entry['target']}.B"],
                alpha=float(entry["alpha"]),
                rank=int(entry["rank"]),
            ),
        )
        for entry in meta.get("loras", [])
    )
    return AdapterBundle(language=meta["language"], adapter=adapter, loras=loras)


@dataclass(frozen=True)
class AdapterRegistry:
    """Loaded per-language bundles plus an optional shared fallback."""

    bundles: dict[str, AdapterBundle]
    fallback: AdapterBundle | None = None

    @property
    def languages(self) -> tuple[str, ...]:
        return tuple(sorted(self.bundles))

    def covers(self, language: LanguageId) -> bool:
        return language in self.bundles or self.fallback is not None

    def route(self, language: LanguageId) -> AdapterBundle:
        return route(self.bundles, language, self.fallback)


def load_adapter_registry(path: str | Path) -> AdapterRegistry:
    """Load a registry manifest: ``{"languages": {tag: bundle path}, "fallback": path?}``.

    Relative bundle paths are resolved against the manifest's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or not isinstance(doc.get("languages"), dict):
        raise ValueError("registry manifest must be an object with a 'languages' map")

    def resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else path.parent / candidate

    bundles: dict[str, AdapterBundle] = {}
    for language, bundle_path in doc["languages"].items():
        bundle = load_adapter_bundle(resolve(bundle_path))
        if bundle.language != language:
            raise ValueError(
                f"bundle {bundle_path!r} declares language {bundle.language!r}, "
                f"registry says {language!r}"
            )
        bundles[language] = bundle
    fallback = None
    if doc.get("fallback"):
        fallback = load_adapter_bundle(resolve(doc["fallback"]))
    return AdapterRegistry(bundles=bundles, fallback=fallback)
