"""Shared model types, the current-affine evaluation contract, and model files.

Every field model in this package is wrapped in a :class:`ModelArtifact`.
The affine kinds (``mpem``, ``actuation_net``, ``potential_net``) expose a
position-dependent actuation matrix ``A_B(p)`` (3 x S, T/A) and offset
``B_0(p)`` (T), so the predicted field is ``A_B(p) @ i + B_0(p)``.  The
direct kinds (``direct_net``, ``direct_gbt``) map ``(p, i)`` to a field with
no affinity guarantee and refuse to produce an actuation matrix.

Artifacts are immutable after construction; all evaluation entry points are
pure functions and safe to call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

SCHEMA_VERSION = 1

MODEL_KINDS = ("mpem", "actuation_net", "potential_net", "direct_net", "direct_gbt")
AFFINE_KINDS = ("mpem", "actuation_net", "potential_net")


class ModelKindError(ValueError):
    """Operation applied to a model kind that does not support it."""


class ModelFormatError(ValueError):
    """Model file is malformed, truncated, or carries the wrong schema version."""


class DimensionError(ValueError):
    """Vector or matrix dimensions inconsistent with the model."""


class EvaluationDomainError(ValueError):
    """Evaluation point outside a model's valid domain (e.g. inside a source)."""


class ConvergenceError(RuntimeError):
    """Training or calibration failed numerically (non-finite loss, no progress)."""


def _ro(a, dtype=float):
    """Copy to a read-only float array (artifact immutability)."""
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Sample:
    """One measurement row: position (m), coil currents (A), field (T)."""

    position: np.ndarray
    currents: np.ndarray
    field: np.ndarray
    position_id: int

    def __post_init__(self):
        object.__setattr__(self, "position", _ro(self.position))
        object.__setattr__(self, "currents", _ro(self.currents))
        object.__setattr__(self, "field", _ro(self.field))
        if self.position.shape != (3,) or self.field.shape != (3,):
            raise DimensionError("position and field must be 3-vectors")
        if self.currents.ndim != 1 or self.currents.size < 1:
            raise DimensionError("currents must be a vector with at least one coil")
        if not np.all(np.isfinite(self.field)):
            raise ValueError("field components must be finite")
        if self.position_id < 0:
            raise ValueError("position_id must be non-negative")


@dataclass(frozen=True)
class AffineFieldEval:
    """Local affine field map: ``field = actuation @ i + offset``.

    actuation: (3, S) in T/A; offset: (3,) in T.
    """

    actuation: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "actuation", _ro(self.actuation))
        object.__setattr__(self, "offset", _ro(self.offset))
        if self.actuation.ndim != 2 or self.actuation.shape[0] != 3:
            raise DimensionError("actuation must be 3 x S")
        if self.offset.shape != (3,):
            raise DimensionError("offset must be a 3-vector")
        if not (np.all(np.isfinite(self.actuation)) and np.all(np.isfinite(self.offset))):
            raise ValueError("affine evaluation produced non-finite entries")

    def field(self, currents) -> np.ndarray:
        i = np.asarray(currents, dtype=float)
        if i.shape != (self.actuation.shape[1],):
            raise DimensionError(
                f"expected {self.actuation.shape[1]} currents, got {i.shape}"
            )
        return self.actuation @ i + self.offset


@dataclass(frozen=True)
class StackedEval:
    """Stacked field + reduced-gradient map.

    actuation: (8, S); rows 0-2 are the field actuation (T/A), rows 3-7 the
    reduced-gradient actuation (T/(m*A)).  offset: (8,), T stacked over T/m.
    """

    actuation: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "actuation", _ro(self.actuation))
        object.__setattr__(self, "offset", _ro(self.offset))
        if self.actuation.ndim != 2 or self.actuation.shape[0] != 8:
            raise DimensionError("stacked actuation must be 8 x S")
        if self.offset.shape != (8,):
            raise DimensionError("stacked offset must be an 8-vector")
        if not (np.all(np.isfinite(self.actuation)) and np.all(np.isfinite(self.offset))):
            raise ValueError("stacked evaluation produced non-finite entries")


@dataclass(frozen=True)
class ModelArtifact:
    """A trained field model plus the metadata needed to reuse it.

    payload is the kind-specific parameter block (MpemParams, MlpParams or
    GbtEnsemble); normalization mirrors the input/output statistics stored in
    neural payloads so the file is self-describing.
    """

    model_kind: str
    coil_count: int
    payload: Any
    normalization: dict | None = None
    training_meta: dict | None = None
    schema_version: int = SCHEMA_VERSION
    units: str = "SI"

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ModelKindError(f"unknown model kind {self.model_kind!r}")
        if self.coil_count < 1:
            raise ValueError("coil_count must be >= 1")
        if self.schema_version != SCHEMA_VERSION:
            raise ModelFormatError(
                f"schema_version {self.schema_version} != {SCHEMA_VERSION}"
            )
        if self.units != "SI":
            raise ModelFormatError(f"unsupported units tag {self.units!r}")

    @property
    def is_affine(self) -> bool:
        return self.model_kind in AFFINE_KINDS


def eval_affine(model: ModelArtifact, p) -> AffineFieldEval:
    """Local actuation matrix and offset of an affine-kind model at ``p``.

    Direct kinds raise ModelKindError: they do not expose an actuation matrix
    without probing, and are treated strictly as benchmarks.
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (3,):
        raise DimensionError("p must be a 3-vector")
    if not np.all(np.isfinite(p)):
        raise ValueError("p must be finite")
    if model.model_kind == "mpem":
        from . import mpem

        return mpem.eval_affine_params(model.payload, p)
    if model.model_kind == "actuation_net":
        from . import neural

        return neural.actuationnet_predict(model.payload, p)
    if model.model_kind == "potential_net":
        from . import neural

        return neural.potentialnet_predict(model.payload, p)
    raise ModelKindError(
        f"{model.model_kind} has no actuation matrix; it maps (p, i) directly"
    )


def predict_field(model: ModelArtifact, p, i) -> np.ndarray:
    """Predicted field (T) at position ``p`` (m) under currents ``i`` (A)."""
    i = np.asarray(i, dtype=float)
    if i.shape != (model.coil_count,):
        raise DimensionError(
            f"expected {model.coil_count} currents, got shape {i.shape}"
        )
    if model.is_affine:
        return eval_affine(model, p).field(i)
    p = np.asarray(p, dtype=float)
    if p.shape != (3,):
        raise DimensionError("p must be a 3-vector")
    if model.model_kind == "direct_net":
        from . import neural

        return neural.directnet_predict(model.payload, p, i)
    from . import gbt

    return gbt.gbt_predict(model.payload, p, i)


def predict_fields(model: ModelArtifact, positions, currents) -> np.ndarray:
    """Vectorised ``predict_field`` over (n, 3) positions and (n, S) currents."""
    positions = np.asarray(positions, dtype=float)
    currents = np.asarray(currents, dtype=float)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise DimensionError("positions must be (n, 3)")
    if currents.shape != (positions.shape[0], model.coil_count):
        raise DimensionError("currents must be (n, coil_count)")
    if model.model_kind == "mpem":
        from . import mpem

        return mpem.mpem_forward_batch(model.payload, positions, currents)
    if model.model_kind in ("actuation_net", "potential_net", "direct_net"):
        from . import neural

        return neural.predict_fields(model.model_kind, model.payload, positions, currents)
    from . import gbt

    return gbt.gbt_predict_batch(model.payload, positions, currents)


# ---------------------------------------------------------------------------
# Serialization.  Structured text (JSON) with schema_version; floats are
# written with repr (shortest digits that round-trip), so the container is
# bit-exact for float64 parameters.
# ---------------------------------------------------------------------------


def _payload_to_dict(model: ModelArtifact) -> dict:
    kind = model.model_kind
    if kind == "mpem":
        from . import mpem

        return mpem.params_to_dict(model.payload)
    if kind in ("actuation_net", "potential_net", "direct_net"):
        from . import neural

        return neural.params_to_dict(model.payload)
    from . import gbt

    return gbt.ensemble_to_dict(model.payload)


def _payload_from_dict(kind: str, d: dict) -> Any:
    if kind == "mpem":
        from . import mpem

        return mpem.params_from_dict(d)
    if kind in ("actuation_net", "potential_net", "direct_net"):
        from . import neural

        return neural.params_from_dict(d)
    from . import gbt

    return gbt.ensemble_from_dict(d)


def serialize_model(model: ModelArtifact) -> bytes:
    doc = {
        "schema_version": model.schema_version,
        "model_kind": model.model_kind,
        "coil_count": model.coil_count,
        "units": model.units,
        "normalization": model.normalization,
        "training_meta": model.training_meta,
        "payload": _payload_to_dict(model),
    }
    return json.dumps(doc, indent=1).encode("utf-8")


def deserialize_model(data: bytes) -> ModelArtifact:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupted model payload: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must contain a JSON object")
    try:
        version = doc["schema_version"]
        kind = doc["model_kind"]
        coil_count = doc["coil_count"]
        payload = doc["payload"]
    except KeyError as exc:
        raise ModelFormatError(f"missing model field: {exc}") from exc
    if version != SCHEMA_VERSION:
        raise ModelFormatError(f"schema_version {version} != {SCHEMA_VERSION}")
    if kind not in MODEL_KINDS:
        raise ModelFormatError(f"unknown model kind {kind!r}")
    try:
        decoded = _payload_from_dict(kind, payload)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"corrupted model payload: {exc}") from exc
    return ModelArtifact(
        model_kind=kind,
        coil_count=coil_count,
        payload=decoded,
        normalization=doc.get("normalization"),
        training_meta=doc.get("training_meta"),
        schema_version=version,
        units=doc.get("units", "SI"),
    )


def save_model(model: ModelArtifact, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> ModelArtifact:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
