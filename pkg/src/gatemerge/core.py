"""Dense-matrix and adapter data model.

Weight matrices are plain 2-D ``numpy.float32`` arrays. ``check_matrix`` plays
the role of sklearn's ``check_array``: it coerces, validates and freezes
inputs so that downstream code can assume a finite, C-contiguous float32
matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DimensionError, InvalidInputError

WeightMatrix = np.ndarray

DEFAULT_BRACKETS = ("<", ">")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float32, order="C", copy=True)
    arr.setflags(write=False)
    return arr


def check_matrix(x, name: str = "matrix") -> WeightMatrix:
    """Return ``x`` as a read-only float32 matrix, raising on bad input."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must have positive dimensions, got {arr.shape}")
    arr = _frozen(arr)
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


def check_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise DimensionError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    arr = _frozen(arr)
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


def check_same_shape(mats, what: str = "matrices") -> tuple[int, int]:
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise DimensionError(f"{what} have inconsistent shapes: {sorted(shapes)}")
    return shapes.pop()


def validate_concept_id(concept_id: str) -> str:
    if not isinstance(concept_id, str) or not concept_id:
        raise InvalidInputError("concept_id must be a non-empty string")
    if any(ch.isspace() for ch in concept_id) or any(ch in concept_id for ch in "<>⟨⟩"):
        raise InvalidInputError(
            f"concept_id {concept_id!r} may not contain whitespace or angle brackets"
        )
    return concept_id


def concept_token(concept_id: str, brackets: tuple[str, str] = DEFAULT_BRACKETS) -> str:
    """The vocabulary token for a concept, e.g. ``"<bo>"``."""
    return f"{brackets[0]}{concept_id}{brackets[1]}"


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Low-rank factor pair targeting one base matrix.

    ``a_factor`` is ``d_out x rank`` and ``b_factor`` is ``rank x d_in``; the
    materialized update is ``(scale / rank) * a_factor @ b_factor``.
    """

    tensor_name: str
    a_factor: WeightMatrix
    b_factor: WeightMatrix
    rank: int
    scale: float

    def __post_init__(self):
        a = check_matrix(self.a_factor, f"{self.tensor_name}.A")
        b = check_matrix(self.b_factor, f"{self.tensor_name}.B")
        object.__setattr__(self, "a_factor", a)
        object.__setattr__(self, "b_factor", b)
        if not self.tensor_name:
            raise InvalidInputError("tensor_name must be non-empty")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(
                f"{self.tensor_name}: A is {a.shape} but B is {b.shape}; inner dims differ"
            )
        if int(self.rank) != self.rank or a.shape[1] != self.rank:
            raise DimensionError(
                f"{self.tensor_name}: rank {self.rank} does not match factor inner dim {a.shape[1]}"
            )
        object.__setattr__(self, "rank", int(self.rank))
        if self.rank >= min(a.shape[0], b.shape[1]):
            raise DimensionError(
                f"{self.tensor_name}: rank {self.rank} must be below min(d_out, d_in)"
                f" = {min(a.shape[0], b.shape[1])}"
            )
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidInputError(f"{self.tensor_name}: scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.a_factor.shape[0], self.b_factor.shape[1])

    def __eq__(self, other):
        if not isinstance(other, LoraAdapter):
            return NotImplemented
        return (
            self.tensor_name == other.tensor_name
            and self.rank == other.rank
            and self.scale == other.scale
            and np.array_equal(self.a_factor, other.a_factor)
            and np.array_equal(self.b_factor, other.b_factor)
        )


@dataclass(frozen=True, eq=False)
class ConceptModule:
    """One personalized concept: token rows, LoRA adapters and a visual prototype."""

    concept_id: str
    token_embedding: np.ndarray
    head_row: np.ndarray
    adapters: Mapping[str, LoraAdapter] = field(default_factory=dict)
    prototype: np.ndarray | None = None

    def __post_init__(self):
        validate_concept_id(self.concept_id)
        emb = check_vector(self.token_embedding, "token_embedding")
        head = check_vector(self.head_row, "head_row")
        if emb.shape != head.shape:
            raise DimensionError(
                f"token_embedding has length {emb.shape[0]} but head_row has {head.shape[0]}"
            )
        if self.prototype is None:
            raise InvalidInputError(f"concept {self.concept_id!r} has no prototype")
        proto = check_vector(self.prototype, "prototype")
        norm = np.linalg.norm(proto.astype(np.float64))
        if abs(norm - 1.0) > 1e-5:
            raise InvalidInputError(
                f"prototype of {self.concept_id!r} must be unit-norm, got norm {norm:.8f}"
            )
        adapters = dict(self.adapters)
        for key, adapter in adapters.items():
            if key != adapter.tensor_name:
                raise InvalidInputError(
                    f"adapter keyed {key!r} targets tensor {adapter.tensor_name!r}"
                )
        object.__setattr__(self, "token_embedding", emb)
        object.__setattr__(self, "head_row", head)
        object.__setattr__(self, "prototype", proto)
        object.__setattr__(self, "adapters", adapters)

    @property
    def dim(self) -> int:
        return self.token_embedding.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ConceptModule):
            return NotImplemented
        return (
            self.concept_id == other.concept_id
            and np.array_equal(self.token_embedding, other.token_embedding)
            and np.array_equal(self.head_row, other.head_row)
            and np.array_equal(self.prototype, other.prototype)
            and self.adapters == other.adapters
        )


def materialize_delta(adapter: LoraAdapter) -> WeightMatrix:
    """Return ``(scale / rank) * A @ B`` accumulated in float64, stored as float32."""
    a = adapter.a_factor.astype(np.float64)
    b = adapter.b_factor.astype(np.float64)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    delta = (adapter.scale / adapter.rank) * (a @ b)
    return _frozen(delta)


def matrix_add(w, delta) -> WeightMatrix:
    w = check_matrix(w, "w")
    delta = check_matrix(delta, "delta")
    if w.shape != delta.shape:
        raise DimensionError(f"cannot add {delta.shape} delta to {w.shape} matrix")
    return _frozen(w.astype(np.float64) + delta.astype(np.float64))
