"""Drop-and-rescale sparsification and sign-consistent fusion of concept deltas."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import ConceptModule, WeightMatrix, check_matrix, check_same_shape, materialize_delta
from .errors import DimensionError, InvalidConfigError, InvalidInputError
from .prng import MASK64, drop_mask

DEFAULT_DROP_RATE = 0.8


@dataclass(frozen=True)
class SparsifyConfig:
    drop_rate: float = DEFAULT_DROP_RATE
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.drop_rate) and 0.0 <= self.drop_rate < 1.0):
            raise InvalidConfigError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if int(self.seed) != self.seed or not 0 <= self.seed <= MASK64:
            raise InvalidConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass(frozen=True, eq=False)
class MergedDelta:
    tensor_name: str
    delta: WeightMatrix
    contributors: tuple[str, ...]
    drop_rate: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "delta", check_matrix(self.delta, f"delta.{self.tensor_name}"))
        contributors = tuple(self.contributors)
        if not contributors:
            raise InvalidInputError(f"merged delta {self.tensor_name!r} has no contributors")
        if list(contributors) != sorted(contributors):
            raise InvalidInputError(f"contributors must be sorted, got {contributors}")
        object.__setattr__(self, "contributors", contributors)

    def __eq__(self, other):
        if not isinstance(other, MergedDelta):
            return NotImplemented
        return (
            self.tensor_name == other.tensor_name
            and self.contributors == other.contributors
            and self.drop_rate == other.drop_rate
            and self.seed == other.seed
            and np.array_equal(self.delta, other.delta)
        )


def dare_sparsify(delta, config: SparsifyConfig, concept_id: str, tensor_name: str) -> WeightMatrix:
    """Drop each entry with probability ``p`` and rescale survivors by ``1 / (1 - p)``.

    The mask is a pure function of ``(config.seed, concept_id, tensor_name)``
    and the row-major element index.
    """
    p = config.drop_rate
    if not 0.0 <= p < 1.0:
        raise InvalidConfigError(f"drop_rate must lie in [0, 1), got {p}")
    delta = check_matrix(delta, "delta")
    dropped = drop_mask(config.seed, concept_id, tensor_name, delta.shape, p)
    out = np.where(dropped, 0.0, delta.astype(np.float64)) / (1.0 - p)
    out = out.astype(np.float32)
    out.setflags(write=False)
    return out


def _stack(deltas: Sequence) -> list[np.ndarray]:
    if len(deltas) == 0:
        raise InvalidInputError("need at least one delta")
    mats = [check_matrix(d, f"delta[{i}]") for i, d in enumerate(deltas)]
    check_same_shape(mats, "deltas")
    return mats


def _signed_sum(mats: list[np.ndarray]) -> np.ndarray:
    # contributors are added one at a time in list order so the float64
    # rounding sequence matches a scalar per-coordinate loop
    total = np.zeros(mats[0].shape, dtype=np.float64)
    for m in mats:
        total += m.astype(np.float64)
    return total


def sign_elect(deltas: Sequence) -> np.ndarray:
    """Per-coordinate sign (-1, 0, +1, as int8) of the summed deltas."""
    return np.sign(_signed_sum(_stack(deltas))).astype(np.int8)


def ties_merge(deltas: Sequence) -> WeightMatrix:
    """Average, per coordinate, only the entries that agree with the elected sign.

    Exact zeros carry no direction and never join a nonzero elected sign;
    coordinates whose elected sign is zero come out as zero.
    """
    mats = _stack(deltas)
    elected = np.sign(_signed_sum(mats))
    agree_sum = np.zeros(elected.shape, dtype=np.float64)
    agree_count = np.zeros(elected.shape, dtype=np.int64)
    for m in mats:
        m64 = m.astype(np.float64)
        agrees = (np.sign(m64) == elected) & (elected != 0)
        agree_sum += np.where(agrees, m64, 0.0)
        agree_count += agrees
    out = np.zeros(elected.shape, dtype=np.float64)
    np.divide(agree_sum, agree_count, out=out, where=agree_count > 0)
    out = out.astype(np.float32)
    out.setflags(write=False)
    return out


def naive_sum(deltas: Sequence) -> WeightMatrix:
    out = _signed_sum(_stack(deltas)).astype(np.float32)
    out.setflags(write=False)
    return out


def merge_pipeline(
    concepts: Sequence[ConceptModule],
    config: SparsifyConfig = SparsifyConfig(),
    bypass_single: bool = True,
) -> list[MergedDelta]:
    """Fuse the adapters of the active concepts, one :class:`MergedDelta` per tensor.

    Results are ordered by tensor name. Concepts without an adapter on a given
    tensor contribute nothing there.
    """
    concepts = sorted(concepts, key=lambda c: c.concept_id)
    if not concepts:
        raise InvalidInputError("the active concept set is empty; nothing to merge")
    ids = [c.concept_id for c in concepts]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"duplicate concept ids in active set: {ids}")

    tensor_names = sorted({name for c in concepts for name in c.adapters})
    bypass = bypass_single and len(concepts) == 1
    merged = []
    for name in tensor_names:
        owners = [c for c in concepts if name in c.adapters]
        shapes = {c.adapters[name].shape for c in owners}
        if len(shapes) != 1:
            raise DimensionError(f"tensor {name!r} has inconsistent shapes across concepts: {sorted(shapes)}")
        deltas = [materialize_delta(c.adapters[name]) for c in owners]
        if bypass:
            fused = deltas[0]
        else:
            sparse = [dare_sparsify(d, config, c.concept_id, name) for c, d in zip(owners, deltas)]
            fused = ties_merge(sparse)
        merged.append(
            MergedDelta(
                tensor_name=name,
                delta=fused,
                contributors=tuple(c.concept_id for c in owners),
                drop_rate=config.drop_rate,
                seed=config.seed,
            )
        )
    return merged


class ConceptMerger(BaseEstimator):
    """Estimator form of :func:`merge_pipeline`.

    ``fit`` takes the full concept pool; ``transform`` takes the ids of the
    active set and returns the merged deltas.
    """

    def __init__(self, drop_rate=DEFAULT_DROP_RATE, seed=0, bypass_single=True):
        self.drop_rate = drop_rate
        self.seed = seed
        self.bypass_single = bypass_single

    def fit(self, concepts, y=None):
        concepts = list(concepts)
        self.config_ = SparsifyConfig(self.drop_rate, self.seed)
        self.concepts_ = {c.concept_id: c for c in concepts}
        if len(self.concepts_) != len(concepts):
            raise InvalidInputError("duplicate concept ids in concept pool")
        return self

    def transform(self, active_ids):
        check_is_fitted(self, "concepts_")
        unknown = sorted(set(active_ids) - set(self.concepts_))
        if unknown:
            raise InvalidInputError(f"unknown concept ids: {unknown}")
        selected = [self.concepts_[cid] for cid in sorted(set(active_ids))]
        return merge_pipeline(selected, self.config_, self.bypass_single)
