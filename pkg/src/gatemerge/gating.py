"""Input-dependent selection of the active concept set.

A concept is active when its bracketed token appears in the query text, or
when the top-K mean of patch/prototype cosine scores reaches ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import DEFAULT_BRACKETS, ConceptModule, concept_token
from .errors import DimensionError, InvalidConfigError, InvalidInputError

DEFAULT_TAU = 0.3
DEFAULT_TOP_K = 8
NO_VISUAL_SCORE = -1.0


@dataclass(frozen=True)
class GateConfig:
    tau: float = DEFAULT_TAU
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        # thresholds outside [-1, 1] are legal: they make the visual gate always/never fire
        if not np.isfinite(self.tau):
            raise InvalidConfigError(f"tau must be finite, got {self.tau}")
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise InvalidConfigError(f"top_k must be a positive integer, got {self.top_k}")


@dataclass(frozen=True)
class GateDecision:
    concept_id: str
    text_hit: bool
    visual_score: float
    active: bool

    def to_dict(self) -> dict:
        return {
            "concept_id": self.concept_id,
            "text_hit": self.text_hit,
            "visual_score": self.visual_score,
            "active": self.active,
        }


class PatchFeatures:
    """``P x dim`` matrix of unit-norm patch features for one image."""

    def __init__(self, vectors, atol: float = 1e-5):
        arr = np.asarray(vectors, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"patch features must be a non-empty P x dim matrix, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidInputError("patch features contain NaN or Inf")
        norms = np.linalg.norm(arr.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > atol)
        if bad.size:
            raise InvalidInputError(
                f"patch {bad[0]} has norm {norms[bad[0]]:.8f}; rows must be l2-normalized"
            )
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.vectors = arr

    @property
    def num_patches(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __repr__(self):
        return f"PatchFeatures(num_patches={self.num_patches}, dim={self.dim})"


def text_relevance(query: str, concept_id: str, brackets: tuple[str, str] = DEFAULT_BRACKETS) -> bool:
    return concept_token(concept_id, brackets) in query


def patch_scores(features: PatchFeatures, prototype) -> np.ndarray:
    proto = np.asarray(prototype, dtype=np.float64)
    if proto.ndim != 1 or proto.shape[0] != features.dim:
        raise DimensionError(
            f"prototype has shape {proto.shape}, patch features have dim {features.dim}"
        )
    return features.vectors.astype(np.float64) @ proto


def topk_pool(scores, k: int) -> float:
    """Mean of the ``k`` largest scores; ``k`` is clamped to the number of scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise InvalidInputError("topk_pool needs a non-empty 1-D score vector")
    if k < 1:
        raise InvalidConfigError(f"k must be positive, got {k}")
    k = min(int(k), scores.size)
    # stable sort: among equal scores the lowest patch index wins
    order = np.argsort(-scores, kind="stable")[:k]
    return float(scores[order].sum() / k)


def gate(
    query: str,
    features: PatchFeatures | None,
    concepts: Sequence[ConceptModule],
    config: GateConfig = GateConfig(),
    brackets: tuple[str, str] = DEFAULT_BRACKETS,
) -> list[GateDecision]:
    """One decision per concept, in input order.

    Without ``features`` every visual score is reported as ``-1`` and only a
    text mention can activate a concept.
    """
    decisions = []
    for concept in concepts:
        hit = text_relevance(query, concept.concept_id, brackets)
        if features is None:
            score = NO_VISUAL_SCORE
            visual = False
        else:
            score = topk_pool(patch_scores(features, concept.prototype), config.top_k)
            visual = score >= config.tau
        decisions.append(GateDecision(concept.concept_id, hit, score, hit or visual))
    return decisions


def active_set(decisions: Sequence[GateDecision]) -> list[str]:
    return sorted(d.concept_id for d in decisions if d.active)


class ConceptGate(BaseEstimator):
    """Estimator wrapper around :func:`gate`.

    ``fit`` registers the concept pool; ``decide`` and ``predict`` then gate a
    (query, features) input against it.

    >>> gate = ConceptGate(tau=0.3).fit(concepts)          # doctest: +SKIP
    >>> gate.predict("Is <bo> here?", features)             # doctest: +SKIP
    ['bo']
    """

    def __init__(self, tau=DEFAULT_TAU, top_k=DEFAULT_TOP_K, brackets=DEFAULT_BRACKETS):
        self.tau = tau
        self.top_k = top_k
        self.brackets = brackets

    def fit(self, concepts, y=None):
        concepts = list(concepts)
        ids = [c.concept_id for c in concepts]
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"duplicate concept ids in {ids}")
        dims = {c.prototype.shape[0] for c in concepts}
        if len(dims) > 1:
            raise DimensionError(f"concept prototypes have mixed dims {sorted(dims)}")
        self.config_ = GateConfig(tau=self.tau, top_k=self.top_k)
        self.concepts_ = concepts
        self.concept_ids_ = ids
        return self

    def decide(self, query: str, features: PatchFeatures | None = None) -> list[GateDecision]:
        check_is_fitted(self, "concepts_")
        return gate(query, features, self.concepts_, self.config_, tuple(self.brackets))

    def predict(self, query: str, features: PatchFeatures | None = None) -> list[str]:
        """Sorted ids of the active concepts."""
        return active_set(self.decide(query, features))
