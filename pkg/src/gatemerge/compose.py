"""Applying merged deltas to base weights and appending concept-token rows."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import DEFAULT_BRACKETS, ConceptModule, check_matrix, concept_token, matrix_add
from .errors import CollisionError, DimensionError, InvalidInputError, MissingTensorError
from .gating import DEFAULT_TAU, DEFAULT_TOP_K, ConceptGate, GateDecision, PatchFeatures, active_set
from .merging import DEFAULT_DROP_RATE, ConceptMerger, MergedDelta

RESERVED_NAMES = ("embedding_table", "output_head")


@dataclass(frozen=True, eq=False)
class BaseModelWeights:
    """Base model tensors plus the vocabulary tables that concept tokens extend.

    ``contributors``, ``seed`` and ``drop_rate`` are provenance; they stay empty
    for an untouched base and are filled in by :func:`apply_deltas` and
    :func:`extend_vocab`.
    """

    tensors: Mapping[str, np.ndarray]
    embedding_table: np.ndarray
    output_head: np.ndarray
    vocab: tuple[str, ...]
    contributors: tuple[str, ...] = ()
    seed: int | None = None
    drop_rate: float | None = None

    def __post_init__(self):
        tensors = {}
        for name, w in self.tensors.items():
            if name in RESERVED_NAMES:
                raise InvalidInputError(f"tensor name {name!r} is reserved")
            tensors[name] = check_matrix(w, name)
        emb = check_matrix(self.embedding_table, "embedding_table")
        head = check_matrix(self.output_head, "output_head")
        vocab = tuple(self.vocab)
        if emb.shape != head.shape:
            raise DimensionError(f"embedding_table {emb.shape} and output_head {head.shape} differ")
        if emb.shape[0] != len(vocab):
            raise DimensionError(f"vocab has {len(vocab)} tokens but tables have {emb.shape[0]} rows")
        if len(set(vocab)) != len(vocab):
            raise CollisionError("vocab contains duplicate tokens")
        object.__setattr__(self, "tensors", dict(sorted(tensors.items())))
        object.__setattr__(self, "embedding_table", emb)
        object.__setattr__(self, "output_head", head)
        object.__setattr__(self, "vocab", vocab)
        object.__setattr__(self, "contributors", tuple(self.contributors))

    @property
    def hidden_dim(self) -> int:
        return self.embedding_table.shape[1]

    def __eq__(self, other):
        if not isinstance(other, BaseModelWeights):
            return NotImplemented
        return (
            self.vocab == other.vocab
            and self.contributors == other.contributors
            and self.seed == other.seed
            and self.drop_rate == other.drop_rate
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
            and np.array_equal(self.embedding_table, other.embedding_table)
            and np.array_equal(self.output_head, other.output_head)
        )


# A composed model has the same layout as a base model; only provenance differs.
ComposedModelWeights = BaseModelWeights


def apply_deltas(base: BaseModelWeights, merged: Sequence[MergedDelta]) -> ComposedModelWeights:
    tensors = dict(base.tensors)
    seen = set()
    for m in merged:
        if m.tensor_name in seen:
            raise InvalidInputError(f"tensor {m.tensor_name!r} has more than one merged delta")
        seen.add(m.tensor_name)
        if m.tensor_name not in tensors:
            raise MissingTensorError(f"base model has no tensor named {m.tensor_name!r}")
        w = tensors[m.tensor_name]
        if w.shape != m.delta.shape:
            raise DimensionError(
                f"delta for {m.tensor_name!r} is {m.delta.shape}, base tensor is {w.shape}"
            )
        tensors[m.tensor_name] = matrix_add(w, m.delta)

    contributors = sorted({cid for m in merged for cid in m.contributors} | set(base.contributors))
    seeds = {m.seed for m in merged}
    rates = {m.drop_rate for m in merged}
    return replace(
        base,
        tensors=tensors,
        contributors=tuple(contributors),
        seed=seeds.pop() if len(seeds) == 1 else base.seed,
        drop_rate=rates.pop() if len(rates) == 1 else base.drop_rate,
    )


def extend_vocab(
    base: BaseModelWeights,
    concepts: Sequence[ConceptModule],
    brackets: tuple[str, str] = DEFAULT_BRACKETS,
) -> ComposedModelWeights:
    """Append one embedding row and one head row per concept, in concept-id order."""
    concepts = sorted(concepts, key=lambda c: c.concept_id)
    tokens = [concept_token(c.concept_id, brackets) for c in concepts]
    if len(set(tokens)) != len(tokens):
        raise CollisionError(f"duplicate concept tokens: {tokens}")
    clashes = sorted(set(tokens) & set(base.vocab))
    if clashes:
        raise CollisionError(f"concept tokens already in the base vocab: {clashes}")
    for c in concepts:
        if c.dim != base.hidden_dim:
            raise DimensionError(
                f"concept {c.concept_id!r} has hidden dim {c.dim}, model has {base.hidden_dim}"
            )
    if not concepts:
        return base
    emb = np.vstack([base.embedding_table] + [c.token_embedding[None, :] for c in concepts])
    head = np.vstack([base.output_head] + [c.head_row[None, :] for c in concepts])
    contributors = sorted(set(base.contributors) | {c.concept_id for c in concepts})
    return replace(
        base,
        embedding_table=emb,
        output_head=head,
        vocab=base.vocab + tuple(tokens),
        contributors=tuple(contributors),
    )


def compose(
    base: BaseModelWeights,
    merged: Sequence[MergedDelta],
    concepts: Sequence[ConceptModule],
    brackets: tuple[str, str] = DEFAULT_BRACKETS,
) -> ComposedModelWeights:
    """Apply ``merged`` and append the tokens of ``concepts`` (the active set)."""
    return extend_vocab(apply_deltas(base, merged), concepts, brackets)


@dataclass(frozen=True)
class CompositionResult:
    weights: ComposedModelWeights
    decisions: list[GateDecision]
    merged: list[MergedDelta] = field(default_factory=list)

    @property
    def active(self) -> list[str]:
        return active_set(self.decisions)


class GateAndMerge(BaseEstimator):
    """Gate, merge and compose in one estimator.

    ``fit`` registers the concept pool. ``compose`` gates a query/image pair,
    fuses the active adapters and returns weights for the composed model.
    An empty active set yields the base weights unchanged.
    """

    def __init__(
        self,
        tau=DEFAULT_TAU,
        top_k=DEFAULT_TOP_K,
        drop_rate=DEFAULT_DROP_RATE,
        seed=0,
        bypass_single=True,
        brackets=DEFAULT_BRACKETS,
    ):
        self.tau = tau
        self.top_k = top_k
        self.drop_rate = drop_rate
        self.seed = seed
        self.bypass_single = bypass_single
        self.brackets = brackets

    def fit(self, concepts, y=None):
        concepts = list(concepts)
        self.gate_ = ConceptGate(self.tau, self.top_k, self.brackets).fit(concepts)
        self.merger_ = ConceptMerger(self.drop_rate, self.seed, self.bypass_single).fit(concepts)
        return self

    def compose(
        self, base: BaseModelWeights, query: str, features: PatchFeatures | None = None
    ) -> CompositionResult:
        check_is_fitted(self, "gate_")
        decisions = self.gate_.decide(query, features)
        active = active_set(decisions)
        merged = self.merger_.transform(active) if active else []
        concepts = [self.merger_.concepts_[cid] for cid in active]
        weights = compose(base, merged, concepts, tuple(self.brackets))
        return CompositionResult(weights, decisions, merged)
