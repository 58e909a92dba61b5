"""Input-gated, sign-consistent merging of per-concept LoRA adapters."""

from .compose import (
    BaseModelWeights,
    ComposedModelWeights,
    CompositionResult,
    GateAndMerge,
    apply_deltas,
    compose,
    extend_vocab,
)
from .core import ConceptModule, LoraAdapter, check_matrix, concept_token, materialize_delta, matrix_add
from .errors import (
    CollisionError,
    DataError,
    DegeneratePrototypeError,
    DimensionError,
    FormatError,
    GateMergeError,
    InvalidConfigError,
    InvalidInputError,
    MissingTensorError,
    SchemaError,
    TruncationError,
)
from .gating import (
    ConceptGate,
    GateConfig,
    GateDecision,
    PatchFeatures,
    active_set,
    gate,
    patch_scores,
    text_relevance,
    topk_pool,
)
from .merging import (
    ConceptMerger,
    MergedDelta,
    SparsifyConfig,
    dare_sparsify,
    merge_pipeline,
    naive_sum,
    sign_elect,
    ties_merge,
)

__version__ = "0.1.0"
