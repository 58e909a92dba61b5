"""Reference implementations and desk-scale harnesses for auditing merges.

Nothing here is vectorized on purpose where it serves as an oracle: the
scalar routines are written straight from the per-coordinate definitions so
that they can be compared against the production paths.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .compose import BaseModelWeights
from .core import ConceptModule, LoraAdapter, materialize_delta
from .errors import DimensionError, InvalidInputError
from .gating import PatchFeatures
from .merging import SparsifyConfig, dare_sparsify, merge_pipeline, naive_sum
from .prng import GOLDEN, MASK64, splitmix64, stream_state, uniform_stream


def ref_uniform(seed: int, concept_id: str, tensor_name: str, index: int) -> float:
    """Scalar twin of :func:`gatemerge.prng.uniform_stream` for one element."""
    state = stream_state(seed, concept_id, tensor_name)
    x = splitmix64((state + (index + 1) * GOLDEN) & MASK64)
    return (x >> 11) * 2.0**-53


def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


def ref_ties_merge(deltas: Sequence) -> np.ndarray:
    mats = [np.asarray(d, dtype=np.float32) for d in deltas]
    if not mats:
        raise InvalidInputError("need at least one delta")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise DimensionError("deltas have inconsistent shapes")
    rows, cols = shape
    out = np.zeros(shape, dtype=np.float32)
    for u in range(rows):
        for v in range(cols):
            values = [float(m[u, v]) for m in mats]
            total = 0.0
            for x in values:
                total += x
            gamma = _sign(total)
            if gamma == 0:
                continue
            agreeing = [x for x in values if _sign(x) == gamma]
            acc = 0.0
            for x in agreeing:
                acc += x
            out[u, v] = acc / len(agreeing)
    return out


def dare_monte_carlo(delta, p: float, num_seeds: int, concept_id: str = "mc", tensor_name: str = "delta"):
    """Sample mean of ``dare_sparsify`` over seeds ``0 .. num_seeds - 1``.

    Returns ``(mean, kept_fraction)``. The reduction runs in seed order in
    float64, so the result is reproducible bit for bit.
    """
    delta = np.asarray(delta, dtype=np.float32)
    total = np.zeros(delta.shape, dtype=np.float64)
    kept = 0
    for seed in range(num_seeds):
        sample = dare_sparsify(delta, SparsifyConfig(p, seed), concept_id, tensor_name)
        total += sample
        kept += int(np.count_nonzero(sample))
    nonzero = max(int(np.count_nonzero(delta)), 1)
    return total / num_seeds, kept / (nonzero * num_seeds)


def mc_unbiasedness(delta, p: float, num_seeds: int = 10_000) -> float:
    """Relative Frobenius error of the DARE sample mean against ``delta``.

    For an all-zero ``delta`` the relative error is undefined; a
    ``RuntimeWarning`` is issued and the absolute error returned instead.
    """
    if num_seeds < 1000:
        raise InvalidInputError(f"num_seeds must be at least 1000, got {num_seeds}")
    delta = np.asarray(delta, dtype=np.float32)
    mean, _ = dare_monte_carlo(delta, p, num_seeds)
    err = np.linalg.norm(mean - delta.astype(np.float64))
    ref = np.linalg.norm(delta.astype(np.float64))
    if ref == 0:
        warnings.warn("relative error undefined for a zero delta; reporting absolute error", RuntimeWarning)
        return float(err)
    return float(err / ref)


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale stand-in for a pool of trained concepts.

    Each concept's adapters touch a block of output rows. ``support_overlap``
    is the fraction of a block shared by every concept; 0 gives disjoint
    supports.
    """

    num_concepts: int = 3
    d_in: int = 16
    d_out: int = 24
    rank: int = 4
    scale: float = 8.0
    support_overlap: float = 0.0
    seed: int = 0
    num_tensors: int = 2
    vocab_size: int = 12
    proto_dim: int | None = None

    def __post_init__(self):
        for name in ("num_concepts", "d_in", "d_out", "rank", "num_tensors", "vocab_size"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.rank >= min(self.d_in, self.d_out):
            raise InvalidInputError("rank must be below min(d_in, d_out)")
        if not 0.0 <= self.support_overlap <= 1.0:
            raise InvalidInputError("support_overlap must lie in [0, 1]")
        if self.proto_dim is not None and self.proto_dim <= self.num_concepts:
            raise InvalidInputError("proto_dim must exceed num_concepts to leave room for background patches")

    @property
    def feature_dim(self) -> int:
        return self.proto_dim if self.proto_dim is not None else self.num_concepts + 4

    def concept_ids(self) -> list[str]:
        return [f"concept{k:02d}" for k in range(self.num_concepts)]

    def tensor_names(self) -> list[str]:
        return [f"layers.{k}.proj" for k in range(self.num_tensors)]

    def row_blocks(self) -> list[np.ndarray]:
        """Output rows owned by each concept: a shared head plus private rows."""
        n = self.num_concepts
        best = None
        for block in range(self.d_out, 0, -1):
            shared = round(self.support_overlap * block) if n > 1 else 0
            if shared + n * (block - shared) <= self.d_out:
                best = (block, shared)
                break
        if best is None or best[0] - best[1] < 1 and self.support_overlap < 1.0:
            raise InvalidInputError(
                f"cannot fit {n} row blocks with overlap {self.support_overlap} into d_out={self.d_out}"
            )
        block, shared = best
        private = block - shared
        return [
            np.concatenate([np.arange(shared), shared + k * private + np.arange(private)]).astype(np.int64)
            for k in range(n)
        ]


@dataclass(frozen=True)
class SyntheticSet:
    concepts: list[ConceptModule]
    base: BaseModelWeights
    probes: dict[str, np.ndarray]


def _draw(seed: int, key: str, name: str, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return (2.0 * uniform_stream(seed, key, name, n) - 1.0).reshape(shape).astype(np.float32)


def make_synthetic_concepts(spec: SyntheticSpec) -> SyntheticSet:
    blocks = spec.row_blocks()
    hidden = spec.d_in
    concepts = []
    for k, cid in enumerate(spec.concept_ids()):
        adapters = {}
        for name in spec.tensor_names():
            a = np.zeros((spec.d_out, spec.rank), dtype=np.float32)
            rows = blocks[k]
            a[rows] = _draw(spec.seed, cid, f"synthetic.{name}.A", (rows.size, spec.rank))
            b = _draw(spec.seed, cid, f"synthetic.{name}.B", (spec.rank, spec.d_in))
            adapters[name] = LoraAdapter(name, a, b, spec.rank, spec.scale)
        proto = np.zeros(spec.feature_dim, dtype=np.float32)
        proto[k] = 1.0
        concepts.append(
            ConceptModule(
                concept_id=cid,
                token_embedding=_draw(spec.seed, cid, "synthetic.token_embedding", (hidden,)),
                head_row=_draw(spec.seed, cid, "synthetic.head_row", (hidden,)),
                adapters=adapters,
                prototype=proto,
            )
        )
    base = BaseModelWeights(
        tensors={
            name: _draw(spec.seed, "__base__", name, (spec.d_out, spec.d_in)) for name in spec.tensor_names()
        },
        embedding_table=_draw(spec.seed, "__base__", "embedding_table", (spec.vocab_size, hidden)),
        output_head=_draw(spec.seed, "__base__", "output_head", (spec.vocab_size, hidden)),
        vocab=[f"tok{i}" for i in range(spec.vocab_size)],
    )
    probes = {cid: _draw(spec.seed, cid, "synthetic.probe", (spec.d_in,)) for cid in spec.concept_ids()}
    return SyntheticSet(concepts, base, probes)


def make_scene(spec: SyntheticSpec, present: Sequence[str], num_patches: int = 32, patches_per_concept: int = 8) -> PatchFeatures:
    """Patch features in which each ``present`` concept fills ``patches_per_concept`` patches.

    Remaining patches point along background axes orthogonal to every prototype.
    """
    ids = spec.concept_ids()
    dim = spec.feature_dim
    if len(present) * patches_per_concept > num_patches:
        raise InvalidInputError("not enough patches for the requested scene")
    rows = []
    for cid in present:
        k = ids.index(cid)
        rows.extend([np.eye(dim, dtype=np.float32)[k]] * patches_per_concept)
    background = np.arange(spec.num_concepts, dim)
    for j in range(num_patches - len(rows)):
        rows.append(np.eye(dim, dtype=np.float32)[background[j % background.size]])
    return PatchFeatures(np.vstack(rows))


def _fidelity(base, merged_by_tensor, own_by_tensor, probe) -> float:
    num, den = 0.0, 0.0
    x = np.asarray(probe, dtype=np.float64)
    for name, own in own_by_tensor.items():
        w = base.tensors[name].astype(np.float64)
        target = (w + own.astype(np.float64)) @ x
        got = (w + merged_by_tensor[name].astype(np.float64)) @ x
        num += float(np.sum((got - target) ** 2))
        den += float(np.sum(target**2))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return math.sqrt(num) / math.sqrt(den)


def interference_report(
    concepts: Sequence[ConceptModule],
    base: BaseModelWeights,
    probes: Mapping[str, np.ndarray],
    config: SparsifyConfig = SparsifyConfig(),
    bypass_single: bool = True,
) -> dict:
    """Compare merged and naively summed deltas against each concept's own adapter.

    For concept ``c`` with probe ``x_c``, fidelity is
    ``||(W + merged) x_c - (W + delta_c) x_c|| / ||(W + delta_c) x_c||`` with the
    norms taken over every tensor the concept adapts. Lower is better.
    """
    concepts = sorted(concepts, key=lambda c: c.concept_id)
    merged = {m.tensor_name: m.delta for m in merge_pipeline(concepts, config, bypass_single)}
    naive = {}
    for name in merged:
        naive[name] = naive_sum([materialize_delta(c.adapters[name]) for c in concepts if name in c.adapters])
    per_concept = {}
    for c in concepts:
        if c.concept_id not in probes:
            raise InvalidInputError(f"no probe vector for concept {c.concept_id!r}")
        probe = np.asarray(probes[c.concept_id])
        own = {}
        for name, adapter in c.adapters.items():
            if name not in base.tensors:
                raise InvalidInputError(f"base model has no tensor {name!r}")
            if base.tensors[name].shape != adapter.shape:
                raise DimensionError(f"tensor {name!r}: base {base.tensors[name].shape}, adapter {adapter.shape}")
            if probe.shape != (adapter.shape[1],):
                raise DimensionError(
                    f"probe for {c.concept_id!r} has shape {probe.shape}, tensor {name!r} expects ({adapter.shape[1]},)"
                )
            own[name] = materialize_delta(adapter)
        per_concept[c.concept_id] = {
            "fidelity_merge": _fidelity(base, merged, own, probe),
            "fidelity_naive": _fidelity(base, naive, own, probe),
        }
    fm = [v["fidelity_merge"] for v in per_concept.values()]
    fn = [v["fidelity_naive"] for v in per_concept.values()]
    return {
        "concepts": per_concept,
        "aggregate": {
            "mean_fidelity_merge": float(np.mean(fm)),
            "mean_fidelity_naive": float(np.mean(fn)),
            "max_fidelity_merge": float(np.max(fm)),
            "max_fidelity_naive": float(np.max(fn)),
        },
        "drop_rate": config.drop_rate,
        "seed": config.seed,
        "bypass_single": bypass_single,
    }
