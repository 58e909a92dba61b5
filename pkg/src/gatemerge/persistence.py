"""GMTENS1 tensor container and the file schemas built on it.

Layout::

    b"GMTENS1\\n"                 8 bytes
    header_len                   uint64, little-endian
    header                       UTF-8 JSON, exactly header_len bytes
    payload                      little-endian float32 data

The header is ``{"entries": [...], "meta": {...}}`` serialized with sorted keys
and no whitespace. Each entry carries ``name``, ``dtype`` (always ``"f32"``),
``shape``, ``offset`` (relative to the payload start, 8-byte aligned) and
``nbytes``. Entries are laid out in name order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .compose import RESERVED_NAMES, BaseModelWeights
from .core import ConceptModule, LoraAdapter
from .errors import (
    DataError,
    DegeneratePrototypeError,
    DimensionError,
    FormatError,
    GateMergeError,
    InvalidInputError,
    SchemaError,
    TruncationError,
)
from .gating import PatchFeatures
from .merging import MergedDelta

MAGIC = b"GMTENS1\n"
ALIGN = 8
FORMAT_VERSION = "1"
SUFFIX = ".gmt"

_U64 = struct.Struct("<Q")


@dataclass(eq=False)
class TensorContainer:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, TensorContainer):
            return NotImplemented
        if self.meta != other.meta or self.tensors.keys() != other.tensors.keys():
            return False
        for name, arr in self.tensors.items():
            a = np.asarray(arr, dtype="<f4")
            b = np.asarray(other.tensors[name], dtype="<f4")
            # compare bit patterns so -0.0 and 0.0 are told apart
            if a.shape != b.shape or not np.array_equal(a.view("<u4"), b.view("<u4")):
                return False
        return True


def _aligned(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _layout(tensors: Mapping[str, np.ndarray]):
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not np.issubdtype(arr.dtype, np.floating) and not np.issubdtype(arr.dtype, np.integer):
            raise FormatError(f"tensor {name!r} has non-numeric dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if not np.isfinite(arr).all():
            raise FormatError(f"tensor {name!r} contains NaN or Inf")
        offset = _aligned(offset)
        blob = arr.tobytes(order="C")
        entries.append(
            {"dtype": "f32", "name": name, "nbytes": len(blob), "offset": offset, "shape": list(arr.shape)}
        )
        blobs.append((offset, blob))
        offset += len(blob)
    return entries, blobs, offset


def encode_container(container: TensorContainer) -> bytes:
    for k, v in container.meta.items():
        if not isinstance(k, str) or not isinstance(v, str):
            raise FormatError(f"meta must map str to str, got {k!r}: {v!r}")
    for name in container.tensors:
        if not isinstance(name, str) or not name:
            raise FormatError(f"tensor names must be non-empty strings, got {name!r}")
    entries, blobs, total = _layout(container.tensors)
    header = json.dumps(
        {"entries": entries, "meta": dict(container.meta)},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    ).encode("utf-8")
    payload = bytearray(total)
    for offset, blob in blobs:
        payload[offset : offset + len(blob)] = blob
    return MAGIC + _U64.pack(len(header)) + header + bytes(payload)


def write_container(container: TensorContainer, destination: BinaryIO) -> int:
    data = encode_container(container)
    destination.write(data)
    return len(data)


def _check_entry(entry) -> tuple[str, tuple[int, ...], int, int]:
    if not isinstance(entry, dict) or set(entry) != {"dtype", "name", "nbytes", "offset", "shape"}:
        raise FormatError(f"malformed header entry: {entry!r}")
    name, shape, offset, nbytes = entry["name"], entry["shape"], entry["offset"], entry["nbytes"]
    if entry["dtype"] != "f32":
        raise FormatError(f"entry {name!r}: unsupported dtype {entry['dtype']!r}")
    if not isinstance(name, str) or not name:
        raise FormatError(f"entry name must be a non-empty string, got {name!r}")
    ints = [offset, nbytes, *shape] if isinstance(shape, list) else None
    if ints is None or not all(isinstance(i, int) and not isinstance(i, bool) and i >= 0 for i in ints):
        raise FormatError(f"entry {name!r}: shape, offset and nbytes must be non-negative integers")
    if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"entry {name!r}: nbytes {nbytes} does not match shape {shape}")
    if offset % ALIGN:
        raise FormatError(f"entry {name!r}: offset {offset} is not {ALIGN}-byte aligned")
    return name, tuple(shape), offset, nbytes


def decode_container(data: bytes) -> TensorContainer:
    if len(data) < len(MAGIC) + _U64.size:
        if data[: len(MAGIC)] != MAGIC[: len(data)]:
            raise FormatError("bad magic")
        raise TruncationError("file too short for a GMTENS1 preamble")
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {data[:len(MAGIC)]!r}")
    (header_len,) = _U64.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _U64.size
    if start + header_len > len(data):
        raise TruncationError(f"header declares {header_len} bytes but file ends early")
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"entries", "meta"}:
        raise FormatError("header must hold exactly 'entries' and 'meta'")
    meta = header["meta"]
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise FormatError("meta must be an object of strings")
    if not isinstance(header["entries"], list):
        raise FormatError("entries must be a list")

    payload = memoryview(data)[start + header_len :]
    tensors: dict[str, np.ndarray] = {}
    end = 0
    for raw in header["entries"]:
        name, shape, offset, nbytes = _check_entry(raw)
        if name in tensors:
            raise FormatError(f"duplicate entry name {name!r}")
        if offset < end:
            raise FormatError(f"entry {name!r} at offset {offset} overlaps the previous entry")
        end = offset + nbytes
        if end > len(payload):
            raise TruncationError(f"entry {name!r} runs past the end of the payload")
        arr = np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        if not np.isfinite(arr).all():
            raise DataError(f"entry {name!r} contains NaN or Inf")
        tensors[name] = arr
    if len(payload) != end:
        raise FormatError(f"{len(payload) - end} unexpected trailing bytes after the last entry")
    return TensorContainer(tensors=tensors, meta=dict(meta))


def read_container(source: BinaryIO) -> TensorContainer:
    return decode_container(source.read())


def save(container: TensorContainer, path) -> int:
    data = encode_container(container)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> TensorContainer:
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# concept bundles


def _lora_entry(tensor_name: str, factor: str) -> str:
    return f"lora.{tensor_name}.{factor}"


def concept_to_container(module: ConceptModule) -> TensorContainer:
    ranks = {a.rank for a in module.adapters.values()}
    scales = {a.scale for a in module.adapters.values()}
    if len(ranks) > 1 or len(scales) > 1:
        raise FormatError(
            f"concept {module.concept_id!r}: a bundle stores one rank and scale, "
            f"got ranks {sorted(ranks)} and scales {sorted(scales)}"
        )
    tensors = {
        "token_embedding": module.token_embedding,
        "head_row": module.head_row,
        "prototype": module.prototype,
    }
    for name, adapter in module.adapters.items():
        tensors[_lora_entry(name, "A")] = adapter.a_factor
        tensors[_lora_entry(name, "B")] = adapter.b_factor
    meta = {
        "concept_id": module.concept_id,
        "format_version": FORMAT_VERSION,
        # an adapter-free concept still needs placeholders to be schema-valid
        "rank": str(ranks.pop()) if ranks else "0",
        "scale": repr(scales.pop()) if scales else "0.0",
    }
    return TensorContainer(tensors, meta)


def container_to_concept(container: TensorContainer) -> ConceptModule:
    t, meta = container.tensors, container.meta
    for key in ("token_embedding", "head_row", "prototype"):
        if key not in t:
            raise SchemaError(f"concept bundle is missing required entry {key!r}")
    for key in ("concept_id", "rank", "scale", "format_version"):
        if key not in meta:
            raise SchemaError(f"concept bundle is missing meta key {key!r}")
    if meta["format_version"] != FORMAT_VERSION:
        raise SchemaError(f"unsupported bundle format_version {meta['format_version']!r}")
    try:
        rank = int(meta["rank"])
        scale = float(meta["scale"])
    except ValueError:
        raise SchemaError("meta rank/scale are not numbers") from None

    factors: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in t.items():
        if name in ("token_embedding", "head_row", "prototype"):
            continue
        if name.startswith("lora.") and name[-2:] in (".A", ".B") and len(name) > 7:
            factors.setdefault(name[5:-2], {})[name[-1]] = arr
        else:
            raise SchemaError(f"unexpected entry {name!r} in concept bundle")
    adapters = {}
    for tensor_name, pair in sorted(factors.items()):
        if set(pair) != {"A", "B"}:
            missing = "B" if "A" in pair else "A"
            raise SchemaError(f"adapter {tensor_name!r} is missing its {missing} factor")
        a, b = pair["A"], pair["B"]
        if a.ndim != 2 or b.ndim != 2:
            raise SchemaError(f"adapter {tensor_name!r} factors must be 2-D")
        if a.shape[1] != rank or b.shape[0] != rank:
            raise SchemaError(
                f"adapter {tensor_name!r}: factor shapes {a.shape}, {b.shape} disagree with rank {rank}"
            )
        try:
            adapters[tensor_name] = LoraAdapter(tensor_name, a, b, rank, scale)
        except GateMergeError as exc:
            raise SchemaError(f"adapter {tensor_name!r}: {exc}") from None
    try:
        return ConceptModule(
            concept_id=meta["concept_id"],
            token_embedding=t["token_embedding"],
            head_row=t["head_row"],
            adapters=adapters,
            prototype=t["prototype"],
        )
    except GateMergeError as exc:
        raise SchemaError(f"invalid concept bundle: {exc}") from None


def store_concept(module: ConceptModule, path) -> int:
    return save(concept_to_container(module), path)


def load_concept(path) -> ConceptModule:
    return container_to_concept(load(path))


def load_concept_dir(directory, ids: Iterable[str] | None = None) -> dict[str, ConceptModule]:
    """Load every ``*.gmt`` bundle in ``directory``, keyed by concept id.

    With ``ids`` given, only those concepts are returned and each must exist.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"concept directory {directory} does not exist")
    concepts: dict[str, ConceptModule] = {}
    for path in sorted(directory.glob(f"*{SUFFIX}")):
        try:
            module = load_concept(path)
        except FormatError as exc:
            raise type(exc)(f"{path}: {exc}") from None
        if module.concept_id in concepts:
            raise InvalidInputError(f"concept id {module.concept_id!r} appears in more than one bundle")
        concepts[module.concept_id] = module
    if ids is not None:
        ids = list(ids)
        unknown = sorted(set(ids) - set(concepts))
        if unknown:
            raise InvalidInputError(f"no bundle found for concept ids {unknown}")
        concepts = {cid: concepts[cid] for cid in sorted(set(ids))}
    return dict(sorted(concepts.items()))


def build_prototype(support_features: Iterable[PatchFeatures]) -> np.ndarray:
    """Normalized mean of every patch vector across the support images."""
    support = list(support_features)
    if not support:
        raise InvalidInputError("support set is empty")
    dims = {f.dim for f in support}
    if len(dims) != 1:
        raise DimensionError(f"support images have mixed feature dims {sorted(dims)}")
    stacked = np.vstack([f.vectors.astype(np.float64) for f in support])
    mean = stacked.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm <= 1e-12:
        raise DegeneratePrototypeError("mean of the support patches is the zero vector")
    return (mean / norm).astype(np.float32)


# ---------------------------------------------------------------------------
# base / composed weights, patch features, merged deltas


def weights_to_container(weights: BaseModelWeights) -> TensorContainer:
    tensors = dict(weights.tensors)
    tensors["embedding_table"] = weights.embedding_table
    tensors["output_head"] = weights.output_head
    meta = {"format_version": FORMAT_VERSION, "vocab": json.dumps(list(weights.vocab), ensure_ascii=False)}
    if weights.contributors:
        meta["contributors"] = json.dumps(list(weights.contributors), ensure_ascii=False)
    if weights.seed is not None:
        meta["seed"] = str(weights.seed)
    if weights.drop_rate is not None:
        meta["drop_rate"] = repr(weights.drop_rate)
    return TensorContainer(tensors, meta)


def _json_list(meta: Mapping[str, str], key: str) -> list[str]:
    try:
        value = json.loads(meta[key])
    except json.JSONDecodeError:
        raise SchemaError(f"meta {key!r} is not valid JSON") from None
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaError(f"meta {key!r} must be a JSON array of strings")
    return value


def container_to_weights(container: TensorContainer) -> BaseModelWeights:
    t, meta = container.tensors, container.meta
    for key in RESERVED_NAMES:
        if key not in t:
            raise SchemaError(f"weights file is missing required entry {key!r}")
    if "vocab" not in meta:
        raise SchemaError("weights file is missing meta 'vocab'")
    for name, arr in t.items():
        if arr.ndim != 2:
            raise SchemaError(f"weights entry {name!r} must be 2-D, got shape {arr.shape}")
    try:
        return BaseModelWeights(
            tensors={k: v for k, v in t.items() if k not in RESERVED_NAMES},
            embedding_table=t["embedding_table"],
            output_head=t["output_head"],
            vocab=_json_list(meta, "vocab"),
            contributors=_json_list(meta, "contributors") if "contributors" in meta else (),
            seed=int(meta["seed"]) if "seed" in meta else None,
            drop_rate=float(meta["drop_rate"]) if "drop_rate" in meta else None,
        )
    except GateMergeError as exc:
        if isinstance(exc, FormatError):
            raise
        raise SchemaError(f"invalid weights file: {exc}") from None


def store_weights(weights: BaseModelWeights, path) -> int:
    return save(weights_to_container(weights), path)


def load_weights(path) -> BaseModelWeights:
    return container_to_weights(load(path))


def features_to_container(features: PatchFeatures) -> TensorContainer:
    return TensorContainer({"patches": features.vectors}, {"format_version": FORMAT_VERSION})


def load_features(path) -> PatchFeatures:
    container = load(path)
    if "patches" not in container.tensors:
        raise SchemaError("feature file is missing entry 'patches'")
    try:
        return PatchFeatures(container.tensors["patches"])
    except GateMergeError as exc:
        raise SchemaError(f"invalid patch features: {exc}") from None


def store_features(features: PatchFeatures, path) -> int:
    return save(features_to_container(features), path)


def merged_to_container(merged: Iterable[MergedDelta]) -> TensorContainer:
    merged = sorted(merged, key=lambda m: m.tensor_name)
    tensors = {f"delta.{m.tensor_name}": m.delta for m in merged}
    contributors = sorted({cid for m in merged for cid in m.contributors})
    meta = {
        "contributors": json.dumps(contributors, ensure_ascii=False),
        "format_version": FORMAT_VERSION,
    }
    for m in merged:
        meta[f"contributors.{m.tensor_name}"] = json.dumps(list(m.contributors), ensure_ascii=False)
    if merged:
        meta["drop_rate"] = repr(merged[0].drop_rate)
        meta["seed"] = str(merged[0].seed)
    return TensorContainer(tensors, meta)


def container_to_merged(container: TensorContainer) -> list[MergedDelta]:
    meta = container.meta
    out = []
    for name, arr in sorted(container.tensors.items()):
        if not name.startswith("delta.") or len(name) == 6:
            raise SchemaError(f"unexpected entry {name!r} in merged-delta file")
        tensor_name = name[6:]
        key = f"contributors.{tensor_name}"
        if key not in meta or "seed" not in meta or "drop_rate" not in meta:
            raise SchemaError(f"merged-delta file lacks provenance for {tensor_name!r}")
        try:
            out.append(
                MergedDelta(
                    tensor_name=tensor_name,
                    delta=arr,
                    contributors=tuple(_json_list(meta, key)),
                    drop_rate=float(meta["drop_rate"]),
                    seed=int(meta["seed"]),
                )
            )
        except (GateMergeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise SchemaError(f"invalid merged delta {tensor_name!r}: {exc}") from None
    return out


def store_merged(merged: Iterable[MergedDelta], path) -> int:
    return save(merged_to_container(merged), path)


def load_merged(path) -> list[MergedDelta]:
    return container_to_merged(load(path))
