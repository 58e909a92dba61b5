import numpy as np
import pytest

from gatemerge import ConceptModule, LoraAdapter
from gatemerge.oracle import SyntheticSpec, make_synthetic_concepts
from gatemerge import persistence


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return (v / np.linalg.norm(v)).astype(np.float32)


def make_concept(cid, rng, d=6, d_out=8, d_in=6, rank=2, scale=4.0, tensors=("q_proj",), proto_dim=5):
    adapters = {
        name: LoraAdapter(
            name,
            rng.standard_normal((d_out, rank)).astype(np.float32),
            rng.standard_normal((rank, d_in)).astype(np.float32),
            rank,
            scale,
        )
        for name in tensors
    }
    return ConceptModule(
        concept_id=cid,
        token_embedding=rng.standard_normal(d).astype(np.float32),
        head_row=rng.standard_normal(d).astype(np.float32),
        adapters=adapters,
        prototype=unit(rng.standard_normal(proto_dim)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def synthetic():
    spec = SyntheticSpec(num_concepts=3, d_in=16, d_out=24, rank=4, scale=8.0, support_overlap=0.0, seed=11)
    return spec, make_synthetic_concepts(spec)


@pytest.fixture
def concept_dir(tmp_path, synthetic):
    """Synthetic bundles, base weights, probes and a scene written to disk."""
    spec, syn = synthetic
    cdir = tmp_path / "concepts"
    cdir.mkdir()
    for c in syn.concepts:
        persistence.store_concept(c, cdir / f"{c.concept_id}.gmt")
    persistence.store_weights(syn.base, tmp_path / "base.gmt")
    probes = persistence.TensorContainer({f"probe.{k}": v for k, v in syn.probes.items()}, {})
    persistence.save(probes, tmp_path / "probes.gmt")
    return tmp_path
