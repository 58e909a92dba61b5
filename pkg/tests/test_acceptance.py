"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]``/``[FAIL]`` line (visible even without
``-s``) before asserting. Run alone with::

    pytest tests/test_acceptance.py -v
"""

import json
import time

import numpy as np
import pytest

from gatemerge import (
    GateConfig,
    LoraAdapter,
    ConceptModule,
    PatchFeatures,
    SparsifyConfig,
    dare_sparsify,
    gate,
    materialize_delta,
    merge_pipeline,
    sign_elect,
    ties_merge,
    topk_pool,
)
from gatemerge import persistence as P
from gatemerge.cli import main
from gatemerge.compose import BaseModelWeights, apply_deltas
from gatemerge.oracle import (
    SyntheticSpec,
    dare_monte_carlo,
    interference_report,
    make_scene,
    make_synthetic_concepts,
    ref_ties_merge,
)

from conftest import make_concept, unit


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, f"{criterion}: {detail}"

    return emit


def test_ac01_dare_unbiasedness(report):
    ones = np.ones((16, 16), dtype=np.float32)
    t0 = time.perf_counter()
    mean, kept = dare_monte_carlo(ones, 0.8, 10_000)
    elapsed = time.perf_counter() - t0
    rel = float(np.linalg.norm(mean - ones) / np.linalg.norm(ones))
    ok = rel <= 0.05 and 0.18 <= kept <= 0.22 and elapsed < 10.0
    report("AC1 DARE unbiasedness", ok, f"rel_fro_err={rel:.4f} (<=0.05) kept={kept:.4f} in [0.18,0.22] time={elapsed:.2f}s (<10s)")


def _ties_instances(rng, n=100):
    out = []
    for i in range(n):
        k = int(rng.integers(2, 6))
        mats = [rng.standard_normal((8, 8)).astype(np.float32) for _ in range(k)]
        for m in mats:
            m[rng.random((8, 8)) < 0.2] = 0.0
        if i % 2 == 0:
            # exact cancellation at a few coordinates
            for _ in range(3):
                u, v = rng.integers(0, 8, size=2)
                for m in mats:
                    m[u, v] = 0.0
                mats[0][u, v], mats[1][u, v] = 0.75, -0.75
        if i % 10 == 0:
            mats[-1][:] = 0.0
        out.append(mats)
    return out


def test_ac02_ties_oracle_equivalence(report):
    instances = _ties_instances(np.random.default_rng(2))
    cancel = sum(int((sign_elect(m) == 0).sum()) for m in instances)
    t0 = time.perf_counter()
    produced = [ties_merge(m) for m in instances]
    elapsed = time.perf_counter() - t0
    mismatches = sum(
        not np.array_equal(p.view(np.uint32), ref_ties_merge(m).view(np.uint32)) for p, m in zip(produced, instances)
    )
    ok = mismatches == 0 and elapsed < 1.0 and cancel > 0
    report("AC2 TIES oracle equivalence", ok, f"{mismatches}/100 mismatches, {cancel} zero-sign coords, time={elapsed:.3f}s (<1s)")


def test_ac03_worked_merge_example(report):
    out = ties_merge([[[1, -2], [0, 3]], [[2, 1], [0, -1]]]).tolist()
    report("AC3 worked merge example", out == [[1.5, -2.0], [0.0, 3.0]], f"got {out}")


def test_ac04_sign_safety(report):
    rng = np.random.default_rng(4)
    violations = 0
    for i in range(1000):
        k = int(rng.integers(2, 6))
        raw = [rng.standard_normal((6, 6)).astype(np.float32) for _ in range(k)]
        cfg = SparsifyConfig(float(rng.choice([0.0, 0.3, 0.5, 0.8])), i)
        sparse = [dare_sparsify(d, cfg, f"c{j}", "t") for j, d in enumerate(raw)]
        merged = ties_merge(sparse).astype(np.float64)
        gamma = sign_elect(sparse)
        bound = np.max(np.abs(np.stack(sparse)), axis=0)
        violations += int(np.any(np.sign(merged) * gamma < 0))
        violations += int(np.any(np.abs(merged) > bound))
    report("AC4 sign safety", violations == 0, f"{violations} violating merges out of 1000")


def test_ac05_single_concept_fidelity(report):
    rng = np.random.default_rng(5)
    a = rng.standard_normal((12, 4)).astype(np.float32)
    b = rng.standard_normal((4, 10)).astype(np.float32)
    w = rng.standard_normal((12, 10)).astype(np.float32)
    concept = ConceptModule("solo", np.ones(3), np.ones(3), {"w": LoraAdapter("w", a, b, 4, 8.0)}, unit([1, 0]))
    base = BaseModelWeights({"w": w}, np.zeros((1, 3)), np.zeros((1, 3)), ["x"])
    merged = merge_pipeline([concept], SparsifyConfig(0.8, 1), bypass_single=True)
    composed = apply_deltas(base, merged).tensors["w"]
    delta = (2.0 * (a.astype(np.float64) @ b.astype(np.float64))).astype(np.float32)
    expected = (w.astype(np.float64) + delta.astype(np.float64)).astype(np.float32)
    ok = np.array_equal(composed, expected) and concept.adapters["w"].scale / concept.adapters["w"].rank == 2.0
    report("AC5 single-concept fidelity", ok, f"max|diff|={np.max(np.abs(composed - expected)):.3g}, multiplier=2")


def test_ac06_disjoint_support_sum_law(report):
    syn = make_synthetic_concepts(SyntheticSpec(num_concepts=4, d_out=32, support_overlap=0.0, seed=6))
    bad = 0
    for m in merge_pipeline(syn.concepts, SparsifyConfig(0.0, 0)):
        contributors = [materialize_delta(c.adapters[m.tensor_name]) for c in syn.concepts]
        total = np.sum(np.stack(contributors).astype(np.float64), axis=0).astype(np.float32)
        bad += int(not np.array_equal(m.delta, total))
    report("AC6 disjoint-support sum law", bad == 0, f"{bad} tensors differ from the elementwise sum")


def test_ac07_gating_truth_table_and_topk(report):
    proto = unit([1, 0, 0])
    c = ConceptModule("bo", np.ones(2), np.ones(2), {}, proto)
    rows = []
    for mention in (False, True):
        for above in (False, True):
            s = 0.5 if above else 0.1
            feats = PatchFeatures([[s, np.sqrt(1 - s * s), 0.0]])
            (d,) = gate("see <bo>" if mention else "see", feats, [c], GateConfig(0.3, 8))
            rows.append(d.active == (mention or above) and d.visual_score == pytest.approx(s))
    rng = np.random.default_rng(7)
    topk_bad = 0
    for _ in range(1000):
        scores = rng.uniform(-1, 1, int(rng.integers(1, 64)))
        for k in (1, 8, scores.size):
            top = sorted(scores.tolist(), reverse=True)[: min(k, scores.size)]
            topk_bad += int(abs(topk_pool(scores, k) - sum(top) / len(top)) > 1e-12)
    ok = all(rows) and topk_bad == 0
    report("AC7 gating truth table + top-K", ok, f"truth table {sum(rows)}/4, top-K mismatches {topk_bad}/3000")


def test_ac08_determinism_and_persistence(report, concept_dir, capsys):
    c = str(concept_dir / "concepts")
    args = ["merge", "--concepts", c, "--active", "concept00,concept01,concept02", "--seed", "2024"]
    codes = [main(args + ["--out", str(concept_dir / f"m{i}.gmt")]) for i in range(2)]
    capsys.readouterr()
    same = (concept_dir / "m0.gmt").read_bytes() == (concept_dir / "m1.gmt").read_bytes()

    rng = np.random.default_rng(8)
    round_trip_bad = 0
    for i in range(100):
        dims = dict(d=int(rng.integers(2, 9)), d_out=int(rng.integers(4, 12)), d_in=int(rng.integers(4, 12)))
        tensors = tuple(f"layers.{j}.proj" for j in range(int(rng.integers(0, 4))))
        module = make_concept(f"c{i}", rng, rank=int(rng.integers(1, 4)), scale=float(rng.uniform(0.5, 16)), tensors=tensors, **dims)
        box = P.concept_to_container(module)
        data = P.encode_container(box)
        back = P.decode_container(data)
        round_trip_bad += int(back != box or P.container_to_concept(back) != module or P.encode_container(back) != data)
    ok = codes == [0, 0] and same and round_trip_bad == 0
    report("AC8 determinism & persistence", ok, f"cli exit={codes} byte-identical={same}, round-trip failures {round_trip_bad}/100")


def test_ac09_interference_sanity(report):
    syn = make_synthetic_concepts(SyntheticSpec(num_concepts=3, support_overlap=0.0, seed=9))
    c = syn.concepts[0]
    neg = ConceptModule(
        "neg", c.token_embedding, c.head_row,
        {k: LoraAdapter(k, -a.a_factor, a.b_factor, a.rank, a.scale) for k, a in c.adapters.items()},
        c.prototype,
    )
    merged = merge_pipeline([c, neg], SparsifyConfig(0.0, 0))
    cancels = all(not m.delta.any() for m in merged)
    gamma_zero = all(
        not sign_elect([materialize_delta(x.adapters[m.tensor_name]) for x in (c, neg)]).any() for m in merged
    )
    disjoint = interference_report(syn.concepts, syn.base, syn.probes, SparsifyConfig(0.0, 0))
    equal = all(v["fidelity_merge"] == v["fidelity_naive"] for v in disjoint["concepts"].values())

    overlap = make_synthetic_concepts(SyntheticSpec(num_concepts=3, support_overlap=0.5, seed=9))
    sweep = []
    for p in (0.3, 0.5, 0.7, 0.8, 0.9):
        agg = interference_report(overlap.concepts, overlap.base, overlap.probes, SparsifyConfig(p, 0))["aggregate"]
        sweep.append(f"p={p}: merge={agg['mean_fidelity_merge']:.3f} naive={agg['mean_fidelity_naive']:.3f}")
    ok = cancels and gamma_zero and equal
    report(
        "AC9 interference sanity",
        ok,
        f"opposing->zero={cancels} gamma=0={gamma_zero} disjoint merge==naive={equal}; overlap sweep (informational): "
        + "; ".join(sweep),
    )


def test_ac10_end_to_end(report, concept_dir, synthetic, capsys):
    spec, syn = synthetic
    ids = spec.concept_ids()
    P.store_features(make_scene(spec, [ids[0], ids[1]]), concept_dir / "scene.gmt")
    c = str(concept_dir / "concepts")
    t0 = time.perf_counter()
    gate_code = main(["gate", "--query", f"what is <{ids[2]}> doing?", "--features", str(concept_dir / "scene.gmt"), "--concepts", c])
    active = json.loads(capsys.readouterr().out)["active"]
    merge_code = main(["merge", "--concepts", c, "--active", ",".join(active), "--seed", "10", "--out", str(concept_dir / "m.gmt")])
    apply_code = main([
        "apply", "--base", str(concept_dir / "base.gmt"), "--merged", str(concept_dir / "m.gmt"),
        "--concepts", c, "--active", ",".join(active), "--out", str(concept_dir / "composed.gmt"),
    ])
    elapsed = time.perf_counter() - t0
    capsys.readouterr()

    composed = P.load_weights(concept_dir / "composed.gmt")
    merged = P.load_merged(concept_dir / "m.gmt")
    new_tokens = list(composed.vocab[len(syn.base.vocab):])
    max_err = max(
        float(np.max(np.abs(composed.tensors[m.tensor_name].astype(np.float64)
                            - (syn.base.tensors[m.tensor_name].astype(np.float64) + m.delta))))
        for m in merged
    )
    ok = (
        [gate_code, merge_code, apply_code] == [0, 0, 0]
        and active == sorted(ids)
        and new_tokens == sorted(f"<{i}>" for i in ids)
        and composed.vocab[: len(syn.base.vocab)] == syn.base.vocab
        and max_err <= 1e-6
        and elapsed < 5.0
    )
    report("AC10 end-to-end pipeline", ok, f"active={active} new_tokens={new_tokens} max_err={max_err:.2g} (<=1e-6) time={elapsed:.2f}s (<5s)")
