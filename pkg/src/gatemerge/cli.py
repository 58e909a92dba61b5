"""Command-line entry point: ``gatemerge {gate,merge,apply,run,inspect,bench-interference}``.

Reports go to stdout as JSON, diagnostics to stderr. Exit codes: 0 success,
2 usage or validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import persistence
from .compose import apply_deltas, extend_vocab
from .errors import GateMergeError, InvalidInputError
from .gating import DEFAULT_TAU, DEFAULT_TOP_K, GateConfig, active_set, gate
from .merging import DEFAULT_DROP_RATE, SparsifyConfig, merge_pipeline
from .oracle import interference_report

log = logging.getLogger("gatemerge")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _ids(text: str | None) -> list[str]:
    if not text:
        return []
    return sorted({part.strip() for part in text.split(",") if part.strip()})


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def _gate_report(decisions) -> dict:
    return {
        "decisions": [d.to_dict() for d in sorted(decisions, key=lambda d: d.concept_id)],
        "active": active_set(decisions),
    }


def _sparsify_config(args) -> SparsifyConfig:
    return SparsifyConfig(drop_rate=args.drop_rate, seed=args.seed)


def cmd_gate(args) -> int:
    concepts = persistence.load_concept_dir(args.concepts)
    features = persistence.load_features(args.features) if args.features else None
    decisions = gate(args.query, features, list(concepts.values()), GateConfig(args.tau, args.top_k))
    report = _gate_report(decisions)
    log.info("active set: %s", report["active"])
    _emit(report)
    return EXIT_OK


def cmd_merge(args) -> int:
    ids = _ids(args.active)
    if not ids:
        raise InvalidInputError("--active must name at least one concept")
    config = _sparsify_config(args)
    concepts = persistence.load_concept_dir(args.concepts, ids)
    merged = merge_pipeline(list(concepts.values()), config, args.bypass_single)
    n = persistence.store_merged(merged, args.out)
    log.info("wrote %d merged tensors (%d bytes) to %s", len(merged), n, args.out)
    _emit({"out": str(args.out), "tensors": [m.tensor_name for m in merged], "contributors": ids})
    return EXIT_OK


def cmd_apply(args) -> int:
    base = persistence.load_weights(args.base)
    merged = persistence.load_merged(args.merged) if args.merged else []
    if args.active is not None:
        ids = _ids(args.active)
    else:
        ids = sorted({cid for m in merged for cid in m.contributors})
    concepts = persistence.load_concept_dir(args.concepts, ids) if ids else {}
    composed = extend_vocab(apply_deltas(base, merged), list(concepts.values()))
    persistence.store_weights(composed, args.out)
    _emit({"out": str(args.out), "vocab_size": len(composed.vocab), "contributors": list(composed.contributors)})
    return EXIT_OK


def cmd_run(args) -> int:
    concepts = persistence.load_concept_dir(args.concepts)
    features = persistence.load_features(args.features) if args.features else None
    decisions = gate(args.query, features, list(concepts.values()), GateConfig(args.tau, args.top_k))
    ids = active_set(decisions)
    active = [concepts[cid] for cid in ids]
    merged = merge_pipeline(active, _sparsify_config(args), args.bypass_single) if active else []
    if args.merged_out:
        persistence.store_merged(merged, args.merged_out)
    base = persistence.load_weights(args.base)
    composed = extend_vocab(apply_deltas(base, merged), active)
    persistence.store_weights(composed, args.out)
    report = _gate_report(decisions)
    report["out"] = str(args.out)
    _emit(report)
    return EXIT_OK


def cmd_inspect(args) -> int:
    container = persistence.load(args.file)
    lines = [f"{args.file}: {len(container.tensors)} entries"]
    for name, arr in sorted(container.tensors.items()):
        norm = float(np.linalg.norm(arr.astype(np.float64)))
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"  {name:<40} f32 {shape:<12} norm={norm:.6g}")
    lines.append("meta:")
    for key, value in sorted(container.meta.items()):
        lines.append(f"  {key} = {value}")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_bench_interference(args) -> int:
    ids = _ids(args.active) or None
    concepts = persistence.load_concept_dir(args.concepts, ids)
    if not concepts:
        raise InvalidInputError("no concepts to benchmark")
    base = persistence.load_weights(args.base)
    probe_file = persistence.load(args.probes)
    probes = {}
    for name, arr in probe_file.tensors.items():
        if name.startswith("probe."):
            probes[name[len("probe."):]] = arr
    report = interference_report(list(concepts.values()), base, probes, _sparsify_config(args), args.bypass_single)
    _emit(report)
    return EXIT_OK


def _add_gate_flags(p):
    p.add_argument("--query", required=True, help="query text; concept tokens are written <id>")
    p.add_argument("--features", help="GMTENS1 file with a 'patches' entry (P x dim)")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="visual similarity threshold")
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K, help="patches averaged per concept")


def _add_merge_flags(p):
    p.add_argument("--drop-rate", type=float, default=DEFAULT_DROP_RATE, help="DARE drop probability p in [0, 1)")
    p.add_argument("--seed", type=int, default=0, help="unsigned 64-bit mask seed")
    p.add_argument(
        "--bypass-single",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="use a lone active concept's delta verbatim",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gatemerge", description="Gate and merge per-concept LoRA adapters.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gate", help="report which concepts a query/image activates")
    p.add_argument("--concepts", required=True, help="directory of *.gmt concept bundles")
    _add_gate_flags(p)
    p.set_defaults(func=cmd_gate)

    p = sub.add_parser("merge", help="fuse the adapters of the given concepts")
    p.add_argument("--concepts", required=True)
    p.add_argument("--active", required=True, help="comma-separated concept ids")
    p.add_argument("--out", required=True)
    _add_merge_flags(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("apply", help="apply merged deltas and append concept tokens to base weights")
    p.add_argument("--base", required=True)
    p.add_argument("--merged", help="merged-delta file; omit to only extend the vocab")
    p.add_argument("--concepts", required=True)
    p.add_argument("--active", help="comma-separated ids (default: contributors of --merged)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("run", help="gate, merge and apply in one step")
    p.add_argument("--concepts", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--merged-out", help="also write the merged-delta file")
    _add_gate_flags(p)
    _add_merge_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("inspect", help="summarize a GMTENS1 file")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench-interference", help="merged vs naive-sum fidelity on probe inputs")
    p.add_argument("--concepts", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--probes", required=True, help="GMTENS1 file with 'probe.<id>' vectors")
    p.add_argument("--active", help="comma-separated ids (default: every bundle)")
    _add_merge_flags(p)
    p.set_defaults(func=cmd_bench_interference)
    return parser


def _configure_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("GM_LOG_LEVEL", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="gatemerge: %(levelname)s: %(message)s", stream=sys.stderr)
    log.setLevel(level)


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"gatemerge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except GateMergeError as exc:
        print(f"gatemerge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"gatemerge: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
