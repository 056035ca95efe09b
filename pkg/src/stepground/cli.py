"""Single command-line entry point for indexing, scoring, serving, and eval.

Exit codes are a stable contract: 0 success, 1 usage error, 2 data error,
3 partial failure. Service-related flags fall back to environment variables
with the STEPGROUND_ prefix (for example STEPGROUND_BIND).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .align import AlignConfig, StepSequence, grounding_score
from .corpus import (
    CorpusFormatError,
    IndexIntegrityError,
    ingest_corpus,
    read_index,
    write_index,
)
from .embedding import HashFeatureEmbedder, embedder_from_tag
from .evalkit import macro_accuracy, read_transcript, write_report
from .reward import RewardConfig
from .service import (
    ENV_PREFIX,
    ScoringServer,
    ServiceConfig,
    encode_response,
    process_line,
    request_health,
)
from .simulate import SimConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PARTIAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        _fail(EXIT_USAGE, "usage", f"{self.prog}: {message}")


_JSON_DIAG = False


def _fail(code: int, kind: str, message: str) -> None:
    if _JSON_DIAG:
        sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    else:
        sys.stderr.write(f"error: {message}\n")
    raise SystemExit(code)


def _env_default(name: str, fallback: str | None = None) -> str | None:
    return os.environ.get(ENV_PREFIX + name, fallback)


def _parse_bind(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        _fail(EXIT_USAGE, "usage", f"bad bind address {value!r}, expected HOST:PORT")
    return host, int(port)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--gap-penalty", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)


def _configs_from_args(args: argparse.Namespace) -> tuple[AlignConfig, RewardConfig]:
    acfg = AlignConfig()
    rcfg = RewardConfig()
    try:
        if args.top_k is not None:
            acfg = dataclasses.replace(acfg, top_k=args.top_k)
        if args.gap_penalty is not None:
            acfg = dataclasses.replace(acfg, gap_penalty=args.gap_penalty)
        if args.tau is not None:
            rcfg = dataclasses.replace(rcfg, tau=args.tau)
        if args.alpha is not None:
            rcfg = dataclasses.replace(rcfg, alpha=args.alpha)
    except ValueError as exc:
        _fail(EXIT_USAGE, "usage", str(exc))
    return acfg, rcfg


def _load_index(path: str):
    try:
        return read_index(path)
    except (IndexIntegrityError, CorpusFormatError, OSError) as exc:
        _fail(EXIT_DATA, "data", f"cannot read index {path}: {exc}")


def _cmd_index_build(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        _fail(
            EXIT_DATA,
            "data",
            f"output directory {out} is not empty; pass --force to overwrite",
        )
    embedder = HashFeatureEmbedder(dim=args.dim, seed=args.hash_seed)
    try:
        index = ingest_corpus(args.narrations, args.embeddings, embedder)
        write_index(index, out)
    except (CorpusFormatError, IndexIntegrityError, OSError) as exc:
        _fail(EXIT_DATA, "data", str(exc))
    stats = index.stats
    print(
        f"indexed {index.manifest.record_count} records, "
        f"{index.manifest.segment_count} segments, dim {index.manifest.dim}"
        + (
            f" (dropped {stats.records_dropped} degenerate records)"
            if stats and stats.records_dropped
            else ""
        )
    )
    return EXIT_OK


def _cmd_score(args: argparse.Namespace) -> int:
    index = _load_index(args.index)
    acfg, rcfg = _configs_from_args(args)
    defaults = ServiceConfig(
        align=acfg, reward=rcfg, step_cap=args.step_cap, workers=args.workers
    )
    embedder = embedder_from_tag(index.manifest.embedder)
    failures = 0
    try:
        fin = open(args.requests, "r", encoding="utf-8")
    except OSError as exc:
        _fail(EXIT_DATA, "data", str(exc))
    fout = open(args.out, "wb") if args.out else sys.stdout.buffer
    try:
        with fin:
            for line in fin:
                if not line.strip():
                    continue
                response = process_line(line, index, embedder, defaults)
                failures += int("error" in response)
                fout.write(encode_response(response))
    finally:
        if args.out:
            fout.close()
    return EXIT_PARTIAL if failures else EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    index = _load_index(args.index)
    acfg, rcfg = _configs_from_args(args)
    defaults = ServiceConfig(
        align=acfg, reward=rcfg, step_cap=args.step_cap, workers=args.workers
    )
    bind = _parse_bind(args.bind)
    with ScoringServer(bind, index, defaults) as server:
        host, port = server.address
        print(f"listening on {host}:{port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def _cmd_health(args: argparse.Namespace) -> int:
    host, port = _parse_bind(args.bind)
    try:
        info = request_health(host, port, timeout=args.timeout)
    except (OSError, ConnectionError) as exc:
        _fail(EXIT_DATA, "data", f"health probe failed: {exc}")
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_align_score(args: argparse.Namespace) -> int:
    index = _load_index(args.index)
    acfg, _ = _configs_from_args(args)
    embedder = embedder_from_tag(index.manifest.embedder)
    if embedder is None:
        _fail(
            EXIT_DATA,
            "data",
            "index was built with an external embedder; ad-hoc text queries "
            "are unavailable",
        )
    steps = list(args.step)
    if not steps:
        _fail(EXIT_USAGE, "usage", "provide at least one --step")
    seq = StepSequence.from_texts(steps, embedder)
    score, best, pool = grounding_score(seq, index, acfg, workers=args.workers)
    out = {
        "score": score,
        "best_record_idx": best.record_idx,
        "best_video_id": index.records[best.record_idx].video_id,
        "pool": [o.to_dict() for o in pool],
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_simulate(args: argparse.Namespace) -> int:
    scfg = SimConfig(
        group_size=args.group_size,
        kl_beta=args.kl_beta,
        clip_ratio=args.clip_ratio,
        learning_rate=args.learning_rate,
        iterations=args.iterations,
        seed=args.seed,
        horizon=args.horizon,
        n_narrations=args.narrations,
        prompt_repeats=args.prompt_repeats,
    )
    result = train(scfg)
    curve = result.curve
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8") as fh:
            fh.write("iteration,mean_reward\n")
            for i, r in enumerate(curve):
                fh.write(f"{i},{r!r}\n")
    n = max(len(curve) // 10, 1)
    summary = {
        "iterations": len(curve),
        "seed": args.seed,
        "first_decile_mean": float(curve[:n].mean()),
        "last_decile_mean": float(curve[-n:].mean()),
        "improvement": float(curve[-n:].mean() - curve[:n].mean()),
        "final_gate_rate": result.stats[-1].gate_rate,
        "final_mean_kl": result.stats[-1].mean_kl,
        "config": dataclasses.asdict(scfg),
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out_json:
        Path(args.out_json).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    try:
        examples = read_transcript(args.transcript)
        split_map = json.loads(Path(args.splits).read_text(encoding="utf-8"))
        if not isinstance(split_map, dict):
            raise ValueError("split map must be a JSON object of dataset -> split")
        dataset_scores, split_scores = macro_accuracy(examples, split_map)
    except (ValueError, OSError) as exc:
        _fail(EXIT_DATA, "data", str(exc))
    report = write_report(
        dataset_scores, split_scores, json_path=args.out_json, csv_path=args.out_csv
    )
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="stepground", description=__doc__)
    parser.add_argument(
        "--json", action="store_true", help="machine-readable stderr diagnostics"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index-build", help="ingest narrations into an index directory")
    p.add_argument("narrations", help="line-delimited JSON narrations file")
    p.add_argument("--embeddings", default="compute",
                   help='precomputed blob path or "compute" (default)')
    p.add_argument("--out", required=True, help="output index directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty dir")
    p.add_argument("--dim", type=int, default=64, help="embedder dim for compute mode")
    p.add_argument("--hash-seed", type=int, default=0, help="embedder seed")
    p.set_defaults(func=_cmd_index_build)

    p = sub.add_parser("score", help="score a file of requests offline")
    p.add_argument("requests", help="newline-delimited JSON request file")
    p.add_argument("--index", required=True, help="index directory")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--step-cap", type=int, default=512)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("serve", help="run the scoring service")
    p.add_argument("--index", default=_env_default("INDEX"), required=False)
    p.add_argument("--bind", default=_env_default("BIND", "127.0.0.1:7431"))
    p.add_argument("--workers", type=int,
                   default=int(_env_default("WORKERS", "1") or 1))
    p.add_argument("--step-cap", type=int,
                   default=int(_env_default("STEP_CAP", "512") or 512))
    _add_config_flags(p)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("health", help="probe a running service")
    p.add_argument("--bind", default=_env_default("BIND", "127.0.0.1:7431"))
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(func=_cmd_health)

    p = sub.add_parser("align", help="alignment utilities")
    align_sub = p.add_subparsers(dest="align_command", required=True)
    q = align_sub.add_parser("score", help="score an ad-hoc step sequence")
    q.add_argument("--index", required=True)
    q.add_argument("--step", action="append", default=[],
                   help="step text (repeat per step)")
    q.add_argument("--workers", type=int, default=1)
    _add_config_flags(q)
    q.set_defaults(func=_cmd_align_score)

    p = sub.add_parser("simulate", help="run the synthetic GRPO training loop")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=SimConfig.iterations)
    p.add_argument("--narrations", type=int, default=SimConfig.n_narrations)
    p.add_argument("--group-size", type=int, default=SimConfig.group_size)
    p.add_argument("--kl-beta", type=float, default=SimConfig.kl_beta)
    p.add_argument("--clip-ratio", type=float, default=SimConfig.clip_ratio)
    p.add_argument("--learning-rate", type=float, default=SimConfig.learning_rate)
    p.add_argument("--horizon", type=int, default=SimConfig.horizon)
    p.add_argument("--prompt-repeats", type=int, default=SimConfig.prompt_repeats)
    p.add_argument("--out-csv", default=None, help="write the curve as CSV")
    p.add_argument("--out-json", default=None, help="write the summary as JSON")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("eval", help="aggregate a judged transcript")
    p.add_argument("transcript", help="line-delimited JSON judged examples")
    p.add_argument("--splits", required=True,
                   help="JSON file mapping dataset -> split name")
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    global _JSON_DIAG
    parser = build_parser()
    args = parser.parse_args(argv)
    _JSON_DIAG = args.json
    if args.command == "serve" and not args.index:
        _fail(EXIT_USAGE, "usage", "serve requires --index or STEPGROUND_INDEX")
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # pragma: no cover - last resort
        _fail(EXIT_DATA, "data", str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
