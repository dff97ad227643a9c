"""Command-line entry point: ``dsprover prove | mask | report``.

Settings resolve as command-line flag, then configuration file, then
built-in default. Every file a command writes lands under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from dsprover import __version__
from dsprover.core import Diagnostic
from dsprover.errors import DSProverError, SketchFailed

log = logging.getLogger("dsprover")

STORE_NAME = "attempts.jsonl"
MANIFEST_NAME = "run_manifest.json"
RECORDED_TRANSCRIPTS = "transcripts.jsonl"


class UsageError(Exception):
    """Bad invocation; reported with exit status 2."""


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsprover", description="Prove formal statements by way of drafted proof sketches.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prove", help="run a plan over a benchmark and store attempt records")
    pr.add_argument("--config", required=True, help="run configuration (JSON or YAML)")
    pr.add_argument("--benchmark", required=True, help="benchmark file, one JSON record per line")
    pr.add_argument("--out", required=True, help="output directory")
    pr.add_argument("--mode", choices=("live", "replay"), help="call endpoints or replay recorded transcripts")
    pr.add_argument("--plan", help="plan name, or a single config name")
    pr.add_argument("--resume", action="store_true", help="continue a previous run in --out")
    pr.add_argument("--k", type=int, help="attempt budget for every stage of the plan")
    pr.add_argument("--deadline-secs", type=float, help="time limit per attempt")
    pr.add_argument("--transcripts", help="recorded model transcripts (required for replay)")
    pr.add_argument("--no-record", action="store_true", help="in live mode, do not save transcripts")

    mk = sub.add_parser("mask", help="repair a sketch by error line masking")
    mk.add_argument("sketch", help="sketch source file")
    src = mk.add_mutually_exclusive_group(required=True)
    src.add_argument("--diagnostics", help="JSON diagnostics: a list, or a checker response with 'messages'")
    src.add_argument("--verify", action="store_true", help="run the full repair loop against the configured checker")
    mk.add_argument("--config", help="configuration providing the checker (with --verify)")
    mk.add_argument("--header", default="", help="header text for the checker session (with --verify)")
    mk.add_argument("--cap", type=int, help="maximum repair iterations (with --verify)")

    rp = sub.add_parser("report", help="compute metrics from an attempt store")
    rp.add_argument("--store", required=True, help="attempt store written by 'prove'")
    rp.add_argument("--benchmark", required=True, help="benchmark file")
    rp.add_argument("--out", required=True, help="output directory")
    rp.add_argument("--config", help="configuration providing benchmark field names")
    rp.add_argument("--configs", nargs="+", help="stage order for ensemble rows (config names)")
    return p


# ---------------------------------------------------------------- prove


def cmd_prove(args: argparse.Namespace) -> int:
    from dsprover.config import load_config
    from dsprover.evalkit import load_benchmark
    from dsprover.gateway import HttpChatBackend, ModelGateway, RecordingBackend, ReplayBackend, ReplayStore
    from dsprover.orchestrator import AttemptStore, Orchestrator
    from dsprover.verifier import load_verifier

    cfg = load_config(args.config)
    if not Path(args.benchmark).is_file():
        raise UsageError(f"benchmark file {args.benchmark} not found")
    out = Path(args.out)
    mode = args.mode or cfg.mode or "live"
    transcripts = Path(args.transcripts) if args.transcripts else cfg.transcripts
    if mode == "replay" and transcripts is None:
        raise UsageError("replay mode needs a transcript store (--transcripts or 'transcripts' in config)")
    if mode == "replay" and not transcripts.is_file():
        raise UsageError(f"transcript store {transcripts} not found")
    deadline = args.deadline_secs if args.deadline_secs is not None else cfg.deadline_secs
    if deadline <= 0:
        raise UsageError("--deadline-secs must be > 0")
    plan = cfg.plan(args.plan, args.k)
    bench = load_benchmark(args.benchmark, field_map=cfg.benchmark_fields, split=cfg.benchmark_split)

    out.mkdir(parents=True, exist_ok=True)
    store_path = out / STORE_NAME
    if store_path.exists() and store_path.stat().st_size and not args.resume:
        raise UsageError(f"{store_path} already has records; pass --resume to continue that run")
    store = AttemptStore(store_path)

    if mode == "replay":
        backend: Any = ReplayBackend(ReplayStore(transcripts))
    else:
        backend = HttpChatBackend()
        if not args.no_record:
            backend = RecordingBackend(backend, ReplayStore(out / RECORDED_TRANSCRIPTS))
    gateway = ModelGateway(dict(cfg.endpoints), backend)
    verifier = load_verifier(cfg.verifier, cfg.base_dir)
    manifest = {
        "config": str(Path(args.config).resolve()),
        "benchmark": str(Path(args.benchmark).resolve()),
        "out": str(out.resolve()),
        "mode": mode,
        "plan": plan.to_dict(),
        "resume": bool(args.resume),
        "deadline_secs": deadline,
        "transcripts": str(transcripts.resolve()) if transcripts else None,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n")

    orch = Orchestrator(
        gateway,
        verifier,
        budget=cfg.budget,
        symbolic_tactics=cfg.symbolic_tactics,
        repair_cap=cfg.repair_cap,
        mask_rest_of_block=cfg.mask_rest_of_block,
        require_intact_subgoals=cfg.require_intact_subgoals,
        prover_prompt=cfg.prover_prompt,
        store=store,
        seeded=cfg.seeded,
        fanout=cfg.fanout,
        capacity=cfg.capacity,
        parallelism=cfg.statements_parallel,
    )
    before = len(store)

    def progress(sid: str, by: Optional[int], n: int) -> None:
        status = f"proved by stage {by}" if by else "not proved"
        print(f"{sid}: {status} ({n} new attempts)", flush=True)

    try:
        result = orch.run_benchmark(bench.problems, plan, deadline, resume=args.resume, progress=progress)
    finally:
        verifier.close()
    solved = sum(1 for v in result.values() if v)
    print(f"done: {solved}/{len(bench)} proved in this run, {len(store) - before} attempts written to {store_path}")
    return 0


# ---------------------------------------------------------------- mask


def _load_diagnostics(path: str) -> list[Diagnostic]:
    from dsprover.verifier import decode_command_response

    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        _, diags, _ = decode_command_response(data)
        return diags
    if isinstance(data, list):
        return [Diagnostic.from_dict(d) for d in data]
    raise ValueError("diagnostics must be a JSON list or a checker response object")


def cmd_mask(args: argparse.Namespace) -> int:
    from dsprover.sketch import mask_errors, parse_sketch, render, repair_loop, rewrite_placeholders

    source = Path(args.sketch).read_text(encoding="utf-8")
    sketch = parse_sketch(source, Path(args.sketch).stem)
    if args.diagnostics:
        diags = [d for d in _load_diagnostics(args.diagnostics) if d.is_error]
        repaired = mask_errors(sketch, diags) if diags else sketch
    else:
        from dsprover.config import load_config
        from dsprover.verifier import MockVerifier, load_verifier

        if args.config:
            cfg = load_config(args.config)
            verifier = load_verifier(cfg.verifier, cfg.base_dir)
            cap = args.cap if args.cap is not None else cfg.repair_cap
        else:
            verifier = MockVerifier()
            cap = args.cap if args.cap is not None else 10
        sketch = rewrite_placeholders(sketch)
        session = verifier.open_session(args.header)
        try:
            repaired = repair_loop(sketch, lambda t: verifier.verify(session, t), cap=cap).sketch
        except SketchFailed as exc:
            print(f"repair failed: {exc}", file=sys.stderr)
            repaired = exc.sketch if exc.sketch is not None else sketch
            sys.stdout.write(render(repaired).text)
            print(f"-- translation rate: {repaired.translation_rate:.3f}")
            return 1
        finally:
            verifier.close()
    sys.stdout.write(render(repaired).text)
    if not render(repaired).text.endswith("\n"):
        sys.stdout.write("\n")
    print(f"-- translation rate: {repaired.translation_rate:.3f}")
    return 0


# ---------------------------------------------------------------- report


def cmd_report(args: argparse.Namespace) -> int:
    from dsprover.config import load_config
    from dsprover.evalkit import compute_metrics, emit_report, load_benchmark, render_text
    from dsprover.orchestrator import read_records

    fields, split = {}, None
    if args.config:
        cfg = load_config(args.config)
        fields, split = dict(cfg.benchmark_fields), cfg.benchmark_split
    if not Path(args.benchmark).is_file():
        raise UsageError(f"benchmark file {args.benchmark} not found")
    bench = load_benchmark(args.benchmark, field_map=fields, split=split)
    records = read_records(args.store)
    metrics = compute_metrics(records, bench, args.configs)
    txt, js = emit_report(metrics, args.out)
    sys.stdout.write(render_text(metrics))
    print(f"wrote {txt} and {js}")
    return 0


COMMANDS = {"prove": cmd_prove, "mask": cmd_mask, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dsprover: error: {exc}", file=sys.stderr)
        return 2
    except (DSProverError, OSError, ValueError) as exc:
        print(f"dsprover: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
