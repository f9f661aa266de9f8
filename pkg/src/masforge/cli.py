"""Command-line interface: run a dataset, report results, inspect a question.

The demo provider answers offline and deterministically, so
``masforge run --provider demo`` exercises the full pipeline with no API
key. Live runs read endpoint/model/pricing from a JSON provider config;
the API key itself comes only from the environment.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .gateway import DemoProvider, HttpProvider, ProviderConfig
from .harness import (
    ABLATION_FLAGS,
    BLOCK_PRESETS,
    MissingGoldError,
    PricingTable,
    RunConfig,
    compute_accuracy,
    emit_pareto,
    load_dataset,
    record_from_json,
    run_batch,
    total_cost,
)
from .prompts import Catalog
from .verify import VerifyMode


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masforge",
        description="Per-question self-evolving multi-agent LLM engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a dataset end to end")
    run_p.add_argument("--dataset", required=True, help="path to the question file")
    run_p.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")
    run_p.add_argument("--out", required=True, help="run directory (resumable)")
    run_p.add_argument("--provider", choices=["demo", "http"], default="demo")
    run_p.add_argument(
        "--provider-config",
        help="JSON file: endpoint, model, api_key_env, timeouts, pricing",
    )
    run_p.add_argument("--iterations", type=int, default=5)
    run_p.add_argument(
        "--verify-mode",
        choices=[m.value for m in VerifyMode],
        default=VerifyMode.META_SELECT.value,
    )
    run_p.add_argument(
        "--ablate",
        action="append",
        choices=list(ABLATION_FLAGS),
        default=[],
        help="repeatable; disable a pipeline stage",
    )
    run_p.add_argument("--block-preset", choices=sorted(BLOCK_PRESETS), default="default")
    run_p.add_argument("--parallelism", type=int, default=1)
    run_p.add_argument("--parallel-subtasks", action="store_true")
    run_p.add_argument("--deterministic", action="store_true")
    run_p.add_argument("--prompt-catalog", help="JSON file overriding prompt texts")

    report_p = sub.add_parser("report", help="summarize one or more run dirs")
    report_p.add_argument("run_dirs", nargs="+")
    report_p.add_argument("--pareto-out", help="write the accuracy/cost table here")

    inspect_p = sub.add_parser(
        "inspect", help="print a question's experience library and outcome"
    )
    inspect_p.add_argument("run_dir")
    inspect_p.add_argument("--question", required=True)
    return parser


def _load_records(run_dir: Path):
    records_file = run_dir / "records.jsonl"
    if not records_file.exists():
        raise SystemExit(f"no records.jsonl under {run_dir}")
    return [
        record_from_json(json.loads(line))
        for line in records_file.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


def _cmd_run(args: argparse.Namespace) -> int:
    raw_config: dict = {}
    if args.provider_config:
        raw_config = json.loads(Path(args.provider_config).read_text(encoding="utf-8"))
    pricing_data = raw_config.pop("pricing", None)
    provider_config = ProviderConfig.from_dict(
        raw_config if raw_config else {"model": "demo"}
    )
    if args.provider == "http":
        if not provider_config.endpoint:
            raise SystemExit(
                "http provider needs --provider-config with an 'endpoint' entry"
            )
        provider = HttpProvider(provider_config)
    else:
        provider = DemoProvider()
    pricing = PricingTable.from_dict(pricing_data) if pricing_data else None
    catalog = Catalog.load(args.prompt_catalog) if args.prompt_catalog else Catalog()

    config = RunConfig(
        iterations=args.iterations,
        block_configs=BLOCK_PRESETS[args.block_preset],
        ablations=frozenset(args.ablate),
        verify_mode=VerifyMode(args.verify_mode),
        parallelism=args.parallelism,
        parallel_subtasks=args.parallel_subtasks,
        deterministic=args.deterministic,
        out_dir=Path(args.out),
        catalog=catalog,
        provider_config=provider_config,
        pricing=pricing,
    )
    questions = load_dataset(args.dataset, fmt=args.format)
    records = run_batch(questions, config, provider)
    for record in records:
        answer = record.final.answer if record.final else "(none)"
        source = record.final.source if record.final else "-"
        status = "" if record.error is None else f"  ERROR: {record.error}"
        print(f"{record.question_id}: {answer!r} via {source}  cost={record.cost}{status}")
    print(f"\n{len(records)} question(s); total cost {total_cost(records)}")
    if all(r.gold is not None for r in records) and records:
        print(f"accuracy: {compute_accuracy(records):.4f}")
    print(f"records written to {Path(args.out) / 'records.jsonl'}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    groups = {}
    for raw_dir in args.run_dirs:
        run_dir = Path(raw_dir)
        records = _load_records(run_dir)
        label = run_dir.name or str(run_dir)
        groups[label] = records
        line = f"{label}: {len(records)} records, total cost {total_cost(records)}"
        try:
            line += f", accuracy {compute_accuracy(records):.4f}"
        except MissingGoldError:
            line += ", accuracy n/a (gold missing)"
        print(line)
    scorable = {
        label: records
        for label, records in groups.items()
        if all(r.gold is not None for r in records)
    }
    if scorable:
        table = emit_pareto(scorable)
        if args.pareto_out:
            Path(args.pareto_out).write_text(table, encoding="utf-8")
            print(f"pareto table written to {args.pareto_out}")
        else:
            print()
            print(table, end="")
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    qid = args.question
    record_path = run_dir / "records" / f"{qid}.json"
    if record_path.exists():
        record = record_from_json(json.loads(record_path.read_text(encoding="utf-8")))
        print(f"question {qid}")
        if record.final:
            print(f"final answer: {record.final.answer!r} via {record.final.source}")
        if record.error:
            print(f"error: {record.error}")
        print(f"candidates: {[c.source for c in record.all_candidates]}")
        print(f"usage: {record.usage_total}")
        print(f"cost: {record.cost}")
    library_path = run_dir / "libraries" / f"{qid}.jsonl"
    if library_path.exists():
        print("\nexperience library:")
        for line in library_path.read_text(encoding="utf-8").splitlines():
            entry = json.loads(line)
            header = (
                f"iteration {entry['iteration']}"
                if entry["iteration"]
                else f"building block {entry['plan']}"
            )
            print(f"-- {header}")
            if entry["iteration"] and entry["plan"]:
                print(entry["plan"])
            print(f"   answer: {entry['candidate']['answer']!r}")
            if entry["trace_digest"]:
                print(f"   outputs: {entry['trace_digest']}")
            if entry["feedback"]:
                print(f"   directives: {entry['feedback']['directives']}")
    elif not record_path.exists():
        raise SystemExit(f"no data for question {qid!r} under {run_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "report":
        return _cmd_report(args)
    return _cmd_inspect(args)


if __name__ == "__main__":
    sys.exit(main())
