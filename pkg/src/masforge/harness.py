"""Run orchestration: datasets, per-question pipeline, cost, reports.

Gold answers are quarantined: they reach only oracle verification and the
accuracy computation, never any prompt. Batches are resumable: completed
questions are written once, atomically, and skipped on rerun.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Mapping, Sequence

from .blocks import default_block_configs
from .domain import (
    BlockKind,
    BlockParams,
    CandidateAnswer,
    EmptyInputError,
    MasforgeError,
    TaskKind,
    Usage,
    candidate_from_record,
    candidate_to_record,
    canonicalize_answer,
    task_info,
)
from .evolve import ExperienceLibrary, evolve, mas_init
from .gateway import Gateway, Provider, ProviderConfig, RunLog
from .prompts import DEFAULT, Catalog
from .verify import VerifyConfig, VerifyMode, verify


class DatasetError(MasforgeError):
    """A dataset file failed to parse; the message carries the location."""


class UnknownModelError(MasforgeError):
    """No pricing entry for the requested model."""


class MissingGoldError(MasforgeError):
    """Accuracy was requested over records without gold answers."""


# ---------------------------------------------------------------------------
# Pricing and cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelPrice:
    """Per-million-token prices, exact decimals."""

    input_per_million: Decimal
    output_per_million: Decimal

    def __post_init__(self) -> None:
        if self.input_per_million < 0 or self.output_per_million < 0:
            raise ValueError("prices must be non-negative")


class PricingTable:
    def __init__(self, prices: Mapping[str, ModelPrice]) -> None:
        self._prices = dict(prices)

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Any]]) -> "PricingTable":
        prices = {}
        for model, entry in data.items():
            prices[model] = ModelPrice(
                Decimal(str(entry["input_per_million"])),
                Decimal(str(entry["output_per_million"])),
            )
        return cls(prices)

    def __contains__(self, model: str) -> bool:
        return model in self._prices

    def __getitem__(self, model: str) -> ModelPrice:
        if model not in self._prices:
            raise UnknownModelError(f"no pricing for model {model!r}")
        return self._prices[model]


_MILLION = Decimal(1_000_000)


def compute_cost(usage: Usage, model: str, pricing: PricingTable) -> Decimal:
    """Exact decimal cost of a usage tally under the model's prices."""
    price = pricing[model]
    return (
        usage.prompt_tokens * price.input_per_million
        + usage.completion_tokens * price.output_per_million
    ) / _MILLION


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    task_kind: TaskKind = TaskKind.FREE_TEXT
    options: tuple[str, ...] | None = None
    gold: str | None = None


def _parse_task_kind(value: Any, loc: str) -> TaskKind:
    if value in (None, ""):
        return TaskKind.FREE_TEXT
    try:
        return TaskKind(value)
    except ValueError:
        raise DatasetError(
            f"{loc}: unknown task_kind {value!r} "
            f"(expected one of {[k.value for k in TaskKind]})"
        )


def _build_question(row: Mapping[str, Any], loc: str, default_id: str) -> Question:
    text = row.get("question")
    if not isinstance(text, str) or not text.strip():
        raise DatasetError(f"{loc}: missing question field")
    qid = row.get("id") or default_id
    options = row.get("options")
    if isinstance(options, str):
        options = [o for o in options.split("|") if o] or None
    if options is not None:
        if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
            raise DatasetError(f"{loc}: options must be a list of strings")
        options = tuple(options)
    gold = row.get("gold")
    if gold is not None and not isinstance(gold, str):
        gold = str(gold)
    if gold == "":
        gold = None
    return Question(
        id=str(qid),
        text=text,
        task_kind=_parse_task_kind(row.get("task_kind"), loc),
        options=options,
        gold=gold,
    )


def load_dataset(path: str | Path, fmt: str = "jsonl") -> list[Question]:
    """Load questions in stable file order; gold answers are optional."""
    path = Path(path)
    questions: list[Question] = []
    if fmt == "jsonl":
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                loc = f"line {lineno}"
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{loc}: invalid JSON: {exc}")
                if not isinstance(row, dict):
                    raise DatasetError(f"{loc}: expected an object")
                questions.append(_build_question(row, loc, default_id=f"q{lineno}"))
    elif fmt == "csv":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for lineno, row in enumerate(reader, start=2):
                loc = f"line {lineno}"
                cleaned = {k: (v if v != "" else None) for k, v in row.items() if k}
                questions.append(_build_question(cleaned, loc, default_id=f"q{lineno}"))
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")
    seen: set[str] = set()
    for q in questions:
        if q.id in seen:
            raise DatasetError(f"duplicate question id {q.id!r}")
        seen.add(q.id)
    return questions


# ---------------------------------------------------------------------------
# Run configuration and records
# ---------------------------------------------------------------------------

NO_INIT = "no-init"
NO_EVOLVE = "no-evolve"
NO_DECOMPOSE = "no-decompose"
NO_FEEDBACK = "no-feedback"
ABLATION_FLAGS = (NO_INIT, NO_EVOLVE, NO_DECOMPOSE, NO_FEEDBACK)

# Matched-budget block settings used by the common baseline comparisons.
BLOCK_PRESETS: dict[str, tuple[BlockParams, ...]] = {
    "default": default_block_configs(),
    "nine-budget": (
        BlockParams(BlockKind.COT),
        BlockParams(BlockKind.COT_SC, n_samples=9),
        BlockParams(
            BlockKind.DEBATE, roles=("Debate Agent", "Debate Agent"), max_round=9
        ),
        BlockParams(BlockKind.SELF_REFINE, max_round=9),
    ),
}


@dataclass
class RunConfig:
    iterations: int = 5
    block_configs: tuple[BlockParams, ...] | None = None
    ablations: frozenset[str] = frozenset()
    verify_mode: VerifyMode = VerifyMode.META_SELECT
    parallelism: int = 1
    parallel_subtasks: bool = False
    max_workers: int = 4
    deterministic: bool = False
    render_budget: int = 60_000
    out_dir: Path | None = None
    catalog: Catalog = field(default_factory=lambda: DEFAULT)
    provider_config: ProviderConfig = field(default_factory=ProviderConfig)
    pricing: PricingTable | None = None

    def __post_init__(self) -> None:
        unknown = set(self.ablations) - set(ABLATION_FLAGS)
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class RunRecord:
    question_id: str
    final: CandidateAnswer | None
    all_candidates: tuple[CandidateAnswer, ...]
    gold: str | None
    correct: bool | None
    usage_total: Usage
    cost: Decimal
    wall_time: float
    ablation_flags: tuple[str, ...]
    task_kind: TaskKind
    error: str | None = None


def record_to_json(record: RunRecord) -> dict[str, Any]:
    return {
        "question_id": record.question_id,
        "task_kind": record.task_kind.value,
        "final": candidate_to_record(record.final) if record.final else None,
        "all_candidates": [candidate_to_record(c) for c in record.all_candidates],
        "gold": record.gold,
        "correct": record.correct,
        "usage": {
            "prompt_tokens": record.usage_total.prompt_tokens,
            "completion_tokens": record.usage_total.completion_tokens,
            "call_count": record.usage_total.call_count,
        },
        "cost": str(record.cost),
        "wall_time": record.wall_time,
        "ablation_flags": list(record.ablation_flags),
        "error": record.error,
    }


def record_from_json(data: Mapping[str, Any]) -> RunRecord:
    usage = data["usage"]
    return RunRecord(
        question_id=data["question_id"],
        final=candidate_from_record(data["final"]) if data["final"] else None,
        all_candidates=tuple(
            candidate_from_record(c) for c in data["all_candidates"]
        ),
        gold=data["gold"],
        correct=data["correct"],
        usage_total=Usage(
            usage["prompt_tokens"], usage["completion_tokens"], usage["call_count"]
        ),
        cost=Decimal(data["cost"]),
        wall_time=data["wall_time"],
        ablation_flags=tuple(data["ablation_flags"]),
        task_kind=TaskKind(data["task_kind"]),
        error=data.get("error"),
    )


# ---------------------------------------------------------------------------
# Per-question pipeline
# ---------------------------------------------------------------------------


def run_question(question: Question, config: RunConfig, gateway: Gateway) -> RunRecord:
    """Seed blocks, evolve, verify; honoring the ablation switches.

    With ``no-init`` the seed blocks still run (the designer needs their
    outputs in the library) but their candidates stay out of the verify
    pool. With ``no-evolve`` the pool is the four seed candidates only.
    """
    start = time.monotonic()
    task = task_info(question.text)
    flags = config.ablations
    library_path = None
    if config.out_dir is not None:
        library_path = Path(config.out_dir) / "libraries" / f"{question.id}.jsonl"
    library = ExperienceLibrary(config.render_budget, path=library_path)
    pool: list[CandidateAnswer] = []
    final: CandidateAnswer | None = None
    error: str | None = None
    try:
        if config.verify_mode is VerifyMode.ORACLE and question.gold is None:
            raise MasforgeError(
                f"oracle verification requires a gold answer for {question.id!r}"
            )
        init_candidates, records = mas_init(
            task,
            gateway,
            configs=config.block_configs,
            task_kind=question.task_kind,
            catalog=config.catalog,
        )
        for record in records:
            library.append(record)
        if NO_INIT not in flags:
            pool.extend(init_candidates)
        if NO_EVOLVE not in flags:
            pool.extend(
                evolve(
                    task,
                    library,
                    gateway,
                    iterations=config.iterations,
                    task_kind=question.task_kind,
                    catalog=config.catalog,
                    no_decompose=NO_DECOMPOSE in flags,
                    no_feedback=NO_FEEDBACK in flags,
                    parallel_subtasks=config.parallel_subtasks,
                    max_workers=config.max_workers,
                )
            )
        verify_config = VerifyConfig(
            mode=config.verify_mode,
            task_kind=question.task_kind,
            options=question.options,
        )
        final = verify(
            pool,
            task,
            verify_config,
            gateway,
            gold=question.gold if config.verify_mode is VerifyMode.ORACLE else None,
            catalog=config.catalog,
        )
    except MasforgeError as exc:
        error = f"{type(exc).__name__}: {exc}"
    usage = gateway.total_usage
    cost = (
        compute_cost(usage, config.provider_config.model, config.pricing)
        if config.pricing is not None
        else Decimal("0")
    )
    correct: bool | None = None
    if question.gold is not None:
        correct = final is not None and final.canonical == canonicalize_answer(
            question.gold, question.task_kind
        )
    wall_time = 0.0 if config.deterministic else time.monotonic() - start
    return RunRecord(
        question_id=question.id,
        final=final,
        all_candidates=tuple(pool),
        gold=question.gold,
        correct=correct,
        usage_total=usage,
        cost=cost,
        wall_time=wall_time,
        ablation_flags=tuple(sorted(flags)),
        task_kind=question.task_kind,
        error=error,
    )


# ---------------------------------------------------------------------------
# Batch runner
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_batch(
    questions: Sequence[Question], config: RunConfig, provider: Provider
) -> list[RunRecord]:
    """Run every question, fan-out up to ``config.parallelism``.

    With an out_dir, each finished question is written atomically to
    ``records/<id>.json``; reruns skip those and reassemble the identical
    ``records.jsonl`` in dataset order.
    """
    out_dir = Path(config.out_dir) if config.out_dir is not None else None
    records_dir = out_dir / "records" if out_dir else None
    if records_dir is not None:
        records_dir.mkdir(parents=True, exist_ok=True)

    def run_one(question: Question) -> RunRecord:
        if records_dir is not None:
            done_path = records_dir / f"{question.id}.json"
            if done_path.exists():
                return record_from_json(json.loads(done_path.read_text()))
        log = None
        if out_dir is not None:
            log = RunLog(out_dir / "logs" / f"{question.id}.jsonl")
        gateway = Gateway(provider, config.provider_config, log=log)
        record = run_question(question, config, gateway)
        if log is not None:
            log.close()
        if records_dir is not None:
            _atomic_write(
                records_dir / f"{question.id}.json",
                json.dumps(record_to_json(record), sort_keys=True, indent=1),
            )
        return record

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            records = list(pool.map(run_one, questions))
    else:
        records = [run_one(q) for q in questions]

    if out_dir is not None:
        lines = [
            json.dumps(record_to_json(r), sort_keys=True) for r in records
        ]
        _atomic_write(out_dir / "records.jsonl", "\n".join(lines) + "\n")
    return records


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def compute_accuracy(records: Sequence[RunRecord]) -> float:
    if not records:
        raise EmptyInputError("no records to score")
    if any(r.gold is None for r in records):
        missing = [r.question_id for r in records if r.gold is None]
        raise MissingGoldError(f"records without gold answers: {missing}")
    return sum(1 for r in records if r.correct) / len(records)


def total_cost(records: Sequence[RunRecord]) -> Decimal:
    cost = Decimal("0")
    for record in records:
        cost += record.cost
    return cost


def emit_pareto(groups: Mapping[str, Sequence[RunRecord]]) -> str:
    """Tab-separated (method, accuracy, total cost), one row per method."""
    lines = ["method\taccuracy\ttotal_cost"]
    for method in sorted(groups):
        records = groups[method]
        lines.append(
            f"{method}\t{compute_accuracy(records):.4f}\t{total_cost(records)}"
        )
    return "\n".join(lines) + "\n"
