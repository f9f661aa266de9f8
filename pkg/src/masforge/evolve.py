"""The self-evolution loop: seed blocks, design, execute, critique, store.

Each question gets its own experience library. The loop is strictly
sequential across iterations (every design consumes the previous
iterations' experience); within an iteration the plan interpreter may run
sub-tasks concurrently. No step ever sees a gold answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

from .blocks import default_block_configs, run_block
from .domain import (
    BlockKind,
    BlockParams,
    CandidateAnswer,
    Info,
    MasforgeError,
    TaskKind,
    Usage,
    candidate_to_record,
    evolve_source,
)
from .gateway import (
    Gateway,
    MalformedOutputError,
    ProviderError,
    extract_json_object,
)
from .plan import (
    ExecutionError,
    ExecutionTrace,
    PlanIR,
    PlanParseError,
    execute_plan,
    parse_plan,
    render_plan,
    validate_plan,
)
from .prompts import DEFAULT, Catalog


class MetaDesignError(MasforgeError):
    """The meta-agent failed to produce a valid plan, re-ask included."""


class Verdict(str, Enum):
    SOLVABLE = "solvable"
    TOO_HARD = "too-hard"
    BLOCK_ISSUE = "block-issue"
    DECOMPOSITION_ISSUE = "decomposition-issue"

    def __str__(self) -> str:
        return self.value


class CompletenessVerdict(str, Enum):
    COMPLETE = "complete"
    MISSING_INFO = "missing-info"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class SolvabilityJudgment:
    verdict: Verdict
    justification: str


@dataclass(frozen=True)
class CompletenessJudgment:
    verdict: CompletenessVerdict
    justification: str


@dataclass(frozen=True)
class Feedback:
    """Per-sub-task solvability, whole-plan completeness, and directives."""

    solvability: dict[str, SolvabilityJudgment]
    completeness: CompletenessJudgment
    directives: str


@dataclass(frozen=True)
class ExperienceRecord:
    """One library entry: what ran, what came out, what the critic said.

    ``plan`` is a BlockKind for seed entries, a PlanIR for evolve entries,
    and None when the design step itself failed.
    """

    iteration: int
    plan: PlanIR | BlockKind | None
    trace_digest: str
    feedback: Feedback | None
    candidate: CandidateAnswer


class ExperienceLibrary:
    """Append-only per-question memory, optionally mirrored to disk."""

    def __init__(
        self, render_budget: int = 60_000, path: str | Path | None = None
    ) -> None:
        self.render_budget = render_budget
        self._records: list[ExperienceRecord] = []
        self._path = Path(path) if path is not None else None
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)

    @property
    def records(self) -> tuple[ExperienceRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def append(self, record: ExperienceRecord) -> None:
        self._records.append(record)
        if self._path is not None:
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(_record_to_json(record), sort_keys=True) + "\n")


def _record_to_json(record: ExperienceRecord) -> dict:
    if isinstance(record.plan, PlanIR):
        plan = render_plan(record.plan)
    elif isinstance(record.plan, BlockKind):
        plan = record.plan.value
    else:
        plan = None
    feedback = None
    if record.feedback is not None:
        feedback = {
            "solvability": {
                sid: {"verdict": j.verdict.value, "justification": j.justification}
                for sid, j in record.feedback.solvability.items()
            },
            "completeness": {
                "verdict": record.feedback.completeness.verdict.value,
                "justification": record.feedback.completeness.justification,
            },
            "directives": record.feedback.directives,
        }
    return {
        "iteration": record.iteration,
        "plan": plan,
        "trace_digest": record.trace_digest,
        "feedback": feedback,
        "candidate": candidate_to_record(record.candidate),
    }


def _clip(text: str, limit: int = 200) -> str:
    flat = " ".join(text.split())
    return flat if len(flat) <= limit else flat[: limit - 1] + "…"


def _empty_candidate(iteration: int) -> CandidateAnswer:
    return CandidateAnswer("", "", "", evolve_source(iteration), Usage())


# ---------------------------------------------------------------------------
# MAS-Init
# ---------------------------------------------------------------------------


def mas_init(
    task: Info,
    gateway: Gateway,
    *,
    configs: Sequence[BlockParams] | None = None,
    task_kind: TaskKind = TaskKind.FREE_TEXT,
    catalog: Catalog = DEFAULT,
) -> tuple[list[CandidateAnswer], list[ExperienceRecord]]:
    """Run every building block on the whole task.

    Returns one candidate per block (failed blocks yield empty-canonical
    candidates, never dropped) and the matching seed records.
    """
    configs = tuple(configs) if configs is not None else default_block_configs()
    covered = {bp.kind for bp in configs}
    if covered != set(BlockKind):
        missing = sorted(k.value for k in set(BlockKind) - covered)
        raise ValueError(f"block configs must cover all four kinds; missing {missing}")
    candidates: list[CandidateAnswer] = []
    records: list[ExperienceRecord] = []
    for bp in configs:
        result = run_block(
            bp,
            task,
            gateway,
            task_kind=task_kind,
            context=f"init[{bp.kind.value}]",
            catalog=catalog,
        )
        candidates.append(result.candidate)
        digest = (
            f"error: {_clip(result.error)}"
            if result.error
            else f"thinking: {_clip(result.candidate.thinking)}"
        )
        records.append(
            ExperienceRecord(
                iteration=0,
                plan=bp.kind,
                trace_digest=digest,
                feedback=None,
                candidate=result.candidate,
            )
        )
    return candidates, records


# ---------------------------------------------------------------------------
# Meta-design
# ---------------------------------------------------------------------------

_META_ROLE = "expert machine learning researcher testing various agentic systems"


def meta_design(
    task: Info,
    library: ExperienceLibrary,
    gateway: Gateway,
    *,
    no_decompose: bool = False,
    catalog: Catalog = DEFAULT,
) -> PlanIR:
    """One meta-agent call producing a validated plan; one re-ask on failure."""
    if len(library) == 0:
        raise ValueError("experience library is empty; run the seed blocks first")
    key = "meta.design_no_decompose" if no_decompose else "meta.design"
    instruction = catalog[key]
    experience = Info("experience", "engine", render_library(library))

    def attempt(instr: str) -> tuple[PlanIR | None, list[str]]:
        agent = gateway.make_agent(
            ("thinking", "plan"),
            "Meta-Design Agent",
            role=_META_ROLE,
            temperature=gateway.config.meta_temperature,
        )
        try:
            reply = gateway.query_agent(
                agent, [task, experience], instr, context="meta-design"
            )
        except (MalformedOutputError, ProviderError) as exc:
            return None, [f"no usable reply: {exc}"]
        try:
            plan = parse_plan(reply.fields["plan"].content)
        except PlanParseError as exc:
            return None, [str(exc)]
        violations = validate_plan(plan)
        if violations:
            return None, violations
        return plan, []

    plan, violations = attempt(instruction)
    if plan is not None:
        return plan
    retry = (
        instruction
        + "\n\n"
        + catalog["meta.design_retry"].format(
            violations="\n".join(f"- {v}" for v in violations)
        )
    )
    plan, second = attempt(retry)
    if plan is not None:
        return plan
    raise MetaDesignError(
        "design rejected twice; last violations: " + "; ".join(second)
    )


# ---------------------------------------------------------------------------
# Meta-feedback
# ---------------------------------------------------------------------------

_VERDICTS = {v.value: v for v in Verdict}
_COMPLETENESS = {v.value: v for v in CompletenessVerdict}


def _normalize(token: str) -> str:
    return token.strip().lower().replace("_", "-").replace(" ", "-")


def _coerce_verdict(raw: object, justification: str) -> SolvabilityJudgment:
    verdict = _VERDICTS.get(_normalize(str(raw)))
    if verdict is None:
        return SolvabilityJudgment(
            Verdict.BLOCK_ISSUE, f"unrecognized verdict {raw!r}: {justification}"
        )
    return SolvabilityJudgment(verdict, justification)


def _degraded_feedback(plan: PlanIR, raw_text: str) -> Feedback:
    return Feedback(
        solvability={
            sid: SolvabilityJudgment(Verdict.BLOCK_ISSUE, "unreviewed")
            for sid in plan.ids()
        },
        completeness=CompletenessJudgment(CompletenessVerdict.COMPLETE, "unreviewed"),
        directives=raw_text,
    )


def _apply_too_hard_override(feedback: Feedback, trace: ExecutionTrace) -> Feedback:
    if not trace.too_hard_flags:
        return feedback
    solvability = dict(feedback.solvability)
    for sid in trace.too_hard_flags:
        prior = solvability.get(sid)
        note = "sub-task output contains the too-hard marker"
        if prior is not None and prior.justification:
            note = f"{note}; {prior.justification}"
        solvability[sid] = SolvabilityJudgment(Verdict.TOO_HARD, note)
    return Feedback(solvability, feedback.completeness, feedback.directives)


def trace_digest(plan: PlanIR, trace: ExecutionTrace, limit: int = 200) -> str:
    lines = []
    for sid in plan.ids():
        sub = trace.per_subtask[sid]
        flags = ""
        if sid in trace.too_hard_flags:
            flags += " [too-hard]"
        if sid in trace.failed:
            flags += " [failed]"
        if sid in trace.disagreements:
            flags += " [disagreement]"
        lines.append(f"{sid}: {_clip(sub.final.content, limit)}{flags}")
    return "\n".join(lines)


def _agent_outputs_digest(trace: ExecutionTrace) -> str:
    lines = []
    for sid, sub in trace.per_subtask.items():
        for result in sub.results:
            for info in result.per_agent_outputs:
                lines.append(f"[{sid}] {info.name} by {info.author}: {_clip(info.content, 160)}")
    return "\n".join(lines)


def meta_feedback(
    task: Info,
    plan: PlanIR,
    trace: ExecutionTrace,
    library: ExperienceLibrary,
    gateway: Gateway,
    *,
    no_analysis: bool = False,
    catalog: Catalog = DEFAULT,
) -> Feedback:
    """One meta-agent call critiquing the executed plan.

    Never raises: malformed or failed replies degrade to block-issue
    verdicts with the raw text as directives. Sub-tasks whose output
    carried the too-hard marker are forced to a too-hard verdict
    regardless of the meta-agent's prose.
    """
    key = "meta.feedback_no_analysis" if no_analysis else "meta.feedback"
    inputs = [
        task,
        Info("current design", "engine", render_plan(plan)),
        Info("sub-task outputs", "engine", trace_digest(plan, trace, limit=400)),
        Info("agent outputs", "engine", _agent_outputs_digest(trace)),
        Info(
            "final answer",
            "engine",
            f"answer: {trace.candidate.answer}\nreasoning: {_clip(trace.candidate.thinking, 400)}",
        ),
        Info("experience", "engine", render_library(library)),
    ]
    agent = gateway.make_agent(
        ("thinking", "feedback"),
        "Meta-Feedback Agent",
        role=_META_ROLE,
        temperature=gateway.config.meta_temperature,
    )
    try:
        reply = gateway.query_agent(
            agent, inputs, catalog[key], context="meta-feedback"
        )
    except MalformedOutputError as exc:
        return _apply_too_hard_override(_degraded_feedback(plan, exc.raw), trace)
    except ProviderError as exc:
        return _apply_too_hard_override(_degraded_feedback(plan, str(exc)), trace)

    payload = extract_json_object(reply.fields["feedback"].content)
    if payload is None:
        feedback = _degraded_feedback(plan, reply.fields["feedback"].content)
        return _apply_too_hard_override(feedback, trace)

    raw_solvability = payload.get("solvability")
    if not isinstance(raw_solvability, dict):
        raw_solvability = {}
    solvability: dict[str, SolvabilityJudgment] = {}
    for sid in plan.ids():
        entry = raw_solvability.get(sid)
        if isinstance(entry, dict):
            solvability[sid] = _coerce_verdict(
                entry.get("verdict", ""), str(entry.get("justification", ""))
            )
        elif isinstance(entry, str):
            solvability[sid] = _coerce_verdict(entry, "")
        else:
            solvability[sid] = SolvabilityJudgment(Verdict.BLOCK_ISSUE, "unreviewed")

    raw_completeness = payload.get("completeness")
    if isinstance(raw_completeness, dict):
        verdict = _COMPLETENESS.get(
            _normalize(str(raw_completeness.get("verdict", "")))
        )
        completeness = CompletenessJudgment(
            verdict or CompletenessVerdict.COMPLETE,
            str(raw_completeness.get("justification", ""))
            if verdict
            else "unrecognized verdict",
        )
    else:
        completeness = CompletenessJudgment(CompletenessVerdict.COMPLETE, "unreviewed")

    directives = str(payload.get("directives", ""))
    feedback = Feedback(solvability, completeness, directives)
    return _apply_too_hard_override(feedback, trace)


# ---------------------------------------------------------------------------
# Experience rendering
# ---------------------------------------------------------------------------


def render_feedback(feedback: Feedback) -> str:
    lines = [
        f"- {sid}: {judgment.verdict.value} ({_clip(judgment.justification, 120)})"
        for sid, judgment in feedback.solvability.items()
    ]
    lines.append(
        f"completeness: {feedback.completeness.verdict.value}"
        f" ({_clip(feedback.completeness.justification, 120)})"
    )
    if feedback.directives:
        lines.append(f"directives: {_clip(feedback.directives, 300)}")
    return "\n".join(lines)


def render_library(library: ExperienceLibrary) -> str:
    """Deterministic text rendering, newest records first.

    When the text exceeds the library's render budget, trace digests are
    elided oldest-first, then feedback prose oldest-first. Plan skeletons
    and the seed blocks' answers are never elided.
    """
    records = library.records
    if not records:
        return ""

    blocks: list[list[tuple[str | None, str]]] = []
    for record in records:
        parts: list[tuple[str | None, str]] = []
        answer = record.candidate.answer or "(none)"
        if record.iteration == 0:
            parts.append((None, f"[building block {record.plan}]\nanswer: {answer}"))
        else:
            if isinstance(record.plan, PlanIR):
                plan_text = render_plan(record.plan)
            else:
                plan_text = "(design failed)"
            parts.append(
                (None, f"[iteration {record.iteration}]\n{plan_text}\nanswer: {answer}")
            )
        if record.trace_digest:
            parts.append(("digest", f"outputs:\n{record.trace_digest}"))
        if record.feedback is not None:
            parts.append(("feedback", f"feedback:\n{render_feedback(record.feedback)}"))
        blocks.append(parts)

    elided: set[tuple[int, str]] = set()

    def assemble() -> str:
        chunks = []
        for pos in range(len(blocks) - 1, -1, -1):  # newest first
            lines = []
            for kind, text in blocks[pos]:
                if kind is not None and (pos, kind) in elided:
                    lines.append(f"[{kind} elided]")
                else:
                    lines.append(text)
            chunks.append("\n".join(lines))
        return "\n\n".join(chunks)

    victims = [
        (pos, "digest")
        for pos, parts in enumerate(blocks)
        if any(kind == "digest" for kind, _ in parts)
    ] + [
        (pos, "feedback")
        for pos, parts in enumerate(blocks)
        if any(kind == "feedback" for kind, _ in parts)
    ]
    text = assemble()
    for victim in victims:
        if len(text) <= library.render_budget:
            break
        elided.add(victim)
        text = assemble()
    return text


# ---------------------------------------------------------------------------
# The evolve loop
# ---------------------------------------------------------------------------


def evolve(
    task: Info,
    library: ExperienceLibrary,
    gateway: Gateway,
    *,
    iterations: int = 5,
    task_kind: TaskKind = TaskKind.FREE_TEXT,
    catalog: Catalog = DEFAULT,
    no_decompose: bool = False,
    no_feedback: bool = False,
    parallel_subtasks: bool = False,
    max_workers: int = 4,
) -> list[CandidateAnswer]:
    """Design/execute/critique for ``iterations`` rounds.

    The library grows by exactly one record per iteration, failures
    included, so later designs can learn from them. Iterations whose final
    sub-task produced no parseable answer contribute no candidate.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if len(library) == 0:
        raise ValueError("experience library is empty; run the seed blocks first")
    candidates: list[CandidateAnswer] = []
    for t in range(1, iterations + 1):
        try:
            plan = meta_design(
                task, library, gateway, no_decompose=no_decompose, catalog=catalog
            )
        except MetaDesignError as exc:
            library.append(
                ExperienceRecord(t, None, f"design failed: {exc}", None, _empty_candidate(t))
            )
            continue
        try:
            trace = execute_plan(
                plan,
                task,
                gateway,
                iteration=t,
                task_kind=task_kind,
                catalog=catalog,
                parallel=parallel_subtasks,
                max_workers=max_workers,
            )
        except ExecutionError as exc:
            digest = f"execution failed: {exc}"
            if exc.partial_digest:
                digest += f" | partial outputs: {exc.partial_digest}"
            library.append(
                ExperienceRecord(t, plan, digest, None, _empty_candidate(t))
            )
            continue
        feedback = meta_feedback(
            task,
            plan,
            trace,
            library,
            gateway,
            no_analysis=no_feedback,
            catalog=catalog,
        )
        library.append(
            ExperienceRecord(t, plan, trace_digest(plan, trace), feedback, trace.candidate)
        )
        if trace.candidate.canonical:
            candidates.append(trace.candidate)
    return candidates
