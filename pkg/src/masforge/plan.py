"""Structured plan IR, its validation, and the interpreter.

A plan is a DAG of sub-tasks; each sub-task carries an ordered list of
stages, and each stage is one block or a parallel set of blocks. The
meta-agent emits plans in a JSON schema (embedded in its design prompt)
rather than executable code, so validation is total and execution needs no
code sandbox while covering the same design space: single blocks,
sequential chains, parallel blocks, and sequential/parallel sub-task
connections.
"""

from __future__ import annotations

from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from typing import Any

from .blocks import BlockResult, run_block
from .domain import (
    BlockKind,
    BlockParams,
    CandidateAnswer,
    Info,
    MasforgeError,
    TaskKind,
    Usage,
    contains_too_hard,
    evolve_source,
    total_usage,
)
from .gateway import Gateway, extract_json_object
from .prompts import DEFAULT, Catalog


class PlanParseError(MasforgeError):
    """The meta-agent's plan text does not fit the schema."""

    def __init__(self, message: str, path: str = "$") -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class ExecutionError(MasforgeError):
    """The final sub-task could not produce an output (hard provider failure)."""

    def __init__(self, message: str, partial_digest: str = "") -> None:
        super().__init__(message)
        self.partial_digest = partial_digest


@dataclass(frozen=True)
class SubTask:
    """One node of the decomposition."""

    id: str
    instruction: str
    depends_on: tuple[str, ...] = ()
    sub_mas: tuple[tuple[BlockParams, ...], ...] = ()
    is_final: bool = False


@dataclass(frozen=True)
class PlanIR:
    """A designed multi-agent system: sub-tasks plus the design rationale."""

    sub_tasks: tuple[SubTask, ...]
    rationale: str = ""

    def final_sub_task(self) -> SubTask:
        finals = [st for st in self.sub_tasks if st.is_final]
        if len(finals) != 1:
            raise ValueError(f"expected exactly one final sub-task, found {len(finals)}")
        return finals[0]

    def ids(self) -> tuple[str, ...]:
        return tuple(st.id for st in self.sub_tasks)


@dataclass(frozen=True)
class SubTaskTrace:
    final: Info
    results: tuple[BlockResult, ...]


@dataclass(frozen=True)
class ExecutionTrace:
    """Per-sub-task outputs plus the plan's candidate answer."""

    per_subtask: dict[str, SubTaskTrace]
    candidate: CandidateAnswer
    too_hard_flags: frozenset[str]
    usage: Usage
    failed: frozenset[str] = frozenset()
    disagreements: frozenset[str] = frozenset()


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_KIND_BY_NAME = {kind.value.lower(): kind for kind in BlockKind}


def _parse_block(entry: Any, path: str) -> BlockParams:
    if not isinstance(entry, dict):
        raise PlanParseError(f"block entry must be an object, got {type(entry).__name__}", path)
    name = entry.get("block", entry.get("kind"))
    if not isinstance(name, str):
        raise PlanParseError("missing block name", path)
    kind = _KIND_BY_NAME.get(name.strip().lower())
    if kind is None:
        raise PlanParseError(f"unknown block kind {name!r}", path)

    def _opt(key: str, types: tuple[type, ...]) -> Any:
        value = entry.get(key)
        if value is not None and not isinstance(value, types):
            raise PlanParseError(
                f"{key} must be {' or '.join(t.__name__ for t in types)}", path
            )
        return value

    temperature = _opt("temperature", (int, float))
    n_samples = _opt("n_samples", (int,))
    max_round = _opt("max_round", (int,))
    instruction = _opt("instruction", (str,))
    roles = entry.get("roles")
    if roles is not None:
        if not isinstance(roles, list) or not all(isinstance(r, str) for r in roles):
            raise PlanParseError("roles must be a list of strings", path)
        roles = tuple(roles)
    return BlockParams(
        kind=kind,
        temperature_override=float(temperature) if temperature is not None else None,
        n_samples=n_samples,
        max_round=max_round,
        roles=roles,
        instruction_override=instruction,
    )


def parse_plan(meta_output: str) -> PlanIR:
    """Parse the meta-agent's plan text into the IR.

    Total over the schema: unknown extra keys are ignored; every shape
    violation is reported with the offending element's path.
    """
    obj = extract_json_object(meta_output)
    if obj is None:
        raise PlanParseError("no JSON object found in plan text")
    raw_tasks = obj.get("sub_tasks")
    if not isinstance(raw_tasks, list) or not raw_tasks:
        raise PlanParseError("sub_tasks must be a non-empty list")
    sub_tasks: list[SubTask] = []
    seen: set[str] = set()
    for idx, raw in enumerate(raw_tasks):
        path = f"sub_tasks[{idx}]"
        if not isinstance(raw, dict):
            raise PlanParseError("sub-task must be an object", path)
        sid = raw.get("id")
        if not isinstance(sid, str) or not sid:
            raise PlanParseError("missing sub-task id", path)
        if sid in seen:
            raise PlanParseError(f"duplicate sub-task id {sid!r}", path)
        seen.add(sid)
        instruction = raw.get("instruction")
        if not isinstance(instruction, str):
            raise PlanParseError("instruction must be a string", path)
        depends = raw.get("depends_on", [])
        if not isinstance(depends, list) or not all(isinstance(d, str) for d in depends):
            raise PlanParseError("depends_on must be a list of ids", path)
        is_final = raw.get("final", raw.get("is_final", False))
        if not isinstance(is_final, bool):
            raise PlanParseError("final must be a boolean", path)
        raw_stages = raw.get("sub_mas")
        if not isinstance(raw_stages, list) or not raw_stages:
            raise PlanParseError("sub_mas must be a non-empty list of stages", path)
        stages: list[tuple[BlockParams, ...]] = []
        for stage_idx, stage in enumerate(raw_stages):
            stage_path = f"{path}.sub_mas[{stage_idx}]"
            if isinstance(stage, dict):
                stages.append((_parse_block(stage, stage_path),))
            elif isinstance(stage, list) and stage:
                stages.append(
                    tuple(
                        _parse_block(b, f"{stage_path}[{j}]") for j, b in enumerate(stage)
                    )
                )
            else:
                raise PlanParseError(
                    "stage must be a block object or non-empty list of blocks",
                    stage_path,
                )
        sub_tasks.append(
            SubTask(
                id=sid,
                instruction=instruction,
                depends_on=tuple(depends),
                sub_mas=tuple(stages),
                is_final=is_final,
            )
        )
    rationale = obj.get("rationale", "")
    if not isinstance(rationale, str):
        rationale = str(rationale)
    return PlanIR(sub_tasks=tuple(sub_tasks), rationale=rationale)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _strongly_connected_components(ids: list[str], edges: dict[str, list[str]]):
    index_of: dict[str, int] = {}
    lowlink: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    components: list[list[str]] = []

    def strongconnect(v: str) -> None:
        index_of[v] = lowlink[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        for w in edges.get(v, []):
            if w not in index_of:
                strongconnect(w)
                lowlink[v] = min(lowlink[v], lowlink[w])
            elif w in on_stack:
                lowlink[v] = min(lowlink[v], index_of[w])
        if lowlink[v] == index_of[v]:
            component = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                component.append(w)
                if w == v:
                    break
            components.append(component)

    for v in ids:
        if v not in index_of:
            strongconnect(v)
    return components


def validate_plan(plan: PlanIR) -> list[str]:
    """All schema and grounding violations; empty list means valid."""
    violations: list[str] = []
    ids = list(plan.ids())
    id_set = set(ids)
    order = {sid: i for i, sid in enumerate(ids)}

    edges = {
        st.id: [d for d in st.depends_on if d in id_set] for st in plan.sub_tasks
    }
    for component in _strongly_connected_components(ids, edges):
        is_cycle = len(component) > 1 or component[0] in edges.get(component[0], [])
        if is_cycle:
            members = sorted(component, key=order.get)
            violations.append("cycle: " + ",".join(members))

    for st in plan.sub_tasks:
        for dep in st.depends_on:
            if dep == st.id:
                continue  # already reported as a cycle
            if dep not in id_set:
                violations.append(
                    f"unknown dependency {dep!r} in sub-task {st.id!r}"
                )

    finals = [st.id for st in plan.sub_tasks if st.is_final]
    if not finals:
        violations.append("no final sub-task")
    elif len(finals) > 1:
        violations.append("multiple final sub-tasks: " + ", ".join(finals))

    for st in plan.sub_tasks:
        if not st.sub_mas:
            violations.append(f"sub-task {st.id!r}: sub_mas is empty")
        for stage_idx, stage in enumerate(st.sub_mas):
            for bp in stage:
                where = f"sub-task {st.id!r} stage {stage_idx}"
                if not isinstance(bp.kind, BlockKind):
                    violations.append(f"{where}: unknown block kind {bp.kind!r}")
                    continue
                if bp.temperature_override is not None and not (
                    0.0 <= bp.temperature_override <= 2.0
                ):
                    violations.append(
                        f"{where}: temperature {bp.temperature_override} outside [0, 2]"
                    )
                if bp.n_samples is not None:
                    if bp.kind is not BlockKind.COT_SC:
                        violations.append(f"{where}: n_samples only applies to CoT-SC")
                    elif bp.n_samples < 1:
                        violations.append(f"{where}: n_samples must be >= 1")
                if bp.roles is not None:
                    if bp.kind is not BlockKind.DEBATE:
                        violations.append(f"{where}: roles only apply to Debate")
                    elif not bp.roles:
                        violations.append(f"{where}: roles must be non-empty")
                if bp.max_round is not None:
                    if bp.kind not in (BlockKind.DEBATE, BlockKind.SELF_REFINE):
                        violations.append(
                            f"{where}: max_round only applies to Debate and Self-Refine"
                        )
                    elif bp.max_round < 1:
                        violations.append(f"{where}: max_round must be >= 1")

    for st in plan.sub_tasks:
        if not st.instruction.strip():
            violations.append(f"sub-task {st.id!r}: empty instruction")

    return violations


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _topological_order(plan: PlanIR) -> list[SubTask]:
    order = {sid: i for i, sid in enumerate(plan.ids())}
    by_id = {st.id: st for st in plan.sub_tasks}
    remaining_deps = {st.id: set(st.depends_on) for st in plan.sub_tasks}
    done: set[str] = set()
    result: list[SubTask] = []
    while remaining_deps:
        ready = sorted(
            (sid for sid, deps in remaining_deps.items() if deps <= done),
            key=order.get,
        )
        if not ready:
            raise ValueError("plan has a dependency cycle")
        for sid in ready:
            del remaining_deps[sid]
            done.add(sid)
            result.append(by_id[sid])
    return result


@dataclass
class _SubTaskOutcome:
    trace: SubTaskTrace
    final_info: Info
    representative: BlockResult
    too_hard: bool
    failed: bool
    disagreement: bool
    hard_failure: bool


def _run_subtask(
    st: SubTask,
    task: Info,
    dep_infos: list[Info],
    gateway: Gateway,
    task_kind: TaskKind,
    catalog: Catalog,
) -> _SubTaskOutcome:
    note = catalog["plan.too_hard_note"]
    results: list[BlockResult] = []
    current_extras: list[Info] = list(dep_infos)
    stage_results: list[BlockResult] = []
    for stage in st.sub_mas:
        stage_results = []
        for bp in stage:
            primary = (bp.instruction_override or st.instruction) + "\n\n" + note
            result = run_block(
                replace(bp, instruction_override=None),
                task,
                gateway,
                extra_inputs=current_extras,
                instruction=primary,
                task_kind=task_kind,
                context=st.id,
                catalog=catalog,
            )
            results.append(result)
            stage_results.append(result)
        current_extras = current_extras + [
            r.answer_info for r in stage_results if r.answer_info is not None
        ]
    # first successful block of the last stage represents the sub-task
    representative = next(
        (r for r in stage_results if r.answer_info is not None), stage_results[0]
    )
    if representative.answer_info is not None:
        final_info = representative.answer_info._replace(
            name=f"sub-task {st.id} output"
        )
    else:
        final_info = Info(
            name=f"sub-task {st.id} output",
            author="engine",
            content="",
            iteration_idx=-1,
        )
    last_canonicals = {
        r.candidate.canonical for r in stage_results if r.answer_info is not None
    }
    return _SubTaskOutcome(
        trace=SubTaskTrace(final=final_info, results=tuple(results)),
        final_info=final_info,
        representative=representative,
        too_hard=contains_too_hard(final_info.content),
        failed=representative.error is not None,
        disagreement=len(stage_results) > 1 and len(last_canonicals) > 1,
        hard_failure=representative.hard_failure,
    )


def execute_plan(
    plan: PlanIR,
    task: Info,
    gateway: Gateway,
    *,
    iteration: int,
    task_kind: TaskKind = TaskKind.FREE_TEXT,
    catalog: Catalog = DEFAULT,
    parallel: bool = False,
    max_workers: int = 4,
) -> ExecutionTrace:
    """Run a validated plan to an execution trace.

    Sub-tasks execute in topological order; independent sub-tasks may run
    concurrently when ``parallel`` is set. A non-final sub-task failure
    degrades to an empty output and a flag, so the feedback step can still
    diagnose it; a hard provider failure on the final sub-task raises
    ``ExecutionError``.
    """
    violations = validate_plan(plan)
    if violations:
        raise ValueError("plan failed validation: " + "; ".join(violations))

    final_id = plan.final_sub_task().id
    outcomes: dict[str, _SubTaskOutcome] = {}
    finals: dict[str, Info] = {}

    def dep_infos(st: SubTask) -> list[Info]:
        return [finals[d] for d in st.depends_on]

    if not parallel:
        for st in _topological_order(plan):
            outcome = _run_subtask(st, task, dep_infos(st), gateway, task_kind, catalog)
            outcomes[st.id] = outcome
            finals[st.id] = outcome.final_info
    else:
        by_id = {st.id: st for st in plan.sub_tasks}
        order = {sid: i for i, sid in enumerate(plan.ids())}
        waiting = {st.id: set(st.depends_on) for st in plan.sub_tasks}
        futures: dict[Future, str] = {}
        with ThreadPoolExecutor(max_workers=max_workers) as pool:

            def submit_ready() -> None:
                ready = sorted(
                    (sid for sid, deps in waiting.items() if not deps),
                    key=order.get,
                )
                for sid in ready:
                    del waiting[sid]
                    st = by_id[sid]
                    futures[
                        pool.submit(
                            _run_subtask, st, task, dep_infos(st), gateway,
                            task_kind, catalog,
                        )
                    ] = sid

            submit_ready()
            while futures:
                done, _ = wait(futures, return_when=FIRST_COMPLETED)
                for fut in done:
                    sid = futures.pop(fut)
                    outcome = fut.result()
                    outcomes[sid] = outcome
                    finals[sid] = outcome.final_info
                    for deps in waiting.values():
                        deps.discard(sid)
                submit_ready()

    per_subtask = {sid: outcomes[sid].trace for sid in plan.ids()}
    usage = total_usage(
        [r.candidate.usage for out in outcomes.values() for r in out.trace.results]
    )
    too_hard = frozenset(sid for sid, out in outcomes.items() if out.too_hard)
    failed = frozenset(sid for sid, out in outcomes.items() if out.failed)
    disagreements = frozenset(
        sid for sid, out in outcomes.items() if out.disagreement
    )

    final_outcome = outcomes[final_id]
    if final_outcome.hard_failure:
        digest = "; ".join(
            f"{sid}: {out.final_info.content[:80]!r}" for sid, out in outcomes.items()
        )
        raise ExecutionError(
            f"final sub-task {final_id!r} failed: "
            f"{final_outcome.representative.error}",
            partial_digest=digest,
        )
    source = evolve_source(iteration)
    base = final_outcome.representative.candidate
    candidate = CandidateAnswer(
        thinking=base.thinking,
        answer=base.answer,
        canonical=base.canonical,
        source=source,
        usage=usage,
    )
    return ExecutionTrace(
        per_subtask=per_subtask,
        candidate=candidate,
        too_hard_flags=too_hard,
        usage=usage,
        failed=failed,
        disagreements=disagreements,
    )


def plan_to_json(plan: PlanIR) -> dict[str, Any]:
    """Serialize a plan in the same schema the meta-agent emits."""

    def block_obj(bp: BlockParams) -> dict[str, Any]:
        obj: dict[str, Any] = {"block": bp.kind.value}
        if bp.temperature_override is not None:
            obj["temperature"] = bp.temperature_override
        if bp.n_samples is not None:
            obj["n_samples"] = bp.n_samples
        if bp.max_round is not None:
            obj["max_round"] = bp.max_round
        if bp.roles is not None:
            obj["roles"] = list(bp.roles)
        if bp.instruction_override is not None:
            obj["instruction"] = bp.instruction_override
        return obj

    return {
        "rationale": plan.rationale,
        "sub_tasks": [
            {
                "id": st.id,
                "instruction": st.instruction,
                "depends_on": list(st.depends_on),
                "final": st.is_final,
                "sub_mas": [
                    block_obj(stage[0])
                    if len(stage) == 1
                    else [block_obj(bp) for bp in stage]
                    for stage in st.sub_mas
                ],
            }
            for st in plan.sub_tasks
        ],
    }


def render_plan(plan: PlanIR) -> str:
    """Human-readable plan skeleton (used in prompts and the library)."""

    def block_sig(bp: BlockParams) -> str:
        parts = []
        if bp.n_samples is not None:
            parts.append(f"n={bp.n_samples}")
        if bp.max_round is not None:
            parts.append(f"rounds={bp.max_round}")
        if bp.roles is not None:
            parts.append(f"roles={len(bp.roles)}")
        if bp.temperature_override is not None:
            parts.append(f"temp={bp.temperature_override}")
        suffix = f"({', '.join(parts)})" if parts else ""
        return f"{bp.kind.value}{suffix}"

    lines = []
    for st in plan.sub_tasks:
        stages = " -> ".join(
            block_sig(stage[0]) if len(stage) == 1 else "[" + " || ".join(block_sig(b) for b in stage) + "]"
            for stage in st.sub_mas
        )
        deps = f" after {', '.join(st.depends_on)}" if st.depends_on else ""
        marker = " (final)" if st.is_final else ""
        lines.append(f"- {st.id}{marker}: {st.instruction} | {stages}{deps}")
    return "\n".join(lines)
