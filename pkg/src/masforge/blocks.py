"""The four building blocks: CoT, CoT-SC, Debate, Self-Refine.

Each block is a self-contained strategy runnable on the whole task or on a
sub-task inside a plan (``extra_inputs`` carries upstream outputs). Blocks
never raise on provider trouble: a failed block yields a candidate with an
empty canonical answer so the candidate pool keeps its expected size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .domain import (
    BlockKind,
    BlockParams,
    CandidateAnswer,
    EmptyInputError,
    Info,
    TaskKind,
    Usage,
)
from .gateway import Gateway, MalformedOutputError, ProviderError
from .prompts import DEFAULT, Catalog


@dataclass(frozen=True)
class BlockResult:
    """Outcome of one block run, with full per-call provenance."""

    candidate: CandidateAnswer
    agent_calls: int
    per_agent_outputs: tuple[Info, ...]
    answer_info: Info | None = None
    error: str | None = None
    hard_failure: bool = False


def majority_vote(answers: Sequence[str]) -> str:
    """Most frequent answer; ties go to the earliest first occurrence."""
    if not answers:
        raise EmptyInputError("majority_vote needs at least one answer")
    counts: dict[str, int] = {}
    first: dict[str, int] = {}
    for idx, answer in enumerate(answers):
        counts[answer] = counts.get(answer, 0) + 1
        first.setdefault(answer, idx)
    return max(counts, key=lambda a: (counts[a], -first[a]))


def _failed(
    source: str,
    calls: int,
    outputs: list[Info],
    exc: Exception,
    usage: Usage,
) -> BlockResult:
    usage = usage + getattr(exc, "usage", Usage())
    candidate = CandidateAnswer(
        thinking=f"[{source} failed: {exc}]",
        answer="",
        canonical="",
        source=source,
        usage=usage,
    )
    return BlockResult(
        candidate,
        calls,
        tuple(outputs),
        answer_info=None,
        error=str(exc),
        hard_failure=isinstance(exc, ProviderError),
    )


def run_cot(
    task: Info,
    params: BlockParams,
    gateway: Gateway,
    *,
    extra_inputs: Sequence[Info] = (),
    instruction: str | None = None,
    task_kind: TaskKind = TaskKind.FREE_TEXT,
    context: str = "",
    catalog: Catalog = DEFAULT,
) -> BlockResult:
    """One step-by-step reasoning agent at temperature 0."""
    instr = params.instruction_override or instruction or catalog["cot.instruction"]
    temperature = (
        params.temperature_override if params.temperature_override is not None else 0.0
    )
    agent = gateway.make_agent(
        ("thinking", "answer"), "Chain-of-Thought Agent", temperature=temperature
    )
    try:
        reply = gateway.query_agent(agent, [task, *extra_inputs], instr, context=context)
    except (ProviderError, MalformedOutputError) as exc:
        return _failed("CoT", 1, [], exc, Usage())
    answer = reply.fields["answer"]
    candidate = CandidateAnswer.make(
        reply.fields["thinking"].content, answer.content, "CoT", reply.usage, task_kind
    )
    return BlockResult(candidate, 1, tuple(reply.fields.values()), answer_info=answer)


def run_cot_sc(
    task: Info,
    params: BlockParams,
    gateway: Gateway,
    *,
    extra_inputs: Sequence[Info] = (),
    instruction: str | None = None,
    task_kind: TaskKind = TaskKind.FREE_TEXT,
    context: str = "",
    catalog: Catalog = DEFAULT,
) -> BlockResult:
    """N independent CoT samples at higher temperature, majority-voted.

    Samples that share an answer string overwrite the remembered thinking,
    so the winning answer is returned with the latest thinking that
    produced it. Failed samples contribute no vote.
    """
    n = params.n_samples if params.n_samples is not None else 5
    instr = params.instruction_override or instruction or catalog["cot.instruction"]
    temperature = (
        params.temperature_override if params.temperature_override is not None else 0.5
    )
    used = Usage()
    outputs: list[Info] = []
    votes: list[str] = []
    thinking_by_answer: dict[str, Info] = {}
    info_by_answer: dict[str, Info] = {}
    calls = 0
    last_exc: Exception | None = None
    for _ in range(n):
        agent = gateway.make_agent(
            ("thinking", "answer"), "Chain-of-Thought Agent", temperature=temperature
        )
        calls += 1
        try:
            reply = gateway.query_agent(
                agent, [task, *extra_inputs], instr, context=context
            )
        except (ProviderError, MalformedOutputError) as exc:
            used = used + getattr(exc, "usage", Usage())
            last_exc = exc
            continue
        used = used + reply.usage
        outputs.extend(reply.fields.values())
        answer = reply.fields["answer"]
        votes.append(answer.content)
        thinking_by_answer[answer.content] = reply.fields["thinking"]
        info_by_answer[answer.content] = answer
    if not votes:
        return _failed("CoT-SC", calls, outputs, last_exc or ProviderError("no votes"), used)
    winner = majority_vote(votes)
    candidate = CandidateAnswer.make(
        thinking_by_answer[winner].content, winner, "CoT-SC", used, task_kind
    )
    return BlockResult(
        candidate, calls, tuple(outputs), answer_info=info_by_answer[winner]
    )


def run_debate(
    task: Info,
    params: BlockParams,
    gateway: Gateway,
    *,
    extra_inputs: Sequence[Info] = (),
    instruction: str | None = None,
    task_kind: TaskKind = TaskKind.FREE_TEXT,
    context: str = "",
    catalog: Catalog = DEFAULT,
) -> BlockResult:
    """Role-played debaters over synchronous rounds, then a final decision.

    Round 0 debaters see only the task (plus sub-task context); later
    rounds see the debater's own previous thinking first, then the other
    debaters' in index order. The decision agent reads the last round's
    thinking and answers at temperature 0.
    """
    roles = params.roles or ("Debate Agent", "Debate Agent")
    rounds = params.max_round if params.max_round is not None else 2
    initial_instr = (
        params.instruction_override or instruction or catalog["debate.initial"]
    )
    temperature = (
        params.temperature_override if params.temperature_override is not None else 0.5
    )
    debaters = [
        gateway.make_agent(
            ("thinking", "answer"), "Debate Agent", role=role, temperature=temperature
        )
        for role in roles
    ]
    final_agent = gateway.make_agent(
        ("thinking", "answer"), "Final Decision Agent", temperature=0.0
    )
    used = Usage()
    outputs: list[Info] = []
    calls = 0
    all_thinking: list[list[Info]] = [[] for _ in range(rounds)]
    all_answer: list[list[Info]] = [[] for _ in range(rounds)]
    for r in range(rounds):
        for i, debater in enumerate(debaters):
            if r == 0:
                inputs = [task, *extra_inputs]
                instr = initial_instr
            else:
                prev = all_thinking[r - 1]
                inputs = [task, *extra_inputs, prev[i], *prev[:i], *prev[i + 1 :]]
                instr = catalog["debate.round"]
            calls += 1
            try:
                reply = gateway.query_agent(
                    debater, inputs, instr, iteration_idx=r, context=context
                )
            except (ProviderError, MalformedOutputError) as exc:
                return _failed("Debate", calls, outputs, exc, used)
            used = used + reply.usage
            outputs.extend(reply.fields.values())
            all_thinking[r].append(reply.fields["thinking"])
            all_answer[r].append(reply.fields["answer"])
    calls += 1
    final_inputs = [task, *extra_inputs, *all_thinking[-1], *all_answer[-1]]
    try:
        reply = gateway.query_agent(
            final_agent,
            final_inputs,
            catalog["debate.final"],
            iteration_idx=rounds,
            context=context,
        )
    except (ProviderError, MalformedOutputError) as exc:
        return _failed("Debate", calls, outputs, exc, used)
    used = used + reply.usage
    outputs.extend(reply.fields.values())
    answer = reply.fields["answer"]
    candidate = CandidateAnswer.make(
        reply.fields["thinking"].content, answer.content, "Debate", used, task_kind
    )
    return BlockResult(candidate, calls, tuple(outputs), answer_info=answer)


def run_self_refine(
    task: Info,
    params: BlockParams,
    gateway: Gateway,
    *,
    extra_inputs: Sequence[Info] = (),
    instruction: str | None = None,
    task_kind: TaskKind = TaskKind.FREE_TEXT,
    context: str = "",
    catalog: Catalog = DEFAULT,
) -> BlockResult:
    """Initial attempt, then critic/refine rounds until the critic accepts.

    The loop exits only on a byte-exact 'True' in the critic's 'correct'
    field. Each refinement sees the full history of attempts and feedback.
    """
    n_max = params.max_round if params.max_round is not None else 3
    initial_instr = (
        params.instruction_override or instruction or catalog["self_refine.initial"]
    )
    temperature = (
        params.temperature_override if params.temperature_override is not None else 0.0
    )
    cot_agent = gateway.make_agent(
        ("thinking", "answer"), "Chain-of-Thought Agent", temperature=temperature
    )
    critic_agent = gateway.make_agent(
        ("feedback", "correct"), "Critic Agent", temperature=0.0
    )
    used = Usage()
    outputs: list[Info] = []
    cot_inputs: list[Info] = [task, *extra_inputs]
    calls = 1
    try:
        reply = gateway.query_agent(
            cot_agent, cot_inputs, initial_instr, iteration_idx=0, context=context
        )
    except (ProviderError, MalformedOutputError) as exc:
        return _failed("Self-Refine", calls, outputs, exc, used)
    used = used + reply.usage
    outputs.extend(reply.fields.values())
    thinking, answer = reply.fields["thinking"], reply.fields["answer"]
    for i in range(n_max):
        calls += 1
        try:
            critique = gateway.query_agent(
                critic_agent,
                [task, *extra_inputs, thinking, answer],
                catalog["self_refine.critic"],
                iteration_idx=i,
                context=context,
            )
        except (ProviderError, MalformedOutputError) as exc:
            return _failed("Self-Refine", calls, outputs, exc, used)
        used = used + critique.usage
        outputs.extend(critique.fields.values())
        if critique.fields["correct"].content == "True":
            break
        cot_inputs.extend([thinking, answer, critique.fields["feedback"]])
        calls += 1
        try:
            reply = gateway.query_agent(
                cot_agent,
                cot_inputs,
                catalog["self_refine.reflect"],
                iteration_idx=i + 1,
                context=context,
            )
        except (ProviderError, MalformedOutputError) as exc:
            return _failed("Self-Refine", calls, outputs, exc, used)
        used = used + reply.usage
        outputs.extend(reply.fields.values())
        thinking, answer = reply.fields["thinking"], reply.fields["answer"]
    candidate = CandidateAnswer.make(
        thinking.content, answer.content, "Self-Refine", used, task_kind
    )
    return BlockResult(candidate, calls, tuple(outputs), answer_info=answer)


_RUNNERS = {
    BlockKind.COT: run_cot,
    BlockKind.COT_SC: run_cot_sc,
    BlockKind.DEBATE: run_debate,
    BlockKind.SELF_REFINE: run_self_refine,
}


def run_block(
    params: BlockParams,
    task: Info,
    gateway: Gateway,
    *,
    extra_inputs: Sequence[Info] = (),
    instruction: str | None = None,
    task_kind: TaskKind = TaskKind.FREE_TEXT,
    context: str = "",
    catalog: Catalog = DEFAULT,
) -> BlockResult:
    runner = _RUNNERS[params.kind]
    return runner(
        task,
        params,
        gateway,
        extra_inputs=extra_inputs,
        instruction=instruction,
        task_kind=task_kind,
        context=context,
        catalog=catalog,
    )


def default_block_configs() -> tuple[BlockParams, ...]:
    """One of each block with the stock parameterization."""
    return (
        BlockParams(BlockKind.COT),
        BlockParams(BlockKind.COT_SC, n_samples=5),
        BlockParams(
            BlockKind.DEBATE, roles=("Debate Agent", "Debate Agent"), max_round=2
        ),
        BlockParams(BlockKind.SELF_REFINE, max_round=3),
    )


def expected_agent_calls(params: BlockParams, stop_round: int | None = None) -> int:
    """Closed-form call count for a block parameterization.

    ``stop_round`` is the 1-based critic round at which Self-Refine stops
    early (None means the critic never accepts).
    """
    if params.kind is BlockKind.COT:
        return 1
    if params.kind is BlockKind.COT_SC:
        return params.n_samples if params.n_samples is not None else 5
    if params.kind is BlockKind.DEBATE:
        k = len(params.roles or ("Debate Agent", "Debate Agent"))
        r = params.max_round if params.max_round is not None else 2
        return r * k + 1
    n_max = params.max_round if params.max_round is not None else 3
    if stop_round is None:
        return 1 + 2 * n_max
    return 2 * stop_round
