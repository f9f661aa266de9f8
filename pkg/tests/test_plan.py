"""Plan IR: parsing, validation classes, and interpreter invariants."""

from __future__ import annotations

import json
import random
import threading

import pytest

from masforge.blocks import expected_agent_calls
from masforge.domain import BlockKind, BlockParams, task_info
from masforge.gateway import TransportError
from masforge.plan import (
    ExecutionError,
    PlanIR,
    PlanParseError,
    SubTask,
    execute_plan,
    parse_plan,
    plan_to_json,
    render_plan,
    validate_plan,
)

from conftest import make_gateway


TASK = task_info("Original question?")


def _plan_text(sub_tasks):
    return json.dumps({"rationale": "r", "sub_tasks": sub_tasks})


def _st(sid, *, deps=(), final=False, sub_mas=None, instruction=None):
    return {
        "id": sid,
        "instruction": instruction or f"do part {sid}",
        "depends_on": list(deps),
        "final": final,
        "sub_mas": sub_mas or [{"block": "CoT"}],
    }


# ---------------------------------------------------------------------------
# parse_plan
# ---------------------------------------------------------------------------


def test_parse_minimal_plan():
    plan = parse_plan(_plan_text([_st("only", final=True)]))
    assert len(plan.sub_tasks) == 1
    assert plan.sub_tasks[0].is_final
    assert plan.sub_tasks[0].sub_mas == ((BlockParams(BlockKind.COT),),)


def test_parse_rejects_unknown_block_kind():
    text = _plan_text([_st("s", final=True, sub_mas=[{"block": "Reflexion"}])])
    with pytest.raises(PlanParseError, match="unknown block kind"):
        parse_plan(text)


def test_parse_four_subtask_plan_with_tuned_blocks():
    # CoT, CoT -> CoT-SC(5) -> Debate(2 roles, 2 rounds), chained
    text = _plan_text(
        [
            _st("t1"),
            _st("t2", deps=["t1"]),
            _st("t3", deps=["t2"], sub_mas=[{"block": "CoT-SC", "n_samples": 5}]),
            _st(
                "t4",
                deps=["t3"],
                final=True,
                sub_mas=[
                    {
                        "block": "Debate",
                        "max_round": 2,
                        "roles": ["math professor", "graduate teacher"],
                    }
                ],
            ),
        ]
    )
    plan = parse_plan(text)
    assert plan.ids() == ("t1", "t2", "t3", "t4")
    assert plan.sub_tasks[2].sub_mas[0][0].n_samples == 5
    debate = plan.sub_tasks[3].sub_mas[0][0]
    assert debate.max_round == 2
    assert debate.roles == ("math professor", "graduate teacher")
    assert validate_plan(plan) == []


def test_parse_plan_inside_prose():
    text = "Here is my design: " + _plan_text([_st("s", final=True)]) + " done."
    assert parse_plan(text).ids() == ("s",)


def test_parse_parallel_stage_and_sequential_chain():
    text = _plan_text(
        [
            _st(
                "s",
                final=True,
                sub_mas=[
                    [{"block": "CoT"}, {"block": "Debate", "max_round": 1}],
                    {"block": "Self-Refine", "max_round": 1},
                ],
            )
        ]
    )
    plan = parse_plan(text)
    assert len(plan.sub_tasks[0].sub_mas) == 2
    assert len(plan.sub_tasks[0].sub_mas[0]) == 2


def test_parse_reports_element_path():
    text = _plan_text([_st("ok"), _st("bad", sub_mas=[{"block": 42}])])
    with pytest.raises(PlanParseError) as err:
        parse_plan(text)
    assert "sub_tasks[1].sub_mas[0]" in str(err.value)


def test_parse_ignores_unknown_keys():
    tasks = [_st("s", final=True)]
    tasks[0]["mystery"] = {"nested": True}
    plan = parse_plan(_plan_text(tasks))
    assert plan.ids() == ("s",)


def test_parse_duplicate_ids_rejected():
    with pytest.raises(PlanParseError, match="duplicate"):
        parse_plan(_plan_text([_st("s"), _st("s", final=True)]))


def test_parse_no_json_rejected():
    with pytest.raises(PlanParseError, match="no JSON object"):
        parse_plan("I will decompose the task into parts.")


# ---------------------------------------------------------------------------
# validate_plan: every seeded violation class
# ---------------------------------------------------------------------------


def _plan(*sub_tasks):
    return PlanIR(sub_tasks=tuple(sub_tasks))


def _sub(sid, *, deps=(), final=False, stages=None, instruction="work"):
    return SubTask(
        id=sid,
        instruction=instruction,
        depends_on=tuple(deps),
        sub_mas=stages or ((BlockParams(BlockKind.COT),),),
        is_final=final,
    )


def test_validate_two_cycle():
    plan = _plan(_sub("a", deps=["b"]), _sub("b", deps=["a"], final=True))
    assert "cycle: a,b" in validate_plan(plan)


def test_validate_self_loop():
    plan = _plan(_sub("a", deps=["a"], final=True))
    assert any(v.startswith("cycle: a") for v in validate_plan(plan))


def test_validate_dangling_dependency():
    plan = _plan(_sub("a", deps=["ghost"], final=True))
    assert "unknown dependency 'ghost' in sub-task 'a'" in validate_plan(plan)


def test_validate_dual_final_names_both():
    plan = _plan(_sub("t3", final=True), _sub("t4", final=True))
    assert "multiple final sub-tasks: t3, t4" in validate_plan(plan)


def test_validate_no_final():
    assert "no final sub-task" in validate_plan(_plan(_sub("a")))


def test_validate_unknown_block_kind():
    stage = ((BlockParams.__new__(BlockParams),),)
    object.__setattr__(stage[0][0], "kind", "Reflexion")
    for field in ("temperature_override", "n_samples", "max_round", "roles", "instruction_override"):
        object.__setattr__(stage[0][0], field, None)
    plan = _plan(_sub("a", final=True, stages=stage))
    assert any("unknown block kind" in v for v in validate_plan(plan))


@pytest.mark.parametrize(
    "params,fragment",
    [
        (BlockParams(BlockKind.DEBATE, max_round=0), "max_round must be >= 1"),
        (BlockParams(BlockKind.SELF_REFINE, max_round=0), "max_round must be >= 1"),
        (BlockParams(BlockKind.COT_SC, n_samples=0), "n_samples must be >= 1"),
        (BlockParams(BlockKind.COT, n_samples=3), "n_samples only applies to CoT-SC"),
        (BlockParams(BlockKind.COT, max_round=2), "max_round only applies"),
        (BlockParams(BlockKind.COT_SC, roles=("x",)), "roles only apply to Debate"),
        (BlockParams(BlockKind.DEBATE, roles=()), "roles must be non-empty"),
        (BlockParams(BlockKind.COT, temperature_override=2.5), "outside [0, 2]"),
    ],
)
def test_validate_parameter_ranges(params, fragment):
    plan = _plan(_sub("a", final=True, stages=((params,),)))
    assert any(fragment in v for v in validate_plan(plan))


@pytest.mark.parametrize(
    "params",
    [
        BlockParams(BlockKind.DEBATE, max_round=1),
        BlockParams(BlockKind.SELF_REFINE, max_round=1),
        BlockParams(BlockKind.COT_SC, n_samples=1),
        BlockParams(BlockKind.COT, temperature_override=0.0),
        BlockParams(BlockKind.COT, temperature_override=2.0),
    ],
)
def test_validate_boundary_values_accepted(params):
    plan = _plan(_sub("a", final=True, stages=((params,),)))
    assert validate_plan(plan) == []


def test_validate_empty_instruction():
    plan = _plan(_sub("a", final=True, instruction="  "))
    assert "sub-task 'a': empty instruction" in validate_plan(plan)


def test_validate_returns_all_violations():
    plan = _plan(
        _sub("a", deps=["b"]),
        _sub("b", deps=["a"], final=True, instruction=""),
        _sub("c", deps=["nope"], final=True),
    )
    violations = validate_plan(plan)
    assert len(violations) >= 3


# ---------------------------------------------------------------------------
# execute_plan
# ---------------------------------------------------------------------------


def test_execute_degenerate_plan(gateway):
    gateway.provider.script(
        agent_name="Chain-of-Thought Agent",
        replies=[{"thinking": "t", "answer": "7"}],
    )
    plan = _plan(_sub("s1", final=True))
    trace = execute_plan(plan, TASK, gateway, iteration=1)
    assert trace.candidate.answer == "7"
    assert trace.candidate.source == "evolve-iter-1"
    assert len(gateway.log.of_kind("agent_call")) == 1
    assert set(trace.per_subtask) == {"s1"}


def test_execute_chain_forwards_answer_content(gateway):
    gateway.provider.script(
        instruction_contains="part one",
        replies=[{"thinking": "t", "answer": "ANSWER-OF-T1"}],
    )
    plan = _plan(
        _sub("t1", instruction="part one"),
        _sub("t2", deps=["t1"], final=True, instruction="part two"),
    )
    execute_plan(plan, TASK, gateway, iteration=1)
    t2_call = [e for e in gateway.log.of_kind("agent_call") if e["context"] == "t2"][0]
    assert "ANSWER-OF-T1" in t2_call["prompt"]
    assert "sub-task t1 output by" in t2_call["prompt"]


def test_execute_diamond_call_counts_and_concurrency():
    # t1 -> {t2, t3} -> t4 with per-block call counts 1, 1, 5, 5
    barrier = threading.Barrier(2, timeout=10)
    provider_default_hits = []

    def barrier_reply(request):
        # first call of t2 and t3 must overlap for the barrier to release
        if "branch work" in request.instruction and len(provider_default_hits) < 2:
            provider_default_hits.append(request.agent_name)
            barrier.wait()
        return {"thinking": "t", "answer": "x"}

    gw = make_gateway(default=barrier_reply)
    plan = _plan(
        _sub("t1"),
        _sub("t2", deps=["t1"], instruction="branch work left"),
        _sub(
            "t3",
            deps=["t1"],
            instruction="branch work right",
            stages=((BlockParams(BlockKind.COT_SC, n_samples=5),),),
        ),
        _sub(
            "t4",
            deps=["t2", "t3"],
            final=True,
            stages=((BlockParams(BlockKind.COT_SC, n_samples=5),),),
        ),
    )
    trace = execute_plan(plan, TASK, gw, iteration=2, parallel=True)
    calls = gw.log.of_kind("agent_call")
    assert len(calls) == 12
    assert trace.candidate.source == "evolve-iter-2"
    # dependency edges respected in the tick ledger
    ticks = {
        sid: [
            (e["start_tick"], e["end_tick"]) for e in calls if e["context"] == sid
        ]
        for sid in ("t1", "t2", "t3", "t4")
    }
    for upstream, downstream in [("t1", "t2"), ("t1", "t3"), ("t2", "t4"), ("t3", "t4")]:
        assert max(t[1] for t in ticks[upstream]) < min(t[0] for t in ticks[downstream])


def test_execute_requires_valid_plan(gateway):
    plan = _plan(_sub("a", deps=["a"], final=True))
    with pytest.raises(ValueError, match="failed validation"):
        execute_plan(plan, TASK, gateway, iteration=1)


def test_execute_flags_too_hard_subtasks(gateway):
    gateway.provider.script(
        instruction_contains="hard part",
        replies=[{"thinking": "t", "answer": "this is [TOO_HARD] for me"}],
    )
    plan = _plan(
        _sub("h", instruction="hard part"),
        _sub("f", deps=["h"], final=True),
    )
    trace = execute_plan(plan, TASK, gateway, iteration=1)
    assert trace.too_hard_flags == {"h"}


def test_execute_nonfinal_failure_degrades():
    gw = make_gateway(max_retries=1)
    gw.provider.script(
        instruction_contains="fragile", replies=[TransportError("down")]
    )
    plan = _plan(
        _sub("fragile1", instruction="fragile step"),
        _sub("fin", deps=["fragile1"], final=True),
    )
    trace = execute_plan(plan, TASK, gw, iteration=1)
    assert trace.failed == {"fragile1"}
    assert set(trace.per_subtask) == {"fragile1", "fin"}  # coverage kept
    assert trace.per_subtask["fragile1"].final.content == ""
    assert trace.candidate.canonical != ""


def test_execute_final_hard_failure_raises():
    gw = make_gateway(max_retries=1)
    gw.provider.script(
        instruction_contains="last step", replies=[TransportError("down")]
    )
    plan = _plan(
        _sub("a"),
        _sub("z", deps=["a"], final=True, instruction="last step"),
    )
    with pytest.raises(ExecutionError):
        execute_plan(plan, TASK, gw, iteration=1)


def test_execute_final_malformed_yields_empty_candidate(gateway):
    gateway.provider.script(
        instruction_contains="last step", replies=["garbled nonsense"]
    )
    plan = _plan(_sub("z", final=True, instruction="last step"))
    trace = execute_plan(plan, TASK, gateway, iteration=3)
    assert trace.candidate.canonical == ""
    assert trace.candidate.source == "evolve-iter-3"


def test_execute_parallel_stage_disagreement_flagged(gateway):
    gateway.provider.script(
        agent_name="Chain-of-Thought Agent",
        replies=[{"thinking": "t", "answer": "yes"}, {"thinking": "t", "answer": "no"}],
    )
    plan = _plan(
        _sub(
            "p",
            final=True,
            stages=(
                (BlockParams(BlockKind.COT), BlockParams(BlockKind.COT)),
            ),
        )
    )
    trace = execute_plan(plan, TASK, gateway, iteration=1)
    assert trace.disagreements == {"p"}
    assert trace.candidate.answer == "yes"  # first block of last stage represents


def test_execute_sequential_stages_chain_outputs(gateway):
    gateway.provider.script(
        agent_name="Chain-of-Thought Agent",
        replies=[
            {"thinking": "t", "answer": "stage-one-out"},
            {"thinking": "t", "answer": "final-out"},
        ],
    )
    plan = _plan(
        _sub(
            "s",
            final=True,
            stages=((BlockParams(BlockKind.COT),), (BlockParams(BlockKind.COT),)),
        )
    )
    trace = execute_plan(plan, TASK, gateway, iteration=1)
    second_prompt = gateway.log.of_kind("agent_call")[1]["prompt"]
    assert "stage-one-out" in second_prompt
    assert trace.candidate.answer == "final-out"


def test_execute_deterministic_under_mock():
    def run():
        gw = make_gateway()
        plan = _plan(
            _sub("a"),
            _sub("b", deps=["a"], final=True,
                 stages=((BlockParams(BlockKind.SELF_REFINE, max_round=1),),)),
        )
        trace = execute_plan(plan, TASK, gw, iteration=1)
        return json.dumps(gw.log.entries, sort_keys=True), trace.candidate.answer

    assert run() == run()


def test_execute_grounded_blocks_only(gateway):
    plan = _plan(
        _sub("a", stages=((BlockParams(BlockKind.DEBATE, max_round=1, roles=("r",)),),)),
        _sub("b", deps=["a"], final=True,
             stages=((BlockParams(BlockKind.SELF_REFINE, max_round=1),),)),
    )
    execute_plan(plan, TASK, gateway, iteration=1)
    agents = {e["agent"] for e in gateway.log.of_kind("agent_call")}
    assert agents <= {
        "Chain-of-Thought Agent",
        "Debate Agent",
        "Final Decision Agent",
        "Critic Agent",
    }


# ---------------------------------------------------------------------------
# Random DAG property: topology respected, call totals exact
# ---------------------------------------------------------------------------


def _random_plan(rng: random.Random) -> PlanIR:
    n = rng.randint(1, 6)
    subs = []
    for i in range(n):
        deps = [f"n{j}" for j in range(i) if rng.random() < 0.4]
        kind = rng.choice(list(BlockKind))
        if kind is BlockKind.COT:
            params = BlockParams(kind)
        elif kind is BlockKind.COT_SC:
            params = BlockParams(kind, n_samples=rng.randint(1, 4))
        elif kind is BlockKind.DEBATE:
            params = BlockParams(
                kind,
                roles=tuple(f"r{x}" for x in range(rng.randint(1, 3))),
                max_round=rng.randint(1, 3),
            )
        else:
            params = BlockParams(kind, max_round=rng.randint(1, 3))
        subs.append(
            SubTask(
                id=f"n{i}",
                instruction=f"step {i}",
                depends_on=tuple(deps),
                sub_mas=((params,),),
                is_final=i == n - 1,
            )
        )
    return PlanIR(sub_tasks=tuple(subs))


def test_random_dags_respect_topology_and_call_totals():
    rng = random.Random(20240517)
    for _ in range(100):
        plan = _random_plan(rng)
        assert validate_plan(plan) == []
        gw = make_gateway()  # default critic never accepts: worst-case counts
        execute_plan(plan, TASK, gw, iteration=1, parallel=True, max_workers=3)
        calls = gw.log.of_kind("agent_call")
        expected_total = sum(
            expected_agent_calls(bp)
            for st in plan.sub_tasks
            for stage in st.sub_mas
            for bp in stage
        )
        assert len(calls) == expected_total
        ticks = {}
        for entry in calls:
            ticks.setdefault(entry["context"], []).append(
                (entry["start_tick"], entry["end_tick"])
            )
        for st in plan.sub_tasks:
            for dep in st.depends_on:
                assert max(t[1] for t in ticks[dep]) < min(t[0] for t in ticks[st.id])


def test_render_plan_skeleton():
    plan = _plan(
        _sub("a", stages=((BlockParams(BlockKind.COT_SC, n_samples=5),),)),
        _sub("b", deps=["a"], final=True),
    )
    text = render_plan(plan)
    assert "CoT-SC(n=5)" in text
    assert "b (final)" in text
    assert "after a" in text


def test_plan_json_round_trips_through_parser():
    plan = _plan(
        _sub(
            "a",
            stages=(
                (BlockParams(BlockKind.COT_SC, n_samples=5, temperature_override=0.7),),
                (
                    BlockParams(BlockKind.COT),
                    BlockParams(BlockKind.DEBATE, roles=("x", "y"), max_round=2),
                ),
            ),
        ),
        _sub("b", deps=["a"], final=True,
             stages=((BlockParams(BlockKind.SELF_REFINE, max_round=3,
                                  instruction_override="polish"),),)),
    )
    assert parse_plan(json.dumps(plan_to_json(plan))) == plan
