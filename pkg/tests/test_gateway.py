"""Gateway: prompt assembly, repair ladder, retries, mock determinism."""

from __future__ import annotations

import json

import pytest

from masforge.domain import AgentSpec, Info, task_info
from masforge.gateway import (
    DemoProvider,
    Gateway,
    MalformedOutputError,
    ProviderConfig,
    ProviderError,
    ProviderRequest,
    RunLog,
    ScriptedProvider,
    TransportError,
    build_prompt,
    extract_json_object,
    parse_fields,
)

from conftest import make_gateway


def _agent(fields=("answer",), role="helpful assistant", name="Agent", temp=0.0):
    return AgentSpec(role, "mock", temp, tuple(fields), name, "1")


# ---------------------------------------------------------------------------
# build_prompt
# ---------------------------------------------------------------------------


def test_build_prompt_skeleton():
    prompt = build_prompt(_agent(), [], "Say hi")
    assert "You are a helpful assistant." in prompt
    assert "Say hi" in prompt
    assert "['answer']" in prompt
    assert prompt.index("You are") < prompt.index("Say hi") < prompt.index("['answer']")


def test_build_prompt_orders_inputs_task_first():
    agent = _agent(("thinking", "answer"))
    task = task_info("What is 6 x 7?")
    thought = Info("thinking", "Other Agent 2", "try multiplying", "p", None, None, 0)
    prompt = build_prompt(agent, [thought, task], "Continue.")
    task_block = "task by User:\nWhat is 6 x 7?"
    think_block = "thinking by Other Agent 2:\ntry multiplying"
    assert prompt.index(task_block) < prompt.index(think_block) < prompt.index("Continue.")


def test_build_prompt_deterministic():
    agent = _agent(("thinking", "answer"))
    inputs = [task_info("Q"), Info("answer", "A 1", "42")]
    assert build_prompt(agent, inputs, "Do it") == build_prompt(agent, inputs, "Do it")


def test_build_prompt_golden_snapshot():
    prompt = build_prompt(_agent(("answer",)), [task_info("Q?")], "Answer it.")
    assert prompt == (
        "You are a helpful assistant.\n\n"
        "task by User:\nQ?\n\n"
        "Answer it.\n\n"
        "Reply EXACTLY with the following JSON format.\n"
        "['answer']\n"
        "DO NOT MISS ANY FIELDS AND MAKE SURE THE JSON FORMAT IS CORRECT!"
    )


def test_build_prompt_requires_instruction():
    with pytest.raises(ValueError):
        build_prompt(_agent(), [], "")


# ---------------------------------------------------------------------------
# parse_fields repair ladder
# ---------------------------------------------------------------------------


def test_parse_direct_json():
    assert parse_fields('{"answer":"B"}', ["answer"]) == {"answer": "B"}


def test_parse_embedded_span():
    raw = 'Sure! {"thinking":"x","answer":"C"} hope that helps'
    assert parse_fields(raw, ["thinking", "answer"]) == {"thinking": "x", "answer": "C"}


def test_parse_rejects_unstructured_text():
    with pytest.raises(MalformedOutputError):
        parse_fields("no structure at all", ["answer"])


def test_parse_regex_rung_recovers_broken_json():
    raw = '{"thinking": "fine", "answer": "D",'  # truncated object
    assert parse_fields(raw, ["thinking", "answer"]) == {"thinking": "fine", "answer": "D"}


def test_parse_missing_field_fails():
    with pytest.raises(MalformedOutputError):
        parse_fields('{"thinking":"x"}', ["thinking", "answer"])


def test_parse_coerces_non_string_values():
    assert parse_fields('{"answer": 42}', ["answer"]) == {"answer": "42"}


def test_parse_preserves_field_order():
    raw = '{"answer":"A","thinking":"t"}'
    parsed = parse_fields(raw, ["thinking", "answer"])
    assert list(parsed) == ["thinking", "answer"]


def _span_oracle(text):
    """All balanced brace spans, checked exhaustively for a valid parse."""
    best = None
    for i in range(len(text)):
        if text[i] != "{":
            continue
        for j in range(len(text) - 1, i, -1):
            if text[j] != "}":
                continue
            span = text[i : j + 1]
            try:
                obj = json.loads(span)
            except ValueError:
                continue
            if isinstance(obj, dict) and (best is None or len(span) > len(best[1])):
                best = (obj, span)
    return best[0] if best else None


@pytest.mark.parametrize(
    "raw",
    [
        'prefix {"a": 1} suffix',
        'two {"a": 1} objects {"b": {"c": 2}} here',
        'nested {"outer": {"inner": "x"}} tail',
        "no braces at all",
        "{broken",
    ],
)
def test_extract_json_object_matches_span_oracle(raw):
    assert extract_json_object(raw) == _span_oracle(raw)


# ---------------------------------------------------------------------------
# query_agent
# ---------------------------------------------------------------------------


def test_query_agent_scripted_echo(gateway):
    agent = gateway.make_agent(("thinking", "answer"), "Echo Agent")
    gateway.provider.script(
        agent_name="Echo Agent", replies=[{"thinking": "t", "answer": "A"}]
    )
    reply = gateway.query_agent(agent, [task_info("Q")], "Answer.")
    assert list(reply.fields) == ["thinking", "answer"]
    assert reply.fields["answer"].content == "A"
    assert reply.fields["answer"].author == "Echo Agent 1"
    assert reply.fields["answer"].prompt.startswith("You are a helpful assistant.")
    assert reply.usage.call_count == 1


def test_query_agent_critic_contract(gateway):
    agent = gateway.make_agent(("feedback", "correct"), "Critic Agent")
    gateway.provider.script(
        agent_name="Critic Agent", replies=[{"feedback": "ok", "correct": "True"}]
    )
    reply = gateway.query_agent(agent, [task_info("Q")], "Check.")
    assert reply.fields["correct"].content == "True"


def test_query_agent_iteration_idx_passthrough(gateway):
    agent = gateway.make_agent(("answer",), "Agent")
    reply = gateway.query_agent(agent, [task_info("Q")], "Go.", iteration_idx=3)
    assert reply.fields["answer"].iteration_idx == 3


@pytest.mark.parametrize("failures,max_retries", [
    (schedule, retries)
    for retries in (1, 2, 3, 4)
    for schedule in range(0, retries + 2)
])
def test_retry_ladder_schedules(failures, max_retries):
    """Exhaustive failure schedules: succeed iff failures < max attempts."""
    provider = ScriptedProvider()
    provider.script(
        replies=[TransportError(f"boom {i}") for i in range(failures)]
        + [{"answer": "ok"}]
    )
    log = RunLog()
    gw = Gateway(provider, ProviderConfig(model="mock", max_retries=max_retries), log)
    agent = gw.make_agent(("answer",), "Agent")
    allowed = max(1, max_retries)
    if failures < allowed:
        reply = gw.query_agent(agent, [task_info("Q")], "Go.")
        assert reply.fields["answer"].content == "ok"
        assert reply.usage.call_count == 1
        (entry,) = log.of_kind("agent_call")
        assert entry["attempts"] == failures + 1
    else:
        with pytest.raises(ProviderError):
            gw.query_agent(agent, [task_info("Q")], "Go.")
        (entry,) = log.of_kind("agent_call")
        assert entry["attempts"] == allowed
        assert entry["error"] == "provider"


def test_fails_twice_then_succeeds_with_three_attempts():
    provider = ScriptedProvider()
    provider.script(
        replies=[TransportError("1"), TransportError("2"), {"answer": "fine"}]
    )
    log = RunLog()
    gw = Gateway(provider, ProviderConfig(model="mock", max_retries=3), log)
    agent = gw.make_agent(("answer",), "Agent")
    reply = gw.query_agent(agent, [task_info("Q")], "Go.")
    assert reply.usage.call_count == 1
    assert log.of_kind("agent_call")[0]["attempts"] == 3


def test_malformed_output_raises_and_accounts_usage(gateway):
    agent = gateway.make_agent(("answer",), "Agent")
    gateway.provider.script(agent_name="Agent", replies=["utter nonsense"])
    with pytest.raises(MalformedOutputError) as exc_info:
        gateway.query_agent(agent, [task_info("Q")], "Go.")
    assert exc_info.value.raw == "utter nonsense"
    assert exc_info.value.usage.completion_tokens > 0


def test_agent_ids_unique_within_run(gateway):
    ids = {gateway.make_agent(("answer",), "Agent").id for _ in range(20)}
    assert len(ids) == 20


def test_reply_keys_match_output_fields_exactly(gateway):
    agent = gateway.make_agent(("a", "b", "c"), "Wide Agent")
    gateway.provider.script(
        agent_name="Wide Agent",
        replies=[{"c": "3", "b": "2", "a": "1", "extra": "ignored"}],
    )
    reply = gateway.query_agent(agent, [], "Fill fields.")
    assert list(reply.fields) == ["a", "b", "c"]


def test_mock_pipeline_determinism():
    def run_once():
        log = RunLog()
        gw = make_gateway(log=log)
        gw.provider.script(
            agent_name="Agent",
            replies=[{"answer": "one"}, {"answer": "two"}],
        )
        agent = gw.make_agent(("answer",), "Agent")
        gw.query_agent(agent, [task_info("Q")], "First.")
        gw.query_agent(agent, [task_info("Q")], "Second.")
        return json.dumps(log.entries, sort_keys=True)

    assert run_once() == run_once()


def test_config_validation():
    with pytest.raises(ValueError):
        ProviderConfig(max_retries=11)
    with pytest.raises(ValueError):
        ProviderConfig(timeout=0)


def test_demo_provider_is_pure():
    provider = DemoProvider()
    req = ProviderRequest("p", "m", 0.0, "Agent", "inst", ("thinking", "answer"))
    first = provider.complete(req)
    assert provider.complete(req) == first
    parsed = json.loads(first.text)
    assert set(parsed) == {"thinking", "answer"}


def test_run_log_file_mirroring(tmp_path):
    path = tmp_path / "log.jsonl"
    log = RunLog(path)
    log.append("agent_call", context="x")
    log.close()
    lines = path.read_text().splitlines()
    assert json.loads(lines[0])["context"] == "x"


def test_provider_config_from_dict_ignores_unknown_keys():
    config = ProviderConfig.from_dict(
        {"model": "m1", "timeout": 5, "pricing_note": "ignored"}
    )
    assert config.model == "m1"
    assert config.timeout == 5


def test_http_provider_system_message_toggle():
    from masforge.gateway import HttpProvider

    request = ProviderRequest(
        prompt="You are a helpful assistant.\n\ntask by User:\nQ?",
        model="m",
        temperature=0.0,
        agent_name="A",
        instruction="i",
        output_fields=("answer",),
    )
    inline = HttpProvider(ProviderConfig(endpoint="http://x", model="m"))
    assert inline._messages(request) == [{"role": "user", "content": request.prompt}]
    split = HttpProvider(
        ProviderConfig(endpoint="http://x", model="m", system_role_message=True)
    )
    messages = split._messages(request)
    assert messages[0] == {"role": "system", "content": "You are a helpful assistant."}
    assert messages[1]["role"] == "user"
    assert "task by User" in messages[1]["content"]
