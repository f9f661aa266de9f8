"""Shared test helpers: scripted gateways and plan/feedback builders."""

from __future__ import annotations

import json

import pytest

from masforge.gateway import Gateway, ProviderConfig, RunLog, ScriptedProvider


def auto_reply(request):
    """Universal fallback reply: valid for any agent the engine creates."""
    fields = request.output_fields
    if "plan" in fields:
        return {"thinking": "one-step design", "plan": json.dumps(simple_plan_obj())}
    if "selection" in fields:
        return {"thinking": "rank order looks right", "selection": "1"}
    if "correct" in fields:
        return {"feedback": "try again", "correct": "False"}
    if "feedback" in fields:
        return {
            "thinking": "review",
            "feedback": json.dumps(
                {
                    "solvability": {},
                    "completeness": {"verdict": "complete", "justification": "ok"},
                    "directives": "keep going",
                }
            ),
        }
    if "answer" in fields:
        return {"thinking": "auto reasoning", "answer": "A1"}
    return {name: f"auto {name}" for name in fields}


def simple_plan_obj(block: str = "CoT") -> dict:
    return {
        "rationale": "single step is enough",
        "sub_tasks": [
            {
                "id": "s1",
                "instruction": "solve the whole question",
                "depends_on": [],
                "final": True,
                "sub_mas": [{"block": block}],
            }
        ],
    }


def feedback_obj(sub_task_ids, verdict: str = "solvable") -> dict:
    return {
        "solvability": {
            sid: {"verdict": verdict, "justification": f"{sid} reviewed"}
            for sid in sub_task_ids
        },
        "completeness": {"verdict": "complete", "justification": "covers everything"},
        "directives": "no changes needed",
    }


def make_gateway(provider=None, *, default=auto_reply, log=None, **config_kwargs):
    if provider is None:
        provider = ScriptedProvider(default=default)
    config = ProviderConfig(model=config_kwargs.pop("model", "mock"), **config_kwargs)
    return Gateway(provider, config, log=log or RunLog())


@pytest.fixture
def scripted():
    return ScriptedProvider(default=auto_reply)


@pytest.fixture
def gateway(scripted):
    return Gateway(scripted, ProviderConfig(model="mock"), log=RunLog())
