"""Prompt catalog: default instruction texts, keyed "<section>.<slot>".

The defaults below can be overridden by a JSON file mapping keys to
replacement texts (``Catalog.load``). Every prompt the engine sends is
recorded verbatim in the run log, so edits here are fully auditable.
"""

from __future__ import annotations

import json
from pathlib import Path

_STEP_BY_STEP = "Please think step by step and then solve the task."

_PLAN_SCHEMA = """\
Emit the design in the 'plan' field as a JSON object with this exact shape:
{"rationale": "<why this decomposition>",
 "sub_tasks": [
   {"id": "t1", "instruction": "<what to solve>", "depends_on": [],
    "final": false, "sub_mas": [{"block": "CoT"}]},
   ...]}
Each entry of "sub_mas" is one stage: either a single block object, or a list
of block objects that run in parallel on the same input. Sequential stages
feed each stage's output into the next. A block object is
{"block": "CoT" | "CoT-SC" | "Debate" | "Self-Refine"} plus optional
"temperature", "n_samples" (CoT-SC only), "max_round" (Debate or Self-Refine),
"roles" (Debate only, a list of debater role descriptions), "instruction"."""

_DESIGN_RULES = """\
Rules:
- Do not solve the task yourself and do not leak an expected answer; design \
the system that will produce the answer.
- Each sub-task must be specific and detailed enough for its sub-MAS to \
solve, and must state explicitly how it builds on the outputs of the \
sub-tasks it depends on.
- Exactly one sub-task is final; its answer must be the answer to the \
original task.
- Do not invent new blocks and do not drop the given ones without grounding; \
you may only adjust their parameters (temperature, number of rounds, roles, \
number of samples) and how they connect.
- Use the accumulated experience below: keep what worked, revise what did \
not, and further decompose any sub-task that proved too hard."""

_BLOCK_INVENTORY = """\
Available building blocks:
- CoT: one step-by-step reasoning agent.
- CoT-SC: several CoT samples at higher temperature, majority-voted.
- Debate: role-played debaters exchange solutions over rounds, then a final \
decision agent concludes.
- Self-Refine: an initial answer is repeatedly criticized and revised until \
the critic accepts it."""

DEFAULT_CATALOG: dict[str, str] = {
    # building blocks
    "cot.instruction": _STEP_BY_STEP,
    "debate.initial": _STEP_BY_STEP,
    "debate.round": (
        "Given solutions to the problem from other agents, consider their "
        "opinions as additional advice. Please think carefully and provide an "
        "updated answer. Put your thinking process in the 'thinking' field "
        "and the updated answer in the 'answer' field."
    ),
    "debate.final": (
        "Given all the above thinking and answers, reason over them carefully "
        "and provide a final answer. Put your thinking process in the "
        "'thinking' field and the final answer in the 'answer' field."
    ),
    "self_refine.initial": _STEP_BY_STEP,
    "self_refine.reflect": (
        "Given previous attempts and feedback, carefully consider where you "
        "could go wrong in your latest attempt. Using insights from previous "
        "attempts, try to solve the task better."
    ),
    "self_refine.critic": (
        "Please review the answer above and criticize on where might be "
        "wrong. If you are absolutely sure it is correct, output exactly "
        "'True' in 'correct'."
    ),
    # plan execution
    "plan.too_hard_note": (
        "If this sub-task is beyond your capabilities, include the marker "
        "[TOO_HARD] in your answer."
    ),
    # meta-agent: design
    "meta.design": (
        "You are coordinating a team of LLM agents to solve the task below.\n"
        + _BLOCK_INVENTORY
        + "\n\nDecompose the task into manageable yet interdependent "
        "sub-tasks and assign each one a sub-MAS built only from those "
        "blocks. A sub-MAS may be a single block, a sequential chain of "
        "blocks, or parallel blocks that all process the same input.\n"
        + _DESIGN_RULES
        + "\n\n"
        + _PLAN_SCHEMA
    ),
    "meta.design_no_decompose": (
        "You are coordinating a team of LLM agents to solve the task below.\n"
        + _BLOCK_INVENTORY
        + "\n\nPropose a configuration for the whole task as a single "
        "sub-task; do not decompose the task. Choose the most suitable "
        "block or block combination for it and tune the parameters.\n"
        + _DESIGN_RULES
        + "\n\n"
        + _PLAN_SCHEMA
    ),
    "meta.design_retry": (
        "Your previous design was rejected:\n{violations}\n"
        "Emit a corrected design that fixes every issue, in the same JSON "
        "shape."
    ),
    # meta-agent: feedback
    "meta.feedback": (
        "Critically evaluate the multi-agent design that just ran, using the "
        "sub-task outputs and the individual agent outputs below.\n\n"
        "For each sub-task, judge its solvability:\n"
        "- \"solvable\": its sub-MAS produced a reliable, complete output; "
        "it should stay unchanged.\n"
        "- \"too-hard\": the output contains the [TOO_HARD] marker, or the "
        "sub-task clearly exceeds the assigned sub-MAS; it must be further "
        "decomposed.\n"
        "- \"decomposition-issue\": the sub-task itself is badly posed "
        "(missing required inputs, vague, or conflating goals); the "
        "decomposition should change.\n"
        "- \"block-issue\": the sub-task is fine but its agents or block "
        "settings underperformed (wrong block choice, poor instruction or "
        "temperature); the sub-MAS should change.\n"
        "Justify each verdict. Check that outputs from earlier sub-tasks "
        "were actually incorporated where later sub-tasks needed them.\n\n"
        "Then judge completeness: \"complete\" if the union of sub-tasks "
        "covers all information the original task needs, otherwise "
        "\"missing-info\", saying what is missing. Finally give concrete "
        "directives for the next design.\n\n"
        "Emit the review in the 'feedback' field as JSON:\n"
        "{\"solvability\": {\"<sub-task id>\": {\"verdict\": \"...\", "
        "\"justification\": \"...\"}},\n"
        " \"completeness\": {\"verdict\": \"...\", \"justification\": "
        "\"...\"},\n"
        " \"directives\": \"...\"}"
    ),
    "meta.feedback_no_analysis": (
        "Critique the multi-agent design that just ran and give concrete "
        "directives for the next design. Do not review sub-tasks or agents "
        "individually.\n\n"
        "Emit the critique in the 'feedback' field as JSON:\n"
        "{\"directives\": \"...\"}"
    ),
    # meta-agent: final selection
    "meta.select": (
        "Given the problem and the list of candidate answers below, "
        "carefully review the reasoning steps and final answers and select "
        "the most reliable candidate. Do not solve the task yourself.\n"
        "In the 'thinking' field, compare the selected answer with each "
        "unselected answer one by one, identify the erroneous steps in the "
        "unselected answers, and explain why they are less reliable.\n"
        "In the 'selection' field, output only the ID number of the best "
        "candidate."
    ),
}


class Catalog:
    """Prompt lookup with optional user overrides on top of the defaults."""

    def __init__(self, overrides: dict[str, str] | None = None) -> None:
        self._texts = dict(DEFAULT_CATALOG)
        if overrides:
            unknown = set(overrides) - set(DEFAULT_CATALOG)
            if unknown:
                raise KeyError(f"unknown prompt catalog keys: {sorted(unknown)}")
            self._texts.update(overrides)

    def __getitem__(self, key: str) -> str:
        return self._texts[key]

    @classmethod
    def load(cls, path: str | Path) -> "Catalog":
        with open(path, encoding="utf-8") as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise ValueError(f"prompt catalog file must hold a JSON object: {path}")
        return cls(overrides)


DEFAULT = Catalog()
