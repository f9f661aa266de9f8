"""Core value types shared across the engine, plus answer canonicalization.

Everything here is an immutable value, safe to share between concurrent
tasks: agent message records, block configurations, candidate answers and
token-usage tallies.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from enum import Enum
from typing import Any, NamedTuple


class MasforgeError(Exception):
    """Base class for all engine errors."""


class EmptyInputError(MasforgeError):
    """An operation received an empty collection it cannot act on."""


class Info(NamedTuple):
    """One message record passed between agents.

    ``prompt`` is the full prompt that produced the record (empty for task
    roots). ``iteration_idx`` is -1 exactly for task roots and single-shot
    outputs.
    """

    name: str
    author: str
    content: str
    prompt: str = ""
    sub_tasks: str | None = None
    agents: str | None = None
    iteration_idx: int = -1


def task_info(question: str) -> Info:
    """Wrap a raw question as the root record every agent sees first."""
    return Info(name="task", author="User", content=question)


class BlockKind(str, Enum):
    """The four built-in strategies a plan may compose."""

    COT = "CoT"
    COT_SC = "CoT-SC"
    DEBATE = "Debate"
    SELF_REFINE = "Self-Refine"

    def __str__(self) -> str:  # value, not "BlockKind.COT"
        return self.value


class TaskKind(str, Enum):
    """How final answers are normalized for comparison."""

    MULTIPLE_CHOICE = "multiple-choice"
    NUMERIC = "numeric"
    FREE_TEXT = "free-text"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class AgentSpec:
    """Settings for one LLM agent instance.

    ``id`` must be unique within a run; the gateway's agent factory
    guarantees that.
    """

    role: str
    model: str
    temperature: float
    output_fields: tuple[str, ...]
    agent_name: str
    id: str

    def __post_init__(self) -> None:
        if not self.output_fields:
            raise ValueError("output_fields must be non-empty")
        if len(set(self.output_fields)) != len(self.output_fields):
            raise ValueError(f"duplicate output fields: {self.output_fields}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature out of range [0, 2]: {self.temperature}")

    @property
    def author(self) -> str:
        return f"{self.agent_name} {self.id}"


@dataclass(frozen=True)
class BlockParams:
    """Tunable knobs of one block inside a plan.

    ``n_samples`` applies to CoT-SC only; ``roles`` to Debate only;
    ``max_round`` to Debate and Self-Refine. Misuse is reported by plan
    validation, not at construction.
    """

    kind: BlockKind
    temperature_override: float | None = None
    n_samples: int | None = None
    max_round: int | None = None
    roles: tuple[str, ...] | None = None
    instruction_override: str | None = None


@dataclass(frozen=True)
class Usage:
    """Token and call counts; additive under aggregation."""

    prompt_tokens: int = 0
    completion_tokens: int = 0
    call_count: int = 0

    def __post_init__(self) -> None:
        if min(self.prompt_tokens, self.completion_tokens, self.call_count) < 0:
            raise ValueError("usage components must be non-negative")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.call_count + other.call_count,
        )


def total_usage(usages: "list[Usage] | tuple[Usage, ...]") -> Usage:
    acc = Usage()
    for u in usages:
        acc = acc + u
    return acc


_EVOLVE_SOURCE = re.compile(r"^evolve-iter-(\d+)$")
BLOCK_SOURCES = tuple(k.value for k in BlockKind)


def evolve_source(iteration: int) -> str:
    if iteration < 1:
        raise ValueError(f"evolve iterations are 1-based, got {iteration}")
    return f"evolve-iter-{iteration}"


def source_iteration(source: str) -> int | None:
    """Iteration number of an evolve-sourced candidate, else None."""
    m = _EVOLVE_SOURCE.match(source)
    return int(m.group(1)) if m else None


@dataclass(frozen=True)
class CandidateAnswer:
    """A (thinking, answer) pair entering verification.

    ``canonical`` is the normalized answer used for frequency counting;
    empty canonical marks an absent/unusable answer. ``source`` is one of
    the four block names or ``evolve-iter-<t>``.
    """

    thinking: str
    answer: str
    canonical: str
    source: str
    usage: Usage

    def __post_init__(self) -> None:
        if self.source not in BLOCK_SOURCES and source_iteration(self.source) is None:
            raise ValueError(f"unknown candidate source: {self.source!r}")

    @classmethod
    def make(
        cls,
        thinking: str,
        answer: str,
        source: str,
        usage: Usage,
        task_kind: TaskKind = TaskKind.FREE_TEXT,
    ) -> "CandidateAnswer":
        return cls(thinking, answer, canonicalize_answer(answer, task_kind), source, usage)


def candidate_to_record(cand: CandidateAnswer) -> dict[str, Any]:
    """Flatten a candidate into one run-log record (stable field names)."""
    return {
        "thinking": cand.thinking,
        "answer": cand.answer,
        "canonical": cand.canonical,
        "source": cand.source,
        "prompt_tokens": cand.usage.prompt_tokens,
        "completion_tokens": cand.usage.completion_tokens,
        "call_count": cand.usage.call_count,
    }


def candidate_from_record(record: dict[str, Any]) -> CandidateAnswer:
    return CandidateAnswer(
        thinking=record["thinking"],
        answer=record["answer"],
        canonical=record["canonical"],
        source=record["source"],
        usage=Usage(
            record["prompt_tokens"], record["completion_tokens"], record["call_count"]
        ),
    )


# ---------------------------------------------------------------------------
# Answer canonicalization
# ---------------------------------------------------------------------------
#
# The rule table, applied in order (version below; keep tests in sync):
#   1. trim whitespace
#   2. unwrap \boxed{...} payloads
#   3. numeric tasks: if exactly one number token is present, reduce it to a
#      minimal decimal/integer string (no sign on positives, no trailing
#      zeros, thousands separators removed, -0 -> 0); otherwise trimmed
#      lowercased text
#   4. multiple-choice tasks: if one option letter is unambiguously present
#      (bare letter, "(X)", "answer/option/choice ... X", or a leading
#      "X)" / "X." / "X:" marker), reduce to that single uppercase letter;
#      otherwise trimmed lowercased text
#   5. free text: strip surrounding punctuation and lowercase
#
# Canonicalization is total, deterministic and idempotent.

CANONICALIZATION_VERSION = 1

_BOXED = re.compile(r"\\boxed\s*\{([^{}]*)\}")
_WRAP_CHARS = " \t\r\n\"'`*_$.,:;!?()[]{}<>"
_NUMBER = re.compile(
    r"[-+]?\d{1,3}(?:,\d{3})+(?:\.\d+)?"  # grouped thousands
    r"|[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
)
_MC_PAREN = re.compile(r"\(([A-Za-z])\)")
_MC_KEYWORD = re.compile(
    r"\b(?:answer|option|choice)(?:\s+is)?[\s:\-]+\(?([A-Za-z])\)?(?![A-Za-z])",
    re.IGNORECASE,
)
_MC_LEAD = re.compile(r"^\(?([A-Za-z])[).:](?:\s|$)")


def _strip_wrapping(text: str) -> str:
    prev = None
    while prev != text:
        prev = text
        text = text.strip().strip(_WRAP_CHARS)
    return text


def _minimal_number(token: str) -> str | None:
    try:
        value = Decimal(token.replace(",", ""))
    except InvalidOperation:
        return None
    if value == 0:
        return "0"
    return format(value.normalize(), "f")


def _extract_number(text: str) -> str | None:
    matches = list(_NUMBER.finditer(text))
    if len(matches) != 1:
        return None
    return _minimal_number(matches[0].group(0))


def _extract_option_letter(text: str) -> str | None:
    core = _strip_wrapping(text)
    if re.fullmatch(r"[A-Za-z]", core):
        return core.upper()
    letters = {m.group(1).upper() for m in _MC_PAREN.finditer(text)}
    if len(letters) == 1:
        return letters.pop()
    if letters:
        return None  # several parenthesized letters: ambiguous
    letters = {m.group(1).upper() for m in _MC_KEYWORD.finditer(text)}
    if len(letters) == 1:
        return letters.pop()
    if letters:
        return None
    lead = _MC_LEAD.match(text.strip())
    if lead:
        return lead.group(1).upper()
    return None


def canonicalize_answer(raw: str, task_kind: TaskKind = TaskKind.FREE_TEXT) -> str:
    """Normalize a raw answer for equality checks and frequency counting."""
    text = raw.strip()
    boxed = _BOXED.search(text)
    if boxed:
        text = boxed.group(1).strip()
    if task_kind is TaskKind.NUMERIC:
        number = _extract_number(text)
        if number is not None:
            return number
        return text.strip().lower()
    if task_kind is TaskKind.MULTIPLE_CHOICE:
        letter = _extract_option_letter(text)
        if letter is not None:
            return letter
        return text.strip().lower()
    stripped = _strip_wrapping(text).lower()
    return stripped if stripped else text.strip().lower()


_TOO_HARD = re.compile(r"\[TOO[ _]HARD\]", re.IGNORECASE)


def contains_too_hard(text: str) -> bool:
    """True iff the give-up marker appears, brackets required."""
    return _TOO_HARD.search(text) is not None
