"""Uniform agent-query protocol over chat-completion endpoints.

One logical operation: assemble a prompt from an agent spec, input records
and an instruction; send it; parse the structured reply back into one
``Info`` per requested output field. Providers are pluggable: a live HTTP
endpoint, a scripted provider for order-sensitive tests, and a hash-keyed
demo provider for offline end-to-end runs.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

from .domain import AgentSpec, Info, MasforgeError, Usage


class TransportError(MasforgeError):
    """A single transport attempt failed; the gateway may retry."""


class ProviderError(MasforgeError):
    """All transport attempts for one logical call failed."""


class MalformedOutputError(MasforgeError):
    """The reply defeated every rung of the structured-output repair ladder."""

    def __init__(self, message: str, raw: str = "", usage: Usage | None = None) -> None:
        super().__init__(message)
        self.raw = raw
        self.usage = usage or Usage()


@dataclass(frozen=True)
class ProviderConfig:
    """Connection settings; API keys come only from the environment."""

    endpoint: str = ""
    model: str = "mock"
    api_key_env: str = "OPENAI_API_KEY"
    max_retries: int = 3
    timeout: float = 120.0
    request_interval_floor: float = 0.0
    meta_temperature: float = 0.5
    system_role_message: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.max_retries <= 10:
            raise ValueError(f"max_retries out of range [0, 10]: {self.max_retries}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be positive: {self.timeout}")
        if self.request_interval_floor < 0:
            raise ValueError("request_interval_floor must be >= 0")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ProviderConfig":
        known = {k: data[k] for k in data if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class ProviderRequest:
    prompt: str
    model: str
    temperature: float
    agent_name: str
    instruction: str
    output_fields: tuple[str, ...]
    context: str = ""


@dataclass(frozen=True)
class ProviderResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int


class Provider(Protocol):
    def complete(self, request: ProviderRequest) -> ProviderResponse: ...


class RunLog:
    """Append-only run log; in memory, optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.entries: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a", encoding="utf-8")

    def append(self, kind: str, **data: Any) -> None:
        entry = {"kind": kind, **data}
        with self._lock:
            self.entries.append(entry)
            if self._fh is not None:
                self._fh.write(json.dumps(entry, sort_keys=True, default=str) + "\n")
                self._fh.flush()

    def of_kind(self, kind: str) -> list[dict[str, Any]]:
        with self._lock:
            return [e for e in self.entries if e["kind"] == kind]

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


# ---------------------------------------------------------------------------
# Prompt assembly and structured-output parsing
# ---------------------------------------------------------------------------


def build_prompt(agent: AgentSpec, inputs: Sequence[Info], instruction: str) -> str:
    """Assemble the full prompt; pure in (agent, inputs, instruction).

    Root task records render first, then the remaining inputs in the given
    order, the instruction, and the output-format footer.
    """
    if not instruction:
        raise ValueError("instruction must be non-empty")
    roots = [info for info in inputs if info.name == "task"]
    rest = [info for info in inputs if info.name != "task"]
    parts = [f"You are a {agent.role}."]
    parts += [f"{info.name} by {info.author}:\n{info.content}" for info in roots + rest]
    parts.append(instruction)
    parts.append(
        "Reply EXACTLY with the following JSON format.\n"
        f"{list(agent.output_fields)}\n"
        "DO NOT MISS ANY FIELDS AND MAKE SURE THE JSON FORMAT IS CORRECT!"
    )
    return "\n\n".join(parts)


def _try_json_object(text: str) -> dict[str, Any] | None:
    try:
        value = json.loads(text)
    except (json.JSONDecodeError, ValueError):
        return None
    return value if isinstance(value, dict) else None


def _balanced_spans(text: str) -> list[str]:
    spans: list[tuple[int, int]] = []
    stack: list[int] = []
    for i, ch in enumerate(text):
        if ch == "{":
            stack.append(i)
        elif ch == "}" and stack:
            spans.append((stack.pop(), i + 1))
    spans.sort(key=lambda s: (-(s[1] - s[0]), s[0]))
    return [text[a:b] for a, b in spans]


def extract_json_object(text: str) -> dict[str, Any] | None:
    """Whole-text JSON parse, else the largest parseable brace span."""
    obj = _try_json_object(text)
    if obj is not None:
        return obj
    for span in _balanced_spans(text):
        obj = _try_json_object(span)
        if obj is not None:
            return obj
    return None


def _as_text(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)


def parse_fields(raw: str, output_fields: Sequence[str]) -> dict[str, str]:
    """Extract the requested fields from a structured reply.

    Repair ladder, first success wins: (1) parse the whole text as JSON,
    (2) parse the largest brace-delimited span, (3) per-field regex on the
    quoted labels. A rung succeeds only if every requested field is present.
    """
    if not output_fields:
        raise ValueError("output_fields must be non-empty")

    obj = _try_json_object(raw)
    if obj is not None and all(f in obj for f in output_fields):
        return {f: _as_text(obj[f]) for f in output_fields}

    for span in _balanced_spans(raw):
        obj = _try_json_object(span)
        if obj is not None and all(f in obj for f in output_fields):
            return {f: _as_text(obj[f]) for f in output_fields}

    scraped: dict[str, str] = {}
    for name in output_fields:
        pattern = re.compile(
            r'"' + re.escape(name) + r'"\s*:\s*("(?:[^"\\]|\\.)*"|[^,}\]\n]+)'
        )
        m = pattern.search(raw)
        if m is None:
            break
        value = m.group(1).strip()
        if value.startswith('"'):
            try:
                value = json.loads(value)
            except (json.JSONDecodeError, ValueError):
                value = value.strip('"')
        scraped[name] = value
    if len(scraped) == len(output_fields):
        return {f: scraped[f] for f in output_fields}

    missing = [f for f in output_fields if f not in scraped]
    raise MalformedOutputError(
        f"could not extract fields {missing} from reply", raw=raw
    )


@dataclass(frozen=True)
class AgentReply:
    """Structured reply: one Info per requested field, in field order."""

    fields: dict[str, Info]
    raw: str
    usage: Usage


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------


class Gateway:
    """Dispatches agent queries to a provider with retries and logging.

    Thread-safe: the usage accumulator, agent-id allocator and event ticks
    are lock-protected, so plan executors may query concurrently.
    """

    def __init__(
        self,
        provider: Provider,
        config: ProviderConfig | None = None,
        log: RunLog | None = None,
    ) -> None:
        self.provider = provider
        self.config = config or ProviderConfig()
        self.log = log or RunLog()
        self._lock = threading.Lock()
        self._ticks = itertools.count(1)
        self._agent_ids = itertools.count(1)
        self._usage = Usage()

    def _tick(self) -> int:
        with self._lock:
            return next(self._ticks)

    @property
    def total_usage(self) -> Usage:
        with self._lock:
            return self._usage

    def make_agent(
        self,
        output_fields: Sequence[str],
        agent_name: str,
        *,
        role: str = "helpful assistant",
        temperature: float = 0.0,
        model: str | None = None,
    ) -> AgentSpec:
        """Create an agent spec with a run-unique id."""
        with self._lock:
            agent_id = str(next(self._agent_ids))
        return AgentSpec(
            role=role,
            model=model or self.config.model,
            temperature=temperature,
            output_fields=tuple(output_fields),
            agent_name=agent_name,
            id=agent_id,
        )

    def query_agent(
        self,
        agent: AgentSpec,
        inputs: Sequence[Info],
        instruction: str,
        iteration_idx: int = -1,
        context: str = "",
    ) -> AgentReply:
        prompt = build_prompt(agent, inputs, instruction)
        request = ProviderRequest(
            prompt=prompt,
            model=agent.model,
            temperature=agent.temperature,
            agent_name=agent.agent_name,
            instruction=instruction,
            output_fields=agent.output_fields,
            context=context,
        )
        start = self._tick()
        max_attempts = max(1, self.config.max_retries)
        attempts = 0
        last_error: TransportError | None = None
        response: ProviderResponse | None = None
        while attempts < max_attempts:
            attempts += 1
            try:
                response = self.provider.complete(request)
                break
            except TransportError as exc:
                last_error = exc
        if response is None:
            self._log_call(agent, context, instruction, prompt, iteration_idx,
                           start, attempts, None, Usage(), error="provider")
            raise ProviderError(
                f"provider failed after {attempts} transport attempts: {last_error}"
            )

        usage = Usage(response.prompt_tokens, response.completion_tokens, 1)
        with self._lock:
            self._usage = self._usage + usage
        try:
            values = parse_fields(response.text, agent.output_fields)
        except MalformedOutputError as exc:
            self._log_call(agent, context, instruction, prompt, iteration_idx,
                           start, attempts, response.text, usage, error="malformed")
            raise MalformedOutputError(str(exc), raw=response.text, usage=usage)

        infos = {
            name: Info(
                name=name,
                author=agent.author,
                content=values[name],
                prompt=prompt,
                iteration_idx=iteration_idx,
            )
            for name in agent.output_fields
        }
        self._log_call(agent, context, instruction, prompt, iteration_idx,
                       start, attempts, response.text, usage, error=None)
        return AgentReply(fields=infos, raw=response.text, usage=usage)

    def _log_call(
        self,
        agent: AgentSpec,
        context: str,
        instruction: str,
        prompt: str,
        iteration_idx: int,
        start_tick: int,
        attempts: int,
        raw: str | None,
        usage: Usage,
        error: str | None,
    ) -> None:
        self.log.append(
            "agent_call",
            start_tick=start_tick,
            end_tick=self._tick(),
            agent=agent.agent_name,
            agent_id=agent.id,
            context=context,
            model=agent.model,
            temperature=agent.temperature,
            iteration_idx=iteration_idx,
            instruction=instruction,
            prompt=prompt,
            raw=raw,
            attempts=attempts,
            prompt_tokens=usage.prompt_tokens,
            completion_tokens=usage.completion_tokens,
            error=error,
        )


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

ReplySpec = Any  # dict -> JSON reply, str -> raw text, Exception -> raised,
#                  callable(request) -> any of the above


@dataclass
class _Rule:
    agent_name: str | None
    instruction_contains: str | None
    prompt_contains: str | None
    context_contains: str | None
    queue: list[ReplySpec] = field(default_factory=list)

    def matches(self, request: ProviderRequest) -> bool:
        if self.agent_name is not None and request.agent_name != self.agent_name:
            return False
        if (
            self.instruction_contains is not None
            and self.instruction_contains not in request.instruction
        ):
            return False
        if (
            self.prompt_contains is not None
            and self.prompt_contains not in request.prompt
        ):
            return False
        if (
            self.context_contains is not None
            and self.context_contains not in request.context
        ):
            return False
        return True


def _word_count(text: str) -> int:
    return len(text.split())


class ScriptedProvider:
    """Deterministic provider driven by ordered, queue-consuming rules.

    Rules are matched in registration order; each match consumes the next
    reply in that rule's queue, so order-sensitive flows (debate rounds,
    refinement loops) can be scripted call by call. Token counts are word
    counts, making full runs byte-reproducible.
    """

    def __init__(self, default: ReplySpec | None = None) -> None:
        self._rules: list[_Rule] = []
        self._default = default
        self._lock = threading.Lock()
        self._seq = itertools.count(1)

    def script(
        self,
        *,
        agent_name: str | None = None,
        instruction_contains: str | None = None,
        prompt_contains: str | None = None,
        context_contains: str | None = None,
        replies: Sequence[ReplySpec] = (),
    ) -> None:
        self._rules.append(
            _Rule(
                agent_name,
                instruction_contains,
                prompt_contains,
                context_contains,
                list(replies),
            )
        )

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        with self._lock:
            seq = next(self._seq)
            spec: ReplySpec | None = None
            for rule in self._rules:
                if rule.queue and rule.matches(request):
                    spec = rule.queue.pop(0)
                    break
            if spec is None:
                spec = self._default
        if spec is None:
            raise TransportError(
                f"no scripted reply for agent {request.agent_name!r} (call {seq})"
            )
        if callable(spec):
            spec = spec(request)
        if isinstance(spec, Exception):
            raise spec
        text = spec if isinstance(spec, str) else json.dumps(spec, ensure_ascii=False)
        return ProviderResponse(
            text=text,
            prompt_tokens=_word_count(request.prompt),
            completion_tokens=_word_count(text),
        )


class DemoProvider:
    """Offline provider producing plausible, deterministic replies.

    Replies are keyed by a hash of (agent, instruction, prompt), never by
    call order, so runs are reproducible and resumable in any schedule.
    Powers the CLI demo mode and the golden-run tests.
    """

    def _seed(self, request: ProviderRequest) -> int:
        digest = hashlib.sha256(
            "\x1f".join([request.agent_name, request.instruction, request.prompt]).encode()
        ).hexdigest()
        return int(digest[:12], 16)

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        seed = self._seed(request)
        fields = request.output_fields
        reply: dict[str, str] = {}
        if "plan" in fields:
            reply["thinking"] = f"Decompose, then combine the pieces. (v{seed % 89})"
            reply["plan"] = json.dumps(
                {
                    "rationale": "Split extraction from final reasoning.",
                    "sub_tasks": [
                        {
                            "id": "extract",
                            "instruction": "Restate the given facts and what is asked.",
                            "depends_on": [],
                            "final": False,
                            "sub_mas": [{"block": "CoT"}],
                        },
                        {
                            "id": "solve",
                            "instruction": "Using the extracted facts, derive the final answer.",
                            "depends_on": ["extract"],
                            "final": True,
                            "sub_mas": [{"block": "CoT-SC", "n_samples": 3}],
                        },
                    ],
                }
            )
        elif "selection" in fields:
            reply["thinking"] = "The top-ranked candidate is the most consistent."
            reply["selection"] = "1"
        elif "correct" in fields:
            reply["feedback"] = f"Looks consistent (check {seed % 13})."
            reply["correct"] = "True" if seed % 3 == 0 else "False"
        elif "feedback" in fields:
            reply["thinking"] = "All sub-tasks produced usable outputs."
            reply["feedback"] = json.dumps(
                {
                    "solvability": {},
                    "completeness": {
                        "verdict": "complete",
                        "justification": "All given information is consumed.",
                    },
                    "directives": "Keep the decomposition; tighten instructions.",
                }
            )
        else:
            answer = str(seed % 97)
            reply.update(
                {name: f"demo {name} {seed % 1009}" for name in fields}
            )
            if "answer" in fields:
                reply["answer"] = answer
            if "thinking" in fields:
                reply["thinking"] = f"Work through the steps; arrive at {answer}."
        text = json.dumps(reply, ensure_ascii=False)
        return ProviderResponse(
            text=text,
            prompt_tokens=_word_count(request.prompt),
            completion_tokens=_word_count(text),
        )


class HttpProvider:
    """Chat-completion HTTP provider (OpenAI-compatible wire format)."""

    def __init__(self, config: ProviderConfig) -> None:
        if not config.endpoint:
            raise ValueError("HttpProvider requires a non-empty endpoint")
        self.config = config
        self._lock = threading.Lock()
        self._last_dispatch = 0.0

    def _pace(self) -> None:
        floor = self.config.request_interval_floor
        if floor <= 0:
            return
        with self._lock:
            wait = self._last_dispatch + floor - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_dispatch = time.monotonic()

    def _messages(self, request: ProviderRequest) -> list[dict[str, str]]:
        prompt = request.prompt
        if self.config.system_role_message and prompt.startswith("You are "):
            head, sep, tail = prompt.partition("\n\n")
            if sep:
                return [
                    {"role": "system", "content": head},
                    {"role": "user", "content": tail},
                ]
        return [{"role": "user", "content": prompt}]

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        import requests

        self._pace()
        api_key = os.environ.get(self.config.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": request.model,
            "messages": self._messages(request),
            "temperature": request.temperature,
        }
        try:
            resp = requests.post(
                self.config.endpoint,
                json=payload,
                headers=headers,
                timeout=self.config.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"retryable status {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderError(f"status {resp.status_code}: {resp.text[:500]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {exc}") from exc
        usage = data.get("usage") or {}
        return ProviderResponse(
            text=text or "",
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )
