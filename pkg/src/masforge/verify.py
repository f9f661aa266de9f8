"""Final-answer verification: rank by frequency, filter, select.

The selector never fabricates content: whatever mode runs, the returned
candidate is one of the inputs. Decisions (ranked order, kept candidates,
selected id, fallbacks) are appended to the run log for audit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

from .domain import (
    CandidateAnswer,
    EmptyInputError,
    Info,
    TaskKind,
    canonicalize_answer,
    source_iteration,
)
from .gateway import Gateway, MalformedOutputError, ProviderError, RunLog
from .prompts import DEFAULT, Catalog


class VerifyMode(str, Enum):
    META_SELECT = "meta-select"
    ORACLE = "oracle"
    EXTERNAL = "external"
    LAST_ITERATION = "last-iteration"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class VerifyConfig:
    mode: VerifyMode = VerifyMode.META_SELECT
    task_kind: TaskKind = TaskKind.FREE_TEXT
    options: tuple[str, ...] | None = None


def rank_candidates(cands: Sequence[CandidateAnswer]) -> list[CandidateAnswer]:
    """Group by canonical answer; frequent groups first, ties by first seen.

    Within a group the original order is preserved; candidates with an
    empty canonical answer always sort last.
    """
    if not cands:
        raise EmptyInputError("rank_candidates needs at least one candidate")
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for idx, cand in enumerate(cands):
        counts[cand.canonical] = counts.get(cand.canonical, 0) + 1
        first_seen.setdefault(cand.canonical, idx)
    return sorted(
        cands,
        key=lambda c: (
            1 if c.canonical == "" else 0,
            -counts[c.canonical],
            first_seen[c.canonical],
        ),
    )


def filter_candidates(
    cands: Sequence[CandidateAnswer],
    cfg: VerifyConfig,
    log: RunLog | None = None,
) -> list[CandidateAnswer]:
    """Drop empty answers and, for multiple choice, answers not among the
    options. Never empties the list: an all-invalid pool falls back to the
    single top-ranked candidate, flagged in the log."""
    kept = [c for c in cands if c.canonical != ""]
    if cfg.options is not None:
        allowed = {canonicalize_answer(o, cfg.task_kind) for o in cfg.options}
        kept = [c for c in kept if c.canonical in allowed]
    fallback = not kept
    if fallback:
        kept = [cands[0]]
    if log is not None:
        log.append(
            "verify_filter",
            kept_sources=[c.source for c in kept],
            dropped=len(cands) - len(kept),
            fallback=fallback,
        )
    return kept


_INT = re.compile(r"-?\d+")


def select_best(
    cands: Sequence[CandidateAnswer],
    task: Info,
    gateway: Gateway,
    *,
    catalog: Catalog = DEFAULT,
    log: RunLog | None = None,
) -> CandidateAnswer:
    """One meta-agent call choosing among ranked, filtered candidates.

    Single-candidate pools return immediately. An out-of-range or
    unparseable selection, or a gateway failure, falls back to the
    top-ranked candidate rather than re-asking.
    """
    if not cands:
        raise EmptyInputError("select_best needs at least one candidate")
    if len(cands) == 1:
        if log is not None:
            log.append("verify_select", selected=1, fallback=False, meta_call=False)
        return cands[0]
    listing = "\n\n".join(
        f"Candidate {i}:\nreasoning: {c.thinking}\nanswer: {c.answer}"
        for i, c in enumerate(cands, start=1)
    )
    agent = gateway.make_agent(
        ("thinking", "selection"),
        "Answer Selection Agent",
        role="expert machine learning researcher testing various agentic systems",
        temperature=gateway.config.meta_temperature,
    )
    selected = 1
    fallback = False
    reason = ""
    try:
        reply = gateway.query_agent(
            agent,
            [task, Info("candidate answers", "engine", listing)],
            catalog["meta.select"],
            context="meta-verify",
        )
        match = _INT.search(reply.fields["selection"].content)
        if match is None:
            fallback, reason = True, "no id in selection"
        else:
            picked = int(match.group(0))
            if 1 <= picked <= len(cands):
                selected = picked
            else:
                fallback, reason = True, f"selection {picked} out of range"
    except (ProviderError, MalformedOutputError) as exc:
        fallback, reason = True, f"meta call failed: {exc}"
    if log is not None:
        log.append(
            "verify_select",
            selected=selected,
            fallback=fallback,
            reason=reason,
            meta_call=True,
        )
    return cands[selected - 1]


def verify(
    all_cands: Sequence[CandidateAnswer],
    task: Info,
    cfg: VerifyConfig,
    gateway: Gateway,
    *,
    gold: str | None = None,
    external_check: Callable[[CandidateAnswer], bool] | None = None,
    catalog: Catalog = DEFAULT,
    log: RunLog | None = None,
) -> CandidateAnswer:
    """Pick the final answer from the full candidate pool.

    meta-select runs rank -> filter -> select; oracle picks the first
    candidate matching the gold answer (headroom measurement only);
    last-iteration returns the newest evolve candidate; external delegates
    to a caller-supplied predicate.
    """
    if not all_cands:
        raise EmptyInputError("verify needs at least one candidate")
    log = log if log is not None else gateway.log
    ranked = rank_candidates(all_cands)
    log.append(
        "verify_rank",
        order=[c.canonical for c in ranked],
        sources=[c.source for c in ranked],
    )

    if cfg.mode is VerifyMode.META_SELECT:
        kept = filter_candidates(ranked, cfg, log)
        final = select_best(kept, task, gateway, catalog=catalog, log=log)
    elif cfg.mode is VerifyMode.ORACLE:
        if gold is None:
            raise ValueError("oracle verification requires a gold answer")
        target = canonicalize_answer(gold, cfg.task_kind)
        final = next((c for c in all_cands if c.canonical == target), ranked[0])
    elif cfg.mode is VerifyMode.LAST_ITERATION:
        evolve_cands = [c for c in all_cands if source_iteration(c.source) is not None]
        if evolve_cands:
            final = max(evolve_cands, key=lambda c: source_iteration(c.source))
        else:
            log.append("verify_select", selected=1, fallback=True,
                       reason="no evolve candidates", meta_call=False)
            final = ranked[0]
    elif cfg.mode is VerifyMode.EXTERNAL:
        if external_check is None:
            raise ValueError("external verification requires a predicate")
        final = next((c for c in all_cands if external_check(c)), None)
        if final is None:
            log.append("verify_select", selected=1, fallback=True,
                       reason="no candidate passed external check", meta_call=False)
            final = ranked[0]
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown verify mode: {cfg.mode}")

    log.append(
        "verify_result",
        mode=cfg.mode.value,
        source=final.source,
        canonical=final.canonical,
    )
    return final
