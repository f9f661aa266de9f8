"""Per-question self-evolving multi-agent orchestration for LLMs.

The engine seeds a question with four fixed strategies, lets a meta-agent
iteratively design and critique sub-task plans built from those
strategies, and selects the final answer from the accumulated candidates
by frequency ranking, filtering, and meta-agent selection.
"""

from .blocks import (
    BlockResult,
    default_block_configs,
    majority_vote,
    run_block,
    run_cot,
    run_cot_sc,
    run_debate,
    run_self_refine,
)
from .domain import (
    AgentSpec,
    BlockKind,
    BlockParams,
    CandidateAnswer,
    Info,
    TaskKind,
    Usage,
    canonicalize_answer,
    contains_too_hard,
    task_info,
)
from .evolve import (
    ExperienceLibrary,
    ExperienceRecord,
    Feedback,
    MetaDesignError,
    Verdict,
    evolve,
    mas_init,
    meta_design,
    meta_feedback,
    render_library,
)
from .gateway import (
    AgentReply,
    DemoProvider,
    Gateway,
    HttpProvider,
    MalformedOutputError,
    ProviderConfig,
    ProviderError,
    RunLog,
    ScriptedProvider,
    build_prompt,
    parse_fields,
)
from .harness import (
    PricingTable,
    Question,
    RunConfig,
    RunRecord,
    compute_accuracy,
    compute_cost,
    emit_pareto,
    load_dataset,
    run_batch,
    run_question,
)
from .plan import (
    ExecutionError,
    ExecutionTrace,
    PlanIR,
    PlanParseError,
    SubTask,
    execute_plan,
    parse_plan,
    plan_to_json,
    render_plan,
    validate_plan,
)
from .prompts import Catalog
from .verify import (
    VerifyConfig,
    VerifyMode,
    filter_candidates,
    rank_candidates,
    select_best,
    verify,
)

__all__ = [
    "AgentReply",
    "AgentSpec",
    "BlockKind",
    "BlockParams",
    "BlockResult",
    "CandidateAnswer",
    "Catalog",
    "DemoProvider",
    "ExecutionError",
    "ExecutionTrace",
    "ExperienceLibrary",
    "ExperienceRecord",
    "Feedback",
    "Gateway",
    "HttpProvider",
    "Info",
    "MalformedOutputError",
    "MetaDesignError",
    "PlanIR",
    "PlanParseError",
    "PricingTable",
    "ProviderConfig",
    "ProviderError",
    "Question",
    "RunConfig",
    "RunLog",
    "RunRecord",
    "ScriptedProvider",
    "SubTask",
    "TaskKind",
    "Usage",
    "Verdict",
    "VerifyConfig",
    "VerifyMode",
    "build_prompt",
    "canonicalize_answer",
    "compute_accuracy",
    "compute_cost",
    "contains_too_hard",
    "default_block_configs",
    "emit_pareto",
    "evolve",
    "execute_plan",
    "filter_candidates",
    "load_dataset",
    "majority_vote",
    "mas_init",
    "meta_design",
    "meta_feedback",
    "parse_fields",
    "parse_plan",
    "plan_to_json",
    "rank_candidates",
    "render_library",
    "render_plan",
    "run_batch",
    "run_block",
    "run_cot",
    "run_cot_sc",
    "run_debate",
    "run_question",
    "run_self_refine",
    "select_best",
    "task_info",
    "validate_plan",
    "verify",
]
