"""agentevo: two-timescale self-evolution for frozen-model agents.

The engine evolves an agent defined as a (prompt configuration, solver
pipeline) pair: an inner loop searches prompt space on a Pareto front of
accuracy versus token cost, and once prompt gains saturate an outer loop
proposes typed pipeline edits that are committed only after winning a
shared-subset A/B comparison under a cost budget.
"""

from .backends import (
    BackendPool,
    ChatMessage,
    GenerationRequest,
    GenerationResponse,
    ScriptedBackend,
    UsageLedger,
    record_usage,
    usage_multiplier,
)
from .controller import (
    CreditSnapshot,
    EvolutionState,
    compute_delta_up,
    credit_snapshot,
    enforce_budget,
    is_saturated,
    run_evolution,
)
from .evaluation import TaskSpec, evaluate_agent, get_task
from .failures import (
    FailureRecord,
    GuidanceSummary,
    classify_failure,
    collect_failures,
    summarize_failures,
)
from .harness import (
    EpsilonSpec,
    RunConfig,
    TrajectoryEvent,
    TrajectoryLog,
    build_report,
    emit_report,
    load_run_config,
    prepare_run,
)
from .pipeline import (
    AgentConfig,
    PipelineConfig,
    PipelineStage,
    PromptConfig,
    SolverOutcome,
    apply_repair_acceptance,
    canonical_pipelines,
    run_pipeline,
    self_check_constraints,
    validate_pipeline,
)
from .prompt_search import (
    MutationOptions,
    ParetoFront,
    PromptCandidate,
    generate_candidates,
    optimize_prompt,
    sample_parent,
    update_front,
)
from .scoring import (
    normalize_numeric,
    normalize_span,
    pass_k,
    score_letter_match,
    score_numeric_exact,
    score_span_em_f1,
)
from .constraints import build_checkers, score_strict_constraints
from .structure_search import (
    AbReport,
    CommitRecord,
    EDIT_CATEGORIES,
    EditProposal,
    ab_compare,
    commit_or_rollback,
    post_commit_eval,
    propose_edit,
    sample_validation_subset,
)
from .synthetic import SyntheticBackend, SyntheticLandscape, landscape_for, make_letter_samples
from .tasks import DatasetSplits, ScoreResult, TaskSample, load_samples, make_splits

__version__ = "0.1.0"
