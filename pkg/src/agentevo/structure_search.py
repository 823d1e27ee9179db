"""Outer-loop structural search: propose, A/B-validate, commit or roll back.

Every structural edit is a proposal: a complete replacement pipeline in the
typed stage schema plus a category label.  Proposals that fail to parse or
violate the schema are counted as non-executable and never applied.
Executable proposals are compared against the incumbent on a shared
validation subset and committed only when they beat it by more than the
gate threshold while staying inside the cost budget; anything else rolls
back without a trace on the agent state.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field

from .backends import ChatMessage, GenerationRequest, UsageLedger
from .evaluation import TaskSpec, evaluate_agent
from .failures import ContractViolation, GuidanceSummary
from .pipeline import AgentConfig, PipelineConfig, PipelineParseError, validate_pipeline
from .tasks import TaskSample

EDIT_PROMPT_VERSION = 1

EDIT_CATEGORIES = (
    "sampling_policy",
    "aggregation",
    "early_exit",
    "verification",
    "self_check",
    "repair",
    "normalization",
    "extraction",
    "hyperparameters",
)

EDIT_PROMPT = (
    "You maintain the solver pipeline of an agent for the task {task}.\n"
    "Proposal attempt: {attempt_tag}.\n"
    "Current pipeline (JSON):\n{pipeline}\n\n"
    "Failure summary:\n{guidance}\n\n"
    "Allowed edit categories: {categories}.\n"
    "{recommended}\n"
    "Propose one bounded edit as a complete replacement pipeline in the same stage schema. "
    "The generation layer itself is not an editable stage.\n"
    'Reply with a single JSON object: {{"category": "<category>", "stages": [...], '
    '"hyperparameters": {{}}}}.'
)


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class EditProposal:
    category: str
    candidate_logic: PipelineConfig | None
    provenance: dict[str, str]
    executable: bool
    violations: tuple[str, ...] = ()


@dataclass
class AbReport:
    subset_ids: tuple[str, ...]
    utility_old: float
    utility_new: float
    per_sample_diffs: tuple[tuple[str, bool, bool], ...]
    recommendation: str
    flagged: bool = False
    old_per_query_units: float = 0.0
    new_per_query_units: float = 0.0

    @property
    def delta(self) -> float:
        return self.utility_new - self.utility_old


@dataclass
class CommitRecord:
    accepted: bool
    delta_on_subset: float
    cost_ok: bool
    structure_eval_baseline: float | None
    rollback_token: str


def build_edit_prompt(
    agent: AgentConfig,
    guidance: GuidanceSummary,
    task_name: str,
    attempt_tag: str = "1",
) -> str:
    recommended = ""
    if guidance.recommended_edits:
        recommended = "Recommended first: " + ", ".join(guidance.recommended_edits)
    return EDIT_PROMPT.format(
        task=task_name,
        attempt_tag=attempt_tag,
        pipeline=json.dumps(agent.logic.to_dict(), sort_keys=True),
        guidance=guidance.render(),
        categories=", ".join(EDIT_CATEGORIES),
        recommended=recommended,
    )


def parse_edit_reply(reply: str, incumbent: PipelineConfig) -> EditProposal:
    """Decode a proposer reply; anything undecodable is a non-executable proposal."""
    from .pipeline import find_json_object

    provenance = {"reply_digest": _digest(reply)}
    data = find_json_object(reply)
    if data is None:
        return EditProposal(
            category="unparseable",
            candidate_logic=None,
            provenance=provenance,
            executable=False,
            violations=("reply contains no JSON object",),
        )
    category = data.get("category")
    if category not in EDIT_CATEGORIES:
        return EditProposal(
            category=str(category),
            candidate_logic=None,
            provenance=provenance,
            executable=False,
            violations=(f"unknown edit category: {category!r}",),
        )
    try:
        candidate = PipelineConfig.from_dict(
            {
                "stages": data.get("stages", []),
                "hyperparameters": data.get("hyperparameters", {}),
                # Safety blacklist is not up for negotiation by the proposer.
                "disallowed_stage_kinds": list(incumbent.disallowed_stage_kinds),
            }
        )
    except PipelineParseError as exc:
        return EditProposal(
            category=category,
            candidate_logic=None,
            provenance=provenance,
            executable=False,
            violations=(str(exc),),
        )
    violations = validate_pipeline(candidate)
    return EditProposal(
        category=category,
        candidate_logic=candidate,
        provenance=provenance,
        executable=not violations,
        violations=tuple(violations),
    )


def propose_edit(
    agent: AgentConfig,
    guidance: GuidanceSummary,
    backend,
    rng: random.Random,
    task_name: str = "generic",
    ledger: UsageLedger | None = None,
    phase: str = "structural",
    attempt_tag: str | None = None,
) -> EditProposal:
    """One proposer call; backend failures propagate for the caller's retry loop.

    ``attempt_tag`` distinguishes retries in the proposer context, so a
    deterministic backend does not replay the same failed reply verbatim.
    """
    if attempt_tag is None:
        attempt_tag = str(rng.randrange(1_000_000))
    prompt = build_edit_prompt(agent, guidance, task_name, attempt_tag=attempt_tag)
    request = GenerationRequest(
        messages=(ChatMessage("user", prompt),),
        temperature=0.2,
        n=1,
        metadata={"purpose": "edit_propose"},
    )
    response = backend.generate(request)
    if ledger is not None:
        ledger.record(response, phase)
    proposal = parse_edit_reply(response.candidates[0], agent.logic)
    proposal.provenance["guidance_digest"] = _digest(guidance.render())
    return proposal


def sample_validation_subset(
    train_pool: tuple[TaskSample, ...],
    rng: random.Random,
    size_range: tuple[int, int],
) -> list[str]:
    """A fresh uniform subset of sample ids, size drawn from ``size_range``."""
    lo, hi = size_range
    if not 1 <= lo <= hi <= len(train_pool):
        raise ValueError(
            f"size_range {size_range} incompatible with pool of {len(train_pool)}"
        )
    size = rng.randint(lo, hi)
    chosen = rng.sample([sample.id for sample in train_pool], size)
    return sorted(chosen)


def ab_compare(
    old_agent: AgentConfig,
    new_agent: AgentConfig,
    subset: list[TaskSample],
    backend,
    task: TaskSpec,
    delta: float,
    ledger: UsageLedger | None = None,
    workers: int = 1,
    max_output_units: int = 1024,
) -> AbReport:
    """Evaluate both variants on the identical subset in identical order."""
    if not subset:
        raise ValueError("A/B subset must be non-empty")
    for name, agent in (("old", old_agent), ("new", new_agent)):
        violations = validate_pipeline(agent.logic)
        if violations:
            raise ContractViolation(f"{name} agent fails validation: {violations}")
    ordered = sorted(subset, key=lambda sample: sample.id)
    result_old = evaluate_agent(
        old_agent, ordered, backend, task, ledger=ledger, phase="structural",
        workers=workers, max_output_units=max_output_units,
    )
    result_new = evaluate_agent(
        new_agent, ordered, backend, task, ledger=ledger, phase="structural",
        workers=workers, max_output_units=max_output_units,
    )
    diffs = tuple(
        (row_old.sample.id, row_old.passed, row_new.passed)
        for row_old, row_new in zip(result_old.rows, result_new.rows)
    )
    recommendation = (
        "accept" if result_new.utility > result_old.utility + delta else "reject"
    )
    return AbReport(
        subset_ids=tuple(sample.id for sample in ordered),
        utility_old=result_old.utility,
        utility_new=result_new.utility,
        per_sample_diffs=diffs,
        recommendation=recommendation,
        flagged=result_old.flagged or result_new.flagged,
        old_per_query_units=result_old.per_query_units(),
        new_per_query_units=result_new.per_query_units(),
    )


def commit_or_rollback(
    state,
    proposal: EditProposal,
    report: AbReport,
    delta: float,
    budget: float | None,
    projected_cost: float = 0.0,
    baseline_utility: float | None = None,
) -> CommitRecord:
    """Apply the gate: commit the candidate logic or leave the agent untouched.

    ``state`` is the evolution state (duck-typed): needs ``current_agent``,
    ``cost_ledger``, ``utility_history``, ``proposal_stats``, and the
    post-commit bookkeeping fields.  ``baseline_utility`` records the
    incumbent's current eval accuracy for the post-commit comparison; it
    defaults to the last validated utility.
    """
    if not proposal.executable or proposal.candidate_logic is None:
        raise ContractViolation("commit_or_rollback requires an executable proposal")
    from .controller import enforce_budget  # local import avoids a cycle

    cost_ok = enforce_budget(state.cost_ledger, budget, projected_cost)
    accepted = report.recommendation == "accept" and cost_ok
    rollback_token = state.current_agent.digest()

    if accepted:
        state.rollback_logic = PipelineConfig.from_dict(state.current_agent.logic.to_dict())
        state.current_agent.logic = proposal.candidate_logic
        if baseline_utility is None:
            baseline_utility = state.utility_history[-1] if state.utility_history else None
        state.structure_eval_baseline = baseline_utility
        state.pending_full_eval = True
        state.proposal_stats.accepted += 1
    else:
        state.proposal_stats.rejected += 1
        if report.delta <= 0:
            state.proposal_stats.rejected_regression += 1

    return CommitRecord(
        accepted=accepted,
        delta_on_subset=report.delta,
        cost_ok=cost_ok,
        structure_eval_baseline=state.structure_eval_baseline if accepted else None,
        rollback_token=rollback_token,
    )


def post_commit_eval(state, full_eval_utility: float) -> tuple[float, bool]:
    """Resolve a pending commit against its full-evaluation utility.

    Returns (delta_uc, rolled_back).  Strictly negative deltas roll the
    control logic back to its pre-commit form; zero keeps the commit.
    """
    if not getattr(state, "pending_full_eval", False):
        raise ContractViolation("post_commit_eval called with no pending commit")
    baseline = state.structure_eval_baseline
    if baseline is None:
        raise ContractViolation("pending commit has no recorded baseline")
    delta_uc = full_eval_utility - baseline
    state.delta_uc = delta_uc
    state.pending_full_eval = False
    rolled_back = False
    if delta_uc < 0:
        state.current_agent.logic = state.rollback_logic
        rolled_back = True
    state.rollback_logic = None
    return delta_uc, rolled_back
