"""Two-timescale evolution controller.

Runs the full loop: frequent low-risk prompt evolution under fixed control
logic, saturation detection on the per-round validated-utility gain, then
guarded structural search (failure summary -> proposal -> shared-subset A/B
-> commit or rollback) with a post-commit full evaluation that can undo a
committed edit.  Every action is appended to the trajectory log.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .backends import BackendError, UsageLedger
from .evaluation import TaskSpec, evaluate_agent
from .failures import collect_failures, summarize_failures
from .harness import EpsilonSpec, RunConfig, TrajectoryEvent, TrajectoryLog
from .pipeline import (
    AgentConfig,
    PipelineConfig,
    PromptConfig,
    canonical_pipelines,
    validate_pipeline,
)
from .prompt_search import (
    DEFAULT_DIRECTIVES,
    DEFAULT_ROLE_VARIANTS,
    MutationOptions,
    optimize_prompt,
)
from .structure_search import (
    ab_compare,
    commit_or_rollback,
    post_commit_eval,
    propose_edit,
    sample_validation_subset,
)
from .tasks import DatasetSplits, TaskSample

DEFAULT_MAX_OUTER_STEPS = 20


@dataclass
class ProposalStats:
    executable: int = 0
    non_executable: int = 0
    accepted: int = 0
    rejected: int = 0
    rejected_regression: int = 0
    proposer_failures: int = 0

    @property
    def proposed(self) -> int:
        return self.executable + self.non_executable

    def to_dict(self) -> dict:
        return {
            "proposed": self.proposed,
            "executable": self.executable,
            "non_executable": self.non_executable,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "rejected_regression": self.rejected_regression,
            "proposer_failures": self.proposer_failures,
        }


@dataclass
class EvolutionState:
    current_agent: AgentConfig
    epsilon: EpsilonSpec
    delta: float
    utility_history: list[float] = field(default_factory=list)
    delta_up: float | None = None
    delta_uc: float | None = None
    saturated: bool = False
    outer_step: int = 0
    inner_step: int = 0
    cost_ledger: UsageLedger = field(default_factory=UsageLedger)
    proposal_stats: ProposalStats = field(default_factory=ProposalStats)
    best_utility: float = 0.0
    pending_full_eval: bool = False
    structure_eval_baseline: float | None = None
    rollback_logic: PipelineConfig | None = None
    phase_label: str = "vanilla"


@dataclass(frozen=True)
class CreditSnapshot:
    delta_up: float | None
    delta_uc: float | None
    saturated: bool
    epsilon: EpsilonSpec
    delta: float

    def to_dict(self) -> dict:
        return {
            "delta_up": self.delta_up,
            "delta_uc": self.delta_uc,
            "saturated": self.saturated,
            "epsilon": self.epsilon.to_dict(),
            "delta": self.delta,
        }


def compute_delta_up(history: list[float]) -> float | None:
    """Gain between the last two validated prompt rounds; None before round two."""
    if len(history) < 2:
        return None
    return history[-1] - history[-2]


def is_saturated(delta_up: float | None, epsilon: EpsilonSpec) -> bool:
    """Decide whether prompt refinement is exhausted under the given mode."""
    if epsilon.mode == "prompt_only":
        return False
    if epsilon.mode == "bypass":
        return True
    if delta_up is None:
        return False
    return delta_up <= epsilon.value


def enforce_budget(ledger: UsageLedger | None, budget: float | None, projected_cost: float) -> bool:
    """True when spending ``projected_cost`` more units stays within budget."""
    if budget is None or ledger is None:
        return True
    return ledger.total_units() + projected_cost <= budget


def credit_snapshot(state: EvolutionState) -> CreditSnapshot:
    return CreditSnapshot(
        delta_up=state.delta_up,
        delta_uc=state.delta_uc,
        saturated=state.saturated,
        epsilon=state.epsilon,
        delta=state.delta,
    )


@dataclass
class EvolutionRun:
    final_agent: AgentConfig
    log: TrajectoryLog
    state: EvolutionState
    final_utility: float | None


def initial_agent_for(config: RunConfig, task: TaskSpec) -> AgentConfig:
    if config.initial_prompt is not None:
        prompt = PromptConfig.from_dict(config.initial_prompt)
    else:
        roles = config.mutation_roles or DEFAULT_ROLE_VARIANTS
        prompt = PromptConfig(
            role=roles[0],
            requirements=(),
            temperature=config.task_generation_temperature,
        )
    if config.initial_pipeline is not None:
        logic = PipelineConfig.from_dict(config.initial_pipeline)
        violations = validate_pipeline(logic)
        if violations:
            raise ValueError(f"initial pipeline invalid: {violations}")
    else:
        logic = canonical_pipelines(task.extractor)["vanilla"]
    return AgentConfig(prompt=prompt, logic=logic)


class _EventSink:
    def __init__(self, log: TrajectoryLog, ledger: UsageLedger):
        self.log = log
        self.ledger = ledger
        self._step = 0
        self._marks: tuple[int, int, int] = (0, 0, 0)

    def mark_usage(self) -> None:
        self._marks = (self.ledger.input_units, self.ledger.output_units, self.ledger.calls)

    def usage_delta(self) -> dict:
        before = self._marks
        return {
            "input_units": self.ledger.input_units - before[0],
            "output_units": self.ledger.output_units - before[1],
            "calls": self.ledger.calls - before[2],
        }

    def emit(self, kind: str, payload: dict, outcome: str = "ok", label: str | None = None,
             with_usage: bool = False) -> None:
        usage = self.usage_delta() if with_usage else None
        self.log.append(
            TrajectoryEvent(
                step=self._step, kind=kind, payload=payload, outcome=outcome,
                usage=usage, label=label,
            )
        )
        self._step += 1


def run_evolution(
    config: RunConfig,
    backend,
    splits: DatasetSplits,
    task: TaskSpec,
) -> EvolutionRun:
    """Execute up to ``config.outer_steps`` outer steps of the two-timescale loop."""
    rng = random.Random(config.seed)
    ledger = UsageLedger(chars_per_unit=config.chars_per_unit)
    log = TrajectoryLog()
    sink = _EventSink(log, ledger)

    agent = initial_agent_for(config, task)
    state = EvolutionState(
        current_agent=agent,
        epsilon=config.epsilon,
        delta=config.delta,
        cost_ledger=ledger,
    )
    options = MutationOptions(
        roles=config.mutation_roles or DEFAULT_ROLE_VARIANTS,
        directives=config.mutation_directives
        if config.mutation_directives is not None
        else DEFAULT_DIRECTIVES,
        temperature_deltas=config.mutation_temperature_deltas,
        reflection_temperature=config.reflection_temperature,
        candidate_cap=config.candidate_cap,
        max_diagnoses=config.max_diagnoses,
    )

    sink.emit(
        "run_start",
        {
            "config_digest": config.digest(),
            "task": task.name,
            "seed": config.seed,
            "agent": agent.serialize(),
        },
    )

    if config.outer_steps == 0:
        sink.emit("run_end", {"reason": "zero_outer_steps", "final_agent": agent.serialize()})
        return EvolutionRun(final_agent=agent, log=log, state=state, final_utility=None)

    train_pool = splits.train_pool

    def draw_val_subset():
        return tuple(
            sorted(
                rng.sample(list(train_pool), min(config.pe_val_size, len(train_pool))),
                key=lambda sample: sample.id,
            )
        )

    # Fixed evaluation subset for comparable initial/post-commit/final numbers;
    # prompt-round validation resamples fresh subsets to avoid overfitting the
    # trajectory to a single held-out slice.
    eval_subset = draw_val_subset()

    def full_eval(scope: str, emit: bool = True):
        sink.mark_usage()
        result = evaluate_agent(
            state.current_agent, list(eval_subset), backend, task,
            ledger=ledger, phase="evaluation", workers=config.workers,
            max_output_units=config.max_output_units,
        )
        if not emit:
            return result.utility, result
        sink.emit(
            "evaluate_on_task",
            {
                "scope": scope,
                "outer_step": state.outer_step,
                "utility": result.utility,
                "samples": len(result.rows),
                "per_query_units": result.per_query_units(),
            },
            with_usage=True,
        )
        return result.utility, result

    initial_utility, initial_result = full_eval("initial")
    state.utility_history.append(initial_utility)
    state.best_utility = initial_utility
    summary0 = summarize_failures(collect_failures(initial_result.failures))
    sink.emit(
        "display_analysis",
        {"phase": "vanilla", "outer_step": 0, "counts": summary0.counts,
         "recommended": list(summary0.recommended_edits)},
    )

    fixed_subset_ids: list[str] | None = None
    stop_reason = "completed"

    for outer_step in range(1, config.outer_steps + 1):
        state.outer_step = outer_step

        if not enforce_budget(ledger, config.budget, 0.0):
            stop_reason = "budget_exhausted"
            break

        # Resolve any pending structural commit against a full evaluation
        # before the prompt starts adapting to the new logic.
        if state.pending_full_eval:
            utility, _ = full_eval("post_commit")
            delta_uc, rolled_back = post_commit_eval(state, utility)
            sink.emit(
                "post_commit_eval",
                {
                    "outer_step": outer_step,
                    "full_eval_utility": utility,
                    "delta_uc": delta_uc,
                    "rolled_back": rolled_back,
                },
                label="rolled_back" if rolled_back else "kept",
            )
            if not rolled_back:
                state.utility_history.append(utility)
                state.best_utility = max(state.best_utility, utility)
                state.phase_label = "post_structural"

        # Inner loop: prompt evolution under fixed control logic.
        round_val = draw_val_subset()
        sink.mark_usage()
        result = optimize_prompt(
            state.current_agent,
            train_pool,
            round_val,
            backend,
            task,
            iterations=config.inner_steps,
            budget=config.budget,
            rng=rng,
            ledger=ledger,
            options=options,
            minibatch_size=config.minibatch_size,
            workers=config.workers,
            max_output_units=config.max_output_units,
        )
        state.inner_step = config.inner_steps
        if result.validated_utility is None:
            sink.emit(
                "optimize_prompt_on_task",
                {"outer_step": outer_step, "validated_utility": None,
                 "inner_history": result.history},
                outcome="budget_exhausted",
                with_usage=True,
            )
            stop_reason = "budget_exhausted"
            break

        state.current_agent.prompt = result.best_config
        state.utility_history.append(result.validated_utility)
        state.best_utility = max(state.best_utility, result.validated_utility)
        if state.phase_label == "vanilla":
            state.phase_label = "prompt_evolution"
        sink.emit(
            "optimize_prompt_on_task",
            {
                "outer_step": outer_step,
                "validated_utility": result.validated_utility,
                "inner_history": result.history,
                "prompt": result.best_config.to_dict(),
            },
            with_usage=True,
        )

        state.delta_up = compute_delta_up(state.utility_history)
        state.saturated = is_saturated(state.delta_up, state.epsilon)
        sink.emit(
            "get_evolution_credit",
            {"outer_step": outer_step, **credit_snapshot(state).to_dict(),
             "best_utility": state.best_utility},
        )

        if not state.saturated:
            continue  # prompt evolution is still paying; no structural edits

        # Outer loop: guarded structural search.
        val_failures = collect_failures(result.val_rows)
        guidance = summarize_failures(val_failures)
        sink.emit(
            "display_analysis",
            {
                "phase": state.phase_label,
                "outer_step": outer_step,
                "counts": guidance.counts,
                "recommended": list(guidance.recommended_edits),
            },
        )

        proposal = None
        for attempt in range(1, config.proposal_retries + 1):
            sink.mark_usage()
            try:
                candidate = propose_edit(
                    state.current_agent, guidance, backend, rng,
                    task_name=task.name, ledger=ledger,
                    attempt_tag=f"{outer_step}.{attempt}",
                )
            except BackendError as exc:
                state.proposal_stats.proposer_failures += 1
                sink.emit(
                    "adjust_logic",
                    {"outer_step": outer_step, "attempt": attempt, "error": str(exc)},
                    outcome="error",
                    with_usage=True,
                )
                continue
            if candidate.executable:
                state.proposal_stats.executable += 1
            else:
                state.proposal_stats.non_executable += 1
            sink.emit(
                "adjust_logic",
                {
                    "outer_step": outer_step,
                    "attempt": attempt,
                    "executable": candidate.executable,
                    "category": candidate.category,
                    "violations": list(candidate.violations),
                    "provenance": candidate.provenance,
                },
                with_usage=True,
            )
            if candidate.executable:
                proposal = candidate
                break
        if proposal is None:
            continue  # proposal round failed; resume prompt evolution next step

        if config.validation_subset_mode == "fixed":
            if fixed_subset_ids is None:
                fixed_subset_ids = sample_validation_subset(
                    train_pool, rng, config.validation_size_range
                )
            subset_ids = fixed_subset_ids
        else:
            subset_ids = sample_validation_subset(
                train_pool, rng, config.validation_size_range
            )
        sink.emit(
            "select_examples",
            {"outer_step": outer_step, "subset_ids": subset_ids},
        )
        by_id = {sample.id: sample for sample in train_pool}
        subset = [by_id[sample_id] for sample_id in subset_ids]

        candidate_agent = AgentConfig(
            prompt=state.current_agent.prompt, logic=proposal.candidate_logic
        )
        sink.mark_usage()
        report = ab_compare(
            state.current_agent, candidate_agent, subset, backend, task,
            delta=config.delta, ledger=ledger, workers=config.workers,
            max_output_units=config.max_output_units,
        )
        sink.emit(
            "compare_variants",
            {
                "outer_step": outer_step,
                "subset_ids": list(report.subset_ids),
                "utility_old": report.utility_old,
                "utility_new": report.utility_new,
                "delta": report.delta,
                "per_sample_diffs": [list(diff) for diff in report.per_sample_diffs],
                "recommendation": report.recommendation,
                "flagged": report.flagged,
            },
            with_usage=True,
        )

        projected = report.new_per_query_units / config.chars_per_unit * len(eval_subset)
        agent_before = state.current_agent.serialize()
        baseline_utility = None
        if report.recommendation == "accept":
            # Refresh the incumbent's eval-subset accuracy so the post-commit
            # comparison isolates the structural change.
            baseline_utility, _ = full_eval("pre_commit_baseline", emit=False)
        record = commit_or_rollback(
            state, proposal, report, config.delta, config.budget,
            projected_cost=projected, baseline_utility=baseline_utility,
        )
        sink.emit(
            "gate_verdict",
            {
                "outer_step": outer_step,
                "category": proposal.category,
                "delta": record.delta_on_subset,
                "cost_ok": record.cost_ok,
                "structure_eval_baseline": record.structure_eval_baseline,
                "rollback_token": record.rollback_token,
                "agent_before": agent_before,
                "agent_after": state.current_agent.serialize(),
            },
            label="accepted" if record.accepted else "rejected",
        )

    state.outer_step = min(state.outer_step, config.outer_steps)

    # Resolve a commit left pending by the last step.
    if state.pending_full_eval:
        utility, _ = full_eval("post_commit")
        delta_uc, rolled_back = post_commit_eval(state, utility)
        sink.emit(
            "post_commit_eval",
            {
                "outer_step": state.outer_step,
                "full_eval_utility": utility,
                "delta_uc": delta_uc,
                "rolled_back": rolled_back,
            },
            label="rolled_back" if rolled_back else "kept",
        )
        if not rolled_back:
            state.utility_history.append(utility)
            state.best_utility = max(state.best_utility, utility)
            state.phase_label = "post_structural"

    final_utility, final_result = full_eval("final")
    final_failures = summarize_failures(collect_failures(final_result.failures))
    sink.emit(
        "display_analysis",
        {"phase": f"final_{state.phase_label}", "outer_step": state.outer_step,
         "counts": final_failures.counts,
         "recommended": list(final_failures.recommended_edits)},
    )
    state.best_utility = max(state.best_utility, final_utility)
    sink.emit(
        "run_end",
        {
            "reason": stop_reason,
            "final_agent": state.current_agent.serialize(),
            "final_utility": final_utility,
            "best_utility": state.best_utility,
            "proposal_stats": state.proposal_stats.to_dict(),
            "ledger": ledger.snapshot(),
        },
    )
    return EvolutionRun(
        final_agent=state.current_agent,
        log=log,
        state=state,
        final_utility=final_utility,
    )
