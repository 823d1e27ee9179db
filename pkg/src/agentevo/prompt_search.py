"""Inner-loop prompt evolution under fixed control logic.

Each iteration samples a parent from a Pareto front (accuracy up, token
cost down) with probability proportional to its failure coverage, generates
candidates through three channels (handcrafted mutations, failure-guided
reflection, crossover of the two most complementary front members),
evaluates them on fresh training minibatches, and updates the front.  After
the last iteration every front member is re-evaluated on a held-out
validation subset and the best validated configuration is returned.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .backends import BackendError, ChatMessage, GenerationRequest, UsageLedger
from .evaluation import EvalResult, TaskSpec, evaluate_agent
from .failures import FailureRecord, collect_failures, diagnose_failures
from .pipeline import AgentConfig, PipelineConfig, PromptConfig, find_json_object
from .tasks import TaskSample

PROMPT_PROPOSAL_VERSION = 1

REFLECT_PROMPT = (
    "You tune the prompt configuration of a solving agent.\n"
    "Current configuration (JSON):\n{config}\n\n"
    "Observed failure diagnoses:\n{diagnoses}\n\n"
    "Propose one revised configuration that addresses the diagnoses.\n"
    'Reply with a single JSON object with keys "role", "requirements", "temperature".'
)

CROSSOVER_PROMPT = (
    "Two prompt configurations for the same agent succeed on different kinds of tasks.\n"
    "Configuration A (JSON):\n{config_a}\n\n"
    "Configuration B (JSON):\n{config_b}\n\n"
    "Unify their respective strengths into a single configuration.\n"
    'Reply with a single JSON object with keys "role", "requirements", "temperature".'
)

DEFAULT_ROLE_VARIANTS = (
    "You answer multiple-choice questions.",
    "You are a careful expert who answers questions precisely.",
    "You are a meticulous solver who never skips checking the requirements.",
)

DEFAULT_DIRECTIVES = (
    "Think step by step before answering.",
    "Double-check your reasoning before finalizing.",
    "Answer with one letter only.",
    "Keep the final answer on its own line.",
)

TEMPERATURE_CEILING = 1.2


@dataclass(frozen=True)
class MutationOptions:
    roles: tuple[str, ...] = DEFAULT_ROLE_VARIANTS
    directives: tuple[str, ...] = DEFAULT_DIRECTIVES
    temperature_deltas: tuple[float, ...] = (0.1, -0.1, 0.3, -0.3)
    reflection_temperature: float = 1.0
    candidate_cap: int = 8
    max_diagnoses: int = 5


@dataclass
class PromptCandidate:
    config: PromptConfig
    minibatch_accuracy: float
    cost_units: int
    failure_coverage: frozenset[str] = frozenset()
    origin: str = "seed"

    def __post_init__(self) -> None:
        if not 0.0 <= self.minibatch_accuracy <= 1.0:
            raise ValueError("accuracy out of range")
        if self.cost_units < 0:
            raise ValueError("cost must be non-negative")


def dominates(a: PromptCandidate, b: PromptCandidate) -> bool:
    """Weak improvement on both axes with strict improvement on at least one."""
    if a.minibatch_accuracy < b.minibatch_accuracy or a.cost_units > b.cost_units:
        return False
    return a.minibatch_accuracy > b.minibatch_accuracy or a.cost_units < b.cost_units


class ParetoFront:
    """Non-dominated prompt candidates under (accuracy up, cost down)."""

    def __init__(self) -> None:
        self.members: list[PromptCandidate] = []

    def __len__(self) -> int:
        return len(self.members)

    def update(self, candidate: PromptCandidate) -> bool:
        """Insert ``candidate`` unless dominated; evict members it dominates."""
        if any(dominates(member, candidate) for member in self.members):
            return False
        self.members = [m for m in self.members if not dominates(candidate, m)]
        self.members.append(candidate)
        return True

    def best(self) -> PromptCandidate:
        if not self.members:
            raise ValueError("front is empty")
        return max(self.members, key=lambda m: (m.minibatch_accuracy, -m.cost_units))

    def most_complementary_pair(self) -> tuple[PromptCandidate, PromptCandidate] | None:
        """The two members whose failure-coverage sets are least similar."""
        if len(self.members) < 2:
            return None
        best_pair = None
        best_score = None
        for i in range(len(self.members)):
            for j in range(i + 1, len(self.members)):
                a, b = self.members[i], self.members[j]
                union = a.failure_coverage | b.failure_coverage
                jaccard = (
                    len(a.failure_coverage & b.failure_coverage) / len(union) if union else 1.0
                )
                if best_score is None or jaccard < best_score:
                    best_score = jaccard
                    best_pair = (a, b)
        return best_pair


def update_front(front: ParetoFront, candidate: PromptCandidate) -> ParetoFront:
    front.update(candidate)
    return front


def sample_parent(front: ParetoFront, rng: random.Random) -> PromptCandidate:
    """Coverage-proportional parent choice; uniform when all coverages are empty."""
    if not front.members:
        raise ValueError("cannot sample a parent from an empty front")
    weights = [len(member.failure_coverage) for member in front.members]
    if sum(weights) == 0:
        return front.members[int(rng.random() * len(front.members))]
    return rng.choices(front.members, weights=weights, k=1)[0]


# ---------------------------------------------------------------------------
# Candidate generation channels


def mutation_candidates(parent: PromptConfig, options: MutationOptions) -> list[PromptConfig]:
    variants: list[PromptConfig] = []
    for role in options.roles:
        if role != parent.role:
            variants.append(
                PromptConfig(role, parent.requirements, parent.temperature, parent.output_mode)
            )
    for directive in options.directives:
        if directive not in parent.requirements:
            variants.append(
                PromptConfig(
                    parent.role,
                    parent.requirements + (directive,),
                    parent.temperature,
                    parent.output_mode,
                )
            )
    for directive in parent.requirements:
        trimmed = tuple(req for req in parent.requirements if req != directive)
        variants.append(
            PromptConfig(parent.role, trimmed, parent.temperature, parent.output_mode)
        )
    for delta in options.temperature_deltas:
        temperature = min(max(parent.temperature + delta, 0.0), TEMPERATURE_CEILING)
        if temperature != parent.temperature:
            variants.append(
                PromptConfig(parent.role, parent.requirements, temperature, parent.output_mode)
            )
    unique: dict[str, PromptConfig] = {}
    for variant in variants:
        unique.setdefault(json.dumps(variant.to_dict(), sort_keys=True), variant)
    return list(unique.values())


def parse_prompt_reply(reply: str, parent: PromptConfig) -> PromptConfig | None:
    data = find_json_object(reply)
    if data is None:
        return None
    role = data.get("role")
    requirements = data.get("requirements")
    if not isinstance(role, str) or not isinstance(requirements, list):
        return None
    if not all(isinstance(req, str) for req in requirements):
        return None
    try:
        temperature = float(data.get("temperature", parent.temperature))
    except (TypeError, ValueError):
        return None
    temperature = min(max(temperature, 0.0), TEMPERATURE_CEILING)
    return PromptConfig(role, tuple(requirements), temperature, parent.output_mode)


def generate_candidates(
    parent: PromptCandidate,
    failures: list[FailureRecord],
    front: ParetoFront,
    backend,
    rng: random.Random,
    options: MutationOptions,
    samples_by_id: dict[str, TaskSample] | None = None,
    ledger: UsageLedger | None = None,
) -> list[tuple[PromptConfig, str]]:
    """Union of the three channels, capped at ``options.candidate_cap``."""
    mutations = mutation_candidates(parent.config, options)
    rng.shuffle(mutations)

    reserved = 0
    extras: list[tuple[PromptConfig, str]] = []

    if failures:
        try:
            diagnose_failures(
                failures,
                backend,
                samples_by_id or {},
                max_diagnoses=options.max_diagnoses,
                ledger=ledger,
            )
            diagnosed = [r for r in failures if r.diagnosis][: options.max_diagnoses]
            if diagnosed:
                request = GenerationRequest(
                    messages=(
                        ChatMessage(
                            "user",
                            REFLECT_PROMPT.format(
                                config=json.dumps(parent.config.to_dict(), sort_keys=True),
                                diagnoses="\n".join(f"- {r.diagnosis}" for r in diagnosed),
                            ),
                        ),
                    ),
                    temperature=options.reflection_temperature,
                    n=1,
                    metadata={"purpose": "prompt_reflect_propose"},
                )
                response = backend.generate(request)
                if ledger is not None:
                    ledger.record(response, "prompt_optimization")
                parsed = parse_prompt_reply(response.candidates[0], parent.config)
                if parsed is not None:
                    extras.append((parsed, "reflection"))
                    reserved += 1
        except BackendError:
            pass  # degrade to mutation-only output

    pair = front.most_complementary_pair()
    if pair is not None:
        try:
            request = GenerationRequest(
                messages=(
                    ChatMessage(
                        "user",
                        CROSSOVER_PROMPT.format(
                            config_a=json.dumps(pair[0].config.to_dict(), sort_keys=True),
                            config_b=json.dumps(pair[1].config.to_dict(), sort_keys=True),
                        ),
                    ),
                ),
                temperature=options.reflection_temperature,
                n=1,
                metadata={"purpose": "prompt_crossover"},
            )
            response = backend.generate(request)
            if ledger is not None:
                ledger.record(response, "prompt_optimization")
            parsed = parse_prompt_reply(response.candidates[0], parent.config)
            if parsed is not None:
                extras.append((parsed, "crossover"))
                reserved += 1
        except BackendError:
            pass

    room = max(options.candidate_cap - reserved, 0)
    out = [(config, "mutation") for config in mutations[:room]]
    out.extend(extras)
    return out[: options.candidate_cap]


# ---------------------------------------------------------------------------
# The optimisation loop


@dataclass
class OptimizeResult:
    best_config: PromptConfig
    validated_utility: float | None
    history: list[float]
    front: ParetoFront
    val_rows: list = field(default_factory=list)
    budget_exhausted: bool = False


def _projected_cost(ledger: UsageLedger | None, samples_done: int, batch: int) -> float:
    if ledger is None or samples_done == 0:
        return 0.0
    return ledger.total_units() / samples_done * batch


def _within_budget(ledger: UsageLedger | None, budget: float | None, projected: float) -> bool:
    if budget is None or ledger is None:
        return True
    return ledger.total_units() + projected <= budget


def optimize_prompt(
    agent: AgentConfig,
    train_pool: tuple[TaskSample, ...],
    val_subset: tuple[TaskSample, ...],
    backend,
    task: TaskSpec,
    iterations: int,
    budget: float | None,
    rng: random.Random,
    ledger: UsageLedger | None = None,
    options: MutationOptions = MutationOptions(),
    minibatch_size: int = 20,
    workers: int = 1,
    max_output_units: int = 1024,
) -> OptimizeResult:
    """Evolve the prompt for ``iterations`` rounds under fixed control logic.

    Candidates whose projected evaluation cost would break the budget are
    rejected before evaluation; if the budget blocks everything the seed
    configuration is returned unchanged.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not train_pool:
        raise ValueError("train pool is empty")

    logic: PipelineConfig = agent.logic
    samples_by_id = {sample.id: sample for sample in train_pool}
    samples_done = 0
    front = ParetoFront()
    failures_by_key: dict[str, list[FailureRecord]] = {}
    history: list[float] = []

    def eval_config(config: PromptConfig, batch, phase: str) -> EvalResult:
        nonlocal samples_done
        result = evaluate_agent(
            AgentConfig(config, logic),
            batch,
            backend,
            task,
            ledger=ledger,
            phase=phase,
            workers=workers,
            max_output_units=max_output_units,
        )
        samples_done += len(batch)
        return result

    def key_of(config: PromptConfig) -> str:
        return json.dumps(config.to_dict(), sort_keys=True)

    # Seed the front with the incumbent configuration.
    seed_batch = rng.sample(list(train_pool), min(minibatch_size, len(train_pool)))
    seed_result = eval_config(agent.prompt, seed_batch, "prompt_optimization")
    seed_candidate = PromptCandidate(
        config=agent.prompt,
        minibatch_accuracy=seed_result.utility,
        cost_units=seed_result.usage.input_units + seed_result.usage.output_units,
        origin="seed",
    )
    front.update(seed_candidate)
    failures_by_key[key_of(agent.prompt)] = collect_failures(seed_result.failures)

    budget_exhausted = False
    for _ in range(iterations):
        minibatch = rng.sample(list(train_pool), min(minibatch_size, len(train_pool)))
        parent = sample_parent(front, rng)
        parent_failures = failures_by_key.get(key_of(parent.config), [])
        candidates = generate_candidates(
            parent, parent_failures, front, backend, rng, options, samples_by_id, ledger
        )
        failing_ids = {record.sample_id for record in parent_failures}
        for config, origin in candidates:
            projected = _projected_cost(ledger, samples_done, len(minibatch))
            if not _within_budget(ledger, budget, projected):
                budget_exhausted = True
                continue
            result = eval_config(config, minibatch, "prompt_optimization")
            coverage = frozenset(
                row.sample.id for row in result.rows if row.passed and row.sample.id in failing_ids
            )
            front.update(
                PromptCandidate(
                    config=config,
                    minibatch_accuracy=result.utility,
                    cost_units=result.usage.input_units + result.usage.output_units,
                    failure_coverage=coverage,
                    origin=origin,
                )
            )
            failures_by_key[key_of(config)] = collect_failures(result.failures)
        history.append(max(member.minibatch_accuracy for member in front.members))

    # Re-evaluate the front on the held-out validation subset.
    best_config: PromptConfig | None = None
    best_utility: float | None = None
    best_rows: list = []
    ordered = sorted(
        front.members, key=lambda m: (-m.minibatch_accuracy, m.cost_units)
    )
    for member in ordered:
        projected = _projected_cost(ledger, samples_done, len(val_subset))
        if not _within_budget(ledger, budget, projected):
            budget_exhausted = True
            continue
        result = eval_config(member.config, list(val_subset), "evaluation")
        if budget is not None and ledger is not None and ledger.total_units() > budget:
            budget_exhausted = True
            continue
        if best_utility is None or result.utility > best_utility:
            best_config = member.config
            best_utility = result.utility
            best_rows = result.rows

    if best_config is None:
        # Budget blocked the validation pass entirely; keep the seed prompt.
        return OptimizeResult(
            best_config=agent.prompt,
            validated_utility=None,
            history=history,
            front=front,
            val_rows=[],
            budget_exhausted=True,
        )
    return OptimizeResult(
        best_config=best_config,
        validated_utility=best_utility,
        history=history,
        front=front,
        val_rows=best_rows,
        budget_exhausted=budget_exhausted,
    )
