"""Task registry and agent evaluation over sample batches.

A :class:`TaskSpec` binds a benchmark name to the answer extractor its
pipelines should use and the scorer that instantiates the utility.  Backend
faults on individual samples score 0 and are flagged rather than aborting
the batch.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from .backends import BackendError, UsageLedger
from .constraints import ConfigurationError, build_checkers, score_strict_constraints
from .pipeline import AgentConfig, CallUsage, SolverOutcome, run_pipeline
from .scoring import score_letter_match, score_numeric_exact, score_span_em_f1
from .tasks import ScoreResult, TaskSample


@dataclass(frozen=True)
class TaskSpec:
    name: str
    extractor: str
    scorer: Callable[[TaskSample, str], ScoreResult]

    def score(self, sample: TaskSample, outcome: SolverOutcome) -> ScoreResult:
        if outcome.extraction_failed or outcome.answer is None:
            return ScoreResult(utility=0.0, extraction_failed=True)
        return self.scorer(sample, outcome.answer)


def _score_letters(sample: TaskSample, prediction: str) -> ScoreResult:
    return score_letter_match(prediction, str(sample.gold))


def _score_numeric(sample: TaskSample, prediction: str) -> ScoreResult:
    return score_numeric_exact(prediction, str(sample.gold))


def _score_span(sample: TaskSample, prediction: str) -> ScoreResult:
    em, f1 = score_span_em_f1(prediction, str(sample.gold))
    return ScoreResult(utility=float(em), loose=f1)


def _score_constraints(sample: TaskSample, prediction: str) -> ScoreResult:
    return score_strict_constraints(prediction, build_checkers(list(sample.gold)))


TASKS: dict[str, TaskSpec] = {
    "mmlu": TaskSpec("mmlu", "letter", _score_letters),
    "synthetic_letters": TaskSpec("synthetic_letters", "letter", _score_letters),
    "mgsm": TaskSpec("mgsm", "numeric", _score_numeric),
    "hotpotqa": TaskSpec("hotpotqa", "span", _score_span),
    "ifeval": TaskSpec("ifeval", "span", _score_constraints),
}


def get_task(name: str) -> TaskSpec:
    if name not in TASKS:
        raise ConfigurationError(f"unknown task: {name!r} (known: {sorted(TASKS)})")
    return TASKS[name]


@dataclass
class EvalRow:
    sample: TaskSample
    outcome: SolverOutcome | None
    score: ScoreResult
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.score.utility >= 1.0


@dataclass
class EvalResult:
    rows: list[EvalRow]
    usage: CallUsage

    @property
    def utility(self) -> float:
        if not self.rows:
            return 0.0
        return sum(row.score.utility for row in self.rows) / len(self.rows)

    @property
    def failures(self) -> list[EvalRow]:
        return [row for row in self.rows if not row.passed]

    @property
    def flagged(self) -> bool:
        return any(row.error for row in self.rows)

    def per_query_units(self) -> float:
        if not self.rows:
            return 0.0
        return (self.usage.input_units + self.usage.output_units) / len(self.rows)


def evaluate_agent(
    agent: AgentConfig,
    samples: list[TaskSample] | tuple[TaskSample, ...],
    backend,
    task: TaskSpec,
    ledger: UsageLedger | None = None,
    phase: str = "evaluation",
    workers: int = 1,
    max_output_units: int = 1024,
) -> EvalResult:
    """Run the agent over ``samples`` in order and score each outcome.

    ``workers`` > 1 fans samples out over threads; results and usage are
    merged back in input order so the result is identical to a sequential
    pass whenever the backend is deterministic.
    """

    def solve(sample: TaskSample) -> EvalRow:
        try:
            outcome = run_pipeline(
                agent.prompt,
                agent.logic,
                sample,
                backend,
                max_output_units=max_output_units,
            )
        except BackendError as exc:
            return EvalRow(
                sample=sample,
                outcome=None,
                score=ScoreResult(utility=0.0, extraction_failed=True),
                error=str(exc),
            )
        return EvalRow(sample=sample, outcome=outcome, score=task.score(sample, outcome))

    if workers > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(solve, samples))
    else:
        rows = [solve(sample) for sample in samples]

    usage = CallUsage()
    for row in rows:
        if row.outcome is not None:
            usage.input_units += row.outcome.usage.input_units
            usage.output_units += row.outcome.usage.output_units
            usage.calls += row.outcome.usage.calls
    if ledger is not None:
        ledger.add_usage(usage, phase)
    return EvalResult(rows=rows, usage=usage)
