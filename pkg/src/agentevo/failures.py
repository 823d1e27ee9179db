"""Failure taxonomy and the compact guidance summary for structural search.

Failures partition into three categories:

* ``extraction_runtime`` - malformed output, parse errors, backend faults;
* ``format_constraint`` - well-formed output that violates task
  requirements (failing checkers, partial constraint satisfaction);
* ``reasoning_content`` - well-formed but simply wrong.

The summary counts categories, ranks them, and maps each to the pipeline
edit families most likely to address it; that ranked recommendation list
steers the structural proposer.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backends import BackendError, ChatMessage, GenerationRequest, UsageLedger
from .evaluation import EvalRow
from .pipeline import SolverOutcome
from .tasks import ScoreResult

CATEGORIES = ("extraction_runtime", "format_constraint", "reasoning_content")

# Edit families drawn from the admissible structural edit space.
RECOMMENDATION_MAP: dict[str, tuple[str, ...]] = {
    "extraction_runtime": ("normalization", "extraction"),
    "format_constraint": ("self_check", "repair", "early_exit"),
    "reasoning_content": ("sampling_policy", "aggregation", "verification"),
}

DIAGNOSIS_TEMPLATE = (
    "A solver answered a task incorrectly.\nTask:\n{task}\n\nPredicted: {predicted}\n"
    "Expected: {gold}\n\nGive a one-sentence root-cause analysis of the failure."
)


class ContractViolation(RuntimeError):
    """An operation was invoked outside its stated precondition."""


@dataclass
class FailureRecord:
    sample_id: str
    predicted: str
    gold: str
    category: str
    diagnosis: str | None = None


def classify_failure(outcome: SolverOutcome | None, score: ScoreResult) -> str:
    """Assign a failing (outcome, score) pair to exactly one category."""
    if score.utility >= 1.0:
        raise ContractViolation("classify_failure called on a passing sample")
    if outcome is None or outcome.extraction_failed or outcome.answer is None:
        return "extraction_runtime"
    if score.violated_constraints or (score.loose is not None and score.loose < 1.0):
        return "format_constraint"
    return "reasoning_content"


def failure_record(row: EvalRow) -> FailureRecord:
    """Build a failure record from a failing evaluation row."""
    predicted = ""
    if row.outcome is not None and row.outcome.answer is not None:
        predicted = row.outcome.answer
    return FailureRecord(
        sample_id=row.sample.id,
        predicted=predicted,
        gold=str(row.sample.gold),
        category=classify_failure(row.outcome, row.score),
    )


def collect_failures(rows: list[EvalRow]) -> list[FailureRecord]:
    return [failure_record(row) for row in rows if not row.passed]


@dataclass
class GuidanceSummary:
    counts: dict[str, int]
    ranked: tuple[str, ...]
    recommended_edits: tuple[str, ...]
    total: int

    def render(self) -> str:
        if self.total == 0:
            return "No recent failures."
        lines = [
            f"{self.total} recent failures:",
        ]
        for category in self.ranked:
            lines.append(f"- {category}: {self.counts[category]}")
        lines.append("Recommended first: " + ", ".join(self.recommended_edits))
        return "\n".join(lines)


def summarize_failures(records: list[FailureRecord]) -> GuidanceSummary:
    """Count, rank, and map failures to recommended edit categories."""
    counts = {category: 0 for category in CATEGORIES}
    for record in records:
        if record.category not in counts:
            raise ContractViolation(f"record with unknown category {record.category!r}")
        counts[record.category] += 1
    ranked = tuple(
        sorted(
            (c for c in CATEGORIES if counts[c] > 0),
            key=lambda c: (-counts[c], CATEGORIES.index(c)),
        )
    )
    recommended: list[str] = []
    for category in ranked:
        for edit in RECOMMENDATION_MAP[category]:
            if edit not in recommended:
                recommended.append(edit)
    return GuidanceSummary(
        counts=counts,
        ranked=ranked,
        recommended_edits=tuple(recommended),
        total=len(records),
    )


def diagnose_failures(
    records: list[FailureRecord],
    backend,
    samples_by_id: dict[str, object],
    max_diagnoses: int = 5,
    max_output_units: int = 200,
    ledger: UsageLedger | None = None,
    phase: str = "prompt_optimization",
) -> list[FailureRecord]:
    """Attach one-sentence root-cause diagnoses to the first few failures.

    Synthetic surrogate backends skip the per-failure calls; the category
    itself stands in as the diagnosis text.
    """
    for record in records[:max_diagnoses]:
        if record.diagnosis is not None:
            continue
        if getattr(backend, "is_surrogate", False):
            record.diagnosis = f"{record.category} failure"
            continue
        sample = samples_by_id.get(record.sample_id)
        task_text = sample.primary_input() if sample is not None else "(unavailable)"
        request = GenerationRequest(
            messages=(
                ChatMessage(
                    "user",
                    DIAGNOSIS_TEMPLATE.format(
                        task=task_text, predicted=record.predicted or "(nothing)", gold=record.gold
                    ),
                ),
            ),
            temperature=1.0,
            n=1,
            max_output_units=max_output_units,
            metadata={"purpose": "prompt_reflect_diagnose", "sample_id": record.sample_id},
        )
        try:
            response = backend.generate(request)
        except BackendError:
            continue
        if ledger is not None:
            ledger.record(response, phase)
        record.diagnosis = response.candidates[0].strip()
    return records
