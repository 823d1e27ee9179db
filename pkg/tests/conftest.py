from __future__ import annotations

from agentevo.pipeline import PromptConfig, canonical_pipelines, run_pipeline
from agentevo.synthetic import SyntheticBackend, landscape_for, make_letter_samples


def run_consensus_batch(p: float, n_queries: int, seed: int = 0):
    """Drive the consensus-with-verify pipeline over ``n_queries`` synthetic tasks.

    Landscape: i.i.d. per-candidate gold probability ``p``, per-candidate
    distinct distractors, no malformed replies.  Returns the fractions
    (consensus-path-correct, verify-fired, overall-correct).
    """
    samples = make_letter_samples(n_queries, seed=seed)
    backend = SyntheticBackend(
        landscape_for(
            samples,
            base_p=p,
            content_cap=1.0,
            helpful_directives=(),
            format_directive=None,
            temperature_penalty=0.0,
        ),
        seed=seed,
    )
    pipeline = canonical_pipelines("letter")["self_consistency_verify"]
    prompt = PromptConfig(role="You answer option questions.", temperature=0.2)

    consensus_correct = 0
    verify_fired = 0
    correct = 0
    for sample in samples:
        outcome = run_pipeline(prompt, pipeline, sample, backend)
        exited = any(
            record.get("stage") == "early_exit" and record.get("fired")
            for record in outcome.trace
        )
        if exited and outcome.answer == sample.gold:
            consensus_correct += 1
        if any(record.get("stage") == "verify" for record in outcome.trace):
            verify_fired += 1
        if outcome.answer == sample.gold:
            correct += 1
    return (
        consensus_correct / n_queries,
        verify_fired / n_queries,
        correct / n_queries,
    )


def analytic_consensus(p: float) -> float:
    """Probability that at least 2 of 3 independent candidates are gold."""
    return p**3 + 3 * p**2 * (1 - p)
