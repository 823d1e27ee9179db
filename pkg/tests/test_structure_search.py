from __future__ import annotations

import json
import random

import pytest

from agentevo.backends import Script, UsageLedger
from agentevo.controller import EvolutionState, ProposalStats
from agentevo.evaluation import get_task
from agentevo.failures import ContractViolation, FailureRecord, summarize_failures
from agentevo.harness import EpsilonSpec
from agentevo.pipeline import (
    AgentConfig,
    PipelineConfig,
    PromptConfig,
    build_solver_messages,
    canonical_pipelines,
    validate_pipeline,
)
from agentevo.structure_search import (
    AbReport,
    EDIT_CATEGORIES,
    ab_compare,
    build_edit_prompt,
    commit_or_rollback,
    parse_edit_reply,
    post_commit_eval,
    sample_validation_subset,
)
from agentevo.tasks import TaskSample

TASK = get_task("synthetic_letters")


def _agent(logic_name="vanilla"):
    return AgentConfig(
        prompt=PromptConfig(role="You answer questions.", temperature=0.2),
        logic=canonical_pipelines("letter")[logic_name],
    )


def _state(agent=None, history=(0.8,)):
    return EvolutionState(
        current_agent=agent or _agent(),
        epsilon=EpsilonSpec("numeric", 0.01),
        delta=0.02,
        utility_history=list(history),
        cost_ledger=UsageLedger(),
        proposal_stats=ProposalStats(),
    )


def _report(old, new, n=100):
    passes_old = int(round(old * n))
    passes_new = int(round(new * n))
    return AbReport(
        subset_ids=tuple(f"s{i}" for i in range(n)),
        utility_old=passes_old / n,
        utility_new=passes_new / n,
        per_sample_diffs=tuple(
            (f"s{i}", i < passes_old, i < passes_new) for i in range(n)
        ),
        recommendation="accept" if passes_new / n > passes_old / n + 0.02 else "reject",
    )


class TestParseEditReply:
    def test_valid_aggregation_edit(self):
        stages = [stage.to_dict() for stage in canonical_pipelines("letter")[
            "self_consistency_verify"
        ].stages]
        reply = json.dumps({"category": "aggregation", "stages": stages})
        proposal = parse_edit_reply(reply, _agent().logic)
        assert proposal.executable
        assert proposal.category == "aggregation"
        assert validate_pipeline(proposal.candidate_logic) == []

    def test_malformed_text_counted_not_applied(self):
        proposal = parse_edit_reply("let me think about this...", _agent().logic)
        assert not proposal.executable
        assert proposal.candidate_logic is None

    def test_blacklisted_stage_attaches_violation(self):
        reply = json.dumps(
            {
                "category": "sampling_policy",
                "stages": [
                    {"kind": "sample", "n": 1, "temperature_floor": 0.0},
                    {"kind": "sleep", "seconds": 1},
                    {"kind": "return"},
                ],
            }
        )
        proposal = parse_edit_reply(reply, _agent().logic)
        assert not proposal.executable
        assert any("blacklisted" in v for v in proposal.violations)

    def test_unknown_category_rejected(self):
        reply = json.dumps({"category": "total_rewrite", "stages": []})
        proposal = parse_edit_reply(reply, _agent().logic)
        assert not proposal.executable

    def test_blacklist_not_negotiable(self):
        # proposer cannot clear the incumbent's disallowed kinds
        reply = json.dumps(
            {
                "category": "sampling_policy",
                "stages": [
                    {"kind": "sample", "n": 1, "temperature_floor": 0.0},
                    {"kind": "return"},
                ],
                "disallowed_stage_kinds": [],
            }
        )
        proposal = parse_edit_reply(reply, _agent().logic)
        assert proposal.candidate_logic.disallowed_stage_kinds == _agent().logic.disallowed_stage_kinds

    def test_edit_prompt_mentions_menu_and_pipeline(self):
        guidance = summarize_failures(
            [FailureRecord("a", "A", "B", "reasoning_content")]
        )
        prompt = build_edit_prompt(_agent(), guidance, "synthetic_letters")
        assert "aggregation" in prompt
        assert '"stages"' in prompt
        for category in EDIT_CATEGORIES:
            assert category in prompt


class TestValidationSubset:
    def _pool(self, n=40):
        return tuple(
            TaskSample(id=f"s{i:03d}", input_fields={"question": f"q{i}"}, gold="A")
            for i in range(n)
        )

    def test_exact_size(self):
        ids = sample_validation_subset(self._pool(), random.Random(0), (12, 12))
        assert len(ids) == 12
        assert ids == sorted(ids)

    def test_fresh_draws_differ(self):
        rng = random.Random(0)
        draws = [tuple(sample_validation_subset(self._pool(), rng, (10, 30))) for _ in range(12)]
        assert len(set(draws)) > 1

    def test_whole_pool(self):
        pool = self._pool(12)
        ids = sample_validation_subset(pool, random.Random(0), (12, 12))
        assert ids == sorted(s.id for s in pool)

    def test_bad_range_rejected(self):
        with pytest.raises(ValueError):
            sample_validation_subset(self._pool(10), random.Random(0), (5, 20))


class TestAbCompare:
    def _scripted_pair(self, old_pass, new_pass, n=100):
        samples = [
            TaskSample(id=f"s{i:03d}", input_fields={"question": f"question {i}"}, gold="B")
            for i in range(n)
        ]
        old_agent = _agent()
        new_logic = PipelineConfig.from_dict(old_agent.logic.to_dict())
        stages = [dict(stage.to_dict()) for stage in new_logic.stages]
        stages[0]["temperature_floor"] = 0.4
        new_logic = PipelineConfig.from_dict({"stages": stages})
        new_agent = AgentConfig(prompt=old_agent.prompt, logic=new_logic)
        script = Script()
        for i, sample in enumerate(samples):
            script.add(
                build_solver_messages(old_agent.prompt, sample), 0.2,
                "B" if i < old_pass else "A",
            )
            script.add(
                build_solver_messages(new_agent.prompt, sample), 0.4,
                "B" if i < new_pass else "A",
            )
        return old_agent, new_agent, samples, script.backend()

    def test_accept_above_gate(self):
        old_agent, new_agent, samples, backend = self._scripted_pair(80, 83)
        report = ab_compare(old_agent, new_agent, samples, backend, TASK, delta=0.02)
        assert (report.utility_old, report.utility_new) == (0.80, 0.83)
        assert report.recommendation == "accept"

    def test_reject_below_gate(self):
        old_agent, new_agent, samples, backend = self._scripted_pair(80, 81)
        report = ab_compare(old_agent, new_agent, samples, backend, TASK, delta=0.02)
        assert report.recommendation == "reject"

    def test_strict_inequality_at_boundary(self):
        old_agent, new_agent, samples, backend = self._scripted_pair(80, 82)
        report = ab_compare(old_agent, new_agent, samples, backend, TASK, delta=0.02)
        assert report.recommendation == "reject"

    def test_identical_subset_and_order(self):
        old_agent, new_agent, samples, backend = self._scripted_pair(5, 6, n=10)
        shuffled = list(samples)
        random.Random(4).shuffle(shuffled)
        report = ab_compare(old_agent, new_agent, shuffled, backend, TASK, delta=0.02)
        assert list(report.subset_ids) == sorted(s.id for s in samples)
        assert [d[0] for d in report.per_sample_diffs] == list(report.subset_ids)

    def test_backend_error_scores_zero_and_flags(self):
        old_agent, new_agent, samples, backend = self._scripted_pair(5, 6, n=10)
        # drop one scripted entry for the new variant -> backend error on it
        victim = build_solver_messages(new_agent.prompt, samples[0])
        from agentevo.backends import message_digest, script_key

        backend.script.pop(script_key(message_digest(victim), 0.4, 0))
        report = ab_compare(old_agent, new_agent, samples, backend, TASK, delta=0.02)
        assert report.flagged
        assert report.per_sample_diffs[0][2] is False


class TestCommitOrRollback:
    def test_accept_swaps_logic_and_records_baseline(self):
        state = _state(history=[0.8])
        proposal = parse_edit_reply(
            json.dumps(
                {
                    "category": "aggregation",
                    "stages": [s.to_dict() for s in canonical_pipelines("letter")[
                        "self_consistency_verify"].stages],
                }
            ),
            state.current_agent.logic,
        )
        record = commit_or_rollback(state, proposal, _report(0.80, 0.90), 0.02, None)
        assert record.accepted
        assert record.cost_ok
        assert state.pending_full_eval
        assert state.structure_eval_baseline == 0.8
        assert state.current_agent.logic.to_dict() == proposal.candidate_logic.to_dict()
        assert state.proposal_stats.accepted == 1

    def test_reject_leaves_state_bit_identical(self):
        state = _state()
        before = state.current_agent.serialize()
        proposal = parse_edit_reply(
            json.dumps(
                {
                    "category": "sampling_policy",
                    "stages": [s.to_dict() for s in canonical_pipelines("letter")["vanilla"].stages],
                }
            ),
            state.current_agent.logic,
        )
        record = commit_or_rollback(state, proposal, _report(0.80, 0.75), 0.02, None)
        assert not record.accepted
        assert state.current_agent.serialize() == before
        assert not state.pending_full_eval
        assert state.proposal_stats.rejected == 1
        assert state.proposal_stats.rejected_regression == 1

    def test_cost_violation_rejects_accepted_report(self):
        state = _state()
        state.cost_ledger.add_usage(
            type("U", (), {"input_units": 90, "output_units": 0, "calls": 1})()
        )
        proposal = parse_edit_reply(
            json.dumps(
                {
                    "category": "aggregation",
                    "stages": [s.to_dict() for s in canonical_pipelines("letter")[
                        "self_consistency_verify"].stages],
                }
            ),
            state.current_agent.logic,
        )
        record = commit_or_rollback(
            state, proposal, _report(0.80, 0.90), 0.02, budget=100, projected_cost=15
        )
        assert not record.accepted
        assert not record.cost_ok

    def test_non_executable_proposal_refused(self):
        state = _state()
        proposal = parse_edit_reply("gibberish", state.current_agent.logic)
        with pytest.raises(ContractViolation):
            commit_or_rollback(state, proposal, _report(0.8, 0.9), 0.02, None)


class TestPostCommitEval:
    def _committed_state(self, baseline=0.80):
        state = _state(history=[baseline])
        vanilla = state.current_agent.logic
        proposal = parse_edit_reply(
            json.dumps(
                {
                    "category": "aggregation",
                    "stages": [s.to_dict() for s in canonical_pipelines("letter")[
                        "self_consistency_verify"].stages],
                }
            ),
            vanilla,
        )
        commit_or_rollback(state, proposal, _report(baseline, 0.9), 0.02, None)
        return state, vanilla

    def test_positive_delta_keeps_commit(self):
        state, _ = self._committed_state()
        delta_uc, rolled_back = post_commit_eval(state, 0.85)
        assert delta_uc == pytest.approx(0.05)
        assert not rolled_back

    def test_negative_delta_rolls_back(self):
        state, vanilla = self._committed_state()
        delta_uc, rolled_back = post_commit_eval(state, 0.78)
        assert delta_uc == pytest.approx(-0.02)
        assert rolled_back
        assert state.current_agent.logic.to_dict() == vanilla.to_dict()

    def test_zero_delta_keeps_commit(self):
        state, _ = self._committed_state()
        delta_uc, rolled_back = post_commit_eval(state, 0.80)
        assert delta_uc == 0.0
        assert not rolled_back

    def test_requires_pending_flag(self):
        state = _state()
        with pytest.raises(ContractViolation):
            post_commit_eval(state, 0.9)
