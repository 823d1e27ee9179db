from __future__ import annotations

import copy

import pytest

from agentevo.backends import ChatMessage, Script, ScriptedBackend
from agentevo.pipeline import (
    AgentConfig,
    PipelineConfig,
    PipelineStage,
    PromptConfig,
    REPAIR_INSTRUCTION,
    SELF_CHECK_TEMPLATE,
    VERIFY_TEMPLATE,
    apply_repair_acceptance,
    build_solver_messages,
    canonical_pipelines,
    extract_stage,
    parse_check_reply,
    parse_repair_reply,
    return_stage,
    run_pipeline,
    sample_stage,
    self_check_constraints,
    validate_pipeline,
)
from agentevo.tasks import TaskSample

SAMPLE = TaskSample(id="t1", input_fields={"question": "Which option?"}, gold="A")
PROMPT = PromptConfig(role="You answer questions.", temperature=0.2)


def scv():
    return canonical_pipelines("letter")["self_consistency_verify"]


def sar():
    return canonical_pipelines("letter")["score_and_repair"]


def _script_sample(script, prompt, pipeline, replies):
    temperature = max(
        prompt.temperature,
        next(s.params["temperature_floor"] for s in pipeline.stages if s.kind == "sample"),
    )
    script.add(build_solver_messages(prompt, SAMPLE), temperature, replies)
    return script


class TestValidation:
    def test_vanilla_is_ok(self):
        assert validate_pipeline(canonical_pipelines()["vanilla"]) == []

    def test_canonical_pipelines_all_valid(self):
        for name, config in canonical_pipelines().items():
            assert validate_pipeline(config) == [], name

    def test_missing_return(self):
        config = PipelineConfig(stages=(sample_stage(), extract_stage()))
        assert any("end in return" in v for v in validate_pipeline(config))

    def test_blacklisted_kind_named(self):
        config = PipelineConfig(
            stages=(sample_stage(), PipelineStage("sleep", {"seconds": 3}), return_stage())
        )
        assert any("blacklisted stage kind: sleep" in v for v in validate_pipeline(config))

    def test_unknown_kind(self):
        config = PipelineConfig(
            stages=(sample_stage(), PipelineStage("teleport", {}), return_stage())
        )
        assert any("unknown stage kind" in v for v in validate_pipeline(config))

    def test_two_samples_rejected(self):
        config = PipelineConfig(stages=(sample_stage(), sample_stage(), return_stage()))
        assert any("at most one sample" in v for v in validate_pipeline(config))

    def test_stage_cap(self):
        stages = (sample_stage(),) + tuple(extract_stage() for _ in range(12)) + (return_stage(),)
        config = PipelineConfig(stages=stages)
        assert any("exceeds maximum" in v for v in validate_pipeline(config))

    def test_delay_parameter_banned(self):
        config = PipelineConfig(
            stages=(
                PipelineStage("sample", {"n": 1, "temperature_floor": 0.0, "delay_s": 2}),
                return_stage(),
            )
        )
        violations = validate_pipeline(config)
        assert any("delay" in v for v in violations)

    def test_dataflow_prerequisites(self):
        config = PipelineConfig(
            stages=(
                sample_stage(3),
                PipelineStage("aggregate", {"rule": "argmax_score"}),
                return_stage(),
            )
        )
        assert any("self_check_score" in v for v in validate_pipeline(config))

    def test_serialization_round_trip(self):
        for config in canonical_pipelines().values():
            clone = PipelineConfig.from_dict(config.to_dict())
            assert clone.to_dict() == config.to_dict()


class TestConsensusPath:
    def test_consensus_exits_without_verify(self):
        # candidates vote A, A, B: consensus at 2, exactly one generation call
        script = _script_sample(Script(), PROMPT, scv(), ["A", "A", "B"])
        outcome = run_pipeline(PROMPT, scv(), SAMPLE, script.backend())
        assert outcome.answer == "A"
        assert outcome.usage.calls == 1
        exit_record = next(r for r in outcome.trace if r["stage"] == "early_exit")
        assert exit_record["fired"]

    def test_no_consensus_triggers_verify(self):
        script = _script_sample(Script(), PROMPT, scv(), ["A", "B", "C"])
        script.add(
            (ChatMessage("user", VERIFY_TEMPLATE.format(answer="A", reasoning="A")),),
            0.0,
            "C",
        )
        outcome = run_pipeline(PROMPT, scv(), SAMPLE, script.backend())
        assert outcome.answer == "C"
        assert outcome.usage.calls == 2

    def test_unparseable_verify_keeps_top(self):
        script = _script_sample(Script(), PROMPT, scv(), ["A", "B", "C"])
        script.add(
            (ChatMessage("user", VERIFY_TEMPLATE.format(answer="A", reasoning="A")),),
            0.0,
            "no idea honestly",
        )
        outcome = run_pipeline(PROMPT, scv(), SAMPLE, script.backend())
        assert outcome.answer == "A"

    def test_majority_tie_prefers_generation_order(self):
        script = _script_sample(Script(), PROMPT, scv(), ["B", "B", "A"])
        outcome = run_pipeline(PROMPT, scv(), SAMPLE, script.backend())
        assert outcome.answer == "B"

    def test_call_count_bound(self):
        # 1 batched sample + 1 verify is the ceiling for this program
        script = _script_sample(Script(), PROMPT, scv(), ["A", "B", "C"])
        script.add(
            (ChatMessage("user", VERIFY_TEMPLATE.format(answer="A", reasoning="A")),),
            0.0,
            "B",
        )
        outcome = run_pipeline(PROMPT, scv(), SAMPLE, script.backend())
        assert outcome.usage.calls <= 2


class TestScoreAndRepairPath:
    def _checks(self, script, texts, replies):
        for text, reply in zip(texts, replies):
            script.add(
                (
                    ChatMessage(
                        "user",
                        SELF_CHECK_TEMPLATE.format(
                            task=SAMPLE.primary_input(), candidate=text
                        ),
                    ),
                ),
                0.0,
                reply,
            )
        return script

    def test_perfect_score_exits_before_repair(self):
        texts = ["draft one", "draft two", "draft three"]
        script = _script_sample(Script(), PROMPT, sar(), texts)
        self._checks(script, texts, ["satisfied: 3/5", "all satisfied", "satisfied: 3/10"])
        outcome = run_pipeline(PROMPT, sar(), SAMPLE, script.backend())
        assert outcome.answer == "draft two"
        assert outcome.usage.calls == 4  # 1 batched sample + 3 checks, no repair
        assert not any(r["stage"] == "repair" for r in outcome.trace)

    def test_repair_accepted_when_not_worse(self):
        texts = ["draft one", "draft two", "draft three"]
        script = _script_sample(Script(), PROMPT, sar(), texts)
        self._checks(script, texts, ["satisfied: 2/4", "satisfied: 3/4", "satisfied: 1/4"])
        repair_messages = build_solver_messages(PROMPT, SAMPLE) + (
            ChatMessage("assistant", "draft two"),
            ChatMessage("user", REPAIR_INSTRUCTION),
        )
        script.add(repair_messages, 0.0, "fixed draft\ncompliance: 4/4")
        outcome = run_pipeline(PROMPT, sar(), SAMPLE, script.backend())
        assert outcome.answer == "fixed draft"
        assert outcome.usage.calls == 5  # 1 + 3 + 1

    def test_worse_repair_keeps_best(self):
        texts = ["draft one", "draft two", "draft three"]
        script = _script_sample(Script(), PROMPT, sar(), texts)
        self._checks(script, texts, ["satisfied: 2/4", "satisfied: 3/4", "satisfied: 1/4"])
        repair_messages = build_solver_messages(PROMPT, SAMPLE) + (
            ChatMessage("assistant", "draft two"),
            ChatMessage("user", REPAIR_INSTRUCTION),
        )
        script.add(repair_messages, 0.0, "worse draft\ncompliance: 1/4")
        outcome = run_pipeline(PROMPT, sar(), SAMPLE, script.backend())
        assert outcome.answer == "draft two"


class TestRepairAcceptance:
    def test_improvement_taken(self):
        assert apply_repair_acceptance(0.6, 0.9) == "take_repair"

    def test_tie_taken(self):
        assert apply_repair_acceptance(0.6, 0.6) == "take_repair"

    def test_regression_kept(self):
        assert apply_repair_acceptance(0.6, 0.5) == "keep_best"

    def test_range_checked(self):
        with pytest.raises(ValueError):
            apply_repair_acceptance(1.2, 0.5)


class TestSelfCheckParsing:
    def test_fraction(self):
        assert parse_check_reply("3/4 constraints satisfied") == (0.75, True)

    def test_all_satisfied(self):
        assert parse_check_reply("all satisfied") == (1.0, True)

    def test_garbage_scores_zero(self):
        assert parse_check_reply("hmm, looks fine I guess") == (0.0, False)

    def test_self_check_constraints_call(self):
        script = Script()
        script.add(
            (
                ChatMessage(
                    "user",
                    SELF_CHECK_TEMPLATE.format(task=SAMPLE.primary_input(), candidate="text"),
                ),
            ),
            0.0,
            "satisfied: 1/2",
        )
        score, ok = self_check_constraints(SAMPLE, "text", script.backend())
        assert (score, ok) == (0.5, True)

    def test_repair_reply_parsing(self):
        corrected, score, ok = parse_repair_reply("better text\ncompliance: 3/4")
        assert corrected == "better text"
        assert score == 0.75 and ok
        _, score, ok = parse_repair_reply("no compliance line")
        assert score == 0.0 and not ok


class TestStructuredOutput:
    def test_structured_answer_extracted(self):
        prompt = PromptConfig(role="solver", temperature=0.0, output_mode="structured_keyed")
        pipeline = canonical_pipelines("letter")["vanilla"]
        script = Script()
        script.add(
            build_solver_messages(prompt, SAMPLE),
            0.0,
            '{"reasoning": "thought hard", "answer": "C"}',
        )
        outcome = run_pipeline(prompt, pipeline, SAMPLE, script.backend())
        assert outcome.answer == "C"

    def test_structured_parse_falls_back_to_regex(self):
        prompt = PromptConfig(role="solver", temperature=0.0, output_mode="structured_keyed")
        pipeline = canonical_pipelines("letter")["vanilla"]
        script = Script()
        script.add(build_solver_messages(prompt, SAMPLE), 0.0, "not json but answer B anyway")
        outcome = run_pipeline(prompt, pipeline, SAMPLE, script.backend())
        assert outcome.answer == "B"


class TestInterpreterContracts:
    def test_extraction_failure_flagged(self):
        pipeline = canonical_pipelines("letter")["vanilla"]
        script = _script_sample(Script(), PROMPT, pipeline, ["no option token here"])
        outcome = run_pipeline(PROMPT, pipeline, SAMPLE, script.backend())
        assert outcome.extraction_failed
        assert outcome.answer is None

    def test_determinism_with_scripted_backend(self):
        script = _script_sample(Script(), PROMPT, scv(), ["A", "A", "B"])
        backend = script.backend()
        first = run_pipeline(PROMPT, scv(), SAMPLE, backend)
        second = run_pipeline(PROMPT, scv(), SAMPLE, backend)
        assert first.answer == second.answer
        assert first.trace == second.trace
        assert first.usage.to_dict() == second.usage.to_dict()

    def test_inputs_never_mutated(self):
        pipeline = scv()
        prompt_before = copy.deepcopy(PROMPT.to_dict())
        logic_before = copy.deepcopy(pipeline.to_dict())
        script = _script_sample(Script(), PROMPT, pipeline, ["A", "A", "B"])
        run_pipeline(PROMPT, pipeline, SAMPLE, script.backend())
        assert PROMPT.to_dict() == prompt_before
        assert pipeline.to_dict() == logic_before

    def test_agent_serialization_stable(self):
        agent = AgentConfig(prompt=PROMPT, logic=scv())
        clone = AgentConfig.from_dict(agent.to_dict())
        assert agent.serialize() == clone.serialize()
        assert agent.digest() == clone.digest()


class TestAnalyticOracles:
    def test_consensus_accuracy_matches_analytic_value(self):
        from conftest import analytic_consensus, run_consensus_batch

        consensus_correct, _, _ = run_consensus_batch(0.7, 10000, seed=0)
        assert consensus_correct == pytest.approx(analytic_consensus(0.7), abs=0.01)

    def test_verify_fires_at_analytic_no_consensus_rate(self):
        from conftest import analytic_consensus, run_consensus_batch

        _, verify_fired, _ = run_consensus_batch(0.8, 10000, seed=0)
        assert verify_fired == pytest.approx(1 - analytic_consensus(0.8), abs=0.02)
