"""Seeded synthetic backend: a desk-scale surrogate for a frozen model.

The surrogate answers solve/verify/self-check/repair requests with the gold
answer at a programmable probability and answers prompt-proposal and
pipeline-edit requests with deterministic, parseable candidates.  All
randomness derives from (seed, request digest, candidate index), so any run
against it is exactly reproducible and analytic accuracy targets can be
checked empirically.

The landscape encodes separable error sources:

* content errors - per-candidate gold probability rises with each helpful
  prompt directive present, saturating at a programmed cap (the
  prompt-evolution plateau);
* extraction errors - when the designated format directive is absent,
  replies are malformed (no extractable token) at a fixed rate;
* temperature drag - effective probability drops above a threshold, which
  makes some structural edits genuinely harmful.

Majority voting over independent candidates then yields a pipeline-level
accuracy bonus that no prompt change can reach, the gap a structural edit
must discover.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field

from .backends import GenerationRequest, GenerationResponse
from .pipeline import PipelineConfig, canonical_pipelines, find_json_object
from .tasks import TaskSample

MALFORMED_REPLY = "Hard to say; several of the options look plausible to me."

_WRONG_LETTERS = {
    "A": ("B", "C", "D"),
    "B": ("A", "C", "D"),
    "C": ("A", "B", "D"),
    "D": ("A", "B", "C"),
}

DEFAULT_HELPFUL_DIRECTIVES = (
    "Think step by step before answering.",
    "Double-check your reasoning before finalizing.",
)
DEFAULT_FORMAT_DIRECTIVE = "Answer with one letter only."
DEFAULT_DISTRACTOR_DIRECTIVES = (
    "Keep the final answer on its own line.",
    "Be concise.",
)


def _hash_unit(*parts) -> float:
    """Deterministic float in [0, 1) from the given parts."""
    payload = "|".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def _hash_pick(options, *parts):
    index = int(_hash_unit(*parts, "pick") * len(options))
    return options[min(index, len(options) - 1)]


@dataclass
class SyntheticLandscape:
    """Programmable correctness model for a letter-answer task."""

    golds: dict[str, str]
    base_p: float = 0.55
    base_p_overrides: dict[str, float] = field(default_factory=dict)
    helpful_directives: tuple[str, ...] = DEFAULT_HELPFUL_DIRECTIVES
    directive_bonus: float = 0.10
    content_cap: float = 0.75
    format_directive: str | None = DEFAULT_FORMAT_DIRECTIVE
    malformed_rate: float = 0.25
    temperature_penalty: float = 0.4
    temperature_threshold: float = 0.6
    distractor_mode: str = "distinct"  # distinct per candidate index, or "shared"
    proposer_junk_rate: float = 0.15
    proposer_invalid_rate: float = 0.05
    proposer_focus: float = 0.6
    extractor: str = "letter"

    def gold_probability(self, sample_id: str, system_text: str, temperature: float) -> float:
        base = self.base_p_overrides.get(sample_id, self.base_p)
        bonus = self.directive_bonus * sum(
            1 for directive in self.helpful_directives if directive in system_text
        )
        p = min(base + bonus, self.content_cap)
        p -= self.temperature_penalty * max(0.0, temperature - self.temperature_threshold)
        return min(max(p, 0.0), 1.0)

    def malformed_probability(self, system_text: str) -> float:
        if self.format_directive and self.format_directive not in system_text:
            return self.malformed_rate
        return 0.0

    def distractor(self, gold: str, candidate_index: int) -> str:
        wrong = _WRONG_LETTERS[gold]
        if self.distractor_mode == "shared":
            return wrong[0]
        return wrong[candidate_index % len(wrong)]

    def directive_vocabulary(self) -> tuple[str, ...]:
        vocabulary = list(self.helpful_directives)
        if self.format_directive:
            vocabulary.append(self.format_directive)
        return tuple(vocabulary)


def make_letter_samples(count: int, seed: int = 0, id_prefix: str = "syn") -> list[TaskSample]:
    """Fabricate a pool of four-way letter questions with balanced golds."""
    rng = random.Random(seed)
    samples = []
    for i in range(count):
        gold = rng.choice("ABCD")
        samples.append(
            TaskSample(
                id=f"{id_prefix}{i:04d}",
                input_fields={
                    "question": (
                        f"Problem {id_prefix}{i:04d}: exactly one of options A, B, C, D "
                        "is correct. Name the correct option."
                    )
                },
                gold=gold,
                metadata={"source": "synthetic"},
            )
        )
    return samples


def landscape_for(samples: list[TaskSample], **overrides) -> SyntheticLandscape:
    golds = {sample.id: str(sample.gold) for sample in samples}
    return SyntheticLandscape(golds=golds, **overrides)


class SyntheticBackend:
    """Pure function of (landscape, request, seed); see module docstring."""

    is_surrogate = True

    def __init__(self, landscape: SyntheticLandscape, seed: int = 0):
        self.landscape = landscape
        self.seed = seed
        self._edit_menu = _build_edit_menu(landscape.extractor)

    # -- public API ---------------------------------------------------------

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        purpose = request.metadata.get("purpose", "solve")
        if purpose in ("solve", "verify", "repair"):
            candidates = self._answer_like(request, purpose)
        elif purpose == "self_check":
            candidates = self._self_check(request)
        elif purpose == "edit_propose":
            candidates = self._propose_edit(request)
        elif purpose in ("prompt_reflect_propose", "prompt_crossover"):
            candidates = self._propose_prompt(request, purpose)
        elif purpose == "prompt_reflect_diagnose":
            candidates = tuple(
                "Root cause: the reply drifted from the requested output contract."
                for _ in range(request.n)
            )
        else:
            candidates = self._answer_like(request, "solve")
        return GenerationResponse(
            candidates=candidates,
            input_units=request.input_chars(),
            output_units=sum(len(c) for c in candidates),
        )

    # -- answer-shaped replies ----------------------------------------------

    def _gold_for(self, request: GenerationRequest) -> str:
        sample_id = request.metadata.get("sample_id")
        if sample_id is None or sample_id not in self.landscape.golds:
            raise ValueError(f"synthetic backend has no gold for sample {sample_id!r}")
        return self.landscape.golds[sample_id]

    def _system_text(self, request: GenerationRequest) -> str:
        return "\n".join(m.content for m in request.messages if m.role == "system")

    def _answer_like(self, request: GenerationRequest, purpose: str) -> tuple[str, ...]:
        from .backends import message_digest  # local import keeps module load light

        gold = self._gold_for(request)
        sample_id = request.metadata["sample_id"]
        system_text = self._system_text(request)
        digest = message_digest(request.messages)
        p = self.landscape.gold_probability(sample_id, system_text, request.temperature)
        malformed_p = self.landscape.malformed_probability(system_text)

        candidates = []
        for index in range(request.n):
            if purpose == "solve" and malformed_p > 0.0:
                if _hash_unit(self.seed, digest, index, "fmt") < malformed_p:
                    candidates.append(MALFORMED_REPLY)
                    continue
            correct = _hash_unit(self.seed, digest, index, "draw") < p
            letter = gold if correct else self.landscape.distractor(gold, index)
            if purpose == "repair":
                satisfied = int(_hash_unit(self.seed, digest, index, "comp") * 5)
                candidates.append(f"The answer is ({letter}).\ncompliance: {satisfied}/4")
            else:
                candidates.append(f"The answer is ({letter}).")
        return tuple(candidates)

    def _self_check(self, request: GenerationRequest) -> tuple[str, ...]:
        from .backends import message_digest

        digest = message_digest(request.messages)
        replies = []
        for index in range(request.n):
            satisfied = int(_hash_unit(self.seed, digest, index, "check") * 5)
            replies.append(f"satisfied: {satisfied}/4")
        return tuple(replies)

    # -- structural edit proposals ------------------------------------------

    def _propose_edit(self, request: GenerationRequest) -> tuple[str, ...]:
        from .backends import message_digest

        digest = message_digest(request.messages)
        content = "\n".join(m.content for m in request.messages)
        replies = []
        for index in range(request.n):
            roll = _hash_unit(self.seed, digest, index, "edit-roll")
            if roll < self.landscape.proposer_junk_rate:
                replies.append("Maybe loosen up the solver a bit and see what happens?")
                continue
            if roll < self.landscape.proposer_junk_rate + self.landscape.proposer_invalid_rate:
                replies.append(
                    json.dumps(
                        {
                            "category": "sampling_policy",
                            "stages": [
                                {"kind": "sample", "n": 1, "temperature_floor": 0.0},
                                {"kind": "sleep", "seconds": 5},
                                {"kind": "return"},
                            ],
                        }
                    )
                )
                continue
            category = self._pick_category(content, digest, index)
            stages = self._edit_menu[category]
            replies.append(
                json.dumps({"category": category, "stages": stages, "hyperparameters": {}})
            )
        return tuple(replies)

    def _pick_category(self, content: str, digest: str, index: int) -> str:
        recommended = []
        for line in content.splitlines():
            if line.lower().startswith("recommended first:"):
                recommended = [
                    part.strip()
                    for part in line.split(":", 1)[1].split(",")
                    if part.strip() and part.strip() in self._edit_menu
                ]
                break
        if recommended and _hash_unit(self.seed, digest, index, "focus") < self.landscape.proposer_focus:
            return recommended[0]
        return _hash_pick(sorted(self._edit_menu), self.seed, digest, index, "cat")

    # -- prompt proposals -----------------------------------------------------

    def _propose_prompt(self, request: GenerationRequest, purpose: str) -> tuple[str, ...]:
        from .backends import message_digest

        digest = message_digest(request.messages)
        content = "\n".join(m.content for m in request.messages)
        parents = _embedded_prompt_configs(content)
        replies = []
        for index in range(request.n):
            if not parents:
                replies.append("I would just keep the prompt as it is.")
                continue
            base = dict(parents[0])
            requirements = list(base.get("requirements", []))
            if purpose == "prompt_crossover" and len(parents) > 1:
                for req in parents[1].get("requirements", []):
                    if req not in requirements:
                        requirements.append(req)
            else:
                absent = [
                    d for d in self.landscape.directive_vocabulary() if d not in requirements
                ]
                if absent:
                    requirements.append(_hash_pick(absent, self.seed, digest, index, "dir"))
            base["requirements"] = requirements
            replies.append(json.dumps(base))
        return tuple(replies)


def _embedded_prompt_configs(text: str) -> list[dict]:
    """Pull every JSON object that looks like a prompt config out of ``text``."""
    configs = []
    cursor = 0
    while True:
        start = text.find("{", cursor)
        if start == -1:
            break
        obj = find_json_object(text[start:])
        if obj is not None and "role" in obj and "requirements" in obj:
            configs.append(obj)
        cursor = start + 1
    return configs


def _build_edit_menu(extractor: str) -> dict[str, list[dict]]:
    """Canned stage programs the surrogate proposer draws from."""
    canon = canonical_pipelines(extractor)

    def stages(config: PipelineConfig) -> list[dict]:
        return [stage.to_dict() for stage in config.stages]

    vanilla = stages(canon["vanilla"])
    consensus = stages(canon["self_consistency_verify"])
    score_repair = stages(canon["score_and_repair"])

    hot_sampler = [
        {"kind": "sample", "n": 1, "temperature_floor": 1.1},
        {"kind": "extract", "extractor": extractor},
        {"kind": "return"},
    ]
    verify_only = [
        {"kind": "sample", "n": 1, "temperature_floor": 0.0},
        {"kind": "extract", "extractor": extractor},
        {"kind": "verify", "temperature": 0.0},
        {"kind": "return"},
    ]
    strict_consensus = [dict(s) for s in consensus]
    for entry in strict_consensus:
        if entry["kind"] == "early_exit":
            entry["threshold"] = 3
    chain = ["numeric"] if extractor == "numeric" else ["span"]
    normalized = [
        {"kind": "sample", "n": 1, "temperature_floor": 0.0},
        {"kind": "extract", "extractor": extractor},
        {"kind": "normalize", "chain": chain},
        {"kind": "return"},
    ]
    tuned = [dict(s) for s in vanilla]

    return {
        "aggregation": consensus,
        "sampling_policy": hot_sampler,
        "verification": verify_only,
        "early_exit": strict_consensus,
        "self_check": score_repair,
        "repair": score_repair,
        "normalization": normalized,
        "extraction": vanilla,
        "hyperparameters": tuned,
    }


def generate_synthetic(
    landscape: SyntheticLandscape, request: GenerationRequest, seed: int
) -> GenerationResponse:
    """Functional form: pure in (landscape, request, seed)."""
    return SyntheticBackend(landscape, seed).generate(request)
