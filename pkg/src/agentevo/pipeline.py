"""Typed solver pipelines: the evolvable control logic and its interpreter.

An agent is a pair (prompt configuration, pipeline configuration).  The
pipeline is an ordered program over a closed set of stage kinds - sample,
extract, normalize, aggregate, early-exit, verify, self-check scoring,
repair, return - each with schema-validated parameters.  Structural edits
proposed during evolution are expressed in this representation, which makes
the safety constraints (no wall-clock delays, no edits to the generation
layer, bounded program size) statically checkable instead of requiring
source-code sandboxing.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any

from .backends import ChatMessage, DEFAULT_TEMPERATURE, GenerationRequest, UsageLedger
from .scoring import (
    extract_letter,
    extract_numeric_token,
    normalize_numeric,
    normalize_span,
)
from .tasks import TaskSample

SCHEMA_VERSION = 1
MAX_STAGES = 12
DEFAULT_DISALLOWED_KINDS = ("sleep", "wall_clock_delay", "shell", "network_probe")

VERIFY_TEMPLATE = "Previous answer: {answer}\nReasoning: {reasoning}\nConfirm or correct."
VERIFY_REASONING_CHARS = 600

REPAIR_INSTRUCTION = (
    "The response above violates some constraints. Rewrite so EVERY constraint "
    "is satisfied. Output ONLY the corrected response.\n"
    "After the corrected response, add a final line of the form "
    "'compliance: <satisfied>/<total>' counting the constraints your rewrite satisfies."
)

SELF_CHECK_TEMPLATE = (
    "Task:\n{task}\n\nCandidate response:\n{candidate}\n\n"
    "List each constraint the task imposes and state whether the candidate "
    "satisfies it. Finish with one line of the form 'satisfied: <count>/<total>'."
)

STRUCTURED_REPLY_INSTRUCTION = (
    'Reply as a JSON object with keys "reasoning" and "answer".'
)

EXTRACTORS = ("letter", "numeric", "span")
NORMALIZERS = ("numeric", "span")
AGGREGATE_RULES = ("majority_vote", "argmax_score")
EARLY_EXIT_RULES = ("consensus_at_least", "score_equals")
REPAIR_ACCEPT_RULES = ("score_not_worse",)

_FRACTION_RE = re.compile(r"(\d+)\s*/\s*(\d+)")
_ALL_SATISFIED_RE = re.compile(r"\ball\b[^.\n]*\bsatisfied\b", re.IGNORECASE)
_COMPLIANCE_LINE_RE = re.compile(r"^\s*compliance:\s*(\d+)\s*/\s*(\d+)\s*$", re.IGNORECASE | re.MULTILINE)


class PipelineParseError(ValueError):
    """Raised when a serialized pipeline document cannot be decoded at all."""


@dataclass(frozen=True)
class PromptConfig:
    """The evolvable textual half of an agent."""

    role: str
    requirements: tuple[str, ...] = ()
    temperature: float = DEFAULT_TEMPERATURE
    output_mode: str = "free_text"

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.output_mode not in ("free_text", "structured_keyed"):
            raise ValueError(f"unknown output mode: {self.output_mode!r}")
        object.__setattr__(self, "requirements", tuple(self.requirements))

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "requirements": list(self.requirements),
            "temperature": self.temperature,
            "output_mode": self.output_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PromptConfig":
        return cls(
            role=data["role"],
            requirements=tuple(data.get("requirements", ())),
            temperature=float(data.get("temperature", DEFAULT_TEMPERATURE)),
            output_mode=data.get("output_mode", "free_text"),
        )


@dataclass(frozen=True)
class PipelineStage:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


def sample_stage(n: int = 1, temperature_floor: float = 0.0) -> PipelineStage:
    return PipelineStage("sample", {"n": n, "temperature_floor": temperature_floor})


def extract_stage(extractor: str = "letter") -> PipelineStage:
    return PipelineStage("extract", {"extractor": extractor})


def normalize_stage(chain: list[str]) -> PipelineStage:
    return PipelineStage("normalize", {"chain": list(chain)})


def aggregate_stage(rule: str) -> PipelineStage:
    return PipelineStage("aggregate", {"rule": rule})


def early_exit_stage(rule: str, threshold: float) -> PipelineStage:
    return PipelineStage("early_exit", {"rule": rule, "threshold": threshold})


def verify_stage(temperature: float = 0.0) -> PipelineStage:
    return PipelineStage("verify", {"temperature": temperature})


def self_check_stage(temperature: float = 0.0) -> PipelineStage:
    return PipelineStage("self_check_score", {"temperature": temperature})


def repair_stage(temperature: float = 0.0, accept_rule: str = "score_not_worse") -> PipelineStage:
    return PipelineStage("repair", {"temperature": temperature, "accept_rule": accept_rule})


def return_stage() -> PipelineStage:
    return PipelineStage("return", {})


@dataclass
class PipelineConfig:
    """Ordered stage program plus hyperparameters and a safety blacklist."""

    stages: tuple[PipelineStage, ...]
    hyperparameters: dict[str, Any] = field(default_factory=dict)
    disallowed_stage_kinds: tuple[str, ...] = DEFAULT_DISALLOWED_KINDS
    version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        self.stages = tuple(self.stages)
        self.disallowed_stage_kinds = tuple(self.disallowed_stage_kinds)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "stages": [stage.to_dict() for stage in self.stages],
            "hyperparameters": dict(self.hyperparameters),
            "disallowed_stage_kinds": list(self.disallowed_stage_kinds),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict) or "stages" not in data:
            raise PipelineParseError("pipeline document must be an object with a 'stages' list")
        raw_stages = data["stages"]
        if not isinstance(raw_stages, list):
            raise PipelineParseError("'stages' must be a list")
        stages = []
        for raw in raw_stages:
            if not isinstance(raw, dict) or "kind" not in raw:
                raise PipelineParseError(f"stage entries need a 'kind' field: {raw!r}")
            params = {k: v for k, v in raw.items() if k != "kind"}
            stages.append(PipelineStage(kind=str(raw["kind"]), params=params))
        return cls(
            stages=tuple(stages),
            hyperparameters=dict(data.get("hyperparameters", {})),
            disallowed_stage_kinds=tuple(
                data.get("disallowed_stage_kinds", DEFAULT_DISALLOWED_KINDS)
            ),
            version=int(data.get("version", SCHEMA_VERSION)),
        )


@dataclass
class AgentConfig:
    """The evolvable pair: prompt configuration plus pipeline control logic."""

    prompt: PromptConfig
    logic: PipelineConfig

    def to_dict(self) -> dict:
        return {"prompt": self.prompt.to_dict(), "logic": self.logic.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        return cls(
            prompt=PromptConfig.from_dict(data["prompt"]),
            logic=PipelineConfig.from_dict(data["logic"]),
        )

    def serialize(self) -> str:
        """Canonical JSON form; equal agents serialize byte-identically."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]

    def clone(self) -> "AgentConfig":
        return AgentConfig.from_dict(copy.deepcopy(self.to_dict()))


# ---------------------------------------------------------------------------
# Validation


def _check_params(stage: PipelineStage) -> list[str]:
    kind, p = stage.kind, stage.params
    problems: list[str] = []

    def require(name, ok, detail):
        if not ok:
            problems.append(f"{kind}: invalid {name}: {detail}")

    if kind == "sample":
        require("n", isinstance(p.get("n"), int) and p.get("n", 0) >= 1, p.get("n"))
        floor = p.get("temperature_floor", 0.0)
        require("temperature_floor", isinstance(floor, (int, float)) and floor >= 0, floor)
        extra = set(p) - {"n", "temperature_floor"}
    elif kind == "extract":
        require("extractor", p.get("extractor") in EXTRACTORS, p.get("extractor"))
        extra = set(p) - {"extractor"}
    elif kind == "normalize":
        chain = p.get("chain")
        require(
            "chain",
            isinstance(chain, list) and chain and all(c in NORMALIZERS for c in chain),
            chain,
        )
        extra = set(p) - {"chain"}
    elif kind == "aggregate":
        require("rule", p.get("rule") in AGGREGATE_RULES, p.get("rule"))
        extra = set(p) - {"rule"}
    elif kind == "early_exit":
        rule = p.get("rule")
        require("rule", rule in EARLY_EXIT_RULES, rule)
        threshold = p.get("threshold")
        if rule == "consensus_at_least":
            require("threshold", isinstance(threshold, int) and threshold >= 1, threshold)
        elif rule == "score_equals":
            require(
                "threshold",
                isinstance(threshold, (int, float)) and 0.0 <= threshold <= 1.0,
                threshold,
            )
        extra = set(p) - {"rule", "threshold"}
    elif kind == "verify":
        temp = p.get("temperature", 0.0)
        require("temperature", isinstance(temp, (int, float)) and temp >= 0, temp)
        extra = set(p) - {"temperature"}
    elif kind == "self_check_score":
        temp = p.get("temperature", 0.0)
        require("temperature", isinstance(temp, (int, float)) and temp >= 0, temp)
        extra = set(p) - {"temperature"}
    elif kind == "repair":
        temp = p.get("temperature", 0.0)
        require("temperature", isinstance(temp, (int, float)) and temp >= 0, temp)
        require(
            "accept_rule",
            p.get("accept_rule", "score_not_worse") in REPAIR_ACCEPT_RULES,
            p.get("accept_rule"),
        )
        extra = set(p) - {"temperature", "accept_rule"}
    elif kind == "return":
        extra = set(p)
    else:
        return [f"unknown stage kind: {kind}"]

    for name in sorted(extra):
        problems.append(f"{kind}: unknown parameter {name!r}")
    return problems


_KNOWN_KINDS = (
    "sample",
    "extract",
    "normalize",
    "aggregate",
    "early_exit",
    "verify",
    "self_check_score",
    "repair",
    "return",
)


def validate_pipeline(config: PipelineConfig, max_stages: int = MAX_STAGES) -> list[str]:
    """Return every violated structural invariant (empty list means ok).

    The generation layer is not a stage kind and therefore can never be
    edited through this schema; blacklisted kinds are reported by name.
    """
    violations: list[str] = []
    stages = config.stages

    if not stages:
        return ["pipeline has no stages"]
    if len(stages) > max_stages:
        violations.append(f"stage count {len(stages)} exceeds maximum {max_stages}")
    if stages[-1].kind != "return":
        violations.append("pipeline must end in return")
    for stage in stages[:-1]:
        if stage.kind == "return":
            violations.append("return may only appear as the final stage")
            break

    for stage in stages:
        if stage.kind in config.disallowed_stage_kinds:
            violations.append(f"blacklisted stage kind: {stage.kind}")
            continue
        if stage.kind not in _KNOWN_KINDS:
            violations.append(f"unknown stage kind: {stage.kind}")
            continue
        violations.extend(_check_params(stage))
        for name in stage.params:
            if "sleep" in name or "delay" in name:
                violations.append(f"{stage.kind}: wall-clock delay parameter {name!r} is banned")

    for name in config.hyperparameters:
        if "sleep" in name or "delay" in name:
            violations.append(f"wall-clock delay hyperparameter {name!r} is banned")

    kinds = [stage.kind for stage in stages]
    sample_positions = [i for i, k in enumerate(kinds) if k == "sample"]
    if len(sample_positions) > 1:
        violations.append("at most one sample stage is allowed")
    if not sample_positions:
        violations.append("pipeline must contain a sample stage")
    else:
        first_aggregate = next((i for i, k in enumerate(kinds) if k == "aggregate"), None)
        if first_aggregate is not None and sample_positions[0] > first_aggregate:
            violations.append("sample must precede aggregate")

    # Dataflow prerequisites: downstream stages need their inputs computed.
    seen: set[str] = set()
    for i, stage in enumerate(stages):
        if stage.kind == "aggregate" and stage.params.get("rule") == "argmax_score":
            if "self_check_score" not in seen:
                violations.append("aggregate(argmax_score) requires a preceding self_check_score")
        if stage.kind == "early_exit":
            rule = stage.params.get("rule")
            if rule == "consensus_at_least" and "aggregate" not in seen:
                violations.append("early_exit(consensus_at_least) requires a preceding aggregate")
            if rule == "score_equals" and "self_check_score" not in seen:
                violations.append("early_exit(score_equals) requires a preceding self_check_score")
        if stage.kind == "verify" and "extract" not in seen:
            violations.append("verify requires a preceding extract")
        if stage.kind == "repair" and "self_check_score" not in seen:
            violations.append("repair requires a preceding self_check_score")
        seen.add(stage.kind)

    return violations


# ---------------------------------------------------------------------------
# Canonical reference pipelines


def canonical_pipelines(extractor: str = "letter") -> dict[str, PipelineConfig]:
    """The three reference programs used as fixtures and search seeds."""
    vanilla = PipelineConfig(
        stages=(sample_stage(n=1, temperature_floor=0.0), extract_stage(extractor), return_stage())
    )
    self_consistency_verify = PipelineConfig(
        stages=(
            sample_stage(n=3, temperature_floor=0.5),
            extract_stage(extractor),
            aggregate_stage("majority_vote"),
            early_exit_stage("consensus_at_least", 2),
            verify_stage(0.0),
            return_stage(),
        )
    )
    score_and_repair = PipelineConfig(
        stages=(
            sample_stage(n=3, temperature_floor=0.3),
            self_check_stage(0.0),
            aggregate_stage("argmax_score"),
            early_exit_stage("score_equals", 1.0),
            repair_stage(0.0, "score_not_worse"),
            return_stage(),
        )
    )
    return {
        "vanilla": vanilla,
        "self_consistency_verify": self_consistency_verify,
        "score_and_repair": score_and_repair,
    }


# ---------------------------------------------------------------------------
# Interpreter


def render_system_prompt(prompt: PromptConfig) -> str:
    parts = [prompt.role]
    if prompt.requirements:
        parts.append("Requirements:")
        parts.extend(f"- {req}" for req in prompt.requirements)
    if prompt.output_mode == "structured_keyed":
        parts.append(STRUCTURED_REPLY_INSTRUCTION)
    return "\n".join(parts)


def build_solver_messages(prompt: PromptConfig, sample: TaskSample) -> tuple[ChatMessage, ...]:
    return (
        ChatMessage("system", render_system_prompt(prompt)),
        ChatMessage("user", sample.primary_input()),
    )


def find_json_object(text: str) -> dict | None:
    """Locate and decode the first balanced JSON object in ``text``."""
    start = text.find("{")
    while start != -1:
        depth = 0
        for end in range(start, len(text)):
            if text[end] == "{":
                depth += 1
            elif text[end] == "}":
                depth -= 1
                if depth == 0:
                    try:
                        parsed = json.loads(text[start : end + 1])
                    except json.JSONDecodeError:
                        break
                    return parsed if isinstance(parsed, dict) else None
        start = text.find("{", start + 1)
    return None


def _run_extractor(extractor: str, text: str) -> str | None:
    if extractor == "letter":
        return extract_letter(text)
    if extractor == "numeric":
        return extract_numeric_token(text)
    if extractor == "span":
        stripped = text.strip()
        return stripped or None
    raise ValueError(f"unknown extractor: {extractor}")


def _run_normalizer(name: str, value: str) -> str:
    if name == "numeric":
        return normalize_numeric(value)
    if name == "span":
        return normalize_span(value)
    raise ValueError(f"unknown normalizer: {name}")


def parse_check_reply(reply: str) -> tuple[float, bool]:
    """Parse a constraint self-check reply into (score, parsed_ok)."""
    match = _FRACTION_RE.search(reply)
    if match:
        total = int(match.group(2))
        if total > 0:
            return min(1.0, int(match.group(1)) / total), True
    if _ALL_SATISFIED_RE.search(reply):
        return 1.0, True
    return 0.0, False


def self_check_constraints(
    sample: TaskSample,
    candidate: str,
    backend,
    temperature: float = 0.0,
    ledger: UsageLedger | None = None,
    phase: str = "evaluation",
    usage: "CallUsage | None" = None,
) -> tuple[float, bool]:
    """Ask the model to enumerate task constraints and score compliance.

    Returns (score in [0, 1], parsed_ok).  Unparseable replies score 0.
    """
    request = GenerationRequest(
        messages=(
            ChatMessage(
                "user",
                SELF_CHECK_TEMPLATE.format(task=sample.primary_input(), candidate=candidate),
            ),
        ),
        temperature=temperature,
        n=1,
        metadata={"purpose": "self_check", "sample_id": sample.id},
    )
    response = backend.generate(request)
    if ledger is not None:
        ledger.record(response, phase)
    if usage is not None:
        usage.add(response)
    return parse_check_reply(response.candidates[0])


def apply_repair_acceptance(best_score: float, repair_score: float) -> str:
    """Keep the repair only when it scores at least as well as the best candidate."""
    for name, value in (("best_score", best_score), ("repair_score", repair_score)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} out of range: {value}")
    return "take_repair" if repair_score >= best_score else "keep_best"


def parse_repair_reply(reply: str) -> tuple[str, float, bool]:
    """Split a repair reply into (corrected text, compliance score, parsed_ok)."""
    match = _COMPLIANCE_LINE_RE.search(reply)
    if not match:
        return reply.strip(), 0.0, False
    total = int(match.group(2))
    score = min(1.0, int(match.group(1)) / total) if total > 0 else 0.0
    corrected = (reply[: match.start()] + reply[match.end() :]).strip()
    return corrected, score, True


@dataclass
class CallUsage:
    input_units: int = 0
    output_units: int = 0
    calls: int = 0

    def add(self, response) -> None:
        self.input_units += response.input_units
        self.output_units += response.output_units
        self.calls += 1

    def to_dict(self) -> dict:
        return {
            "input_units": self.input_units,
            "output_units": self.output_units,
            "calls": self.calls,
        }


@dataclass
class SolverOutcome:
    answer: str | None
    trace: list[dict]
    usage: CallUsage
    extraction_failed: bool

    @property
    def raw_text(self) -> str | None:
        for record in self.trace:
            if record.get("stage") == "sample" and record.get("texts"):
                return record["texts"][0]
        return None


@dataclass
class _Candidate:
    text: str
    answer: str | None = None
    reasoning: str | None = None
    score: float | None = None


def _short(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:10]


def run_pipeline(
    prompt: PromptConfig,
    logic: PipelineConfig,
    sample: TaskSample,
    backend,
    ledger: UsageLedger | None = None,
    phase: str = "evaluation",
    max_output_units: int = 1024,
) -> SolverOutcome:
    """Execute one agent on one task sample.

    Preconditions: ``validate_pipeline(logic)`` returned no violations.
    With a deterministic backend this is a pure function of its inputs.
    """
    usage = CallUsage()
    trace: list[dict] = []
    candidates: list[_Candidate] = []
    selected: int | None = None
    modal_count = 0
    extracted = False
    answer_override: str | None = None
    last_extractor: str | None = None

    def bill(response) -> None:
        usage.add(response)
        if ledger is not None:
            ledger.record(response, phase)

    finished = False
    for stage in logic.stages:
        if finished:
            break
        kind, params = stage.kind, stage.params

        if kind == "sample":
            temperature = max(prompt.temperature, params.get("temperature_floor", 0.0))
            request = GenerationRequest(
                messages=build_solver_messages(prompt, sample),
                temperature=temperature,
                n=params["n"],
                max_output_units=max_output_units,
                output_mode=prompt.output_mode,
                metadata={"purpose": "solve", "sample_id": sample.id},
            )
            response = backend.generate(request)
            bill(response)
            candidates = [_Candidate(text=text) for text in response.candidates]
            selected = 0 if candidates else None
            trace.append(
                {
                    "stage": "sample",
                    "n": params["n"],
                    "temperature": temperature,
                    "texts": [c.text for c in candidates],
                }
            )

        elif kind == "extract":
            extractor = params["extractor"]
            last_extractor = extractor
            extracted = True
            for candidate in candidates:
                source = candidate.text
                if prompt.output_mode == "structured_keyed":
                    parsed = find_json_object(candidate.text)
                    if parsed is not None and "answer" in parsed:
                        source = str(parsed["answer"])
                        candidate.reasoning = str(parsed.get("reasoning", ""))
                candidate.answer = _run_extractor(extractor, source)
                if candidate.answer is None and source is not candidate.text:
                    # structured answer failed coercion; fall back to raw text
                    candidate.answer = _run_extractor(extractor, candidate.text)
            trace.append(
                {"stage": "extract", "extractor": extractor, "answers": [c.answer for c in candidates]}
            )

        elif kind == "normalize":
            for candidate in candidates:
                if candidate.answer is None:
                    continue
                value = candidate.answer
                for name in params["chain"]:
                    value = _run_normalizer(name, value)
                candidate.answer = value or None
            trace.append(
                {"stage": "normalize", "chain": list(params["chain"]), "answers": [c.answer for c in candidates]}
            )

        elif kind == "aggregate":
            rule = params["rule"]
            if rule == "majority_vote":
                counts: dict[str, int] = {}
                for candidate in candidates:
                    if candidate.answer is not None:
                        counts[candidate.answer] = counts.get(candidate.answer, 0) + 1
                if counts:
                    # ties resolve to the answer seen earliest in generation order
                    modal = max(
                        counts,
                        key=lambda ans: (
                            counts[ans],
                            -next(i for i, c in enumerate(candidates) if c.answer == ans),
                        ),
                    )
                    modal_count = counts[modal]
                    selected = next(i for i, c in enumerate(candidates) if c.answer == modal)
                else:
                    modal_count = 0
                trace.append({"stage": "aggregate", "rule": rule, "votes": counts, "selected": selected})
            else:  # argmax_score
                scored = [
                    (i, c.score) for i, c in enumerate(candidates) if c.score is not None
                ]
                if scored:
                    selected = max(scored, key=lambda pair: (pair[1], -pair[0]))[0]
                trace.append(
                    {
                        "stage": "aggregate",
                        "rule": rule,
                        "scores": [c.score for c in candidates],
                        "selected": selected,
                    }
                )

        elif kind == "early_exit":
            rule = params["rule"]
            fired = False
            if rule == "consensus_at_least":
                fired = modal_count >= params["threshold"]
            else:  # score_equals: fires when the best score reaches the threshold
                best = max((c.score for c in candidates if c.score is not None), default=None)
                fired = best is not None and best >= params["threshold"]
            trace.append({"stage": "early_exit", "rule": rule, "fired": fired})
            if fired:
                finished = True

        elif kind == "verify":
            if selected is None or candidates[selected].answer is None:
                trace.append({"stage": "verify", "skipped": "no answer to verify"})
                continue
            top = candidates[selected]
            reasoning = (top.reasoning or top.text)[:VERIFY_REASONING_CHARS]
            request = GenerationRequest(
                messages=(
                    ChatMessage(
                        "user", VERIFY_TEMPLATE.format(answer=top.answer, reasoning=reasoning)
                    ),
                ),
                temperature=params.get("temperature", 0.0),
                n=1,
                max_output_units=max_output_units,
                metadata={"purpose": "verify", "sample_id": sample.id},
            )
            response = backend.generate(request)
            bill(response)
            revised = (
                _run_extractor(last_extractor, response.candidates[0])
                if last_extractor
                else response.candidates[0].strip() or None
            )
            if revised is not None:
                answer_override = revised
            trace.append(
                {
                    "stage": "verify",
                    "presented": top.answer,
                    "revised": revised,
                    "kept": revised if revised is not None else top.answer,
                }
            )

        elif kind == "self_check_score":
            for candidate in candidates:
                score, parsed_ok = self_check_constraints(
                    sample,
                    candidate.answer if (extracted and candidate.answer) else candidate.text,
                    backend,
                    temperature=params.get("temperature", 0.0),
                    ledger=ledger,
                    phase=phase,
                    usage=usage,
                )
                candidate.score = score
                if not parsed_ok:
                    trace.append({"stage": "self_check_score", "note": "unparseable check reply"})
            trace.append({"stage": "self_check_score", "scores": [c.score for c in candidates]})

        elif kind == "repair":
            if selected is None:
                trace.append({"stage": "repair", "skipped": "no candidate to repair"})
                continue
            best = candidates[selected]
            best_score = best.score if best.score is not None else 0.0
            request = GenerationRequest(
                messages=build_solver_messages(prompt, sample)
                + (
                    ChatMessage("assistant", best.text),
                    ChatMessage("user", REPAIR_INSTRUCTION),
                ),
                temperature=params.get("temperature", 0.0),
                n=1,
                max_output_units=max_output_units,
                metadata={"purpose": "repair", "sample_id": sample.id},
            )
            response = backend.generate(request)
            bill(response)
            corrected, repair_score, parsed_ok = parse_repair_reply(response.candidates[0])
            decision = apply_repair_acceptance(best_score, repair_score)
            if decision == "take_repair" and corrected:
                best.text = corrected
                best.score = repair_score
                if extracted and last_extractor:
                    best.answer = _run_extractor(last_extractor, corrected)
            trace.append(
                {
                    "stage": "repair",
                    "best_score": best_score,
                    "repair_score": repair_score,
                    "parsed": parsed_ok,
                    "decision": decision,
                }
            )

        elif kind == "return":
            finished = True
            trace.append({"stage": "return"})

    if answer_override is not None:
        answer = answer_override
    elif selected is not None:
        chosen = candidates[selected]
        answer = chosen.answer if extracted else chosen.text
    else:
        answer = None

    extraction_failed = answer is None or answer == ""
    return SolverOutcome(
        answer=answer,
        trace=trace,
        usage=usage,
        extraction_failed=extraction_failed,
    )
