"""Run configuration, trajectory persistence, and report generation.

Trajectories are append-only JSONL event streams with strictly increasing
step indices and no wall-clock fields, so identical runs produce
byte-identical files and every report is recomputable from the event stream
alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backends import BackendPool, ScriptedBackend, usage_multiplier
from .evaluation import TaskSpec, get_task
from .failures import CATEGORIES, ContractViolation
from .synthetic import SyntheticBackend, landscape_for, make_letter_samples
from .tasks import DatasetSplits, load_samples, make_splits

TRAJECTORY_SCHEMA_VERSION = 1


class ConfigValidationError(ValueError):
    """A run-config field is missing, malformed, or out of range."""


@dataclass(frozen=True)
class EpsilonSpec:
    """Saturation threshold with an explicit mode.

    ``numeric`` saturates once the last prompt-round gain drops to the
    threshold or below; ``prompt_only`` never saturates (structural search
    disabled); ``bypass`` saturates after the first completed prompt round.
    """

    mode: str = "numeric"
    value: float = 0.01

    def __post_init__(self) -> None:
        if self.mode not in ("numeric", "prompt_only", "bypass"):
            raise ConfigValidationError(f"epsilon mode must be numeric/prompt_only/bypass, got {self.mode!r}")

    @classmethod
    def from_raw(cls, raw: Any) -> "EpsilonSpec":
        if isinstance(raw, EpsilonSpec):
            return raw
        if isinstance(raw, dict):
            return cls(mode=raw.get("mode", "numeric"), value=float(raw.get("value", 0.01)))
        value = float(raw)
        if value == 0.0:
            return cls(mode="prompt_only", value=0.0)
        if value >= 1.0:
            return cls(mode="bypass", value=1.0)
        return cls(mode="numeric", value=value)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "value": self.value}


@dataclass
class RunConfig:
    task: str
    dataset: dict
    backend: dict
    seed: int = 0
    epsilon: EpsilonSpec = field(default_factory=EpsilonSpec)
    delta: float = 0.02
    outer_steps: int = 20
    inner_steps: int = 5
    budget: float | None = None
    task_generation_temperature: float = 0.2
    reflection_temperature: float = 1.0
    max_output_units: int = 1024
    workers: int = 1
    validation_size_range: tuple[int, int] = (10, 30)
    validation_subset_mode: str = "fresh"
    pe_val_size: int = 40
    minibatch_size: int = 20
    candidate_cap: int = 8
    proposal_retries: int = 3
    max_diagnoses: int = 5
    chars_per_unit: float = 1.0
    initial_prompt: dict | None = None
    initial_pipeline: dict | None = None
    mutation_roles: tuple[str, ...] | None = None
    mutation_directives: tuple[str, ...] | None = None
    mutation_temperature_deltas: tuple[float, ...] = (0.1, -0.1, 0.3, -0.3)

    def digest_payload(self) -> dict:
        payload = dict(self.__dict__)
        payload["epsilon"] = self.epsilon.to_dict()
        payload["validation_size_range"] = list(self.validation_size_range)
        payload["mutation_temperature_deltas"] = list(self.mutation_temperature_deltas)
        if self.mutation_roles is not None:
            payload["mutation_roles"] = list(self.mutation_roles)
        if self.mutation_directives is not None:
            payload["mutation_directives"] = list(self.mutation_directives)
        return payload

    def digest(self) -> str:
        import hashlib

        blob = json.dumps(self.digest_payload(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# Task-specific documented defaults.  Multilingual math needs long outputs
# and a hotter sampler; reflection always runs hot.
_TASK_DEFAULTS = {
    "mgsm": {"task_generation_temperature": 0.6, "max_output_units": 8000},
}


def load_run_config(path: str | Path) -> RunConfig:
    """Load and validate a JSON run config, applying documented defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigValidationError(f"config file not found: {path}")
    with path.open(encoding="utf-8") as handle:
        try:
            raw = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigValidationError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(raw, base_dir=path.parent)


def run_config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    for required in ("task", "dataset", "backend"):
        if required not in raw:
            raise ConfigValidationError(f"missing field: {required}")

    task = raw["task"]
    get_task(task)  # unknown task -> named error

    defaults = _TASK_DEFAULTS.get(task, {})

    def pick(name: str, fallback):
        return raw.get(name, defaults.get(name, fallback))

    outer_steps = int(pick("outer_steps", 20))
    if outer_steps < 0:
        raise ConfigValidationError(f"outer_steps out of range: {outer_steps}")
    inner_steps = int(pick("inner_steps", 5))
    if inner_steps < 1:
        raise ConfigValidationError(f"inner_steps out of range: {inner_steps}")
    delta = float(pick("delta", 0.02))
    if delta < -1.0:
        raise ConfigValidationError(f"delta out of range: {delta}")
    budget = pick("budget", None)
    if budget is not None:
        budget = float(budget)
        if budget <= 0:
            raise ConfigValidationError(f"budget out of range: {budget}")
    size_range = tuple(pick("validation_size_range", (10, 30)))
    if len(size_range) != 2 or size_range[0] < 1 or size_range[0] > size_range[1]:
        raise ConfigValidationError(f"validation_size_range invalid: {size_range}")
    subset_mode = pick("validation_subset_mode", "fresh")
    if subset_mode not in ("fresh", "fixed"):
        raise ConfigValidationError(f"validation_subset_mode invalid: {subset_mode}")

    dataset = dict(raw["dataset"])
    if "path" in dataset and base_dir is not None:
        resolved = (base_dir / dataset["path"]).resolve() if not Path(dataset["path"]).is_absolute() else Path(dataset["path"])
        if not resolved.exists():
            raise ConfigValidationError(f"dataset file not found: {resolved}")
        dataset["path"] = str(resolved)

    backend = dict(raw["backend"])
    kind = backend.get("kind")
    if kind not in ("http", "scripted", "synthetic"):
        raise ConfigValidationError(f"backend.kind must be http/scripted/synthetic, got {kind!r}")
    if kind == "http" and not backend.get("endpoints"):
        raise ConfigValidationError("backend.endpoints must be non-empty for http backends")
    if kind == "scripted":
        script_path = backend.get("script_path")
        if not script_path:
            raise ConfigValidationError("backend.script_path required for scripted backends")
        if base_dir is not None and not Path(script_path).is_absolute():
            backend["script_path"] = str((base_dir / script_path).resolve())
        if not Path(backend["script_path"]).exists():
            raise ConfigValidationError(f"script file not found: {backend['script_path']}")

    mutation_roles = raw.get("mutation_roles")
    mutation_directives = raw.get("mutation_directives")

    return RunConfig(
        task=task,
        dataset=dataset,
        backend=backend,
        seed=int(pick("seed", 0)),
        epsilon=EpsilonSpec.from_raw(pick("epsilon", {"mode": "numeric", "value": 0.01})),
        delta=delta,
        outer_steps=outer_steps,
        inner_steps=inner_steps,
        budget=budget,
        task_generation_temperature=float(pick("task_generation_temperature", 0.2)),
        reflection_temperature=float(pick("reflection_temperature", 1.0)),
        max_output_units=int(pick("max_output_units", 1024)),
        workers=int(pick("workers", 1)),
        validation_size_range=(int(size_range[0]), int(size_range[1])),
        validation_subset_mode=subset_mode,
        pe_val_size=int(pick("pe_val_size", 40)),
        minibatch_size=int(pick("minibatch_size", 20)),
        candidate_cap=int(pick("candidate_cap", 8)),
        proposal_retries=int(pick("proposal_retries", 3)),
        max_diagnoses=int(pick("max_diagnoses", 5)),
        chars_per_unit=float(pick("chars_per_unit", 1.0)),
        initial_prompt=raw.get("initial_prompt"),
        initial_pipeline=raw.get("initial_pipeline"),
        mutation_roles=tuple(mutation_roles) if mutation_roles is not None else None,
        mutation_directives=tuple(mutation_directives) if mutation_directives is not None else None,
        mutation_temperature_deltas=tuple(raw.get("mutation_temperature_deltas", (0.1, -0.1, 0.3, -0.3))),
    )


def prepare_run(config: RunConfig) -> tuple[DatasetSplits, Any, TaskSpec]:
    """Materialise (splits, backend, task) for a run config."""
    task = get_task(config.task)

    if "synthetic" in config.dataset:
        spec = dict(config.dataset["synthetic"])
        pool_size = int(spec.get("pool_size", 60))
        test_size = int(spec.get("test_size", 0))
        samples = make_letter_samples(pool_size + test_size, seed=config.seed)
        splits = make_splits(samples, pool_size, test_size, seed=config.seed)
    else:
        samples = load_samples(config.dataset["path"])
        splits = make_splits(
            samples,
            int(config.dataset.get("train_size", 200)),
            int(config.dataset.get("test_size", max(0, len(samples) - 200))),
            seed=config.seed,
        )

    kind = config.backend["kind"]
    if kind == "http":
        import os

        backend = BackendPool(
            endpoints=list(config.backend["endpoints"]),
            model=config.backend.get("model", "default"),
            api_key=os.environ.get("AGENTEVO_API_KEY"),
        )
    elif kind == "scripted":
        with open(config.backend["script_path"], encoding="utf-8") as handle:
            backend = ScriptedBackend(json.load(handle))
    else:
        overrides = dict(config.backend.get("landscape", {}))
        all_samples = list(splits.train_pool) + list(splits.test_set)
        backend = SyntheticBackend(landscape_for(all_samples, **overrides), seed=config.seed)

    return splits, backend, task


# ---------------------------------------------------------------------------
# Trajectory events


@dataclass
class TrajectoryEvent:
    step: int
    kind: str
    payload: dict
    outcome: str = "ok"
    usage: dict | None = None
    label: str | None = None

    def to_json(self) -> str:
        record = {
            "v": TRAJECTORY_SCHEMA_VERSION,
            "step": self.step,
            "kind": self.kind,
            "outcome": self.outcome,
            "label": self.label,
            "payload": self.payload,
            "usage": self.usage,
        }
        return json.dumps(record, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "TrajectoryEvent":
        record = json.loads(line)
        return cls(
            step=record["step"],
            kind=record["kind"],
            payload=record["payload"],
            outcome=record.get("outcome", "ok"),
            usage=record.get("usage"),
            label=record.get("label"),
        )


class TrajectoryLog:
    """Append-only event log with strictly increasing step indices."""

    def __init__(self) -> None:
        self.events: list[TrajectoryEvent] = []

    def append(self, event: TrajectoryEvent) -> "TrajectoryLog":
        if self.events and event.step <= self.events[-1].step:
            raise ContractViolation(
                f"out-of-order event step {event.step} after {self.events[-1].step}"
            )
        self.events.append(event)
        return self

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def to_lines(self) -> list[str]:
        return [event.to_json() for event in self.events]

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "TrajectoryLog":
        log = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                log.append(TrajectoryEvent.from_json(line))
        return log


def append_event(log: TrajectoryLog, event: TrajectoryEvent) -> TrajectoryLog:
    return log.append(event)


def diff_event_streams(a: list[TrajectoryEvent], b: list[TrajectoryEvent]) -> list[str]:
    """Human-readable divergences between two event streams (empty = identical)."""
    divergences = []
    for index, (ev_a, ev_b) in enumerate(zip(a, b)):
        if ev_a.to_json() != ev_b.to_json():
            divergences.append(f"event {index} differs: {ev_a.kind} vs {ev_b.kind}")
    if len(a) != len(b):
        divergences.append(f"length differs: {len(a)} vs {len(b)}")
    return divergences


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ReportBundle:
    accuracy_per_phase: dict[str, float]
    taxonomy_per_phase: dict[str, dict[str, int]]
    proposal_counts: dict[str, int]
    multiplier: float | None
    curve: list[dict]

    def to_dict(self) -> dict:
        return {
            "accuracy_per_phase": self.accuracy_per_phase,
            "taxonomy_per_phase": self.taxonomy_per_phase,
            "proposal_counts": self.proposal_counts,
            "multiplier": self.multiplier,
            "curve": self.curve,
        }


def build_report(events: list[TrajectoryEvent]) -> ReportBundle:
    """Recompute the report purely from the event stream."""
    accuracy: dict[str, float] = {}
    taxonomy: dict[str, dict[str, int]] = {}
    counts = {"proposed": 0, "executable": 0, "non_executable": 0,
              "accepted": 0, "rejected": 0, "rejected_regression": 0}
    curve: list[dict] = []
    committed_steps = set()
    initial_units: float | None = None
    final_units: float | None = None
    first_commit_step: int | None = None
    pe_accuracy: float | None = None
    final_accuracy: float | None = None

    for event in events:
        if event.kind == "gate_verdict":
            if event.label == "accepted" and first_commit_step is None:
                first_commit_step = event.payload.get("outer_step")

    for event in events:
        payload = event.payload
        if event.kind == "evaluate_on_task":
            scope = payload.get("scope")
            if scope == "initial":
                accuracy["vanilla"] = payload["utility"]
                initial_units = payload.get("per_query_units")
            elif scope == "final":
                final_accuracy = payload["utility"]
                final_units = payload.get("per_query_units")
        elif event.kind == "optimize_prompt_on_task":
            step = payload.get("outer_step")
            utility = payload.get("validated_utility")
            if utility is not None:
                curve.append({"outer_step": step, "validated_utility": utility})
                if first_commit_step is None or (step is not None and step < first_commit_step):
                    pe_accuracy = utility
        elif event.kind == "display_analysis":
            phase = payload.get("phase", "unknown")
            bucket = taxonomy.setdefault(phase, {cat: 0 for cat in CATEGORIES})
            for category, count in payload.get("counts", {}).items():
                bucket[category] = bucket.get(category, 0) + count
        elif event.kind == "adjust_logic" and event.outcome == "ok":
            counts["proposed"] += 1
            if payload.get("executable"):
                counts["executable"] += 1
            else:
                counts["non_executable"] += 1
        elif event.kind == "gate_verdict":
            committed_steps.add(payload.get("outer_step"))
            if event.label == "accepted":
                counts["accepted"] += 1
            else:
                counts["rejected"] += 1
                if payload.get("delta", 0.0) <= 0:
                    counts["rejected_regression"] += 1

    for point in curve:
        point["committed"] = point["outer_step"] in committed_steps

    if pe_accuracy is not None:
        accuracy["prompt_evolved"] = pe_accuracy
    if final_accuracy is not None:
        accuracy["fully_evolved"] = final_accuracy

    multiplier = None
    if initial_units and final_units:
        multiplier = usage_multiplier(initial_units, final_units)

    return ReportBundle(
        accuracy_per_phase=accuracy,
        taxonomy_per_phase=taxonomy,
        proposal_counts=counts,
        multiplier=multiplier,
        curve=curve,
    )


def emit_report(
    events: list[TrajectoryEvent],
    out_dir: str | Path | None = None,
    make_plots: bool = False,
) -> ReportBundle:
    """Build the report bundle and optionally write CSV tables and a plot."""
    bundle = build_report(events)
    if out_dir is None:
        return bundle
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with (out / "accuracy.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["phase", "utility"])
        for phase, utility in bundle.accuracy_per_phase.items():
            writer.writerow([phase, f"{utility:.6f}"])

    with (out / "taxonomy.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["phase", "category", "count"])
        for phase, buckets in bundle.taxonomy_per_phase.items():
            for category, count in buckets.items():
                writer.writerow([phase, category, count])

    with (out / "proposals.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = ["proposed", "executable", "accepted", "rejected", "rejected_regression"]
        writer.writerow(header)
        writer.writerow([bundle.proposal_counts[column] for column in header])

    with (out / "usage.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["multiplier"])
        writer.writerow([bundle.multiplier if bundle.multiplier is not None else ""])

    with (out / "curve.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["outer_step", "validated_utility", "committed"])
        for point in bundle.curve:
            writer.writerow(
                [point["outer_step"], f"{point['validated_utility']:.6f}", int(point["committed"])]
            )

    if make_plots:
        _plot_curve(bundle, out / "trajectory.png")
    return bundle


def _plot_curve(bundle: ReportBundle, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    steps = [point["outer_step"] for point in bundle.curve]
    utilities = [point["validated_utility"] for point in bundle.curve]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, utilities, marker="o", label="validated utility")
    commits = [p for p in bundle.curve if p["committed"]]
    if commits:
        ax.scatter(
            [p["outer_step"] for p in commits],
            [p["validated_utility"] for p in commits],
            marker="*",
            s=160,
            color="crimson",
            zorder=3,
            label="structural commit",
        )
    ax.set_xlabel("outer step")
    ax.set_ylabel("validated utility")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
