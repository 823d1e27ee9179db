"""Task samples, dataset splits, and score results.

A dataset is a flat list of :class:`TaskSample` records loaded from a
line-delimited JSON file (one object per line, fields ``id``,
``input_fields``, ``gold``, ``metadata``).  Splits are produced by a
seed-shuffled partition into a training pool and a held-out test set;
validation subsets are sampled dynamically from the training pool by the
evolution loop, never stored here.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class DatasetError(ValueError):
    """Raised for malformed sample files or invalid split requests."""


@dataclass(frozen=True)
class TaskSample:
    """One scored unit of work.

    ``gold`` is the gold answer text for match-scored tasks, or a list of
    constraint specs (dicts with a ``kind`` key) for checker-scored tasks.
    """

    id: str
    input_fields: dict[str, str]
    gold: Any
    metadata: dict[str, Any] = field(default_factory=dict)

    def primary_input(self) -> str:
        """Render the input fields as a single prompt body."""
        if len(self.input_fields) == 1:
            return next(iter(self.input_fields.values()))
        return "\n".join(f"{key}: {value}" for key, value in self.input_fields.items())


@dataclass(frozen=True)
class ScoreResult:
    """Outcome of scoring one prediction against one sample."""

    utility: float
    loose: float | None = None
    extraction_failed: bool = False
    violated_constraints: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.utility <= 1.0:
            raise ValueError(f"utility out of range: {self.utility}")
        if self.loose is not None and not 0.0 <= self.loose <= 1.0:
            raise ValueError(f"loose score out of range: {self.loose}")
        if self.extraction_failed and self.utility != 0.0:
            raise ValueError("extraction failure must score 0")


@dataclass(frozen=True)
class DatasetSplits:
    """Disjoint seed-shuffled train pool and test set."""

    train_pool: tuple[TaskSample, ...]
    test_set: tuple[TaskSample, ...]
    seed: int

    def __post_init__(self) -> None:
        train_ids = {s.id for s in self.train_pool}
        test_ids = {s.id for s in self.test_set}
        if len(train_ids) != len(self.train_pool) or len(test_ids) != len(self.test_set):
            raise DatasetError("duplicate sample ids within a split")
        if train_ids & test_ids:
            raise DatasetError(f"train/test overlap on ids: {sorted(train_ids & test_ids)[:5]}")


def load_samples(path: str | Path) -> list[TaskSample]:
    """Load samples from a line-delimited JSON record file."""
    path = Path(path)
    samples: list[TaskSample] = []
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for key in ("id", "input_fields", "gold"):
                if key not in record:
                    raise DatasetError(f"{path}:{lineno}: missing field {key!r}")
            samples.append(
                TaskSample(
                    id=str(record["id"]),
                    input_fields=dict(record["input_fields"]),
                    gold=record["gold"],
                    metadata=dict(record.get("metadata", {})),
                )
            )
    return samples


def save_samples(samples: list[TaskSample], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for sample in samples:
            record = {
                "id": sample.id,
                "input_fields": sample.input_fields,
                "gold": sample.gold,
                "metadata": sample.metadata,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def make_splits(
    samples: list[TaskSample],
    train_size: int,
    test_size: int,
    seed: int,
) -> DatasetSplits:
    """Partition ``samples`` into disjoint train/test splits, seed-shuffled.

    Equal seeds over equal inputs give byte-identical splits.
    """
    if train_size < 0 or test_size < 0:
        raise DatasetError("split sizes must be non-negative")
    if train_size + test_size > len(samples):
        raise DatasetError(
            f"requested {train_size}+{test_size} samples from a pool of {len(samples)}"
        )
    shuffled = list(samples)
    random.Random(seed).shuffle(shuffled)
    return DatasetSplits(
        train_pool=tuple(shuffled[:train_size]),
        test_set=tuple(shuffled[train_size : train_size + test_size]),
        seed=seed,
    )
