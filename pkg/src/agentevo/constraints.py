"""Verifiable response constraints and the strict/loose scorer.

A constraint checker is any object with an ``id`` and ``check(text) ->
bool``.  The registry maps spec dicts (``{"kind": ..., **params}``) to
checker instances, covering a representative set of families: word-count
bounds, letter case, keyword presence/absence, forbidden punctuation, and
paragraph count.  New families plug in via :func:`register_checker`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

from .tasks import ScoreResult


class ConfigurationError(ValueError):
    """Raised for unknown checker kinds or invalid checker parameters."""


@dataclass(frozen=True)
class WordCountChecker:
    min_words: int | None = None
    max_words: int | None = None

    @property
    def id(self) -> str:
        return f"word_count:{self.min_words}-{self.max_words}"

    def check(self, text: str) -> bool:
        count = len(text.split())
        if self.min_words is not None and count < self.min_words:
            return False
        if self.max_words is not None and count > self.max_words:
            return False
        return True


@dataclass(frozen=True)
class CaseChecker:
    """All-cased letters must be upper (mode="upper") or lower (mode="lower")."""

    mode: str

    def __post_init__(self) -> None:
        if self.mode not in ("upper", "lower"):
            raise ConfigurationError(f"case mode must be upper/lower, got {self.mode!r}")

    @property
    def id(self) -> str:
        return f"case:{self.mode}"

    def check(self, text: str) -> bool:
        letters = [ch for ch in text if ch.isalpha()]
        if not letters:
            return True
        if self.mode == "upper":
            return all(ch.isupper() for ch in letters)
        return all(ch.islower() for ch in letters)


@dataclass(frozen=True)
class KeywordChecker:
    keyword: str
    present: bool = True

    @property
    def id(self) -> str:
        mode = "include" if self.present else "exclude"
        return f"keyword:{mode}:{self.keyword}"

    def check(self, text: str) -> bool:
        found = re.search(rf"\b{re.escape(self.keyword)}\b", text, re.IGNORECASE) is not None
        return found if self.present else not found


@dataclass(frozen=True)
class ForbiddenPunctuationChecker:
    characters: str

    @property
    def id(self) -> str:
        return f"no_punct:{self.characters}"

    def check(self, text: str) -> bool:
        return not any(ch in text for ch in self.characters)


@dataclass(frozen=True)
class ParagraphCountChecker:
    """Paragraphs are blocks separated by blank lines."""

    min_paragraphs: int | None = None
    max_paragraphs: int | None = None

    @property
    def id(self) -> str:
        return f"paragraphs:{self.min_paragraphs}-{self.max_paragraphs}"

    def check(self, text: str) -> bool:
        paragraphs = [block for block in re.split(r"\n\s*\n", text.strip()) if block.strip()]
        count = len(paragraphs)
        if self.min_paragraphs is not None and count < self.min_paragraphs:
            return False
        if self.max_paragraphs is not None and count > self.max_paragraphs:
            return False
        return True


_CHECKER_FACTORIES: dict[str, Callable[..., object]] = {
    "word_count": lambda **p: WordCountChecker(
        min_words=p.get("min_words"), max_words=p.get("max_words")
    ),
    "case": lambda **p: CaseChecker(mode=p["mode"]),
    "keyword_presence": lambda **p: KeywordChecker(keyword=p["keyword"], present=True),
    "keyword_absence": lambda **p: KeywordChecker(keyword=p["keyword"], present=False),
    "forbidden_punctuation": lambda **p: ForbiddenPunctuationChecker(
        characters=p["characters"]
    ),
    "paragraph_count": lambda **p: ParagraphCountChecker(
        min_paragraphs=p.get("min_paragraphs"), max_paragraphs=p.get("max_paragraphs")
    ),
}


def register_checker(kind: str, factory: Callable[..., object]) -> None:
    """Register a new checker family under ``kind``."""
    _CHECKER_FACTORIES[kind] = factory


def build_checkers(specs: list[dict]) -> list:
    """Instantiate checkers from a list of spec dicts."""
    checkers = []
    for spec in specs:
        params = dict(spec)
        kind = params.pop("kind", None)
        if kind not in _CHECKER_FACTORIES:
            raise ConfigurationError(f"unknown constraint checker kind: {kind!r}")
        try:
            checkers.append(_CHECKER_FACTORIES[kind](**params))
        except (TypeError, KeyError) as exc:
            raise ConfigurationError(f"bad parameters for checker {kind!r}: {exc}") from exc
    return checkers


def score_strict_constraints(response: str, checkers: list) -> ScoreResult:
    """Strict utility: 1 only if every checker passes.

    ``loose`` reports the fraction of passing checkers; violated checker
    ids are listed for failure feedback.
    """
    if not checkers:
        raise ConfigurationError("score_strict_constraints requires at least one checker")
    violated = tuple(checker.id for checker in checkers if not checker.check(response))
    passing = len(checkers) - len(violated)
    return ScoreResult(
        utility=1.0 if not violated else 0.0,
        loose=passing / len(checkers),
        violated_constraints=violated,
    )
