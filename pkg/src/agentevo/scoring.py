"""Benchmark scorers: letter match, exact numeric match, span EM/F1, pass^k.

Each scorer maps a raw prediction string and a gold target to a
:class:`~agentevo.tasks.ScoreResult` with utility in [0, 1].  Extraction
failures score 0 instead of raising so that malformed generations count as
incorrect rather than aborting an evaluation pass.
"""

from __future__ import annotations

import math
import re
import string
from collections import Counter

from .tasks import ScoreResult

# First standalone A-D token, case-insensitive.  Tokens embedded in longer
# words ("Answer", "bad") do not count.
_LETTER_RE = re.compile(r"\b([A-Da-d])\b")

# Optional sign, digits with optional comma groups, optional decimal part.
# Scientific notation is deliberately not recognised.
_NUMERIC_RE = re.compile(r"[-+]?\d{1,3}(?:,\d{3})+(?:\.\d+)?|[-+]?\d+(?:\.\d+)?")

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def extract_letter(text: str) -> str | None:
    """Return the first A-D token of ``text`` uppercased, or None."""
    match = _LETTER_RE.search(text)
    return match.group(1).upper() if match else None


def extract_numeric_token(text: str) -> str | None:
    """Return the first numeric token of ``text`` verbatim, or None."""
    match = _NUMERIC_RE.search(text)
    return match.group(0) if match else None


def score_letter_match(prediction: str, gold: str) -> ScoreResult:
    """Utility 1 iff the first A-D token of ``prediction`` equals ``gold``."""
    gold = gold.strip().upper()
    if gold not in {"A", "B", "C", "D"}:
        raise ValueError(f"gold must be one of A-D, got {gold!r}")
    letter = extract_letter(prediction)
    if letter is None:
        return ScoreResult(utility=0.0, extraction_failed=True)
    return ScoreResult(utility=1.0 if letter == gold else 0.0)


def normalize_numeric(text: str) -> str:
    """Canonicalise the first numeric token of ``text``.

    Thousands separators are removed; trailing zeros after the decimal
    point and a trailing decimal point are trimmed.  Returns "" when no
    numeric token exists, which flags extraction failure downstream.
    """
    token = extract_numeric_token(text)
    if token is None:
        return ""
    token = token.replace(",", "")
    if "." in token:
        token = token.rstrip("0").rstrip(".")
    return token


def score_numeric_exact(prediction: str, gold: str) -> ScoreResult:
    """Exact match on canonical numeric form."""
    gold_norm = normalize_numeric(gold)
    if not gold_norm:
        raise ValueError(f"gold does not normalise to a numeral: {gold!r}")
    pred_norm = normalize_numeric(prediction)
    if not pred_norm:
        return ScoreResult(utility=0.0, extraction_failed=True)
    return ScoreResult(utility=1.0 if pred_norm == gold_norm else 0.0)


def normalize_span(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    lowered = text.lower().translate(_PUNCT_TABLE)
    tokens = [tok for tok in lowered.split() if tok not in _ARTICLES]
    return " ".join(tokens)


def span_f1(prediction: str, gold: str) -> float:
    """Token-level overlap F1 on normalised spans (whitespace tokens)."""
    pred_tokens = normalize_span(prediction).split()
    gold_tokens = normalize_span(gold).split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def score_span_em_f1(prediction: str, gold: str) -> tuple[int, float]:
    """Exact match and overlap F1 on normalised spans.

    EM is the optimisation utility; F1 is reported alongside for analysis.
    """
    em = int(normalize_span(prediction) == normalize_span(gold))
    return em, span_f1(prediction, gold)


def pass_k(successes: int, trials: int, k: int) -> float:
    """Probability that ``k`` trials drawn without replacement all succeed.

    Combinatorial estimator C(c, k) / C(n, k) over ``trials`` independent
    attempts of which ``successes`` passed.
    """
    if not 0 <= successes <= trials:
        raise ValueError(f"need 0 <= successes <= trials, got c={successes} n={trials}")
    if not 1 <= k <= trials:
        raise ValueError(f"need 1 <= k <= trials, got k={k} n={trials}")
    if successes < k:
        return 0.0
    return math.comb(successes, k) / math.comb(trials, k)
