from __future__ import annotations

import math
from itertools import combinations

import pytest
from hypothesis import given, strategies as st

from agentevo.scoring import (
    normalize_numeric,
    normalize_span,
    pass_k,
    score_letter_match,
    score_numeric_exact,
    score_span_em_f1,
)


class TestLetterMatch:
    def test_first_letter_token_matches(self):
        result = score_letter_match("The answer is (B).", "B")
        assert result.utility == 1.0
        assert not result.extraction_failed

    def test_case_insensitive_identity(self):
        assert score_letter_match("b", "B").utility == 1.0

    def test_no_letter_token_is_extraction_failure(self):
        result = score_letter_match("none of these options", "C")
        assert result.utility == 0.0
        assert result.extraction_failed

    def test_letters_inside_words_do_not_count(self):
        # "Answer" contains 'a' but not as a standalone token
        result = score_letter_match("Answer unclear", "A")
        assert result.extraction_failed

    def test_first_token_wins_over_later_ones(self):
        assert score_letter_match("A, though B is tempting", "B").utility == 0.0

    def test_bad_gold_rejected(self):
        with pytest.raises(ValueError):
            score_letter_match("A", "E")


class TestNumericNormalization:
    def test_thousands_separator_and_trailing_zero(self):
        assert normalize_numeric("1,234.50") == "1234.5"

    def test_already_canonical(self):
        assert normalize_numeric("7") == "7"

    def test_embedded_decimal(self):
        assert normalize_numeric("about 0.500 meters") == "0.5"

    def test_no_token_gives_empty(self):
        assert normalize_numeric("no numbers") == ""

    def test_integer_trailing_zeros_kept(self):
        assert normalize_numeric("1000") == "1000"

    @given(st.text(max_size=60))
    def test_idempotent(self, text):
        once = normalize_numeric(text)
        assert normalize_numeric(once) == once


class TestNumericExact:
    def test_separator_insensitive_match(self):
        assert score_numeric_exact("answer: 1,000", "1000").utility == 1.0

    def test_identity(self):
        assert score_numeric_exact("42", "42").utility == 1.0

    def test_missing_number_flags_extraction(self):
        result = score_numeric_exact("no number here", "5")
        assert result.utility == 0.0
        assert result.extraction_failed

    def test_gold_must_be_numeric(self):
        with pytest.raises(ValueError):
            score_numeric_exact("5", "five")


class TestSpanNormalization:
    def test_article_and_punctuation_removal(self):
        assert normalize_span("The Eiffel Tower.") == "eiffel tower"

    def test_empty(self):
        assert normalize_span("") == ""

    def test_article_removal_collapses_whitespace(self):
        assert normalize_span("A  dog") == "dog"

    @given(st.text(max_size=60))
    def test_idempotent(self, text):
        once = normalize_span(text)
        assert normalize_span(once) == once


class TestSpanEmF1:
    def test_normalized_equality(self):
        em, f1 = score_span_em_f1("the Eiffel Tower", "Eiffel Tower")
        assert (em, f1) == (1, 1.0)

    def test_partial_overlap_f1(self):
        # precision 1/2, recall 1/1 -> F1 = 2*(0.5*1)/(0.5+1) = 2/3
        em, f1 = score_span_em_f1("barack obama", "obama")
        assert em == 0
        assert f1 == pytest.approx(2 / 3)

    def test_disjoint(self):
        assert score_span_em_f1("paris", "london") == (0, 0.0)

    def test_em_implies_f1_one(self):
        for pred, gold in [("a cat", "cat"), ("The  Answer.", "answer")]:
            em, f1 = score_span_em_f1(pred, gold)
            if em == 1:
                assert f1 == 1.0


def brute_force_pass_k(successes: int, trials: int, k: int) -> float:
    """Oracle: enumerate every k-subset of trials and count all-success ones."""
    outcomes = [True] * successes + [False] * (trials - successes)
    subsets = list(combinations(range(trials), k))
    hits = sum(1 for subset in subsets if all(outcomes[i] for i in subset))
    return hits / len(subsets)


class TestPassK:
    def test_all_trials_succeed(self):
        assert pass_k(4, 4, 4) == 1.0

    def test_three_of_four_pairs(self):
        # oracle: 6 pairs from 4 trials, 3 all-success pairs
        assert brute_force_pass_k(3, 4, 2) == 0.5
        assert pass_k(3, 4, 2) == 0.5

    def test_too_few_successes(self):
        assert pass_k(1, 4, 2) == 0.0

    def test_matches_enumeration_exhaustively(self):
        for n in range(1, 9):
            for c in range(0, n + 1):
                for k in range(1, n + 1):
                    assert pass_k(c, n, k) == pytest.approx(brute_force_pass_k(c, n, k))

    def test_monotone_non_increasing_in_k(self):
        for n in range(1, 9):
            for c in range(0, n + 1):
                values = [pass_k(c, n, k) for k in range(1, n + 1)]
                assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_full_success_is_one_for_all_k(self):
        for n in range(1, 9):
            for k in range(1, n + 1):
                assert pass_k(n, n, k) == 1.0

    def test_preconditions(self):
        with pytest.raises(ValueError):
            pass_k(5, 4, 2)
        with pytest.raises(ValueError):
            pass_k(2, 4, 0)
        with pytest.raises(ValueError):
            pass_k(2, 4, 5)
        with pytest.raises(ValueError):
            pass_k(-1, 4, 2)
