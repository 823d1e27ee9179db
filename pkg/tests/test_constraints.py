from __future__ import annotations

import pytest

from agentevo.constraints import (
    ConfigurationError,
    build_checkers,
    score_strict_constraints,
)


def checkers(*specs):
    return build_checkers(list(specs))


class TestCheckers:
    def test_word_count_bounds(self):
        checker = checkers({"kind": "word_count", "min_words": 2, "max_words": 4})[0]
        assert not checker.check("one")
        assert checker.check("one two three")
        assert not checker.check("a b c d e")

    def test_case_upper(self):
        checker = checkers({"kind": "case", "mode": "upper"})[0]
        assert checker.check("ALL CAPS 123!")
        assert not checker.check("Mixed Case")

    def test_case_lower(self):
        checker = checkers({"kind": "case", "mode": "lower"})[0]
        assert checker.check("all lower")
        assert not checker.check("Not lower")

    def test_keyword_presence_and_absence(self):
        present = checkers({"kind": "keyword_presence", "keyword": "budget"})[0]
        absent = checkers({"kind": "keyword_absence", "keyword": "budget"})[0]
        assert present.check("the Budget was met")
        assert not present.check("the budgetary process")  # whole-word match
        assert absent.check("nothing relevant")
        assert not absent.check("budget exceeded")

    def test_forbidden_punctuation(self):
        checker = checkers({"kind": "forbidden_punctuation", "characters": "!?"})[0]
        assert checker.check("calm statement.")
        assert not checker.check("really?!")

    def test_paragraph_count(self):
        checker = checkers({"kind": "paragraph_count", "min_paragraphs": 2})[0]
        assert checker.check("first block\n\nsecond block")
        assert not checker.check("single block only")

    def test_unknown_kind_is_configuration_error(self):
        with pytest.raises(ConfigurationError):
            build_checkers([{"kind": "rhyme_scheme"}])

    def test_bad_params_are_configuration_errors(self):
        with pytest.raises(ConfigurationError):
            build_checkers([{"kind": "keyword_presence"}])


class TestStrictScoring:
    def three(self):
        return checkers(
            {"kind": "word_count", "min_words": 2},
            {"kind": "case", "mode": "lower"},
            {"kind": "keyword_presence", "keyword": "cat"},
        )

    def test_all_pass(self):
        result = score_strict_constraints("the cat sat", self.three())
        assert result.utility == 1.0
        assert result.loose == 1.0
        assert result.violated_constraints == ()

    def test_two_of_three_pass(self):
        # loose reports the fraction of satisfied constraints
        result = score_strict_constraints("the Dog sat with the cat", self.three())
        assert result.utility == 0.0
        assert result.loose == pytest.approx(2 / 3)
        assert len(result.violated_constraints) == 1

    def test_none_pass(self):
        result = score_strict_constraints("NO", self.three())
        assert result.utility == 0.0
        assert result.loose == 0.0
        assert len(result.violated_constraints) == 3

    def test_strict_never_exceeds_loose(self):
        for text in ["the cat sat", "DOG", "a cat", "many words but WRONG case cat"]:
            result = score_strict_constraints(text, self.three())
            assert result.utility <= result.loose

    def test_empty_checker_list_rejected(self):
        with pytest.raises(ConfigurationError):
            score_strict_constraints("text", [])
