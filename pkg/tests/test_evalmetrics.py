import numpy as np
import pytest

from oracles import edit_distance
from radarasr.errors import EmptyReference
from radarasr.evalmetrics import (AlignmentStats, char_tokens, edit_alignment, error_rate, frame_latency,
                                  score_report, word_tokens)


def test_identical():
    assert edit_alignment("abc", "abc") == AlignmentStats(0, 0, 0, 3)


def test_word_substitution():
    stats = edit_alignment(word_tokens("the cat"), word_tokens("the bat"))
    assert (stats.substitutions, stats.insertions, stats.deletions) == (1, 0, 0)
    assert error_rate(stats) == 0.5


def test_wer_above_one():
    stats = edit_alignment(word_tokens("a"), word_tokens("a b c"))
    assert stats.insertions == 2 and error_rate(stats) == 2.0
    assert error_rate(AlignmentStats(2, 0, 0, 1)) == 2.0


def test_error_rate_edges():
    assert error_rate(AlignmentStats(0, 0, 0, 10)) == 0.0
    with pytest.raises(EmptyReference):
        error_rate(AlignmentStats(1, 0, 0, 0))


def test_tie_prefers_substitution_then_insertion():
    # "ab" -> "ba": two substitutions and one insertion plus one deletion both cost 2
    stats = edit_alignment("ab", "ba")
    assert stats == AlignmentStats(0, 0, 2, 2)
    assert edit_alignment("", "xy") == AlignmentStats(2, 0, 0, 0)
    assert edit_alignment("xy", "") == AlignmentStats(0, 2, 0, 2)


def test_distance_matches_memoised_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(1, 6))
        a = rng.integers(0, k, size=int(rng.integers(0, 13))).tolist()
        b = rng.integers(0, k, size=int(rng.integers(0, 13))).tolist()
        assert edit_alignment(a, b).errors == edit_distance(a, b)


@pytest.mark.parametrize("args,expected", [((32, 4, 10), (1280, 640)), ((1, 4, 10), (40, 20)),
                                           ((8, 4, 10), (320, 160))])
def test_latency(args, expected):
    assert frame_latency(*args) == expected


def test_tokenisation_and_report():
    assert char_tokens("Ab c") == ["a", "b", "c"]
    assert word_tokens("Ab  C") == ["ab", "c"]
    rows, summary = score_report({"u1": "ab cd", "u2": "ef"}, {"u1": "ab cd", "u2": "eg h"})
    assert rows[0]["cer"] == 0.0
    assert summary["chars"] == 6 and summary["char_errors"] == 2
    assert summary["wer"] == pytest.approx(2 / 3)


def test_cer_wer_agree_on_same_tokens():
    # with one-character words, word and character tokenisations coincide
    ref, hyp = "a b c d", "a c d e"
    c = edit_alignment(char_tokens(ref), char_tokens(hyp))
    w = edit_alignment(word_tokens(ref), word_tokens(hyp))
    assert error_rate(c) == error_rate(w)
