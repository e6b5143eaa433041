from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsotfnt.labels import ChannelTranscripts, TimedWord
from tsotfnt.scoring import (WerReport, corpus_report, multitalker_wer, overlap_condition, overlap_ratio,
                             wer)

words = st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=8)


def edit_distance(r, h):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j - 1) + (r[i - 1] != h[j - 1]), d(i - 1, j) + 1, d(i, j - 1) + 1)

    return d(len(r), len(h))


def test_identical_is_zero():
    assert wer("a b c", "a b c").wer == 0.0


def test_one_substitution():
    rep = wer("a b c", "a x c")
    assert (rep.substitutions, rep.insertions, rep.deletions) == (1, 0, 0)
    assert rep.wer == pytest.approx(1 / 3)


def test_insertion_and_deletion_counts():
    assert wer("a b", "a b c").insertions == 1
    assert wer("a b c", "a c").deletions == 1


def test_tie_prefers_substitution():
    rep = wer("a", "b")
    assert (rep.substitutions, rep.insertions, rep.deletions) == (1, 0, 0)


def test_empty_reference():
    rep = wer("", "a b")
    assert rep.insertions == 2 and not rep.defined and rep.to_json()["wer"] is None
    assert wer("", "").wer == 0.0


def test_case_normalized():
    assert wer("A b", "a B").errors == 0


@given(words, words)
@settings(max_examples=200)
def test_distance_matches_oracle(r, h):
    rep = wer(r, h)
    assert rep.errors == edit_distance(tuple(r), tuple(h))
    assert rep.ref_words == len(r)


@given(words, words, words)
@settings(max_examples=100)
def test_triangle_bound(r, m, h):
    if r:
        assert wer(r, h).wer <= (edit_distance(tuple(r), tuple(m)) + edit_distance(tuple(m), tuple(h))) / len(r)


def test_multitalker_swap_examples():
    ref = [["a", "b"], ["x"]]
    assert multitalker_wer(ref, ChannelTranscripts([["a", "b"], ["x"]])).wer == 0
    assert multitalker_wer(ref, ChannelTranscripts([["x"], ["a", "b"]])).wer == 0


def test_multitalker_single_speaker_padded():
    rep = multitalker_wer([["a", "b"]], ChannelTranscripts([[], ["a", "b", "c"]]))
    assert rep.errors == 1 and rep.ref_words == 2


def test_multitalker_rejects_three_speakers():
    with pytest.raises(ValueError):
        multitalker_wer([["a"], ["b"], ["c"]], ChannelTranscripts())


@given(words, words, words, words)
@settings(max_examples=100)
def test_multitalker_is_min_over_assignments(r0, r1, h0, h1):
    rep = multitalker_wer([r0, r1], ChannelTranscripts([h0, h1]))
    ident = edit_distance(tuple(r0), tuple(h0)) + edit_distance(tuple(r1), tuple(h1))
    swap = edit_distance(tuple(r0), tuple(h1)) + edit_distance(tuple(r1), tuple(h0))
    assert rep.errors == min(ident, swap)
    assert rep.errors == multitalker_wer([r1, r0], ChannelTranscripts([h0, h1])).errors
    assert rep.errors == multitalker_wer([r0, r1], ChannelTranscripts([h1, h0])).errors


def test_corpus_aggregates_counts():
    reps = [wer("a", "b"), wer("a b c d", "a b c d")]
    total = corpus_report(reps)
    assert total.wer == pytest.approx(1 / 5)
    assert total.wer != pytest.approx((reps[0].wer + reps[1].wer) / 2)
    assert corpus_report([]).wer == 0.0
    assert WerReport(1, 0, 0, 2) + WerReport(0, 1, 0, 2) == WerReport(1, 1, 0, 4)


def test_overlap_ratio_and_conditions():
    words = [TimedWord("s0", "a", 0, 4), TimedWord("s0", "b", 4, 8), TimedWord("s1", "c", 6, 10)]
    assert overlap_ratio(words) == pytest.approx(2 / 10)
    assert overlap_condition(0.0, 1) == "0S"
    assert overlap_condition(0.0, 2) == "0L"
    assert overlap_condition(0.1, 2) == "OV0-20"
    assert overlap_condition(0.2, 2) == "OV0-20"
    assert overlap_condition(0.3, 2) == "OV20-40"
    assert overlap_condition(0.9, 2) == "OV40+"
