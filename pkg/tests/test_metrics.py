import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cplab.metrics import (
    EditStats,
    batch_ter,
    batch_wer,
    levenshtein,
    split_words,
    ter,
    wer,
)
from oracles import recursive_edit_distance

seqs = st.lists(st.integers(0, 3), max_size=8)


def test_identity_has_no_edits():
    s = levenshtein([1, 2, 3], [1, 2, 3])
    assert s.total == 0 and s.ref_len == 3


def test_empty_reference_forces_insertions():
    assert levenshtein([], [4, 4]) == EditStats(0, 2, 0, 0)


def test_all_deletions():
    assert levenshtein([1, 2], []) == EditStats(0, 0, 2, 2)


def test_mixed_case_matches_oracle():
    s = levenshtein([1, 2, 3, 4], [1, 3, 5, 4])
    assert s.total == recursive_edit_distance([1, 2, 3, 4], [1, 3, 5, 4]) == 2
    assert s.substitutions + s.deletions <= s.ref_len


def test_ter_examples():
    assert ter([1, 2], [1, 2]) == 0.0
    assert ter([1, 2], [2, 2]) == 0.5
    assert ter([1], [1, 2, 3]) == 2.0
    assert recursive_edit_distance([1], [1, 2, 3]) / 1 == 2.0


def test_ter_empty_reference_convention():
    assert ter([], []) == 0.0
    assert ter([], [3]) == 1.0
    assert batch_ter([[], []], [[], [1]]) == 1.0


def test_batch_ter_pools_instead_of_averaging():
    assert batch_ter([[1, 2], [1, 2]], [[1, 2], [1, 2]]) == 0.0
    assert batch_ter([[1, 2], [3, 4]], [[1, 1], [3, 4]]) == 0.25
    # averaging per-pair rates would give (1 + 0) / 2
    assert batch_ter([[1], [1, 2, 3, 4]], [[2], [1, 2, 3, 4]]) == pytest.approx(0.2)


def test_batch_ter_errors():
    with pytest.raises(ValueError):
        batch_ter([[1]], [[1], [2]])
    with pytest.raises(ValueError):
        batch_ter([], [])


def test_batch_ter_random_batch_vs_oracle(rng):
    for _ in range(20):
        refs = [list(rng.integers(0, 4, rng.integers(0, 7))) for _ in range(8)]
        hyps = [list(rng.integers(0, 4, rng.integers(0, 7))) for _ in range(8)]
        edits = sum(recursive_edit_distance(r, h) for r, h in zip(refs, hyps))
        n = sum(len(r) for r in refs)
        expected = edits / n if n else float(any(hyps))
        assert batch_ter(refs, hyps) == pytest.approx(expected, abs=1e-12)


def test_wer_mirrors_ter_on_word_ids():
    assert wer(["a", "b"], ["a", "b"]) == 0.0
    assert wer(["a", "b"], ["b", "b"]) == 0.5
    assert wer(["a"], ["a", "b", "c"]) == 2.0
    assert batch_wer([["x"], ["y", "z"]], [["x"], ["y"]]) == pytest.approx(1 / 3)


def test_split_words():
    assert split_words([0, 1, 2, 0, 3, 0, 0], 0) == [(1, 2), (3,)]
    assert split_words([], 0) == []
    assert split_words([5, 6], 0) == [(5, 6)]


@settings(max_examples=300, deadline=None)
@given(seqs, seqs)
def test_matches_recursive_oracle(a, b):
    s = levenshtein(a, b)
    assert s.total == recursive_edit_distance(a, b)
    assert s.ref_len == len(a)
    assert min(s.substitutions, s.insertions, s.deletions) >= 0
    assert s.substitutions + s.deletions <= s.ref_len
    # the breakdown must describe a consistent edit script
    assert len(a) - s.deletions + s.insertions == len(b)


@settings(max_examples=200, deadline=None)
@given(seqs)
def test_self_distance_is_zero(a):
    assert levenshtein(a, a).total == 0


@settings(max_examples=200, deadline=None)
@given(seqs, seqs)
def test_symmetric_total(a, b):
    assert levenshtein(a, b).total == levenshtein(b, a).total


@settings(max_examples=200, deadline=None)
@given(seqs, seqs, seqs)
def test_triangle_inequality(a, b, c):
    assert levenshtein(a, c).total <= levenshtein(a, b).total + levenshtein(b, c).total


@settings(max_examples=200, deadline=None)
@given(seqs, seqs)
def test_single_pair_batch_equals_ter(a, b):
    assert batch_ter([a], [b]) == ter(a, b)
