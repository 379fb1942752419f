import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamdsu.postproc import MergeTable, bpe_apply, bpe_invert, bpe_learn, dedup, subword

seqs = st.lists(st.integers(0, 5), max_size=40)


def test_dedup_examples():
    assert dedup([5, 5, 3, 3, 3, 5]) == [5, 3, 5]
    assert dedup([]) == []
    assert dedup([1, 2, 1]) == [1, 2, 1]


@given(seqs)
def test_dedup_properties(x):
    y = dedup(x)
    assert dedup(y) == y
    assert len(y) <= len(x)
    assert all(a != b for a, b in zip(y, y[1:]))


def test_learn_single_repeated_pair():
    table = bpe_learn([[1, 2, 1, 2]], target_vocab=4, base_vocab=3)
    assert table.merges == [(1, 2, 3)]


def test_learn_no_repeated_pair():
    table = bpe_learn([[0, 1, 2, 3]], target_vocab=10, base_vocab=4)
    assert table.merges == []


def test_learn_rejects_small_target():
    with pytest.raises(ValueError):
        bpe_learn([[1, 2]], target_vocab=3, base_vocab=3)


def test_tie_break_is_lexicographic():
    # (0,1) and (2,3) both occur twice; (0,1) wins
    table = bpe_learn([[2, 3, 0, 1], [2, 3, 0, 1]], target_vocab=5, base_vocab=4)
    assert table.merges[0] == (0, 1, 4)


def test_apply_hand_case_and_empty_table():
    table = MergeTable(7, [])
    assert bpe_apply([1, 2, 1, 2], table) == [1, 2, 1, 2]
    table = MergeTable(7, [(1, 2, 7)])
    assert bpe_apply([1, 2, 1, 2], table) == [7, 7]
    assert bpe_invert([7, 7], table) == [1, 2, 1, 2]


def test_unknown_ids():
    table = MergeTable(3, [(0, 1, 3)])
    with pytest.raises(ValueError):
        bpe_apply([5], table)
    with pytest.raises(ValueError):
        bpe_invert([9], table)


def test_table_validation():
    with pytest.raises(ValueError):
        MergeTable(3, [(0, 1, 5)])
    with pytest.raises(ValueError):
        MergeTable(3, [(0, 4, 3)])


def test_table_file_roundtrip(tmp_path):
    table = bpe_learn([[0, 1, 0, 1, 2, 0, 1, 2]], target_vocab=6, base_vocab=3)
    table.save(tmp_path / "merges.txt")
    assert (tmp_path / "merges.txt").read_text().splitlines()[0] == f"3 {table.final_vocab}"
    assert MergeTable.load(tmp_path / "merges.txt") == table


@settings(max_examples=60, deadline=None)
@given(st.lists(seqs, min_size=1, max_size=8), st.integers(1, 12))
def test_learned_roundtrip_and_compression(corpus, extra):
    table = bpe_learn(corpus, target_vocab=6 + extra, base_vocab=6)
    assert table.final_vocab <= 6 + extra
    for x in corpus:
        y = bpe_apply(x, table)
        assert len(y) <= len(x)
        assert bpe_invert(y, table) == x


def test_subword_dedups_first():
    table = MergeTable(4, [(1, 2, 4)])
    assert subword([1, 1, 2, 2, 1, 2], table) == [4, 4]
    assert subword([1, 1, 2], None) == [1, 2]
