import pytest

from backwarp.errors import ConfigError
from backwarp.indexing import FrameIndexing


def test_n7_layout():
    fi = FrameIndexing(7)
    assert fi.half == 3
    assert fi.n_total == 14
    assert fi.ref_positions == (3, 10)
    assert fi.nonmiddle == (0, 1, 2, 4, 5, 6, 7, 8, 9, 11, 12, 13)
    assert fi.n_flows == 24
    assert len(fi.pairs) == 24


def test_flow_count_law_over_odd_n():
    for n in (3, 5, 7, 9, 11):
        fi = FrameIndexing(n)
        assert fi.n_flows == 2 * (2 * n) - 4
        assert len(fi.pairs) == fi.n_flows
        assert len(fi.nonmiddle) == fi.n_total - 2


def test_pair_canonical_order():
    fi = FrameIndexing(5)
    r0, r1 = fi.ref_positions
    assert fi.pairs[0] == (0, r0)
    assert fi.pairs[len(fi.nonmiddle)] == (0, r1)
    assert fi.pair_index(0, r1) == len(fi.nonmiddle)


def test_ordering_rule_pairs_point_at_extrema():
    fi = FrameIndexing(7)
    rule = fi.ordering_rule_pairs()
    r0, r1 = fi.ref_positions
    assert fi.pairs[rule["first_early"]] == (0, r1)
    assert fi.pairs[rule["first_late"]] == (6, r1)
    assert fi.pairs[rule["second_early"]] == (7, r0)
    assert fi.pairs[rule["second_late"]] == (13, r0)


def test_even_n_rejected():
    with pytest.raises(ConfigError):
        FrameIndexing(4)


def test_unknown_pair_rejected():
    fi = FrameIndexing(5)
    with pytest.raises(ConfigError):
        fi.pair_index(0, 1)
