import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monvm.capcodec import (Access, CpKind, advance_op_top, check_access, root_capability,
                            set_addr, set_bounds, set_op_bounds)

from oracles import ShadowAllocation
from properties import _fresh, frontier_codec, frontier_machine


@pytest.mark.parametrize("strict", [False, True])
def test_codec_matches_shadow(strict):
    assert frontier_codec(3000, seed=11, strict=strict) == []


@pytest.mark.parametrize("strict", [False, True])
def test_machine_matches_shadow(strict):
    assert frontier_machine(1000, seed=12, strict=strict) == []


access_steps = st.lists(
    st.tuples(st.sampled_from(["store", "load"]), st.integers(0, 63), st.sampled_from([1, 2, 4, 8])),
    max_size=40)


@settings(max_examples=800)
@given(access_steps)
def test_no_unwritten_byte_is_ever_readable(steps):
    base = 0x4000
    c = _fresh(base, 64)
    written = set()
    for kind, offset, size in steps:
        offset = min(offset, 64 - size)
        span = set(range(offset, offset + size))
        if kind == "store":
            assert check_access(c, base + offset, size, Access.STORE) is None
            written |= span
            c = advance_op_top(c, base + offset, size)
        elif check_access(c, base + offset, size, Access.LOAD) is None:
            assert span <= written
        assert set(range(c.op_top - base)) <= written


def test_gap_then_fill():
    shadow = ShadowAllocation(16)
    assert shadow.store(8, 4) and shadow.frontier == 0
    assert not shadow.load(8, 4)
    assert shadow.store(0, 8) and shadow.frontier == 8
    # the gap store is forgotten: bytes 8..11 must be written again
    assert not shadow.load(8, 4)
    c = _fresh(0x1000, 16)
    c = advance_op_top(c, 0x1008, 4)
    c = advance_op_top(c, 0x1000, 8)
    assert c.op_top == 0x1008


def test_write_once_kind_in_sequence():
    c = set_op_bounds(set_bounds(set_addr(root_capability(), 0x2000), 32), CpKind.WRITE_ONCE, 0)
    for offset in range(0, 32, 4):
        assert check_access(c, 0x2000 + offset, 4, Access.STORE) is None
        c = advance_op_top(c, 0x2000 + offset, 4)
        assert check_access(c, 0x2000 + offset, 4, Access.STORE) is not None
