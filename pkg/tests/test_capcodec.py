import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monvm.capcodec import (ADDR_BITS, MAX_COND_EXP, Access, AddressMaskViolation, Capability,
                            CpKind, EncodedCapability, EnforcementConfig, Fault, Mode,
                            MonotonicityViolation, NotRepresentable, OpBoundsIncrease,
                            OutOfBounds, Permissions, RepresentabilityViolation, TagViolation,
                            advance_op_top, bounds_format, check_access, correction, decode,
                            encode, root_capability, set_addr, set_bounds, set_op_bounds)
from monvm.harness import data_path
from monvm.harness.codec_check import random_capability, read_vectors

from oracles import window_decode

WBR = CpKind.WRITE_BEFORE_READ


def cap(base, top, addr=None, cp=CpKind.DISABLED, op_top=None, perms=Permissions()):
    return Capability(True, perms, base, top, base if addr is None else addr, cp, op_top)


def wbr_cap(base=0x1000, length=0x40, op_top=None):
    return cap(base, base + length, cp=WBR, op_top=base if op_top is None else op_top)


# -- decode ------------------------------------------------------------------

def test_decode_exact_small_region():
    meta = 7 << 49 | 0x010 << 17           # I_E=0, B=0, T[11:0]=0x010, disabled
    c = decode(EncodedCapability(meta, 0x4))
    assert (c.base, c.top, c.addr) == (0x0, 0x10, 0x4)
    assert not c.conditional and c.op_top is None


def test_decode_operation_top():
    meta = int(WBR) << 49 | 0x010 << 17
    cursor = 0x008 >> 3 << 53 | 0 << 48 | 0x4     # O[13:3]=1, O_E[4:2]=0
    c = decode(EncodedCapability(meta, cursor))
    assert c.cp is WBR
    assert (c.base, c.top, c.addr, c.op_top) == (0, 0x10, 0x4, 0x8)


def test_decode_untagged_keeps_fields():
    c = decode(EncodedCapability(7 << 49 | 0x010 << 17, 0x4, tag=False))
    assert not c.tag
    assert (c.base, c.top, c.addr) == (0, 0x10, 0x4)


def test_conditional_cursor_masks_upper_address_bits():
    meta = int(WBR) << 49 | 0x010 << 17
    c = decode(EncodedCapability(meta, 0xFFFF_0000_0000_0004))
    assert c.addr == 0x4


def test_large_exponent_conditional_is_malformed():
    root = encode(root_capability())
    flipped = EncodedCapability(root.meta & ~(7 << 49), root.cursor)   # cp=WBR, E=36
    assert decode(flipped).malformed


@settings(max_examples=2000)
@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), st.booleans())
def test_decode_is_total(meta, cursor, tag):
    c = decode(EncodedCapability(meta, cursor, tag))
    assert c.tag == tag
    if c.conditional:
        assert c.addr >> ADDR_BITS == 0


# -- encode ------------------------------------------------------------------

def test_encode_small_region_round_trips():
    c = cap(0, 16, addr=4)
    assert decode(encode(c)) == c


def test_root_is_representable_with_internal_exponent():
    enc = encode(root_capability())
    assert enc.meta >> 29 & 1 == 1
    assert decode(enc) == root_capability()


def test_megabyte_conditional_capability_is_not_representable():
    c = cap(0, 1 << 20, cp=WBR, op_top=0)
    assert bounds_format(c.length)[1] > MAX_COND_EXP
    with pytest.raises(NotRepresentable):
        encode(c)


def test_encode_rejects_misaligned_large_bounds():
    with pytest.raises(NotRepresentable):
        encode(cap(1, 1 + 8192))


def test_encode_rejects_address_outside_window():
    with pytest.raises(NotRepresentable):
        encode(cap(0x1000, 0x1040, addr=1 << 40))


def test_encode_rejects_op_top_outside_bounds():
    with pytest.raises(NotRepresentable):
        encode(cap(0x1000, 0x1040, cp=WBR, op_top=0x1041))


@st.composite
def representable(draw):
    rng = random.Random(draw(st.integers(0, 2**32)))
    return random_capability(rng)


@settings(max_examples=1500)
@given(representable())
def test_round_trip(sample):
    c, _ = sample
    assert decode(encode(c)) == c


@settings(max_examples=1500)
@given(representable())
def test_oracle_decode_agrees(sample):
    c, _ = sample
    enc = encode(c)
    ref = window_decode(enc.meta, enc.cursor)
    assert (ref.base, ref.top, ref.addr, ref.op_top) == (c.base, c.top, c.addr, c.op_top)
    assert ref.cp == c.cp and ref.perms == c.perms.to_bits()


def test_golden_vectors_match_oracle():
    vectors = read_vectors(data_path("golden_vectors.txt"))
    assert len(vectors) >= 20
    for _, enc in vectors:
        c = decode(enc)
        ref = window_decode(enc.meta, enc.cursor)
        assert (ref.base, ref.top, ref.addr, ref.op_top) == (c.base, c.top, c.addr, c.op_top)
        again = encode(c)
        assert (again.meta, again.cursor, again.tag) == (enc.meta, enc.cursor, enc.tag)


def test_hex_vector_format():
    enc = EncodedCapability.from_hex("1:0FFC00000000E000:0000000000001000")
    assert enc.tag and enc.cursor == 0x1000
    assert EncodedCapability.from_hex(enc.to_hex()) == enc
    with pytest.raises(ValueError):
        EncodedCapability.from_hex("2:00:00")


# -- correction table ----------------------------------------------------------

def window_correction(a3, x3, b3):
    """Which of a_top-1, a_top, a_top+1 puts the bound in the address's window."""
    e, a_top = 0, 5
    span = 1 << (e + 14)
    addr = a_top << 14 | a3 << 11
    rw = ((b3 - 1) % 8) << 11
    start = addr - (addr - rw) % span
    hits = [c for c in (-1, 0, 1) if start <= ((a_top + c) << 14 | x3 << 11) < start + span]
    assert len(hits) == 1
    return hits[0]


def test_correction_table_matches_window_oracle():
    for a3 in range(8):
        for x3 in range(8):
            for b3 in range(8):
                assert correction(a3, (b3 - 1) % 8, x3) == window_correction(a3, x3, b3)


# -- set_bounds ----------------------------------------------------------------

def test_set_bounds_exact_small():
    c = set_bounds(set_addr(root_capability(), 0x1000), 64)
    assert (c.base, c.top) == (0x1000, 0x1040)
    assert bounds_format(c.length) == (0, 0)


def test_set_bounds_zero_length():
    c = set_bounds(set_addr(root_capability(), 0x2000), 0)
    assert c.base == c.top == 0x2000


def test_set_bounds_beyond_parent():
    parent = cap(0x1000, 0x1040)
    with pytest.raises(MonotonicityViolation):
        set_bounds(parent, 0x100)


def test_set_bounds_needs_tag():
    with pytest.raises(TagViolation):
        set_bounds(replace(root_capability(), tag=False), 16)


@settings(max_examples=1000)
@given(st.integers(0, 2**47), st.integers(0, 2**40))
def test_rounding_contains_request(base, length):
    c = set_bounds(set_addr(root_capability(), base), length)
    assert c.base <= base and base + length <= c.top
    ie, e = bounds_format(c.length)
    assert c.base % (1 << e) == 0 and c.top % (1 << e) == 0
    assert decode(encode(c)) == c


# -- set_op_bounds -------------------------------------------------------------

def test_fresh_allocation_gets_empty_operation_bound():
    c = set_op_bounds(cap(0x1000, 0x1040), WBR, 0)
    assert c.cp is WBR and c.op_top == 0x1000


def test_operation_bound_may_decrease():
    c = set_op_bounds(wbr_cap(op_top=0x1010), WBR, 8)
    assert c.op_top == 0x1008


def test_operation_bound_may_not_increase():
    with pytest.raises(OpBoundsIncrease):
        set_op_bounds(wbr_cap(op_top=0x1008), WBR, 16)


def test_operation_kind_may_not_change():
    with pytest.raises(OpBoundsIncrease):
        set_op_bounds(wbr_cap(), CpKind.WRITE_ONCE, 0)


def test_set_op_bounds_errors():
    with pytest.raises(OutOfBounds):
        set_op_bounds(cap(0x1000, 0x1040), WBR, 0x41)
    with pytest.raises(RepresentabilityViolation):
        set_op_bounds(cap(0, 1 << 20), WBR, 0)
    with pytest.raises(AddressMaskViolation):
        set_op_bounds(cap(0x1000, 0x1040, addr=1 << 50), WBR, 0)
    with pytest.raises(ValueError):
        set_op_bounds(cap(0x1000, 0x1040), CpKind.DISABLED, 0)


def test_byte_precise_operation_top_with_internal_exponent():
    # 6000 bytes needs I_E=1 with E=0; the op top keeps byte precision via O_E
    parent = set_bounds(set_addr(root_capability(), 0x10000), 6000)
    assert bounds_format(parent.length)[0] == 1
    c = set_op_bounds(parent, WBR, 4093)
    assert decode(encode(c)).op_top == parent.base + 4093


def test_conditional_set_addr_beyond_48_bits():
    with pytest.raises(AddressMaskViolation):
        set_addr(wbr_cap(), 1 << 48)


def test_set_addr_outside_window_clears_tag():
    moved = set_addr(cap(0x1000, 0x1040), 1 << 40)
    assert not moved.tag


# -- check_access --------------------------------------------------------------

def test_fresh_wbr_memory_is_write_only():
    c = wbr_cap()
    assert check_access(c, 0x1000, 4, Access.LOAD) is Fault.OP_BOUNDS
    assert check_access(c, 0x1000, 4, Access.STORE) is None


def test_conventional_capability_reads_freely():
    assert check_access(cap(0x1000, 0x1040), 0x1020, 8, Access.LOAD) is None


def test_access_faults_in_priority_order():
    c = wbr_cap()
    assert check_access(replace(c, tag=False), 0x1000, 4, Access.STORE) is Fault.TAG
    assert check_access(c, 0x103E, 4, Access.STORE) is Fault.BOUNDS
    no_read = replace(c, perms=Permissions(read=False))
    assert check_access(no_read, 0x1000, 4, Access.LOAD) is Fault.PERMIT


def test_partial_overlap_with_frontier_is_denied():
    c = wbr_cap(op_top=0x1004)
    assert check_access(c, 0x1000, 4, Access.LOAD) is None
    assert check_access(c, 0x1002, 4, Access.LOAD) is Fault.OP_BOUNDS


def test_enforcement_modes():
    c = wbr_cap()
    assert check_access(c, 0x1000, 4, Access.LOAD, EnforcementConfig(Mode.PURECAP)) is None
    assert check_access(c, 0, 4, Access.LOAD, EnforcementConfig(Mode.NOCAP)) is None


def test_gap_store_allowed_unless_strict():
    c = wbr_cap()
    assert check_access(c, 0x1008, 4, Access.STORE) is None
    strict = EnforcementConfig(strict_store=True)
    assert check_access(c, 0x1008, 4, Access.STORE, strict) is Fault.OP_BOUNDS
    assert check_access(c, 0x1000, 4, Access.STORE, strict) is None


@pytest.mark.parametrize("kind,tracked,gated", [
    (CpKind.WRITE_BEFORE_READ, Access.STORE, Access.LOAD),
    (CpKind.WRITE_BEFORE_EXECUTE, Access.STORE, Access.FETCH),
    (CpKind.WRITE_BEFORE_READ_ONLY, Access.STORE, Access.LOAD),
    (CpKind.WRITE_BEFORE_EXECUTE_ONLY, Access.STORE, Access.FETCH),
    (CpKind.WRITE_ONCE, Access.STORE, Access.STORE),
    (CpKind.READ_ONCE, Access.LOAD, Access.LOAD),
    (CpKind.EXECUTE_ONCE, Access.FETCH, Access.FETCH),
])
def test_kind_taxonomy(kind, tracked, gated):
    assert kind.tracked is tracked and kind.gated is gated
    assert CpKind.DISABLED == 7 and CpKind.DISABLED.tracked is None


def test_exact_kinds_need_the_frontier():
    once = cap(0x1000, 0x1040, cp=CpKind.WRITE_ONCE, op_top=0x1004)
    assert check_access(once, 0x1004, 4, Access.STORE) is None
    assert check_access(once, 0x1000, 4, Access.STORE) is Fault.OP_BOUNDS
    read_once = cap(0x1000, 0x1040, cp=CpKind.READ_ONCE, op_top=0x1000)
    assert check_access(read_once, 0x1000, 4, Access.LOAD) is None
    assert check_access(read_once, 0x1004, 4, Access.LOAD) is Fault.OP_BOUNDS


# -- advance_op_top ------------------------------------------------------------

def test_store_at_frontier_advances():
    assert advance_op_top(wbr_cap(), 0x1000, 4).op_top == 0x1004


def test_store_below_frontier_leaves_it():
    assert advance_op_top(wbr_cap(op_top=0x1008), 0x1000, 4).op_top == 0x1008


def test_straddling_store_extends():
    assert advance_op_top(wbr_cap(op_top=0x1004), 0x1000, 8).op_top == 0x1008


def test_gap_store_leaves_frontier():
    assert advance_op_top(wbr_cap(), 0x1008, 4).op_top == 0x1000


def test_advance_never_passes_top():
    c = wbr_cap(op_top=0x103C)
    assert advance_op_top(c, 0x103C, 16).op_top == 0x1040


@settings(max_examples=500)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 0x40), st.integers(1, 16)), max_size=30))
def test_op_top_never_increases_by_set_op_bounds(steps):
    c = wbr_cap()
    for is_set, a, b in steps:
        before = c.op_top
        if is_set:
            try:
                c = set_op_bounds(c, WBR, a)
            except OpBoundsIncrease:
                assert c.base + a > before
                continue
            assert c.op_top <= before
        else:
            c = advance_op_top(c, c.base + a, b)
        assert c.base <= c.op_top <= c.top
