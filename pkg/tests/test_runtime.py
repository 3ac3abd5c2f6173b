from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monvm.asm import assemble
from monvm.capcodec import Capability, CpKind, Permissions, root_capability
from monvm.machine import HEAP_BASE, TrapKind, run
from monvm.runtime import HEADER, Heap, HeapError, InvalidFree, OutOfMemory

ARENA_TOP = 1 << 22


def make_heap(wbr=True):
    arena = Capability(True, Permissions(), HEAP_BASE, ARENA_TOP, HEAP_BASE)
    return Heap(arena, bytearray(ARENA_TOP), wbr=wbr, counters=Counter())


def test_fresh_allocation_is_wbr_with_empty_frontier():
    cap = make_heap().malloc(32)
    assert cap.length == 32 and cap.addr == cap.base
    assert cap.cp is CpKind.WRITE_BEFORE_READ and cap.op_top == cap.base


def test_zeroed_allocation():
    heap = make_heap()
    heap.memory[:] = b"\xAA" * len(heap.memory)
    cap = heap.malloc(32, zeroed=True)
    assert cap.cp is CpKind.DISABLED
    assert heap.memory[cap.base:cap.top] == bytes(32)
    assert heap.counters["store"] - make_heap_cost("store") >= 4


def make_heap_cost(category):
    heap = make_heap(wbr=False)
    heap.malloc(32)
    return heap.counters[category]


@pytest.mark.parametrize("size", [0, -8])
def test_empty_allocation_rejected(size):
    with pytest.raises(OutOfMemory):
        make_heap().malloc(size)


def test_out_of_memory():
    with pytest.raises(OutOfMemory):
        make_heap().malloc(ARENA_TOP)


def test_free_then_reuse():
    heap = make_heap()
    first = heap.malloc(48)
    heap.free(first)
    again = heap.malloc(48)
    assert again.base == first.base
    assert again.op_top == again.base          # frontier reset for the new tenant


def test_free_errors():
    heap = make_heap()
    cap = heap.malloc(16)
    with pytest.raises(InvalidFree):
        heap.free(root_capability())
    heap.free(cap)
    with pytest.raises(InvalidFree):
        heap.free(cap)
    with pytest.raises(InvalidFree):
        heap.free(1234)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 5000)), max_size=40))
def test_live_blocks_never_overlap(script):
    heap = make_heap()
    live: list[Capability] = []
    for do_free, size in script:
        if do_free and live:
            heap.free(live.pop(size % len(live)))
            continue
        cap = heap.malloc(size)
        assert cap.length >= size
        live.append(cap)
        for other in live[:-1]:
            assert cap.top <= other.base or other.top <= cap.base
            # headers sit outside every user region
            assert not other.base <= cap.base - HEADER < other.top
            assert not cap.base <= other.base - HEADER < cap.top


@pytest.mark.parametrize("size", [16, 32, 100, 4096, 5000])
def test_instrumentation_cost_is_constant(size):
    plain, wbr = make_heap(wbr=False), make_heap()
    plain.malloc(size)
    wbr.malloc(size)
    extra = sum(wbr.counters.values()) - sum(plain.counters.values())
    assert extra == 1


def test_zeroing_cost_grows_linearly():
    extras = {}
    for size in (64, 128, 1024):
        plain, zeroed = make_heap(wbr=False), make_heap(wbr=False)
        plain.malloc(size)
        zeroed.malloc(size, zeroed=True)
        extras[size] = sum(zeroed.counters.values()) - sum(plain.counters.values())
    assert extras[128] == 2 * extras[64] and extras[1024] == 16 * extras[64]


# -- through the machine -------------------------------------------------------

def test_fresh_allocation_unreadable_in_guest():
    for offset in (0, 8, 56):
        result = run(assemble(f"li c4, 64\necall 1\nld c5, {offset}(c4)\nhalt"))
        assert result.trap.kind is TrapKind.OP_BOUNDS


def test_previous_tenant_data_unreadable():
    text = """
        li c4, 64
        ecall 1
        cmove c8, c4
        li c6, 1234
        sd c6, 0(c8)
        ld c7, 0(c8)
        cmove c4, c8
        ecall 2
        li c4, 64
        ecall 1
        ld c9, 0(c4)
        halt
    """
    result = run(assemble(text))
    assert result.machine.regs[7] == 1234
    assert result.trap.kind is TrapKind.OP_BOUNDS
    assert result.trap.cap.base == result.machine.regs[8].base


def test_guest_free_errors():
    assert run(assemble("li c4, 0\necall 2\nhalt")).status == "halted"
    result = run(assemble("cmove c4, c3\necall 2\nhalt"))
    assert result.trap.kind is TrapKind.INVALID_FREE


def test_guest_malloc_failure_returns_null():
    result = run(assemble("li c4, 0\necall 1\nhalt"))
    assert result.machine.regs[4] == 0


def test_zeroed_service():
    result = run(assemble("li c4, 32\necall 4\nld c5, 24(c4)\nhalt"))
    assert result.status == "halted" and result.machine.regs[5] == 0


def test_heap_error_hierarchy():
    assert issubclass(OutOfMemory, HeapError) and issubclass(InvalidFree, HeapError)
