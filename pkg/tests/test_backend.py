import pytest

from monvm.asm import assemble
from monvm.backend import BuildOptions, LoweringError, Reg, Slot, build, linear_scan, prepare
from monvm.capcodec import EnforcementConfig, Mode
from monvm.harness import CORPUS_DIR, data_path, load_manifest
from monvm.machine import TrapKind, run
from monvm.mir import InstrumentMode, interpret, parse_mir

CASES = load_manifest(CORPUS_DIR)


def straight_loads(n, store_order):
    """``n`` values loaded up front, then consumed one store at a time."""
    body = ["  %p = alloca 8"]
    body += [f"  %v{i} = load i64 %p" for i in range(n)]
    body += [f"  store i64 %v{i}, %p" for i in store_order]
    text = "func @main() -> int {\nentry:\n" + "\n".join(body) + "\n  ret 0\n}"
    return parse_mir(text).function("main")


# -- allocator -----------------------------------------------------------------

def test_fitting_values_need_no_spill():
    alloc = linear_scan(straight_loads(8, range(8)), 8)
    assert alloc.spill_slots == 0
    assert all(isinstance(loc, Reg) and 4 <= loc.n < 12 for loc in alloc.location.values())


def test_one_too_many_spills_furthest_use():
    alloc = linear_scan(straight_loads(9, range(9)), 8)
    assert alloc.spilled == ["%v8"]
    alloc = linear_scan(straight_loads(9, reversed(range(9))), 8)
    assert alloc.spilled == ["%v0"]


def test_pigeonhole():
    assert linear_scan(straight_loads(12, range(12)), 8).spill_slots >= 1


def test_no_shared_register_while_live():
    fn = straight_loads(12, [3, 1, 4, 0, 5, 9, 2, 6, 8, 7, 11, 10])
    alloc = linear_scan(fn, 8)
    regs = [(v, loc) for v, loc in alloc.location.items() if isinstance(loc, Reg)]
    for i, (a, ra) in enumerate(regs):
        for b, rb in regs[i + 1:]:
            ia, ib = alloc.intervals[a], alloc.intervals[b]
            if ra == rb and ia is not ib:
                assert ia.end < ib.start or ib.end < ia.start


def test_deterministic():
    fn = straight_loads(12, range(12))
    assert linear_scan(fn, 8).location == linear_scan(fn, 8).location


def test_minimum_register_count():
    with pytest.raises(ValueError):
        linear_scan(straight_loads(2, range(2)), 3)


PINNED_ACROSS_CALL = """
func @g(%c: cap) -> int {
entry:
  ret 0
}

func @main() -> int {
entry:
  %a = alloca 16
  %b = stackcap %a, 16
  %w = setopbounds %b, 0
  store i64 1, %w
  %w2 = pin %w
  %r = call @g(%w2)
  store i64 2, %w2
  ret 0
}
"""


def test_pin_operands_share_a_location_across_a_call():
    alloc = linear_scan(parse_mir(PINNED_ACROSS_CALL).function("main"), 8)
    assert isinstance(alloc.location["%w"], Slot)
    assert alloc.location["%w"] == alloc.location["%w2"]


# -- lowering ------------------------------------------------------------------

ANNOTATED = """
func @main() -> int {
entry:
  %x = alloca 4 wbr
  store i32 1, %x
  %v = load i32 %x
  call @print(%v)
  ret 0
}
"""


def test_annotated_variable_lowering():
    lines = [ln.strip() for ln in build(parse_mir(ANNOTATED),
                                        BuildOptions("wbr", InstrumentMode.VAR)).splitlines()]
    bounds = next(i for i, ln in enumerate(lines) if ln.startswith("csetbounds") and "4" in ln)
    assert lines[bounds + 1].startswith("csetwbrbound") and lines[bounds + 1].endswith(", c0")


def test_pin_lowers_to_nothing():
    module = prepare(parse_mir(ANNOTATED), BuildOptions())
    assert any(i.op == "pin" for f in module.functions for i in f.instructions())
    text = build(parse_mir(ANNOTATED), BuildOptions(emit_comments=True))
    body = [ln for ln in text.splitlines() if ln.strip() and not ln.strip().startswith(";")]
    assert all("pin" not in ln for ln in body)


def test_build_modes_differ_only_in_capability_setup():
    module = parse_mir(ANNOTATED)
    nocap = build(module, BuildOptions("nocap"))
    purecap = build(module, BuildOptions("purecap"))
    wbr = build(module, BuildOptions("wbr"))
    assert "csetwbrbound" not in nocap + purecap and "csetwbrbound" in wbr
    assert "csetbounds c4, c4, 4" not in nocap


def test_lowering_errors():
    with pytest.raises(LoweringError):
        build(parse_mir("func @f() -> int {\nentry:\n  ret 0\n}"))
    many = ("func @g(%a: int, %b: int, %c: int, %d: int, %e: int) -> int {\nentry:\n  ret 0\n}\n"
            "func @main() -> int {\nentry:\n  %r = call @g(1, 2, 3, 4, 5)\n  ret 0\n}")
    with pytest.raises(LoweringError):
        build(parse_mir(many))


def test_output_assembles():
    for case in CASES:
        assemble(build(parse_mir(case.source.read_text())))


# -- end to end ----------------------------------------------------------------

def outcome(result):
    """Machine result in the interpreter's terms."""
    if result.status == "halted":
        return "exit", result.exit_code, result.output
    assert result.trap.kind is TrapKind.OP_BOUNDS, result.trap
    return "uninit", None, None


def reference(module):
    res = interpret(module)
    return res.status, res.exit_code, (res.output if res.status == "exit" else None)


@pytest.mark.parametrize("registers", [4, 8, 64])
@pytest.mark.parametrize("case", CASES, ids=[c.id for c in CASES])
def test_compiled_program_matches_interpreter(case, registers):
    module = parse_mir(case.source.read_text())
    text = build(module, BuildOptions(registers=registers))
    assert outcome(run(assemble(text))) == reference(module)


@pytest.mark.parametrize("case", CASES, ids=[c.id for c in CASES])
def test_register_pressure_does_not_change_results(case):
    module = parse_mir(case.source.read_text())
    purecap = EnforcementConfig(Mode.PURECAP)
    small = run(assemble(build(module, BuildOptions("purecap", registers=4))), purecap)
    large = run(assemble(build(module, BuildOptions("purecap", registers=64))), purecap)
    assert (small.status, small.exit_code, small.output) == \
           (large.status, large.exit_code, large.output)


def test_linearization_is_necessary():
    module = parse_mir(data_path("partial_init.mir").read_text())
    expected = interpret(module)
    stale = run(assemble(build(module, BuildOptions(linearize=False, registers=8))))
    assert stale.status == "trapped" and stale.trap.kind is TrapKind.OP_BOUNDS
    lo, hi = stale.trap.access_range
    # the faulting read is of an element the program did write
    assert hi - lo == 4
    clean = run(assemble(build(module, BuildOptions(linearize=True, registers=8))))
    assert clean.status == "halted"
    assert (clean.exit_code, clean.output) == (expected.exit_code, expected.output)


def test_stale_copy_also_shows_with_many_registers():
    # the stale copy lives in memory, so more registers do not hide it
    module = parse_mir(data_path("partial_init.mir").read_text())
    stale = run(assemble(build(module, BuildOptions(linearize=False, registers=64))))
    assert stale.trap.kind is TrapKind.OP_BOUNDS
