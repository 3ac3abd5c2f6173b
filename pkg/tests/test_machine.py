import pytest

from monvm.asm import ParseError, assemble
from monvm.capcodec import Capability, CpKind, EnforcementConfig, Mode
from monvm.harness import CORPUS_DIR, CaseConfig, load_manifest
from monvm.harness.corpus import compile_source
from monvm.machine import ConfigError, Machine, TrapKind, reset, run

WBR_SETUP = """
    li c9, 0x1000
    csetaddr c5, c3, c9
    csetbounds c5, c5, 64
    csetwbrbound c5, c5, 0
    li c6, 7
"""


def run_text(text, config=EnforcementConfig(), **kwargs):
    return run(assemble(text), config, **kwargs)


# -- assembler -----------------------------------------------------------------

def test_minimal_program():
    program = assemble("li c4, 42\nhalt")
    assert len(program) == 2


def test_op_bounds_mnemonic():
    (instr,) = assemble("csetwbrbound c5, c5, c0").instructions
    assert instr.op == "csetwbrbound" and instr.category == "cap"
    assert instr.args == (5, 5, 0)


def test_unknown_mnemonic_reports_line():
    with pytest.raises(ParseError) as info:
        assemble("halt\nbxyz c1, c2, L")
    assert info.value.line == 2


@pytest.mark.parametrize("text", ["li c99, 1", "sw c4, 8", "beq c1, c2, nowhere", "addi c1, c2"])
def test_malformed_operands(text):
    with pytest.raises(ParseError):
        assemble(text)


def test_labels_resolve():
    program = assemble("start:\n  j end\n  halt\nend:\n  halt")
    assert program.labels == {"start": 0, "end": 2}


# -- stepping ------------------------------------------------------------------

def test_store_then_load():
    result = run_text(WBR_SETUP + "sw c6, 0(c5)\nlw c7, 0(c5)\nhalt")
    assert result.status == "halted"
    assert result.machine.regs[7] == 7


def test_load_before_store_traps():
    result = run_text(WBR_SETUP + "lw c7, 0(c5)\nhalt")
    assert result.trap.kind is TrapKind.OP_BOUNDS
    assert result.trap.access_range == (0x1000, 0x1004)
    assert result.trap.instruction == "lw c7, 0(c5)"
    assert str(result.trap).startswith("TRAP OpBoundsViolation @pc=0x14 range=[0x1000,0x1004)")


def test_auto_init_reads_zero():
    text = WBR_SETUP + "li c7, 99\nlw c7, 0(c5)\nhalt"
    result = run_text(text, EnforcementConfig(auto_init=True))
    assert result.status == "halted"
    assert result.machine.regs[7] == 0
    assert result.zero_filled == [(0x18, 0x1000, 0x1004)]


def test_writeback_visible_in_register():
    result = run_text(WBR_SETUP + "sw c6, 0(c5)\nsd c6, 4(c5)\ncgetoptop c8, c5\nhalt")
    cap = result.machine.regs[5]
    assert cap.op_top == 0x100C
    assert result.machine.regs[8] == 0x100C


def test_copy_in_other_register_goes_stale():
    result = run_text(WBR_SETUP + "cmove c8, c5\nsw c6, 0(c5)\nlw c7, 0(c8)\nhalt")
    assert result.trap.kind is TrapKind.OP_BOUNDS


def test_strict_store_traps_gap():
    text = WBR_SETUP + "sw c6, 8(c5)\nhalt"
    assert run_text(text).status == "halted"
    strict = run_text(text, EnforcementConfig(strict_store=True))
    assert strict.trap.kind is TrapKind.OP_BOUNDS
    assert strict.machine.regs[5].op_top == 0x1000       # no partial commit


def test_op_bounds_increase_traps():
    result = run_text(WBR_SETUP + "csetwbrbound c5, c5, 8\nhalt")
    assert result.trap.kind is TrapKind.OP_BOUNDS


def test_bounds_violation():
    result = run_text(WBR_SETUP + "sw c6, 64(c5)\nhalt")
    assert result.trap.kind is TrapKind.BOUNDS


def test_integer_as_pointer_traps():
    result = run_text("li c5, 4096\nlw c6, 0(c5)\nhalt")
    assert result.trap.kind is TrapKind.TAG


def test_permission_violation():
    result = run_text(WBR_SETUP + "candperm c5, c5, 0\nsw c6, 0(c5)\nhalt")
    assert result.trap.kind is TrapKind.PERMIT_STORE


def test_misaligned_capability_access():
    result = run_text("li c9, 0x1008\ncsetaddr c5, c3, c9\ncsc c3, 0(c5)\nhalt")
    assert result.trap.kind is TrapKind.MISALIGNED_CAP


def test_tag_hygiene():
    text = """
        li c9, 0x1000
        csetaddr c5, c3, c9
        csc c3, 0(c5)
        clc c6, 0(c5)
        cgettag c10, c6
        sb c0, 3(c5)
        clc c7, 0(c5)
        cgettag c11, c7
        lw c8, 0(c7)
        halt
    """
    result = run_text(text)
    regs = result.machine.regs
    assert regs[10] == 1 and regs[11] == 0
    assert result.trap.kind is TrapKind.TAG


def test_capability_round_trips_through_memory():
    result = run_text(WBR_SETUP + "sw c6, 0(c5)\nli c9, 0x2000\ncsetaddr c8, c3, c9\n"
                      "csc c5, 0(c8)\nclc c7, 0(c8)\nhalt")
    assert result.machine.regs[7] == result.machine.regs[5]


def test_conditional_store_then_capability_reload_refreshes_nothing():
    # the saved copy keeps the op top it had when it was written
    result = run_text(WBR_SETUP + "li c9, 0x2000\ncsetaddr c8, c3, c9\ncsc c5, 0(c8)\n"
                      "sw c6, 0(c5)\nclc c7, 0(c8)\nlw c10, 0(c7)\nhalt")
    assert result.trap.kind is TrapKind.OP_BOUNDS


def test_c0_reads_zero():
    result = run_text("li c0, 5\nmv c4, c0\nhalt")
    assert result.machine.regs[4] == 0


def test_calls_and_returns():
    text = "li c4, 1\ncall f\nhalt\nf:\n  addi c4, c4, 41\n  ret"
    result = run_text(text)
    assert result.machine.regs[4] == 42


def test_exit_and_print():
    result = run_text("li c4, 9\necall 3\nli c4, 3\necall 0")
    assert result.output == [9] and result.exit_code == 3


def test_unknown_service_traps():
    assert run_text("ecall 9").trap.kind is TrapKind.UNKNOWN_INSTRUCTION


def test_running_off_the_end_traps():
    assert run_text("li c4, 1").trap.kind is TrapKind.UNKNOWN_INSTRUCTION


def test_counters_by_category():
    result = run_text(WBR_SETUP + "sw c6, 0(c5)\nlw c7, 0(c5)\nhalt")
    assert result.counters["cap"] == 3
    assert result.counters["store"] == 1 and result.counters["load"] == 1
    assert result.counters["integer"] == 2 and result.counters["branch"] == 1


# -- run / reset ---------------------------------------------------------------

def test_halt_only():
    result = run_text("halt")
    assert result.status == "halted" and result.exit_code == 0 and result.retired == 1


def test_fuel_exhaustion():
    result = run_text("loop:\n  j loop", fuel=1000)
    assert result.trap.kind is TrapKind.OUT_OF_FUEL
    assert result.retired == 1000


def test_fuel_must_be_positive():
    with pytest.raises(ValueError):
        Machine(assemble("halt")).run(0)


def test_reset_installs_root():
    m = reset(memsize=1 << 20)
    root = m.regs[3]
    assert isinstance(root, Capability) and root.tag
    assert (root.base, root.top, root.cp) == (0, 1 << 20, CpKind.DISABLED)
    assert all(r == 0 for i, r in enumerate(m.regs) if i != 3)
    assert m.pcc.perms.execute


@pytest.mark.parametrize("memsize", [100, 4096 + 8, 0])
def test_bad_memory_size(memsize):
    with pytest.raises(ConfigError):
        reset(memsize=memsize)


def test_derived_capabilities_stay_inside_memory():
    result = run_text("li c9, 8192\ncsetaddr c5, c3, c9\ncsetbounds c5, c5, 0x10000\nhalt",
                      memsize=8192)
    assert result.trap.kind is TrapKind.BOUNDS


# -- whole programs ------------------------------------------------------------

def _corpus_assembly():
    config = CaseConfig()
    return {c.id: compile_source(c.source, config) for c in load_manifest(CORPUS_DIR)}


@pytest.fixture(scope="module")
def corpus_assembly():
    return _corpus_assembly()


def test_determinism(corpus_assembly):
    for text in list(corpus_assembly.values())[:10]:
        a, b = run_text(text), run_text(text)
        assert (a.status, a.exit_code, a.trap, a.counters, a.output, a.retired) == \
               (b.status, b.exit_code, b.trap, b.counters, b.output, b.retired)


def test_enforcement_off_passes_through(corpus_assembly):
    """Programs that trap only on initialisation run to the end without enforcement,
    with the same results as under conventional capability checks."""
    for case, text in corpus_assembly.items():
        wbr = run_text(text)
        if wbr.status == "halted":
            continue
        assert wbr.trap.kind is TrapKind.OP_BOUNDS, case
        nocap = run_text(text, EnforcementConfig(Mode.NOCAP))
        purecap = run_text(text, EnforcementConfig(Mode.PURECAP))
        assert nocap.status == purecap.status == "halted", case
        assert (nocap.output, nocap.exit_code) == (purecap.output, purecap.exit_code), case
