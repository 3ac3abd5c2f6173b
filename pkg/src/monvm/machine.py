"""Capability machine with tagged memory and conditional-permission checks.

Registers hold either a signed 64-bit integer or a :class:`Capability`.
Memory is byte addressed with one validity tag per 16-byte granule.  Code
lives outside data memory; the program counter is an instruction index and
fetches are checked against ``pcc`` at byte address ``4 * pc``.

Every load, store and fetch goes through :func:`check_access`.  An allowed
access that performs a capability's tracked operation advances its
operation top, and the advanced capability is written back to the register
the access went through.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field, replace

from .asm import CATEGORIES, Instr, Program
from .capcodec import (MNEMONIC_KINDS, Access, Capability, CapabilityError,
                       EncodedCapability, EnforcementConfig, Fault, Mode,
                       NotRepresentable, and_perms, advance_op_top,
                       check_access, decode, encode, root_capability, set_addr,
                       set_bounds, set_op_bounds, tracks)
from .runtime import Heap, HeapError, InvalidFree

GRANULE = 16
MIN_MEMORY = 4096
DEFAULT_MEMORY = 1 << 20
STACK_BASE = 4096
STACK_SIZE = 1 << 16
HEAP_BASE = STACK_BASE + STACK_SIZE
ROOT_REGISTER = 3
DEFAULT_FUEL = 10_000_000

ECALL_EXIT, ECALL_MALLOC, ECALL_FREE, ECALL_PRINT, ECALL_MALLOC_ZEROED = range(5)

_LOAD_SIZES = {"lb": 1, "lh": 2, "lw": 4, "ld": 8}
_STORE_SIZES = {"sb": 1, "sh": 2, "sw": 4, "sd": 8}


class ConfigError(ValueError):
    pass


class TrapKind(enum.Enum):
    TAG = "TagViolation"
    PERMIT_LOAD = "PermitLoadViolation"
    PERMIT_STORE = "PermitStoreViolation"
    PERMIT_EXECUTE = "PermitExecuteViolation"
    BOUNDS = "BoundsViolation"
    OP_BOUNDS = "OpBoundsViolation"
    ADDRESS_MASK = "AddressMaskViolation"
    REPRESENTABILITY = "RepresentabilityViolation"
    MISALIGNED_CAP = "MisalignedCapAccess"
    UNKNOWN_INSTRUCTION = "UnknownInstruction"
    INVALID_FREE = "InvalidFree"
    OUT_OF_FUEL = "OutOfFuel"


_PERMIT_TRAPS = {Access.LOAD: TrapKind.PERMIT_LOAD, Access.STORE: TrapKind.PERMIT_STORE,
                 Access.FETCH: TrapKind.PERMIT_EXECUTE}


def _fault_trap(fault: Fault, access: Access) -> TrapKind:
    if fault is Fault.PERMIT:
        return _PERMIT_TRAPS[access]
    return TrapKind(fault.value)


@dataclass(frozen=True)
class TrapReport:
    kind: TrapKind
    pc: int
    cap: Capability | None = None
    access_range: tuple[int, int] | None = None
    message: str = ""
    instruction: str = ""

    def __str__(self) -> str:
        text = f"TRAP {self.kind.value} @pc={self.pc:#x}"
        if self.access_range:
            text += f" range=[{self.access_range[0]:#x},{self.access_range[1]:#x})"
        return text


class Trap(Exception):
    """Raised inside a step; converted to a :class:`TrapReport` by the machine."""

    def __init__(self, kind: TrapKind, message: str = "", cap: Capability | None = None,
                 access_range: tuple[int, int] | None = None):
        super().__init__(message or kind.value)
        self.kind, self.message, self.cap, self.access_range = kind, message, cap, access_range


@dataclass
class RunResult:
    status: str                      # "halted" or "trapped"
    exit_code: int | None
    trap: TrapReport | None
    counters: dict[str, int]
    retired: int
    output: list[int]
    zero_filled: list[tuple[int, int, int]]
    machine: Machine | None = field(default=None, repr=False, compare=False)

    @property
    def instructions(self) -> int:
        """All counted instructions, including those charged by the runtime."""
        return sum(self.counters.values())


def wrap64(value: int) -> int:
    value &= (1 << 64) - 1
    return value - (1 << 64) if value >> 63 else value


class TaggedMemory:
    def __init__(self, size: int):
        self.data = bytearray(size)
        self.tags = bytearray(size // GRANULE)

    def __len__(self) -> int:
        return len(self.data)

    def contains(self, addr: int, size: int) -> bool:
        return 0 <= addr and addr + size <= len(self.data)

    def read(self, addr: int, size: int) -> bytes:
        return bytes(self.data[addr:addr + size])

    def write(self, addr: int, payload: bytes) -> None:
        self.data[addr:addr + len(payload)] = payload
        first, last = addr // GRANULE, (addr + len(payload) - 1) // GRANULE
        self.tags[first:last + 1] = bytes(last - first + 1)

    def tag(self, addr: int) -> bool:
        return bool(self.tags[addr // GRANULE])

    def write_capability(self, addr: int, enc: EncodedCapability) -> None:
        self.data[addr:addr + GRANULE] = enc.to_bytes()
        self.tags[addr // GRANULE] = int(enc.tag)

    def read_capability(self, addr: int) -> EncodedCapability:
        return EncodedCapability.from_bytes(self.read(addr, GRANULE), self.tag(addr))


class Machine:
    """Architectural state plus the stepping logic.

    Use :func:`reset` to build a machine with the boot-time register contents.
    """

    def __init__(self, program: Program, config: EnforcementConfig = EnforcementConfig(),
                 memsize: int = DEFAULT_MEMORY, heap_op_bounds: bool | None = None):
        if memsize < MIN_MEMORY or memsize % GRANULE:
            raise ConfigError(f"memory size must be a multiple of {GRANULE} and at least "
                              f"{MIN_MEMORY} bytes, got {memsize}")
        self.program = program
        self.config = config
        self.mem = TaggedMemory(memsize)
        self.regs: list[int | Capability] = [0] * program.registers
        root = root_capability(memsize)
        self.regs[ROOT_REGISTER] = root
        self.pcc = replace(root, addr=4 * program.entry)
        self.pc = program.entry
        self.counters: Counter = Counter({c: 0 for c in CATEGORIES})
        self.retired = 0
        self.output: list[int] = []
        self.zero_filled: list[tuple[int, int, int]] = []
        self.exit_code: int | None = None
        self.trap: TrapReport | None = None
        if heap_op_bounds is None:
            heap_op_bounds = config.mode is Mode.WBR
        arena = Capability(tag=True, perms=root.perms, base=min(HEAP_BASE, memsize),
                           top=memsize, addr=min(HEAP_BASE, memsize))
        self.heap = Heap(arena, self.mem.data, wbr=heap_op_bounds, counters=self.counters)

    @property
    def running(self) -> bool:
        return self.exit_code is None and self.trap is None

    @property
    def root(self) -> Capability:
        return root_capability(len(self.mem))

    # -- register helpers ---------------------------------------------------

    def read_int(self, r: int) -> int:
        value = self.regs[r]
        return wrap64(value.addr) if isinstance(value, Capability) else value

    def write(self, r: int, value: int | Capability) -> None:
        if r:
            self.regs[r] = wrap64(value) if isinstance(value, int) else value

    def read_cap(self, r: int) -> Capability:
        value = self.regs[r]
        if isinstance(value, Capability):
            return value
        if self.config.mode is Mode.NOCAP:
            # without enforcement an integer is a plain address
            return replace(self.root, addr=value & ((1 << 64) - 1))
        raise Trap(TrapKind.TAG, f"c{r} holds an integer, not a capability")

    def _operand(self, instr: Instr, index: int) -> int:
        arg = instr.args[index]
        return arg if instr.imm_form and index == len(instr.args) - 1 else self.read_int(arg)

    # -- memory access --------------------------------------------------------

    def _check(self, cap: Capability, addr: int, size: int, access: Access) -> Fault | None:
        fault = check_access(cap, addr, size, access, self.config)
        if fault is None and not self.mem.contains(addr, size):
            fault = Fault.BOUNDS
        return fault

    def _trap_fault(self, fault: Fault, access: Access, cap: Capability,
                    addr: int, size: int) -> Trap:
        return Trap(_fault_trap(fault, access), f"{access.name.lower()} of {size} bytes at {addr:#x}",
                    cap, (addr, addr + size))

    def _commit_tracked(self, r: int, cap: Capability, addr: int, size: int,
                        access: Access) -> None:
        # writeback stage: the advanced operation top replaces the register copy
        if self.config.conditional and tracks(cap, access):
            self.write(r, advance_op_top(cap, addr, size))

    def _load(self, instr: Instr, size: int) -> None:
        rd, imm, rs = instr.args
        cap = self.read_cap(rs)
        addr = cap.addr + imm
        fault = self._check(cap, addr, size, Access.LOAD)
        if fault is Fault.OP_BOUNDS and self.config.auto_init:
            self.zero_filled.append((4 * self.pc, addr, addr + size))
            self.write(rd, 0)
            return
        if fault:
            raise self._trap_fault(fault, Access.LOAD, cap, addr, size)
        value = int.from_bytes(self.mem.read(addr, size), "little", signed=True)
        self._commit_tracked(rs, cap, addr, size, Access.LOAD)
        self.write(rd, value)

    def _store(self, instr: Instr, size: int) -> None:
        rv, imm, rs = instr.args
        cap = self.read_cap(rs)
        addr = cap.addr + imm
        fault = self._check(cap, addr, size, Access.STORE)
        if fault:
            raise self._trap_fault(fault, Access.STORE, cap, addr, size)
        value = self.read_int(rv) & ((1 << (8 * size)) - 1)
        self.mem.write(addr, value.to_bytes(size, "little"))
        self._commit_tracked(rs, cap, addr, size, Access.STORE)

    def _load_capability(self, instr: Instr) -> None:
        rd, imm, rs = instr.args
        cap = self.read_cap(rs)
        addr = cap.addr + imm
        if addr % GRANULE:
            raise Trap(TrapKind.MISALIGNED_CAP, f"clc at {addr:#x}", cap, (addr, addr + GRANULE))
        fault = self._check(cap, addr, GRANULE, Access.LOAD)
        if fault is Fault.OP_BOUNDS and self.config.auto_init:
            self.zero_filled.append((4 * self.pc, addr, addr + GRANULE))
            self.write(rd, 0)
            return
        if fault:
            raise self._trap_fault(fault, Access.LOAD, cap, addr, GRANULE)
        enc = self.mem.read_capability(addr)
        self._commit_tracked(rs, cap, addr, GRANULE, Access.LOAD)
        if not enc.tag:
            self.write(rd, wrap64(enc.cursor))
            return
        loaded = decode(enc)
        if not cap.perms.load_cap and self.config.mode is not Mode.NOCAP:
            loaded = replace(loaded, tag=False)
        self.write(rd, loaded)

    def _store_capability(self, instr: Instr) -> None:
        rv, imm, rs = instr.args
        cap = self.read_cap(rs)
        addr = cap.addr + imm
        if addr % GRANULE:
            raise Trap(TrapKind.MISALIGNED_CAP, f"csc at {addr:#x}", cap, (addr, addr + GRANULE))
        fault = self._check(cap, addr, GRANULE, Access.STORE)
        value = self.regs[rv]
        tagged = isinstance(value, Capability) and value.tag
        if not fault and tagged and not cap.perms.store_cap and self.config.mode is not Mode.NOCAP:
            fault = Fault.PERMIT
        if fault:
            raise self._trap_fault(fault, Access.STORE, cap, addr, GRANULE)
        if isinstance(value, Capability):
            try:
                enc = encode(replace(value, tag=True))
            except NotRepresentable as exc:
                if tagged:
                    raise Trap(TrapKind.REPRESENTABILITY, str(exc), value) from None
                enc = EncodedCapability(0, value.addr & ((1 << 64) - 1), False)
            enc = replace(enc, tag=tagged)
        else:
            enc = EncodedCapability(0, value & ((1 << 64) - 1), False)
        self.mem.write_capability(addr, enc)
        self._commit_tracked(rs, cap, addr, GRANULE, Access.STORE)

    # -- capability manipulation ---------------------------------------------

    def _cap_op(self, instr: Instr) -> None:
        op, args = instr.op, instr.args
        if op == "cmove":
            self.write(args[0], self.regs[args[1]])
            return
        if op in ("cgetaddr", "cgetbase", "cgetlen", "cgetoptop", "cgettag"):
            value = self.regs[args[1]]
            if not isinstance(value, Capability):
                result = {"cgetaddr": value}.get(op, 0)
            elif op == "cgetaddr":
                result = value.addr
            elif op == "cgetbase":
                result = value.base
            elif op == "cgetlen":
                result = value.length
            elif op == "cgetoptop":
                result = value.op_top if value.conditional else value.top
            else:
                result = int(value.tag)
            self.write(args[0], result)
            return

        rd, rs = args[0], args[1]
        source = self.regs[rs]
        operand = self._operand(instr, 2)
        if op in ("cincoffset", "csetaddr") and not isinstance(source, Capability):
            # integer pointer arithmetic on an untagged value
            self.write(rd, source + operand if op == "cincoffset" else operand)
            return
        cap = self.read_cap(rs)
        try:
            if op == "cincoffset":
                result = set_addr(cap, cap.addr + operand)
            elif op == "csetaddr":
                result = set_addr(cap, operand & ((1 << 64) - 1))
            elif op == "csetbounds":
                result = set_bounds(cap, operand)
            elif op == "candperm":
                result = and_perms(cap, operand)
            else:
                result = set_op_bounds(cap, MNEMONIC_KINDS[op], operand)
        except CapabilityError as exc:
            if self.config.mode is Mode.NOCAP:
                # unchecked: keep the source capability, only moving the cursor
                moved = {"cincoffset": cap.addr + operand, "csetaddr": operand}
                result = replace(cap, addr=moved.get(op, cap.addr))
            else:
                raise Trap(TrapKind(exc.trap), str(exc), cap) from None
        self.write(rd, result)

    # -- runtime services -----------------------------------------------------

    def _ecall(self, code: int) -> None:
        if code == ECALL_EXIT:
            self.exit_code = self.read_int(4)
        elif code in (ECALL_MALLOC, ECALL_MALLOC_ZEROED):
            try:
                result = self.heap.malloc(self.read_int(4), zeroed=code == ECALL_MALLOC_ZEROED)
            except HeapError:
                result = 0
            self.write(4, result)
        elif code == ECALL_FREE:
            value = self.regs[4]
            if value == 0:
                return
            try:
                self.heap.free(value)
            except InvalidFree as exc:
                raise Trap(TrapKind.INVALID_FREE, str(exc),
                           value if isinstance(value, Capability) else None) from None
        elif code == ECALL_PRINT:
            self.output.append(self.read_int(4))
        else:
            raise Trap(TrapKind.UNKNOWN_INSTRUCTION, f"unknown runtime service {code}")

    # -- control --------------------------------------------------------------

    def _jump(self, target: int) -> int:
        if target % 4:
            raise Trap(TrapKind.UNKNOWN_INSTRUCTION, f"misaligned jump target {target:#x}")
        return target // 4

    def _execute(self, instr: Instr) -> int:
        """Execute one instruction, returning the next pc."""
        op, args = instr.op, instr.args
        nxt = self.pc + 1
        if op == "li":
            self.write(args[0], args[1])
        elif op == "mv":
            self.write(args[0], self.regs[args[1]])
        elif op == "addi":
            self.write(args[0], self.read_int(args[1]) + args[2])
        elif op in ("add", "sub", "mul", "and", "or", "xor", "slt"):
            a, b = self.read_int(args[1]), self.read_int(args[2])
            self.write(args[0], {
                "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b,
                "and": lambda: a & b, "or": lambda: a | b, "xor": lambda: a ^ b,
                "slt": lambda: int(a < b)}[op]())
        elif op in ("beq", "bne", "blt", "bge"):
            a, b = self.read_int(args[0]), self.read_int(args[1])
            taken = {"beq": a == b, "bne": a != b, "blt": a < b, "bge": a >= b}[op]
            if taken:
                nxt = args[2]
        elif op in ("jal", "call"):
            link, target = (args[0], args[1]) if op == "jal" else (1, args[0])
            self.write(link, 4 * nxt)
            nxt = target
        elif op == "j":
            nxt = args[0]
        elif op in ("jalr", "ret"):
            rd, imm, rs = args if op == "jalr" else (0, 0, 1)
            target = self._jump(self.read_int(rs) + imm)
            self.write(rd, 4 * nxt)
            nxt = target
        elif op == "halt":
            self.exit_code = 0
        elif op in _LOAD_SIZES:
            self._load(instr, _LOAD_SIZES[op])
        elif op in _STORE_SIZES:
            self._store(instr, _STORE_SIZES[op])
        elif op == "clc":
            self._load_capability(instr)
        elif op == "csc":
            self._store_capability(instr)
        elif op == "ecall":
            self._ecall(args[0])
        else:
            self._cap_op(instr)
        return nxt

    def _fetch(self) -> Instr:
        if not 0 <= self.pc < len(self.program.instructions):
            raise Trap(TrapKind.UNKNOWN_INSTRUCTION, f"no instruction at index {self.pc}")
        addr = 4 * self.pc
        fault = check_access(self.pcc, addr, 4, Access.FETCH, self.config)
        if fault:
            raise self._trap_fault(fault, Access.FETCH, replace(self.pcc, addr=addr), addr, 4)
        if self.config.conditional and tracks(self.pcc, Access.FETCH):
            self.pcc = advance_op_top(replace(self.pcc, addr=addr), addr, 4)
        return self.program.instructions[self.pc]

    def _source_text(self, instr: Instr) -> str:
        lines = self.program.source.splitlines()
        if 0 < instr.line <= len(lines):
            return lines[instr.line - 1].split(";", 1)[0].strip()
        return str(instr)

    def step(self) -> None:
        """Retire one instruction or record the trap it raises."""
        if not self.running:
            return
        instr = None
        try:
            instr = self._fetch()
            nxt = self._execute(instr)
        except Trap as trap:
            self.trap = TrapReport(trap.kind, 4 * self.pc, trap.cap, trap.access_range,
                                   trap.message, self._source_text(instr) if instr else "")
            return
        self.counters[instr.category] += 1
        self.retired += 1
        self.regs[0] = 0
        if self.exit_code is None:
            self.pc = nxt

    def run(self, fuel: int = DEFAULT_FUEL) -> RunResult:
        if fuel <= 0:
            raise ValueError("fuel must be positive")
        while self.running:
            if self.retired >= fuel:
                self.trap = TrapReport(TrapKind.OUT_OF_FUEL, 4 * self.pc,
                                       message=f"fuel of {fuel} instructions exhausted")
                break
            self.step()
        return self.result()

    def result(self) -> RunResult:
        return RunResult(
            status="halted" if self.exit_code is not None else "trapped",
            exit_code=self.exit_code, trap=self.trap, counters=dict(self.counters),
            retired=self.retired, output=list(self.output),
            zero_filled=list(self.zero_filled), machine=self)


def reset(program: Program | None = None, memsize: int = DEFAULT_MEMORY,
          config: EnforcementConfig = EnforcementConfig(), **kwargs) -> Machine:
    """Boot a machine: everything zero except the root capability in c3."""
    return Machine(program or Program([], {}), config, memsize, **kwargs)


def run(program: Program, config: EnforcementConfig = EnforcementConfig(),
        fuel: int = DEFAULT_FUEL, memsize: int = DEFAULT_MEMORY, **kwargs) -> RunResult:
    return Machine(program, config, memsize, **kwargs).run(fuel)

