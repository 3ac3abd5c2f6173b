"""Lowering of MIR to machine assembly.

Register convention: c0 zero, c1 return address, c2 stack capability,
c4.. c(3+K) allocatable (c4..c7 also carry arguments and the return value),
and four scratch registers above those.  Every register is caller-saved, so
values live across a call sit in a stack slot.

Frame layout (offsets from the stack capability after the prologue)::

    [0, A)            stack allocations
    [A, A + 16 S)     spill slots
    [A + 16 S, +16)   saved return address (functions that call)
"""

from __future__ import annotations

from dataclasses import dataclass

from ..asm import DEFAULT_REGISTERS
from ..capcodec import CpKind, representable_alignment
from ..machine import ECALL_FREE, ECALL_MALLOC, ECALL_MALLOC_ZEROED, ECALL_PRINT, STACK_BASE, STACK_SIZE
from ..mir.ir import CAP, MEM_TYPES, Function, Instr, Module, is_value
from .regalloc import (DEFAULT_K, FIRST_ALLOCATABLE, SCRATCH_COUNT, SP, Allocation,
                       FunctionLayout, Reg, Slot, linear_scan)

_BUILTIN_ECALLS = {"print": ECALL_PRINT, "malloc": ECALL_MALLOC,
                   "malloc_zeroed": ECALL_MALLOC_ZEROED, "free": ECALL_FREE}
_LOADS = {1: "lb", 2: "lh", 4: "lw", 8: "ld", 16: "clc"}
_STORES = {1: "sb", 2: "sh", 4: "sw", 8: "sd", 16: "csc"}
_KINDS = {"wbr": CpKind.WRITE_BEFORE_READ, "wbx": CpKind.WRITE_BEFORE_EXECUTE,
          "ro": CpKind.WRITE_BEFORE_READ_ONLY, "xo": CpKind.WRITE_BEFORE_EXECUTE_ONLY,
          "wt": CpKind.WRITE_ONCE, "rt": CpKind.READ_ONCE, "xt": CpKind.EXECUTE_ONCE}
MAX_ARGS = 4
SPR = Reg(2)


class LoweringError(Exception):
    def __init__(self, message: str, function: str = "", line: int = 0):
        where = f"@{function}" + (f" line {line}" if line else "")
        super().__init__(f"{where}: {message}" if function else message)
        self.function = function
        self.line = line


def start_stub(registers: int) -> list[str]:
    """Boot code: carve the stack out of the root capability, then run main."""
    lines = [f".registers {registers}"] if registers > DEFAULT_REGISTERS else []
    return lines + [
        "_start:",
        f"  li c12, {STACK_BASE}",
        "  csetaddr c2, c3, c12",
        f"  li c12, {STACK_SIZE}",
        "  csetbounds c2, c2, c12",
        "  cincoffset c2, c2, c12",
        "  li c3, 0",
        "  call main",
        "  ecall 0",
    ]


class _FunctionLowering:
    def __init__(self, fn: Function, signatures: dict, k: int, comments: bool):
        self.fn = fn
        self.signatures = signatures
        self.layout = FunctionLayout(fn)
        self.alloc: Allocation = linear_scan(fn, k, self.layout)
        self.types = fn.value_types(signatures)
        self.comments = comments
        self.scratch_base = FIRST_ALLOCATABLE + k
        self.calls_user = any(i.op == "call" and i.args[0] not in _BUILTIN_ECALLS
                              for i in fn.instructions())
        for instr in fn.instructions():
            if instr.op == "alloca" and representable_alignment(instr.args[0]) > 16:
                raise LoweringError(f"alloca of {instr.args[0]} bytes needs more than 16-byte "
                                    "alignment", fn.name, instr.line)
        self.spill_base = self.layout.frame_allocas
        self.ra_offset = self.spill_base + 16 * self.alloc.spill_slots
        self.frame = self.ra_offset + (16 if self.calls_user else 0)
        self.out: list[str] = []
        self.stubs: list[str] = []
        self.last_store: tuple[str, Reg, str] | None = None
        self._scratch_used = 0

    # -- emission helpers --------------------------------------------------

    def emit(self, text: str) -> None:
        self.out.append(f"  {text}")

    def label(self, block: str) -> str:
        return f"{self.fn.name}.{block}"

    def scratch(self) -> Reg:
        if self._scratch_used >= SCRATCH_COUNT:
            raise LoweringError("out of scratch registers", self.fn.name)
        reg = Reg(self.scratch_base + self._scratch_used)
        self._scratch_used += 1
        return reg

    def slot_offset(self, slot: Slot) -> int:
        return self.spill_base + 16 * slot.index

    def is_cap(self, value) -> bool:
        return is_value(value) and self.types.get(value) == CAP

    def spill_store(self, reg: Reg, slot: Slot, cap: bool) -> None:
        self.emit(f"{'csc' if cap else 'sd'} {reg}, {self.slot_offset(slot)}(c2)")

    def spill_load(self, reg: Reg, slot: Slot, cap: bool) -> None:
        self.emit(f"{'clc' if cap else 'ld'} {reg}, {self.slot_offset(slot)}(c2)")

    def use(self, operand) -> Reg:
        """Register holding ``operand`` for the current instruction."""
        const = self.layout.const_value(operand)
        if const is not None:
            if const == 0:
                return Reg(0)
            reg = self.scratch()
            self.emit(f"li {reg}, {const}")
            return reg
        if operand == SP:
            return SPR
        loc = self.alloc.location[operand]
        if isinstance(loc, Reg):
            return loc
        reg = self.scratch()
        self.spill_load(reg, loc, self.is_cap(operand))
        return reg

    def define(self, value: str) -> tuple[Reg, callable]:
        """Destination register plus a finisher that spills it if needed."""
        loc = self.alloc.location.get(value)
        if isinstance(loc, Reg):
            return loc, lambda: None
        if loc is None:       # never used: compute into a scratch register
            return self.scratch(), lambda: None
        reg = self.scratch()
        return reg, lambda: self.spill_store(reg, loc, self.is_cap(value))

    def address(self, pointer: str) -> tuple[Reg, int, str]:
        base, offset = self.layout.fold(pointer)
        return self.use(base), offset, base

    # -- moves -----------------------------------------------------------------

    def location(self, operand):
        const = self.layout.const_value(operand)
        if const is not None:
            return ("const", const)
        return self.alloc.location[operand]

    def parallel_move(self, moves: list[tuple[object, object, bool]]) -> None:
        """Perform ``dst <- src`` moves simultaneously; each entry is (dst, src, is_cap)."""
        pending = [(d, s, c) for d, s, c in moves if d != s]
        while pending:
            sources = {s for _, s, _ in pending}
            ready = next((m for m in pending if m[0] not in sources), None)
            if ready is None:
                dst, src, cap = pending[0]
                tmp = self.scratch()
                self._move(tmp, src, cap)
                pending = [(d, tmp if s == src else s, c) for d, s, c in pending]
                continue
            pending.remove(ready)
            self._move(*ready)

    def _move(self, dst, src, cap: bool) -> None:
        if isinstance(dst, Reg):
            if src == dst:
                return
            if isinstance(src, Reg):
                self.emit(f"mv {dst}, {src}")
            elif isinstance(src, Slot):
                self.spill_load(dst, src, cap)
            else:
                self.emit(f"li {dst}, {src[1]}")
            return
        if isinstance(src, Reg):
            self.spill_store(src, dst, cap)
            return
        tmp = self.scratch()
        self._move(tmp, src, cap)
        self.spill_store(tmp, dst, cap)
        self._scratch_used -= 1

    def edge_moves(self, pred: str, succ: str) -> list[tuple[object, object, bool]]:
        moves = []
        for phi in self.fn.block(succ).phis:
            if phi.dest not in self.alloc.location:
                continue
            src = next(v for v, b in phi.args if b == pred)
            moves.append((self.alloc.location[phi.dest], self.location(src), phi.type == CAP))
        return moves

    # -- instructions ------------------------------------------------------------

    def lower(self) -> list[str]:
        fn = self.fn
        self.out.append(f"{fn.name}:")
        if self.frame:
            self.emit(f"cincoffset c2, c2, {-self.frame}")
        if self.calls_user:
            self.emit(f"sd c1, {self.ra_offset}(c2)")
        params = [(self.alloc.location[p], Reg(FIRST_ALLOCATABLE + n), t == CAP)
                  for n, (p, t) in enumerate(fn.params) if p in self.alloc.location]
        self.parallel_move(params)
        self._scratch_used = 0
        for index, block in enumerate(fn.blocks):
            self.out.append(f"{self.label(block.label)}:")
            following = fn.blocks[index + 1].label if index + 1 < len(fn.blocks) else None
            for instr in block.instrs:
                if instr.op == "phi":
                    continue
                if self.comments:
                    self.out.append(f"  ; {instr}")
                self._scratch_used = 0
                self.instr(instr, block.label, following)
                if instr.op != "store":
                    self.last_store = None
        return self.out + self.stubs

    def instr(self, instr: Instr, block: str, following: str | None) -> None:
        op, a = instr.op, instr.args
        handler = getattr(self, f"op_{op}", None)
        if handler is not None:
            handler(instr, block, following)
        elif op in ("add", "sub", "mul", "and", "or", "xor", "slt"):
            self.binop(instr)
        else:
            raise LoweringError(f"cannot lower {op}", self.fn.name, instr.line)

    def binop(self, instr: Instr) -> None:
        op, (x, y) = instr.op, instr.args
        const = self.layout.const_value(y)
        if op in ("add", "sub") and const is not None:
            rx = self.use(x)
            rd, done = self.define(instr.dest)
            self.emit(f"addi {rd}, {rx}, {const if op == 'add' else -const}")
        else:
            rx, ry = self.use(x), self.use(y)
            rd, done = self.define(instr.dest)
            self.emit(f"{op} {rd}, {rx}, {ry}")
        done()

    def op_const(self, instr, block, following):
        pass

    def op_alloca(self, instr, block, following):
        if instr.dest in self.layout.virtual or instr.dest not in self.alloc.location:
            return
        rd, done = self.define(instr.dest)
        self.emit(f"cincoffset {rd}, c2, {self.layout.alloca_offset(instr.dest)}")
        done()

    def _offset_cap(self, rd: Reg, base: Reg, offset: int) -> None:
        if offset or rd != base:
            self.emit(f"cincoffset {rd}, {base}, {offset}")

    def op_stackcap(self, instr, block, following):
        if instr.dest not in self.alloc.location:
            return
        base, offset, _ = self.address(instr.args[0])
        length = self.layout.const_value(instr.args[1])
        rl = None if length is not None else self.use(instr.args[1])
        rd, done = self.define(instr.dest)
        self._offset_cap(rd, base, offset)
        self.emit(f"csetbounds {rd}, {rd}, {length if rl is None else rl}")
        done()

    def op_setopbounds(self, instr, block, following):
        if instr.dest not in self.alloc.location:
            return
        kind = _KINDS[instr.attrs.get("kind", "wbr")]
        rc = self.use(instr.args[0])
        length = self.layout.const_value(instr.args[1])
        operand = "c0" if length == 0 else (length if length is not None else self.use(instr.args[1]))
        rd, done = self.define(instr.dest)
        self.emit(f"{kind.mnemonic} {rd}, {rc}, {operand}")
        done()

    def op_gep(self, instr, block, following):
        if instr.dest in self.layout.virtual or instr.dest not in self.alloc.location:
            return
        base, offset, _ = self.address(instr.args[0])
        const = self.layout.const_value(instr.args[1])
        ri = None if const is not None else self.use(instr.args[1])
        rd, done = self.define(instr.dest)
        if ri is None:
            self.emit(f"cincoffset {rd}, {base}, {offset + const}")
        elif offset:
            self.emit(f"cincoffset {rd}, {base}, {offset}")
            self.emit(f"cincoffset {rd}, {rd}, {ri}")
        else:
            self.emit(f"cincoffset {rd}, {base}, {ri}")
        done()

    def op_load(self, instr, block, following):
        base, offset, _ = self.address(instr.args[0])
        rd, done = self.define(instr.dest)
        self.emit(f"{_LOADS[MEM_TYPES[instr.type]]} {rd}, {offset}({base})")
        done()

    def op_store(self, instr, block, following):
        rv = self.use(instr.args[0])
        base, offset, base_value = self.address(instr.args[1])
        self.emit(f"{_STORES[MEM_TYPES[instr.type]]} {rv}, {offset}({base})")
        self.last_store = (instr.args[1], base, base_value)

    def op_pin(self, instr, block, following):
        """Make the pinned location hold the capability the last store advanced."""
        source = instr.args[0]
        via = instr.args[1] if len(instr.args) > 1 else source
        last, self.last_store = self.last_store, None
        if last is None or last[0] != via:
            return        # not fed by a store: a pure identity
        _, used, used_value = last
        if used == SPR:
            return
        loc = self.alloc.location.get(instr.dest) or self.alloc.location.get(source)
        if loc is None:
            return
        same_address = used_value == source
        if isinstance(loc, Reg):
            if used == loc:
                return
            if same_address:
                self.emit(f"mv {loc}, {used}")
            else:
                self.emit(f"csetaddr {loc}, {used}, {loc}")
            return
        if same_address:
            self.spill_store(used, loc, True)
            return
        self._scratch_used = max(self._scratch_used, used.n - self.scratch_base + 1)
        tmp = self.scratch()
        self.spill_load(tmp, loc, True)
        self.emit(f"csetaddr {tmp}, {used}, {tmp}")
        self.spill_store(tmp, loc, True)

    def op_call(self, instr, block, following):
        callee, args = instr.args[0], instr.args[1:]
        if len(args) > MAX_ARGS:
            raise LoweringError(f"more than {MAX_ARGS} arguments", self.fn.name, instr.line)
        moves = [(Reg(FIRST_ALLOCATABLE + n), self.location(v), self.is_cap(v))
                 for n, v in enumerate(args)]
        self.parallel_move(moves)
        self._scratch_used = 0
        if callee in _BUILTIN_ECALLS:
            self.emit(f"ecall {_BUILTIN_ECALLS[callee]}")
        else:
            self.emit(f"call {callee}")
        if instr.dest and instr.dest in self.alloc.location:
            loc = self.alloc.location[instr.dest]
            self._move(loc, Reg(FIRST_ALLOCATABLE), self.is_cap(instr.dest))

    def _jump(self, pred: str, succ: str, following: str | None) -> None:
        self.parallel_move(self.edge_moves(pred, succ))
        if succ != following:
            self.emit(f"j {self.label(succ)}")

    def op_br(self, instr, block, following):
        self._jump(block, instr.args[0], following)

    def op_condbr(self, instr, block, following):
        cond, then, other = instr.args
        const = self.layout.const_value(cond)
        if const is not None:
            self._jump(block, then if const else other, following)
            return
        rc = self.use(cond)
        if self.edge_moves(block, then):
            stub = f"{self.label(block)}.to.{then}"
            self.emit(f"bne {rc}, c0, {stub}")
            saved, self.out = self.out, self.stubs
            self.out.append(f"{stub}:")
            self._scratch_used = 0
            self._jump(block, then, None)
            self.out = saved
        else:
            self.emit(f"bne {rc}, c0, {self.label(then)}")
        self._scratch_used = 0
        self._jump(block, other, following)

    def op_ret(self, instr, block, following):
        if instr.args:
            self.parallel_move([(Reg(FIRST_ALLOCATABLE), self.location(instr.args[0]),
                                 self.is_cap(instr.args[0]))])
        if self.calls_user:
            self.emit(f"ld c1, {self.ra_offset}(c2)")
        if self.frame:
            self.emit(f"cincoffset c2, c2, {self.frame}")
        self.emit("ret")


@dataclass
class LoweredModule:
    text: str
    allocations: dict[str, Allocation]


def lower_module(module: Module, registers: int = DEFAULT_K, emit_comments: bool = False) -> LoweredModule:
    """Translate a verified module into assembly text for :func:`assemble`."""
    if "main" not in {f.name for f in module.functions}:
        raise LoweringError("module has no @main")
    total = FIRST_ALLOCATABLE + registers + SCRATCH_COUNT
    lines = start_stub(total)
    allocations = {}
    signatures = module.signatures()
    for fn in module.functions:
        lowering = _FunctionLowering(fn, signatures, registers, emit_comments)
        lines.extend(lowering.lower())
        allocations[fn.name] = lowering.alloc
    return LoweredModule("\n".join(lines) + "\n", allocations)


def lower(module: Module, registers: int = DEFAULT_K, emit_comments: bool = False) -> str:
    return lower_module(module, registers, emit_comments).text
