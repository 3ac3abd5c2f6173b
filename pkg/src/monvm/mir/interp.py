"""Reference interpreter for MIR.

Memory is a set of separate objects, one per allocation, each with a
per-byte initialisation map.  Reading a byte that was never written is
reported as an uninitialised read; by default execution stops there, with
``auto_init`` the read yields zero and execution continues.  ``pin`` is the
identity and operation bounds are not modelled, so the interpreter gives
the intended meaning of a program independently of the passes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .ir import BINOPS, MEM_TYPES, Module, is_value

_FOLD = {
    "add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b,
    "and": lambda a, b: a & b, "or": lambda a, b: a | b, "xor": lambda a, b: a ^ b,
    "slt": lambda a, b: int(a < b),
}
# fake addresses keep distinct objects apart when pointers are compared
_OBJECT_SPACING = 1 << 32


def _wrap(value: int) -> int:
    value &= (1 << 64) - 1
    return value - (1 << 64) if value >> 63 else value


class InterpError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass(eq=False)
class MemObject:
    ident: int
    size: int
    kind: str
    data: bytearray = field(init=False)
    init: bytearray = field(init=False)
    caps: dict = field(default_factory=dict)
    freed: bool = False

    def __post_init__(self):
        self.data = bytearray(self.size)
        self.init = bytearray(self.size)


@dataclass(frozen=True)
class Pointer:
    obj: MemObject
    offset: int

    @property
    def address(self) -> int:
        return self.obj.ident * _OBJECT_SPACING + self.offset


@dataclass
class InterpResult:
    status: str                   # "exit", "uninit" or "error"
    exit_code: int | None
    output: list[int]
    uninit_reads: list[tuple[str, int]]   # (function, MIR line)
    message: str = ""
    steps: int = 0


def _int(value) -> int:
    return value.address if isinstance(value, Pointer) else value


class _Interpreter:
    def __init__(self, module: Module, auto_init: bool, fuel: int):
        self.module = module
        self.functions = {f.name: f for f in module.functions}
        self.auto_init = auto_init
        self.fuel = fuel
        self.steps = 0
        self.output: list[int] = []
        self.uninit: list[tuple[str, int]] = []
        self.ids = itertools.count(1)
        self.depth = 0

    def allocate(self, size: int, kind: str, zeroed: bool = False) -> Pointer:
        obj = MemObject(next(self.ids), size, kind)
        if zeroed:
            obj.init[:] = b"\x01" * size
        return Pointer(obj, 0)

    def access(self, ptr, size: int, fn: str, line: int) -> tuple[MemObject, int]:
        if not isinstance(ptr, Pointer):
            raise InterpError("error", f"@{fn} line {line}: access through a non-pointer")
        obj, off = ptr.obj, ptr.offset
        if obj.freed:
            raise InterpError("error", f"@{fn} line {line}: use after free")
        if off < 0 or off + size > obj.size:
            raise InterpError("error", f"@{fn} line {line}: out-of-bounds access at offset {off}")
        return obj, off

    def load(self, ty: str, ptr, fn: str, line: int):
        size = MEM_TYPES[ty]
        obj, off = self.access(ptr, size, fn, line)
        if not all(obj.init[off:off + size]):
            self.uninit.append((fn, line))
            if not self.auto_init:
                raise InterpError("uninit", f"@{fn} line {line}: read of uninitialised memory")
            return 0
        if ty == "cap":
            return obj.caps.get(off, int.from_bytes(obj.data[off:off + 8], "little", signed=True))
        return int.from_bytes(obj.data[off:off + size], "little", signed=True)

    def store(self, ty: str, value, ptr, fn: str, line: int) -> None:
        size = MEM_TYPES[ty]
        obj, off = self.access(ptr, size, fn, line)
        for k in [k for k in obj.caps if k < off + size and off < k + 16]:
            del obj.caps[k]
        if ty == "cap" and isinstance(value, Pointer):
            obj.caps[off] = value
            payload = bytes(16)
        else:
            payload = (_int(value) & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
        obj.data[off:off + size] = payload
        obj.init[off:off + size] = b"\x01" * size

    def builtin(self, name: str, args: list):
        if name == "print":
            self.output.append(_wrap(_int(args[0])))
            return None
        if name in ("malloc", "malloc_zeroed"):
            size = _int(args[0])
            return 0 if size <= 0 else self.allocate(size, "heap", zeroed=name == "malloc_zeroed")
        if name == "free":
            ptr = args[0]
            if ptr == 0:
                return None
            if not isinstance(ptr, Pointer) or ptr.offset or ptr.obj.kind != "heap" or ptr.obj.freed:
                raise InterpError("error", "invalid free")
            ptr.obj.freed = True
            return None
        raise InterpError("error", f"unknown builtin @{name}")

    def call(self, name: str, args: list):
        if name not in self.functions:
            return self.builtin(name, args)
        fn = self.functions[name]
        self.depth += 1
        if self.depth > 1000:
            raise InterpError("error", "call depth exceeded")
        env = {p: a for (p, _), a in zip(fn.params, args)}
        frame: list[MemObject] = []

        def val(operand):
            return env[operand] if is_value(operand) else operand

        block, prev = fn.entry, None
        try:
            while True:
                # phis read their inputs simultaneously
                incoming = {p.dest: val(next(v for v, b in p.args if b == prev))
                            for p in block.phis}
                env.update(incoming)
                for instr in block.instrs[len(incoming):]:
                    self.steps += 1
                    if self.steps > self.fuel:
                        raise InterpError("error", "fuel exhausted")
                    op, a = instr.op, instr.args
                    if op == "const":
                        env[instr.dest] = a[0]
                    elif op in BINOPS:
                        env[instr.dest] = _wrap(_FOLD[op](_int(val(a[0])), _int(val(a[1]))))
                    elif op == "alloca":
                        ptr = self.allocate(a[0], "stack")
                        frame.append(ptr.obj)
                        env[instr.dest] = ptr
                    elif op in ("stackcap", "setopbounds", "pin"):
                        env[instr.dest] = val(a[0])
                    elif op == "gep":
                        base = val(a[0])
                        off = _int(val(a[1]))
                        env[instr.dest] = (Pointer(base.obj, base.offset + off)
                                           if isinstance(base, Pointer) else _wrap(base + off))
                    elif op == "load":
                        env[instr.dest] = self.load(instr.type, val(a[0]), fn.name, instr.line)
                    elif op == "store":
                        self.store(instr.type, val(a[0]), val(a[1]), fn.name, instr.line)
                    elif op == "call":
                        result = self.call(a[0], [val(x) for x in a[1:]])
                        if instr.dest:
                            env[instr.dest] = result
                    elif op == "br":
                        block, prev = fn.block(a[0]), block.label
                        break
                    elif op == "condbr":
                        target = a[1] if _int(val(a[0])) else a[2]
                        block, prev = fn.block(target), block.label
                        break
                    elif op == "ret":
                        return val(a[0]) if a else None
        finally:
            for obj in frame:
                obj.freed = True
            self.depth -= 1


def interpret(module: Module, entry: str = "main", auto_init: bool = False,
              fuel: int = 1_000_000) -> InterpResult:
    """Run ``entry`` and report its exit code, prints and uninitialised reads."""
    machine = _Interpreter(module, auto_init, fuel)
    try:
        code = machine.call(entry, [])
    except InterpError as exc:
        return InterpResult(exc.kind, None, machine.output, machine.uninit, str(exc), machine.steps)
    return InterpResult("exit", _wrap(_int(code or 0)), machine.output, machine.uninit,
                        steps=machine.steps)
