"""In-memory form of the SSA intermediate representation.

Values are named ``%name`` and have one of two types, ``int`` or ``cap``.
Operands are value names or integer literals.  Instructions carry a small
``attrs`` dict for flags such as ``volatile`` and for bookkeeping markers
left by the passes (``origin=...``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

INT, CAP = "int", "cap"
TYPES = (INT, CAP)

# access width in bytes of each memory type
MEM_TYPES = {"i8": 1, "i16": 2, "i32": 4, "i64": 8, "cap": 16}

BINOPS = ("add", "sub", "mul", "and", "or", "xor", "slt")
TERMINATORS = ("br", "condbr", "ret")

# runtime services callable from MIR: name -> (parameter types, result type)
BUILTINS = {
    "print": ((INT,), None),
    "malloc": ((INT,), CAP),
    "malloc_zeroed": ((INT,), CAP),
    "free": ((CAP,), None),
}


def is_value(operand) -> bool:
    return isinstance(operand, str) and operand.startswith("%")


@dataclass(eq=False)
class Instr:
    op: str
    dest: str | None = None
    args: list = field(default_factory=list)
    type: str | None = None
    attrs: dict = field(default_factory=dict)
    line: int = 0

    @property
    def is_terminator(self) -> bool:
        return self.op in TERMINATORS

    def operands(self) -> list[str]:
        """SSA values read by this instruction."""
        if self.op == "phi":
            return [v for v, _ in self.args if is_value(v)]
        if self.op == "call":
            return [a for a in self.args[1:] if is_value(a)]
        if self.op == "br":
            return []
        if self.op == "condbr":
            return [self.args[0]] if is_value(self.args[0]) else []
        return [a for a in self.args if is_value(a)]

    def replace_uses(self, mapping: dict[str, str]) -> None:
        if not mapping:
            return
        if self.op == "phi":
            self.args = [(mapping.get(v, v) if is_value(v) else v, b) for v, b in self.args]
        elif self.op == "call":
            self.args = [self.args[0], *(mapping.get(a, a) if is_value(a) else a
                                         for a in self.args[1:])]
        elif self.op == "condbr":
            self.args[0] = mapping.get(self.args[0], self.args[0])
        elif self.op != "br":
            self.args = [mapping.get(a, a) if is_value(a) else a for a in self.args]

    def successors(self) -> list[str]:
        if self.op == "br":
            return [self.args[0]]
        if self.op == "condbr":
            return list(dict.fromkeys(self.args[1:]))
        return []

    def copy(self) -> Instr:
        return Instr(self.op, self.dest, list(self.args), self.type, dict(self.attrs), self.line)

    def __str__(self) -> str:
        return format_instr(self)


@dataclass(eq=False)
class Block:
    label: str
    instrs: list[Instr] = field(default_factory=list)

    @property
    def terminator(self) -> Instr:
        return self.instrs[-1]

    @property
    def phis(self) -> list[Instr]:
        return [i for i in self.instrs if i.op == "phi"]

    def first_non_phi(self) -> int:
        return next(k for k, i in enumerate(self.instrs) if i.op != "phi")


@dataclass(eq=False)
class Function:
    name: str
    params: list[tuple[str, str]] = field(default_factory=list)
    ret_type: str | None = INT
    blocks: list[Block] = field(default_factory=list)
    attrs: set[str] = field(default_factory=set)
    line: int = 0

    def block(self, label: str) -> Block:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    @property
    def entry(self) -> Block:
        return self.blocks[0]

    def instructions(self):
        for b in self.blocks:
            yield from b.instrs

    def value_types(self, signatures: dict | None = None) -> dict[str, str]:
        """Type of every SSA value defined in the function."""
        types = dict(self.params)
        callee_types = {name: ret for name, (_, ret) in (signatures or BUILTINS).items()}
        for instr in self.instructions():
            if instr.dest:
                types[instr.dest] = result_type(instr, callee_types)
        return types

    def predecessors(self) -> dict[str, list[str]]:
        preds = {b.label: [] for b in self.blocks}
        for b in self.blocks:
            if b.instrs and b.terminator.is_terminator:
                for s in b.terminator.successors():
                    if s in preds:
                        preds[s].append(b.label)
        return preds

    def fresh_name(self, stem: str) -> str:
        used = {name for name, _ in self.params}
        used.update(i.dest for i in self.instructions() if i.dest)
        # names handed out for instructions a pass has not inserted yet
        issued = self.__dict__.setdefault("_issued", set())
        stem = stem.rstrip("0123456789.") or "v"
        for n in itertools.count(1):
            name = f"{stem}.{n}"
            if name not in used and name not in issued:
                issued.add(name)
                return name

    def copy(self) -> Function:
        return Function(self.name, list(self.params), self.ret_type,
                        [Block(b.label, [i.copy() for i in b.instrs]) for b in self.blocks],
                        set(self.attrs), self.line)


@dataclass(eq=False)
class Module:
    functions: list[Function] = field(default_factory=list)

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def signatures(self) -> dict[str, tuple[tuple[str, ...], str | None]]:
        sigs = dict(BUILTINS)
        sigs.update({f.name: (tuple(t for _, t in f.params), f.ret_type) for f in self.functions})
        return sigs

    def copy(self) -> Module:
        return Module([f.copy() for f in self.functions])

    def __str__(self) -> str:
        return format_module(self)


def result_type(instr: Instr, callee_types: dict[str, str | None]) -> str | None:
    op = instr.op
    if op in ("alloca", "stackcap", "setopbounds", "gep", "pin"):
        return CAP
    if op == "load":
        return CAP if instr.type == "cap" else INT
    if op == "phi":
        return instr.type
    if op == "call":
        return callee_types.get(instr.args[0], INT)
    return INT


# -- printing ----------------------------------------------------------------

def _attr_text(attrs: dict) -> str:
    parts = [k if v is True else f"{k}={v}" for k, v in attrs.items() if v not in (False, None)]
    return "".join(f" {p}" for p in parts)


def format_instr(instr: Instr) -> str:
    op, args = instr.op, instr.args
    if op == "phi":
        body = f"phi {instr.type} " + ", ".join(f"[{v}, {b}]" for v, b in args)
    elif op == "call":
        body = f"call @{args[0]}(" + ", ".join(map(str, args[1:])) + ")"
    elif op in ("load", "store"):
        body = f"{op} {instr.type} " + ", ".join(map(str, args))
    elif op == "pin" and len(args) == 2:
        body = f"pin {args[0]} via {args[1]}"
    else:
        body = f"{op} " + ", ".join(map(str, args)) if args else op
    text = f"{instr.dest} = {body}" if instr.dest else body
    return text + _attr_text(instr.attrs)


def format_function(fn: Function) -> str:
    params = ", ".join(f"{n}: {t}" for n, t in fn.params)
    ret = f" -> {fn.ret_type}" if fn.ret_type else ""
    attrs = "".join(f" {a}" for a in sorted(fn.attrs))
    lines = [f"func @{fn.name}({params}){ret}{attrs} {{"]
    for b in fn.blocks:
        lines.append(f"{b.label}:")
        lines.extend(f"  {format_instr(i)}" for i in b.instrs)
    lines.append("}")
    return "\n".join(lines)


def format_module(module: Module) -> str:
    return "\n\n".join(format_function(f) for f in module.functions) + "\n"
