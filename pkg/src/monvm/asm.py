"""Textual assembly for the capability machine.

One instruction per line, ``;`` starts a comment, ``name:`` defines a label.
Registers are ``c0`` .. ``c15`` (``zero``, ``ra`` and ``sp`` are accepted as
aliases of c0, c1, c2).  A ``.registers N`` directive widens the register file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .capcodec import MNEMONIC_KINDS

DEFAULT_REGISTERS = 16
_ALIASES = {"zero": 0, "ra": 1, "sp": 2}

# operand shapes: r = register, i = immediate, x = register or immediate,
# m = imm(reg) memory operand, l = label
FORMATS: dict[str, str] = {
    "li": "ri", "mv": "rr",
    "add": "rrr", "sub": "rrr", "mul": "rrr", "and": "rrr", "or": "rrr",
    "xor": "rrr", "slt": "rrr", "addi": "rri",
    "beq": "rrl", "bne": "rrl", "blt": "rrl", "bge": "rrl",
    "jal": "rl", "j": "l", "jalr": "rm", "call": "l", "ret": "", "halt": "",
    "cmove": "rr", "cincoffset": "rrx", "csetbounds": "rrx", "candperm": "rrx",
    "cgetaddr": "rr", "csetaddr": "rrr", "cgetbase": "rr", "cgetlen": "rr",
    "cgetoptop": "rr", "cgettag": "rr",
    "lb": "rm", "lh": "rm", "lw": "rm", "ld": "rm",
    "sb": "rm", "sh": "rm", "sw": "rm", "sd": "rm",
    "clc": "rm", "csc": "rm",
    "ecall": "i",
}
FORMATS.update({m: "rrx" for m in MNEMONIC_KINDS})

CATEGORIES = ("integer", "branch", "load", "store", "cap", "runtime")

_CATEGORY = {
    **{op: "integer" for op in ("li", "mv", "add", "sub", "mul", "and", "or", "xor", "slt", "addi")},
    **{op: "branch" for op in ("beq", "bne", "blt", "bge", "jal", "j", "jalr", "call", "ret", "halt")},
    **{op: "load" for op in ("lb", "lh", "lw", "ld", "clc")},
    **{op: "store" for op in ("sb", "sh", "sw", "sd", "csc")},
    **{op: "cap" for op in ("cmove", "cincoffset", "csetbounds", "candperm", "cgetaddr",
                            "csetaddr", "cgetbase", "cgetlen", "cgetoptop", "cgettag",
                            *MNEMONIC_KINDS)},
    "ecall": "runtime",
}


class ParseError(Exception):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


@dataclass(frozen=True)
class Instr:
    op: str
    args: tuple = ()
    line: int = 0
    # for "x" operands: True if the last operand is an immediate
    imm_form: bool = False

    @property
    def category(self) -> str:
        return _CATEGORY[self.op]

    def __str__(self) -> str:
        return f"{self.op} {', '.join(map(str, self.args))}".strip()


@dataclass
class Program:
    instructions: list[Instr]
    labels: dict[str, int]
    entry: int = 0
    registers: int = DEFAULT_REGISTERS
    source: str = field(default="", repr=False)

    def __len__(self) -> int:
        return len(self.instructions)


_LABEL = re.compile(r"^([A-Za-z_.$][\w.$]*):")
_MEM = re.compile(r"^(-?(?:0x[0-9a-fA-F]+|\d+))?\((\w+)\)$")


def _int(text: str) -> int:
    return int(text, 0)


def assemble(source: str) -> Program:
    """Assemble ``source``; branch targets are resolved to instruction indices."""
    nregs = DEFAULT_REGISTERS
    pending: list[tuple[int, str, list[str]]] = []
    labels: dict[str, int] = {}

    for lineno, raw in enumerate(source.splitlines(), 1):
        text = raw.split(";", 1)[0].split("#", 1)[0].strip()
        while (m := _LABEL.match(text)):
            name = m.group(1)
            if name in labels:
                raise ParseError(lineno, f"duplicate label {name!r}")
            labels[name] = len(pending)
            text = text[m.end():].strip()
        if not text:
            continue
        if text.startswith(".registers"):
            try:
                nregs = int(text.split()[1])
            except (IndexError, ValueError):
                raise ParseError(lineno, "expected .registers N") from None
            if nregs < DEFAULT_REGISTERS:
                raise ParseError(lineno, f"at least {DEFAULT_REGISTERS} registers are required")
            continue
        op, _, rest = text.partition(" ")
        op = op.lower()
        operands = [o.strip() for o in rest.split(",")] if rest.strip() else []
        pending.append((lineno, op, operands))

    def reg(lineno: int, text: str) -> int:
        if text in _ALIASES:
            return _ALIASES[text]
        if re.fullmatch(r"c\d+", text) and int(text[1:]) < nregs:
            return int(text[1:])
        raise ParseError(lineno, f"bad register {text!r}")

    instructions = []
    for lineno, op, operands in pending:
        if op == "jal" and len(operands) == 1:
            operands = ["c1", *operands]
        elif op == "jalr" and len(operands) == 1:
            operands = ["c1", f"0({operands[0]})"]
        fmt = FORMATS.get(op)
        if fmt is None:
            raise ParseError(lineno, f"unknown mnemonic {op!r}")
        if len(operands) != len(fmt):
            raise ParseError(lineno, f"{op} expects {len(fmt)} operands, got {len(operands)}")
        args: list = []
        imm_form = False
        for kind, text in zip(fmt, operands):
            try:
                if kind == "r":
                    args.append(reg(lineno, text))
                elif kind == "i":
                    args.append(_int(text))
                elif kind == "x":
                    if re.fullmatch(r"-?(0x[0-9a-fA-F]+|\d+)", text):
                        args.append(_int(text))
                        imm_form = True
                    else:
                        args.append(reg(lineno, text))
                elif kind == "m":
                    m = _MEM.match(text.replace(" ", ""))
                    if not m:
                        raise ParseError(lineno, f"bad memory operand {text!r}")
                    args.extend([_int(m.group(1) or "0"), reg(lineno, m.group(2))])
                elif kind == "l":
                    if text not in labels:
                        raise ParseError(lineno, f"undefined label {text!r}")
                    args.append(labels[text])
            except ValueError:
                raise ParseError(lineno, f"bad operand {text!r}") from None
        instructions.append(Instr(op, tuple(args), lineno, imm_form))

    for name, index in labels.items():
        if index > len(instructions):
            raise ParseError(0, f"label {name!r} points past the program")
    entry = labels.get("_start", labels.get("main", 0))
    return Program(instructions, labels, entry, nregs, source)
