"""Reader for the textual MIR form produced by :func:`format_module`."""

from __future__ import annotations

import re

from .ir import BINOPS, MEM_TYPES, TYPES, Block, Function, Instr, Module


class ParseError(Exception):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


_FUNC = re.compile(r"^func\s+@([\w.]+)\s*\((.*?)\)\s*(?:->\s*(\w+))?\s*([\w\s]*?)\s*\{$")
_LABEL = re.compile(r"^([A-Za-z_][\w.]*):$")
_DEF = re.compile(r"^(%[\w.]+)\s*=\s*(.*)$")
_VALUE = re.compile(r"^%[\w.]+$")
_INT = re.compile(r"^-?(?:0x[0-9a-fA-F]+|\d+)$")
_CALL = re.compile(r"^@([\w.]+)\s*\((.*?)\)(.*)$")
_PHI_ARM = re.compile(r"\[\s*([^,\]]+?)\s*,\s*([\w.]+)\s*\]")

# operand count per opcode, excluding trailing attributes
_ARITY = {"const": 1, "alloca": 1, "stackcap": 2, "setopbounds": 2, "gep": 2,
          "br": 1, "condbr": 3, **{op: 2 for op in BINOPS}}


def _operand(line: int, text: str):
    text = text.strip()
    if _VALUE.match(text):
        return text
    if _INT.match(text):
        return int(text, 0)
    raise ParseError(line, f"bad operand {text!r}")


def _attrs(line: int, words: list[str]) -> dict:
    attrs = {}
    for word in words:
        key, eq, value = word.partition("=")
        if not re.fullmatch(r"[A-Za-z_][\w.]*", key):
            raise ParseError(line, f"bad attribute {word!r}")
        attrs[key] = value if eq else True
    return attrs


def _split_operands(line: int, text: str) -> tuple[list[str], list[str]]:
    """Split ``a, b, c attr attr`` into operand texts and attribute words."""
    if not text.strip():
        return [], []
    pieces = [p.strip() for p in text.split(",")]
    tail = pieces[-1].split()
    if not tail:
        raise ParseError(line, "empty operand")
    return pieces[:-1] + [tail[0]], tail[1:]


def _parse_instr(line: int, text: str) -> Instr:
    dest = None
    if (m := _DEF.match(text)):
        dest, text = m.group(1), m.group(2)
    op, _, rest = text.strip().partition(" ")
    rest = rest.strip()

    if op == "call":
        m = _CALL.match(rest)
        if not m:
            raise ParseError(line, "expected call @name(args)")
        args = [_operand(line, a) for a in m.group(2).split(",") if a.strip()]
        return Instr("call", dest, [m.group(1), *args], attrs=_attrs(line, m.group(3).split()),
                     line=line)
    if op == "phi":
        ty, _, arms = rest.partition(" ")
        if ty not in TYPES:
            raise ParseError(line, f"phi needs a type (int or cap), got {ty!r}")
        pairs = [(_operand(line, v), b) for v, b in _PHI_ARM.findall(arms)]
        leftover = _PHI_ARM.sub("", arms).replace(",", " ").split()
        if not pairs:
            raise ParseError(line, "phi without incoming values")
        return Instr("phi", dest, pairs, ty, _attrs(line, leftover), line)
    if op in ("load", "store"):
        ty, _, rest = rest.partition(" ")
        if ty not in MEM_TYPES:
            raise ParseError(line, f"unknown memory type {ty!r}")
        operands, words = _split_operands(line, rest)
        want = 1 if op == "load" else 2
        if len(operands) != want:
            raise ParseError(line, f"{op} expects {want} operand(s)")
        return Instr(op, dest, [_operand(line, o) for o in operands], ty,
                     _attrs(line, words), line)
    if op == "pin":
        words = rest.split()
        if not words:
            raise ParseError(line, "pin expects an operand")
        args = [_operand(line, words[0])]
        words = words[1:]
        if words[:1] == ["via"]:
            if len(words) < 2:
                raise ParseError(line, "pin ... via expects a value")
            args.append(_operand(line, words[1]))
            words = words[2:]
        return Instr("pin", dest, args, attrs=_attrs(line, words), line=line)
    if op == "ret":
        operands, words = _split_operands(line, rest)
        if len(operands) > 1:
            raise ParseError(line, "ret takes at most one value")
        if operands and not (_VALUE.match(operands[0]) or _INT.match(operands[0])):
            words, operands = operands + words, []
        return Instr("ret", None, [_operand(line, o) for o in operands],
                     attrs=_attrs(line, words), line=line)
    if op not in _ARITY:
        raise ParseError(line, f"unknown instruction {op!r}")

    operands, words = _split_operands(line, rest)
    if len(operands) != _ARITY[op]:
        raise ParseError(line, f"{op} expects {_ARITY[op]} operand(s), got {len(operands)}")
    if op == "br":
        args = operands
    elif op == "condbr":
        args = [_operand(line, operands[0]), *operands[1:]]
    else:
        args = [_operand(line, o) for o in operands]
    if op in ("const", "alloca") and not isinstance(args[0], int):
        raise ParseError(line, f"{op} needs an integer literal")
    return Instr(op, dest, args, attrs=_attrs(line, words), line=line)


def parse_mir(source: str, verify: bool = True) -> Module:
    """Parse (and by default verify) a module."""
    module = Module()
    fn: Function | None = None
    for lineno, raw in enumerate(source.splitlines(), 1):
        text = raw.split(";", 1)[0].strip()
        if not text:
            continue
        if fn is None:
            m = _FUNC.match(text)
            if not m:
                raise ParseError(lineno, "expected 'func @name(...) {'")
            params = []
            for chunk in filter(None, (p.strip() for p in m.group(2).split(","))):
                name, _, ty = (s.strip() for s in chunk.partition(":"))
                if not _VALUE.match(name) or ty not in TYPES:
                    raise ParseError(lineno, f"bad parameter {chunk!r}")
                params.append((name, ty))
            ret = m.group(3)
            if ret not in (None, "void", *TYPES):
                raise ParseError(lineno, f"bad return type {ret!r}")
            fn = Function(m.group(1), params, None if ret in (None, "void") else ret,
                          attrs=set(m.group(4).split()), line=lineno)
            continue
        if text == "}":
            if not fn.blocks:
                raise ParseError(lineno, f"function @{fn.name} has no blocks")
            module.functions.append(fn)
            fn = None
            continue
        if (m := _LABEL.match(text)):
            fn.blocks.append(Block(m.group(1)))
            continue
        if not fn.blocks:
            raise ParseError(lineno, "instruction before the first block label")
        fn.blocks[-1].instrs.append(_parse_instr(lineno, text))
    if fn is not None:
        raise ParseError(fn.line, f"function @{fn.name} is not closed")
    if verify:
        from .verify import verify_module
        verify_module(module)
    return module
