"""Structural, SSA and type checks for MIR modules."""

from __future__ import annotations

import networkx as nx

from .ir import BINOPS, BUILTINS, CAP, INT, MEM_TYPES, Function, Module, is_value


class VerifyError(Exception):
    def __init__(self, message: str, function: str = "", line: int = 0):
        where = f"@{function}" + (f" line {line}" if line else "")
        super().__init__(f"{where}: {message}" if function else message)
        self.function = function
        self.line = line
        self.message = message


def cfg(fn: Function) -> nx.DiGraph:
    graph = nx.DiGraph()
    graph.add_nodes_from(b.label for b in fn.blocks)
    for b in fn.blocks:
        if b.instrs and b.terminator.is_terminator:
            graph.add_edges_from((b.label, s) for s in b.terminator.successors())
    return graph


class Dominators:
    """Dominance queries over the reachable part of a function's CFG."""

    def __init__(self, fn: Function):
        self.idom = nx.immediate_dominators(cfg(fn), fn.entry.label)

    def reachable(self, label: str) -> bool:
        return label in self.idom

    def dominates(self, a: str, b: str) -> bool:
        while True:
            if a == b:
                return True
            parent = self.idom.get(b)
            if parent is None or parent == b:
                return False
            b = parent


def _check_structure(fn: Function) -> None:
    def fail(msg, line=0):
        raise VerifyError(msg, fn.name, line)

    labels = [b.label for b in fn.blocks]
    if len(set(labels)) != len(labels):
        fail("duplicate block label")
    known = set(labels)
    for b in fn.blocks:
        if not b.instrs or not b.terminator.is_terminator:
            fail(f"block {b.label!r} does not end in a terminator",
                 b.instrs[-1].line if b.instrs else 0)
        seen_body = False
        for instr in b.instrs[:-1]:
            if instr.is_terminator:
                fail(f"terminator in the middle of block {b.label!r}", instr.line)
            if instr.op == "phi" and seen_body:
                fail("phi after a non-phi instruction", instr.line)
            seen_body |= instr.op != "phi"
        for target in b.terminator.successors():
            if target not in known:
                fail(f"branch to unknown block {target!r}", b.terminator.line)
    preds = fn.predecessors()
    for b in fn.blocks:
        for phi in b.phis:
            arms = [blk for _, blk in phi.args]
            if sorted(arms) != sorted(preds[b.label]):
                fail(f"phi arms {arms} do not match predecessors {preds[b.label]}", phi.line)


def _check_ssa(fn: Function, doms: Dominators) -> None:
    def fail(msg, line=0):
        raise VerifyError(msg, fn.name, line)

    where: dict[str, tuple[str, int]] = {}
    for name, _ in fn.params:
        if name in where:
            fail(f"parameter {name} defined twice")
        where[name] = (fn.entry.label, -1)
    for b in fn.blocks:
        for k, instr in enumerate(b.instrs):
            if instr.dest:
                if instr.dest in where:
                    fail(f"{instr.dest} defined more than once", instr.line)
                where[instr.dest] = (b.label, k)

    for b in fn.blocks:
        if not doms.reachable(b.label):
            continue
        for k, instr in enumerate(b.instrs):
            if instr.op == "phi":
                uses = [(v, pred, len(fn.block(pred).instrs)) for v, pred in instr.args
                        if is_value(v)]
            else:
                uses = [(v, b.label, k) for v in instr.operands()]
            for value, blk, pos in uses:
                if value not in where:
                    fail(f"use of undefined value {value}", instr.line)
                def_blk, def_pos = where[value]
                ok = def_pos < pos if def_blk == blk else doms.dominates(def_blk, blk)
                if not ok and doms.reachable(blk):
                    fail(f"{value} does not dominate its use", instr.line)


def _check_types(fn: Function, signatures: dict) -> None:
    types = fn.value_types(signatures)

    def fail(msg, line):
        raise VerifyError(msg, fn.name, line)

    def type_of(operand):
        return types.get(operand) if is_value(operand) else INT

    def want(operand, ty, what, line):
        actual = type_of(operand)
        if actual != ty and not (ty == CAP and operand == 0):
            fail(f"{what} must be {ty}, got {actual} ({operand})", line)

    for instr in fn.instructions():
        op, args, line = instr.op, instr.args, instr.line
        if op in BINOPS or op == "const":
            continue
        if op == "alloca":
            if args[0] <= 0:
                fail("alloca size must be positive", line)
        elif op in ("stackcap", "setopbounds", "gep"):
            want(args[0], CAP, f"{op} operand", line)
            want(args[1], INT, f"{op} length/offset", line)
        elif op == "load":
            want(args[0], CAP, "load address", line)
        elif op == "store":
            want(args[1], CAP, "store address", line)
            want(args[0], CAP if instr.type == "cap" else INT, "stored value", line)
        elif op == "pin":
            for a in args:
                want(a, CAP, "pin operand", line)
        elif op == "phi":
            for v, _ in args:
                want(v, instr.type, "phi incoming value", line)
        elif op == "call":
            callee = args[0]
            if callee not in signatures:
                fail(f"call to unknown function @{callee}", line)
            params, ret = signatures[callee]
            if len(params) != len(args) - 1:
                fail(f"@{callee} expects {len(params)} argument(s)", line)
            for a, ty in zip(args[1:], params):
                want(a, ty, f"argument of @{callee}", line)
            if instr.dest and ret is None:
                fail(f"@{callee} returns nothing", line)
        elif op == "ret":
            if fn.ret_type is None and args:
                fail("void function returns a value", line)
            if fn.ret_type is not None:
                if not args:
                    fail("missing return value", line)
                want(args[0], fn.ret_type, "return value", line)
        if op in ("load", "store") and instr.type not in MEM_TYPES:
            fail(f"unknown memory type {instr.type}", line)


def verify_function(fn: Function, signatures: dict | None = None) -> None:
    signatures = signatures or dict(BUILTINS)
    if not fn.blocks:
        raise VerifyError("function has no blocks", fn.name, fn.line)
    _check_structure(fn)
    _check_ssa(fn, Dominators(fn))
    _check_types(fn, signatures)


def verify_module(module: Module) -> Module:
    names = [f.name for f in module.functions]
    for name in names:
        if names.count(name) > 1 or name in BUILTINS:
            raise VerifyError(f"function @{name} defined twice or shadows a builtin")
    signatures = module.signatures()
    for fn in module.functions:
        verify_function(fn, signatures)
    return module
