"""Liveness, live intervals and linear-scan register allocation for MIR."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..mir.ir import Function, Instr, is_value

FIRST_ALLOCATABLE = 4
DEFAULT_K = 8
SCRATCH_COUNT = 4
SP = "sp"      # pseudo value: the stack pointer register


@dataclass(frozen=True)
class Reg:
    n: int

    def __str__(self) -> str:
        return f"c{self.n}"


@dataclass(frozen=True)
class Slot:
    index: int

    def __str__(self) -> str:
        return f"slot{self.index}"


@dataclass
class Interval:
    values: list[str]
    start: int
    end: int
    uses: list[int]
    order: int          # definition order of the first value, for tie breaks

    def next_use(self, pos: int) -> float:
        return next((u for u in self.uses if u >= pos), math.inf)


@dataclass
class Allocation:
    location: dict[str, Reg | Slot] = field(default_factory=dict)
    intervals: dict[str, Interval] = field(default_factory=dict)
    spill_slots: int = 0
    registers: int = DEFAULT_K

    @property
    def spilled(self) -> list[str]:
        return [v for v, loc in self.location.items() if isinstance(loc, Slot)]


class FunctionLayout:
    """Static facts about a function shared by the allocator and the lowering.

    ``consts`` are inlined at their uses and ``virtual`` values (stack
    allocations and constant-offset GEPs only used as load/store addresses)
    are folded into addressing modes, so neither needs a location.
    """

    def __init__(self, fn: Function):
        self.fn = fn
        self.defs: dict[str, Instr] = {i.dest: i for i in fn.instructions() if i.dest}
        self.consts = {d: i.args[0] for d, i in self.defs.items() if i.op == "const"}
        self.position: dict[int, int] = {}
        self.block_span: dict[str, tuple[int, int]] = {}
        pos = 0
        for b in fn.blocks:
            first = pos
            for instr in b.instrs:
                self.position[id(instr)] = pos
                pos += 2
            self.block_span[b.label] = (first, pos - 2)
        self.frame_offsets: dict[str, int] = {}
        self.frame_allocas = 0
        for instr in fn.instructions():
            if instr.op == "alloca":
                self.frame_offsets[instr.dest] = self.frame_allocas
                self.frame_allocas += (instr.args[0] + 15) & -16
        self.calls = sorted(self.position[id(i)] for i in fn.instructions() if i.op == "call")
        self.virtual = self._virtual_values()

    def const_value(self, operand) -> int | None:
        if isinstance(operand, int):
            return operand
        return self.consts.get(operand)

    def fold(self, value: str) -> tuple[str, int]:
        """(materialised base value or SP, byte offset) addressing ``value``."""
        d = self.defs.get(value)
        if d is not None and d.op == "alloca":
            return SP, self.alloca_offset(value)
        if d is not None and d.op == "gep" and self.const_value(d.args[1]) is not None:
            base, off = self.fold(d.args[0])
            return base, off + self.const_value(d.args[1])
        return value, 0

    def alloca_offset(self, value: str) -> int:
        return self.frame_offsets[value]

    def _foldable(self, value: str) -> bool:
        d = self.defs.get(value)
        return d is not None and (d.op == "alloca" or (
            d.op == "gep" and self.const_value(d.args[1]) is not None))

    def _virtual_values(self) -> set[str]:
        uses: dict[str, list[tuple[Instr, int]]] = {}
        for instr in self.fn.instructions():
            if instr.op == "phi":
                continue
            for k, a in enumerate(instr.args):
                if is_value(a):
                    uses.setdefault(a, []).append((instr, k))
        for instr in self.fn.instructions():
            if instr.op == "phi":
                for v, _ in instr.args:
                    if is_value(v):
                        uses.setdefault(v, []).append((instr, -1))
        virtual: set[str] = set()
        changed = True
        while changed:
            changed = False
            for value in self.defs:
                if value in virtual or not self._foldable(value):
                    continue
                if all(self._folded_use(instr, k) for instr, k in uses.get(value, [])):
                    virtual.add(value)
                    changed = True
        return virtual

    @staticmethod
    def _folded_use(instr: Instr, k: int) -> bool:
        if instr.op == "load" and k == 0:
            return True
        if instr.op == "store" and k == 1:
            return True
        if instr.op == "pin" and k == 1:
            return True
        # a GEP or stack bound computes its result from the folded address
        return instr.op in ("gep", "stackcap") and k == 0

    def materialized(self, value: str) -> bool:
        return value not in self.consts and value not in self.virtual

    def reads(self, instr: Instr) -> list[str]:
        """Materialised values an instruction needs in a location."""
        out = []
        if instr.op in ("load", "store"):
            address = instr.args[-1]
            base, _ = self.fold(address)
            if instr.op == "store":
                out.append(instr.args[0])
            out.append(base)
        elif instr.op == "pin":
            out.append(instr.args[0])
        elif instr.op == "phi":
            return []
        elif instr.op in ("gep", "stackcap") and instr.dest in self.virtual:
            return []
        elif instr.op in ("gep", "stackcap"):
            base, _ = self.fold(instr.args[0])
            out.extend([base, instr.args[1]])
        else:
            out.extend(instr.operands())
        return [v for v in out if is_value(v) and v != SP and self.materialized(v)]


def liveness(layout: FunctionLayout) -> tuple[dict[str, set[str]], dict[str, set[str]]]:
    fn = layout.fn
    succs = {b.label: b.terminator.successors() for b in fn.blocks}
    gen: dict[str, set[str]] = {}
    kill: dict[str, set[str]] = {}
    phi_uses: dict[str, set[str]] = {b.label: set() for b in fn.blocks}
    for b in fn.blocks:
        g, k = set(), set()
        for instr in b.instrs:
            if instr.op == "phi":
                for v, pred in instr.args:
                    if is_value(v) and layout.materialized(v):
                        phi_uses[pred].add(v)
            else:
                g.update(v for v in layout.reads(instr) if v not in k)
            if instr.dest:
                k.add(instr.dest)
        gen[b.label], kill[b.label] = g, k
    live_in = {b.label: set() for b in fn.blocks}
    live_out = {b.label: set() for b in fn.blocks}
    changed = True
    while changed:
        changed = False
        for b in reversed(fn.blocks):
            label = b.label
            out = set(phi_uses[label])
            for s in succs[label]:
                phi_defs = {p.dest for p in fn.block(s).phis}
                out |= live_in[s] - phi_defs
            inn = gen[label] | (out - kill[label])
            if out != live_out[label] or inn != live_in[label]:
                live_out[label], live_in[label] = out, inn
                changed = True
    return live_in, live_out


def build_intervals(layout: FunctionLayout) -> dict[str, Interval]:
    fn = layout.fn
    live_in, live_out = liveness(layout)
    points: dict[str, list[int]] = {}
    uses: dict[str, list[int]] = {}
    order: dict[str, int] = {}
    for k, (name, _) in enumerate(fn.params):
        points[name] = [-1]
        order[name] = k
    for b in fn.blocks:
        first, last = layout.block_span[b.label]
        for instr in b.instrs:
            pos = layout.position[id(instr)]
            if instr.dest and layout.materialized(instr.dest):
                points.setdefault(instr.dest, []).append(first if instr.op == "phi" else pos)
                order.setdefault(instr.dest, len(order))
            if instr.op == "phi":
                for v, pred in instr.args:
                    if is_value(v) and layout.materialized(v):
                        end = layout.block_span[pred][1]
                        points.setdefault(v, []).append(end)
                        uses.setdefault(v, []).append(end)
            else:
                for v in layout.reads(instr):
                    points.setdefault(v, []).append(pos)
                    uses.setdefault(v, []).append(pos)
        for v in live_in[b.label]:
            points.setdefault(v, []).append(first)
        for v in live_out[b.label]:
            points.setdefault(v, []).append(last)
    return {v: Interval([v], min(p), max(p), sorted(uses.get(v, [])), order.get(v, 0))
            for v, p in points.items()}


def _coalesce(layout: FunctionLayout, intervals: dict[str, Interval]) -> dict[str, Interval]:
    """Merge each pin's input and output into one allocation unit."""
    parent = {v: v for v in intervals}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for instr in layout.fn.instructions():
        if instr.op == "pin" and instr.dest in parent and instr.args[0] in parent:
            a, b = find(instr.args[0]), find(instr.dest)
            if a != b:
                parent[b] = a
    groups: dict[str, Interval] = {}
    for v in sorted(intervals, key=lambda v: intervals[v].order):
        iv, root = intervals[v], find(v)
        if root not in groups:
            groups[root] = Interval([v], iv.start, iv.end, list(iv.uses), iv.order)
        else:
            g = groups[root]
            g.values.append(v)
            g.start, g.end = min(g.start, iv.start), max(g.end, iv.end)
            g.uses = sorted(g.uses + iv.uses)
            g.order = min(g.order, iv.order)
    return groups


def linear_scan(fn: Function, k: int = DEFAULT_K, layout: FunctionLayout | None = None) -> Allocation:
    """Assign registers c4.. c(3+k) or spill slots to every materialised value.

    Intervals live across a call are spilled up front (all registers are
    caller-saved).  When registers run out, the interval whose next use is
    furthest away is spilled; ties spill the earlier-defined value.
    """
    if k < 4:
        raise ValueError("at least 4 allocatable registers are required")
    layout = layout or FunctionLayout(fn)
    groups = _coalesce(layout, build_intervals(layout))
    alloc = Allocation(registers=k)
    slot_of: dict[int, Slot] = {}

    def spill(group: Interval) -> None:
        slot = slot_of.setdefault(id(group), Slot(alloc.spill_slots))
        if slot.index == alloc.spill_slots:
            alloc.spill_slots += 1
        for v in group.values:
            alloc.location[v] = slot

    free = [Reg(FIRST_ALLOCATABLE + n) for n in range(k)]
    active: list[tuple[Interval, Reg]] = []
    for group in sorted(groups.values(), key=lambda g: (g.start, g.order)):
        for v in group.values:
            alloc.intervals[v] = group
        if any(group.start < c < group.end for c in layout.calls):
            spill(group)
            continue
        for item in [a for a in active if a[0].end < group.start]:
            active.remove(item)
            free.append(item[1])
        free.sort(key=lambda r: r.n)
        if free:
            reg = free.pop(0)
            active.append((group, reg))
            for v in group.values:
                alloc.location[v] = reg
            continue
        candidates = [(g, r) for g, r in active] + [(group, None)]
        victim, reg = max(candidates, key=lambda c: (c[0].next_use(group.start), -c[0].order))
        if reg is None:
            spill(group)
            continue
        active.remove((victim, reg))
        spill(victim)
        active.append((group, reg))
        for v in group.values:
            alloc.location[v] = reg
    return alloc
