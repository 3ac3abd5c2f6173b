"""Module transforms: bounds for stack objects, operation-bound
instrumentation, store linearization and a small cleanup pipeline.

Every pass returns a new module and leaves its input untouched.
"""

from __future__ import annotations

import enum
from collections import defaultdict

from .ir import BINOPS, CAP, Block, Function, Instr, Module, is_value
from .verify import Dominators, verify_module

ORIGIN_BOUNDS = "bounds"
ORIGIN_PIN = "pin"
ORIGIN_ESCAPE = "escape"
ORIGIN_REFRESH = "refresh"


class InstrumentMode(enum.Enum):
    ALL = "all"    # every stack allocation
    FN = "fn"      # allocations in functions marked writebeforeread
    VAR = "var"    # allocations marked wbr


def _uses(fn: Function) -> dict[str, list[Instr]]:
    uses = defaultdict(list)
    for instr in fn.instructions():
        for v in instr.operands():
            uses[v].append(instr)
    return uses


def _insert_after(block: Block, anchor: Instr, *new: Instr) -> None:
    k = block.instrs.index(anchor)
    block.instrs[k + 1:k + 1] = new


def _replace_uses(fn: Function, mapping: dict[str, str], skip: set[int] = frozenset()) -> None:
    for instr in fn.instructions():
        if id(instr) not in skip:
            instr.replace_uses(mapping)


def _per_function(module: Module, transform) -> Module:
    out = module.copy()
    signatures = out.signatures()
    for fn in out.functions:
        transform(fn, signatures)
    return verify_module(out)


# -- stack bounds --------------------------------------------------------------

def _stackcaps(fn: Function) -> dict[str, Instr]:
    return {i.args[0]: i for i in fn.instructions() if i.op == "stackcap"}


def _elidable(alloca: Instr, uses: list[Instr]) -> bool:
    """An allocation only ever used as the direct address of loads and stores."""
    return all(u.op in ("load", "store") and u.args[-1] == alloca.dest
               and (u.op == "load" or u.args[0] != alloca.dest) for u in uses)


def _add_stackcap(fn: Function, block: Block, alloca: Instr) -> Instr:
    sc = Instr("stackcap", fn.fresh_name(alloca.dest + ".b"), [alloca.dest, alloca.args[0]],
               attrs={"origin": ORIGIN_BOUNDS}, line=alloca.line)
    _insert_after(block, alloca, sc)
    _replace_uses(fn, {alloca.dest: sc.dest}, skip={id(sc)})
    return sc


def bound_allocas(module: Module, elide: bool = True) -> Module:
    """Give every stack allocation a bounded capability.

    With ``elide`` set, allocations whose address never leaves a direct
    load or store keep using the stack pointer, mirroring the usual
    bounds-elision optimisation.
    """
    def transform(fn, _):
        uses, caps = _uses(fn), _stackcaps(fn)
        for block in fn.blocks:
            for instr in list(block.instrs):
                if instr.op != "alloca" or instr.dest in caps:
                    continue
                if instr.attrs.get("origin") == ORIGIN_ESCAPE:
                    continue
                if elide and _elidable(instr, uses[instr.dest]):
                    continue
                _add_stackcap(fn, block, instr)
    return _per_function(module, transform)


def _selected(fn: Function, alloca: Instr, mode: InstrumentMode) -> bool:
    if alloca.attrs.get("origin") == ORIGIN_ESCAPE:
        return False
    if mode is InstrumentMode.ALL:
        return True
    if mode is InstrumentMode.FN:
        return "writebeforeread" in fn.attrs
    return bool(alloca.attrs.get("wbr"))


def cp_instrument(module: Module, mode: InstrumentMode = InstrumentMode.ALL) -> Module:
    """Start every selected stack allocation with an empty operation bound."""
    mode = InstrumentMode(mode)

    def transform(fn, _):
        for block in fn.blocks:
            for instr in list(block.instrs):
                if instr.op != "alloca" or not _selected(fn, instr, mode):
                    continue
                sc = _stackcaps(fn).get(instr.dest) or _add_stackcap(fn, block, instr)
                if any(u.op == "setopbounds" for u in _uses(fn)[sc.dest]):
                    continue
                sc_block = next(b for b in fn.blocks if sc in b.instrs)
                wbr = Instr("setopbounds", fn.fresh_name(instr.dest + ".w"), [sc.dest, 0],
                            line=instr.line)
                _insert_after(sc_block, sc, wbr)
                _replace_uses(fn, {sc.dest: wbr.dest, instr.dest: wbr.dest},
                              skip={id(sc), id(wbr)})
    return _per_function(module, transform)


# -- cleanup -------------------------------------------------------------------

_FOLD = {
    "add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b,
    "and": lambda a, b: a & b, "or": lambda a, b: a | b, "xor": lambda a, b: a ^ b,
    "slt": lambda a, b: int(a < b),
}
_IDENTITY = {"add": 0, "sub": 0, "or": 0, "xor": 0, "mul": 1}
_PURE = {"const", "gep", "alloca", "stackcap", "phi", *BINOPS}


def optimize(module: Module) -> Module:
    """Constant folding, copy elimination and dead-code removal.

    Volatile loads are never removed, which is what keeps reads of values
    that are never consumed visible to the checker.
    """
    def transform(fn, _):
        changed = True
        while changed:
            changed = False
            consts = {i.dest: i.args[0] for i in fn.instructions() if i.op == "const"}
            copies: dict[str, str] = {}
            for instr in fn.instructions():
                if instr.op in BINOPS:
                    a, b = (consts.get(x, x) for x in instr.args)
                    if isinstance(a, int) and isinstance(b, int):
                        instr.op, instr.args = "const", [_FOLD[instr.op](a, b)]
                        changed = True
                    elif is_value(a) and b == _IDENTITY.get(instr.op):
                        copies[instr.dest] = a
                elif instr.op == "phi":
                    incoming = {v for v, _ in instr.args if v != instr.dest}
                    if len(incoming) == 1 and is_value(next(iter(incoming))):
                        copies[instr.dest] = incoming.pop()
            if copies:
                for src in list(copies):
                    while copies[src] in copies:
                        copies[src] = copies[copies[src]]
                _replace_uses(fn, copies)
                changed = True
            uses = _uses(fn)
            for block in fn.blocks:
                keep = []
                for instr in block.instrs:
                    dead = instr.dest and not uses.get(instr.dest) and (
                        instr.op in _PURE or (instr.op == "load" and not instr.attrs.get("volatile")))
                    if dead:
                        changed = True
                    else:
                        keep.append(instr)
                block.instrs = keep
    return _per_function(module, transform)


def zero_heap(module: Module) -> Module:
    """Route heap allocations through the zero-filling allocator."""
    def transform(fn, _):
        for instr in fn.instructions():
            if instr.op == "call" and instr.args[0] == "malloc":
                instr.args[0] = "malloc_zeroed"
    return _per_function(module, transform)


# -- store linearization ---------------------------------------------------------

def conditional_values(fn: Function, signatures: dict, heap: bool = True) -> set[str]:
    """Values that may hold a conditional capability or be derived from one."""
    types = fn.value_types(signatures)
    cond = {name for name, ty in fn.params if ty == CAP}
    changed = True
    while changed:
        changed = False
        for instr in fn.instructions():
            if not instr.dest or instr.dest in cond:
                continue
            op = instr.op
            if (op == "setopbounds"
                    or (op == "call" and heap and instr.args[0] == "malloc")
                    or (op == "load" and instr.type == "cap")
                    or (op in ("gep", "pin") and instr.args[0] in cond)
                    or (op == "phi" and types[instr.dest] == CAP
                        and any(v in cond for v, _ in instr.args))
                    or (op == "call" and types.get(instr.dest) == CAP
                        and instr.args[0] not in ("malloc", "malloc_zeroed"))):
                cond.add(instr.dest)
                changed = True
    return cond


class _Linearizer:
    def __init__(self, fn: Function, signatures: dict, heap: bool):
        self.fn = fn
        self.cond = conditional_values(fn, signatures, heap)
        self.defs = {i.dest: i for i in fn.instructions() if i.dest}
        self.def_block = {i.dest: b.label for b in fn.blocks for i in b.instrs if i.dest}
        for name, _ in fn.params:
            self.def_block[name] = fn.entry.label
        # identity of each canonical version: pins and slot reloads inherit
        self.ident: dict[str, str] = {}
        self.slots: dict[str, str] = {}

    # helpers
    def identity(self, value: str) -> str:
        return self.ident.get(value, value)

    def is_gep(self, value) -> bool:
        d = self.defs.get(value)
        return d is not None and d.op == "gep"

    def chain(self, value: str) -> list[Instr]:
        """GEP instructions from the underlying capability out to ``value``."""
        out = []
        while self.is_gep(value):
            out.append(self.defs[value])
            value = self.defs[value].args[0]
        return out[::-1]

    def root(self, value: str) -> str:
        c = self.chain(value)
        return c[0].args[0] if c else value

    def new_slot(self, stem: str) -> str:
        slot = Instr("alloca", self.fn.fresh_name(stem + ".slot"), [16],
                     attrs={"origin": ORIGIN_ESCAPE})
        entry = self.fn.entry
        entry.instrs.insert(entry.first_non_phi(), slot)
        self.defs[slot.dest] = slot
        self.def_block[slot.dest] = entry.label
        return slot.dest

    def reload(self, slot: str, ident: str, line: int) -> Instr:
        instr = Instr("load", self.fn.fresh_name(ident), [slot], "cap",
                      {"origin": ORIGIN_ESCAPE}, line)
        self.defs[instr.dest] = instr
        self.ident[instr.dest] = ident
        self.cond.add(instr.dest)
        return instr

    def spill_store(self, value, slot: str, line: int) -> Instr:
        return Instr("store", None, [value, slot], "cap", {"origin": ORIGIN_ESCAPE}, line)

    # (3a) conditional phis become slot traffic
    def demote_phis(self) -> None:
        for block in self.fn.blocks:
            for phi in [p for p in block.phis if p.dest in self.cond]:
                slot = self.new_slot(phi.dest)
                for value, pred in phi.args:
                    pb = self.fn.block(pred)
                    pb.instrs.insert(len(pb.instrs) - 1, self.spill_store(value, slot, phi.line))
                block.instrs.remove(phi)
                load = Instr("load", phi.dest, [slot], "cap", {"origin": ORIGIN_ESCAPE}, phi.line)
                block.instrs.insert(block.first_non_phi(), load)
                self.defs[phi.dest] = load
                self.slots[phi.dest] = slot

    # memory locations that hold a copy of one conditional capability
    def find_homes(self) -> None:
        """Record ``store cap V, A`` sites where ``A`` only ever receives ``V``.

        A frontier store through ``V`` is later followed by a refresh of
        ``A`` wherever such a store dominates it.
        """
        stored: dict[str, set[str]] = defaultdict(set)
        sites: dict[str, list[Instr]] = defaultdict(list)
        for instr in self.fn.instructions():
            if instr.op != "store" or instr.attrs.get("origin") in (ORIGIN_ESCAPE, ORIGIN_REFRESH):
                continue
            value, address = instr.args
            if not is_value(address) or (address in self.cond and self.is_gep(address)):
                continue
            ok = instr.type == "cap" and value in self.cond and not self.is_gep(value)
            stored[address].add(value if ok else "")
            sites[address].append(instr)
        self.home_sites: dict[str, list[tuple[str, Instr]]] = defaultdict(list)
        for address, values in stored.items():
            if len(values) == 1 and "" not in values:
                (value,) = values
                self.home_sites[value].extend((address, s) for s in sites[address])
        # blocks with frontier stores that still need a pin
        self.pin_blocks: set[str] = set()
        for b in self.fn.blocks:
            for k, i in enumerate(b.instrs):
                if (i.op == "store" and i.args[1] in self.cond and self.root(i.args[1]) in self.cond
                        and i.attrs.get("origin") not in (ORIGIN_ESCAPE, ORIGIN_REFRESH)
                        and not self._pinned(b.instrs, k)):
                    self.pin_blocks.add(b.label)

    def _pinned(self, instrs: list[Instr], k: int) -> bool:
        nxt = instrs[k + 1] if k + 1 < len(instrs) else None
        return nxt is not None and nxt.op == "pin" and nxt.args[0] == self.root(instrs[k].args[1])

    # (3b) values crossing blocks live in a stack slot
    def escape(self) -> None:
        crossing = defaultdict(set)
        for sites in self.home_sites.values():
            for address, _ in sites:
                if address in self.cond:
                    for label in self.pin_blocks - {self.def_block.get(address)}:
                        crossing[address].add(label)
        for block in self.fn.blocks:
            for instr in block.instrs:
                for v in instr.operands():
                    if v not in self.cond:
                        continue
                    if self.is_gep(v):
                        if self.def_block.get(v) == block.label:
                            continue
                        v = self.root(v)
                    if v in self.cond and self.def_block.get(v) != block.label:
                        crossing[v].add(block.label)
        for value, blocks in crossing.items():
            if value not in self.slots:
                self.slots[value] = self.new_slot(value)
                self._store_after_def(value, self.slots[value])
            for label in blocks:
                block = self.fn.block(label)
                load = self.reload(self.slots[value], self.identity(value), 0)
                block.instrs.insert(block.first_non_phi(), load)
                for instr in block.instrs:
                    if instr is not load and instr.op != "phi":
                        instr.replace_uses({value: load.dest})

    def _store_after_def(self, value: str, slot: str) -> None:
        store = self.spill_store(value, slot, 0)
        d = self.defs.get(value)
        if d is None:      # parameter
            entry = self.fn.entry
            k = entry.first_non_phi()
            while k < len(entry.instrs) and entry.instrs[k].attrs.get("origin") == ORIGIN_ESCAPE \
                    and entry.instrs[k].op == "alloca":
                k += 1
            entry.instrs.insert(k, store)
        else:
            block = self.fn.block(self.def_block[value])
            k = block.instrs.index(d) + 1
            while block.instrs[k].op == "phi":
                k += 1
            block.instrs.insert(k, store)

    # (1)(2)(4) per-block canonical renaming
    def _homes_allowed(self) -> set[str]:
        """Allocations that are only ever addressed directly (no aliases)."""
        uses = _uses(self.fn)
        return {i.dest for i in self.fn.instructions()
                if i.op == "alloca" and i.attrs.get("origin") != ORIGIN_ESCAPE
                and _elidable(i, uses[i.dest])}

    def rename_block(self, block: Block, home_ok: set[str]) -> None:
        current: dict[str, str] = {}     # identity -> latest version
        entry_version: dict[str, str] = {}
        homes: dict[str, set[str]] = defaultdict(set)
        out: list[Instr] = []
        instrs = block.instrs
        k = 0

        def canon(v):
            if v in self.cond and not self.is_gep(v):
                return current.get(self.identity(v), v)
            return v

        def fresh_chain(v, line):
            """Rebuild ``v``'s GEP chain on the current base if it is stale."""
            chain = self.chain(v)
            base = chain[0].args[0]
            if canon(base) == base:
                return v
            prev = canon(base)
            for g in chain:
                new = Instr("gep", self.fn.fresh_name(g.dest), [prev, g.args[1]],
                            attrs={"origin": ORIGIN_PIN}, line=line)
                self.defs[new.dest] = new
                self.cond.add(new.dest)
                out.append(new)
                prev = new.dest
            return prev

        while k < len(instrs):
            instr = instrs[k]
            k += 1
            if instr.is_terminator:
                for ident, slot in self._slot_idents().items():
                    latest = current.get(ident)
                    if latest and latest != entry_version.get(ident) and not self._saved(out, latest, slot):
                        out.append(self.spill_store(latest, slot, instr.line))
                instr.replace_uses({v: canon(v) for v in instr.operands()})
                out.append(instr)
                break
            if instr.op != "phi":
                mapping = {}
                for v in instr.operands():
                    if v in self.cond and self.is_gep(v) and self.root(v) in self.cond:
                        mapping[v] = fresh_chain(v, instr.line)
                    else:
                        mapping[v] = canon(v)
                instr.replace_uses(mapping)
            out.append(instr)

            if instr.dest and instr.dest in self.cond and not self.is_gep(instr.dest):
                ident = self.identity(instr.dest)
                if instr.op == "pin":
                    ident = self.ident.setdefault(instr.dest, self.identity(instr.args[0]))
                current[ident] = instr.dest
                entry_version.setdefault(ident, instr.dest if instr.attrs.get("origin") == ORIGIN_ESCAPE else None)
                if instr.op == "load" and instr.args[0] in home_ok:
                    homes[ident].add(instr.args[0])

            if instr.op != "store":
                continue
            address, stored = instr.args[1], instr.args[0]
            if address in home_ok:
                for hs in homes.values():
                    hs.discard(address)
                if stored in self.cond and instr.type == "cap":
                    homes[self.identity(stored)].add(address)
            origin = instr.attrs.get("origin")
            if origin in (ORIGIN_ESCAPE, ORIGIN_REFRESH) or address not in self.cond:
                continue
            base = self.root(address)
            if base not in self.cond:
                continue
            ident = self.identity(base)
            nxt = instrs[k] if k < len(instrs) else None
            if nxt is not None and nxt.op == "pin" and nxt.args[0] == base:
                continue      # already linearized
            pin = Instr("pin", self.fn.fresh_name(ident), [base] + ([address] if address != base else []),
                        attrs={"origin": ORIGIN_PIN}, line=instr.line)
            self.defs[pin.dest] = pin
            self.cond.add(pin.dest)
            self.ident[pin.dest] = ident
            current[ident] = pin.dest
            out.append(pin)
            targets = set(homes[ident])
            for address, site in self.home_sites.get(ident, ()):
                if self._dominates(site, block, out):
                    targets.add(canon(address))
            for home in sorted(targets):
                out.append(Instr("store", None, [pin.dest, home], "cap",
                                 {"origin": ORIGIN_REFRESH, "volatile": True}, instr.line))
        block.instrs = out

    def _dominates(self, site: Instr, block: Block, done: list[Instr]) -> bool:
        for b in self.fn.blocks:
            if any(i is site for i in b.instrs) and b is not block:
                return self.dom.dominates(b.label, block.label)
        return any(i is site for i in done)

    def _slot_idents(self) -> dict[str, str]:
        return {self.identity(v): s for v, s in self.slots.items()}

    @staticmethod
    def _saved(out: list[Instr], value: str, slot: str) -> bool:
        for instr in reversed(out):
            if instr.op == "store" and instr.args[1] == slot:
                return instr.args[0] == value
        return False

    def run(self) -> None:
        if not any(v in self.cond for v in self.defs) and not any(
                name in self.cond for name, _ in self.fn.params):
            return
        self.demote_phis()
        self.find_homes()
        self.escape()
        self.dom = Dominators(self.fn)
        home_ok = self._homes_allowed()
        for block in self.fn.blocks:
            self.rename_block(block, home_ok)
        self._drop_dead_geps()

    def _drop_dead_geps(self) -> None:
        while True:
            uses = _uses(self.fn)
            dead = [i for i in self.fn.instructions()
                    if i.op == "gep" and not uses.get(i.dest) and i.dest in self.cond]
            if not dead:
                return
            for block in self.fn.blocks:
                block.instrs = [i for i in block.instrs if i not in dead]


def store_linearize(module: Module, heap: bool = True) -> Module:
    """Keep one canonical copy of every conditional capability.

    After each store through a conditional capability (or an address derived
    from one) the capability is pinned, and later uses read the pinned copy.
    Conditional capabilities that cross blocks live in a dedicated stack
    slot, reloaded at the top of each block that uses them and written back
    before it exits.  A capability that also lives in a local variable is
    written back there after each frontier store.  ``heap`` says whether
    ``@malloc`` hands out conditional capabilities.
    """
    def transform(fn, signatures):
        _Linearizer(fn, signatures, heap).run()
    return _per_function(module, transform)
