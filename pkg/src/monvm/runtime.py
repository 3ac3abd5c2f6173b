"""Guest heap allocator handing out Write-before-Read capabilities.

Blocks come from power-of-two size classes.  Each block is preceded by a
16-byte header that lies outside the bounds of the returned capability.
The allocator runs on the host, but every step it would perform as guest
code is charged to the machine's instruction counters so allocation costs
are comparable across modes.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

from .capcodec import (Capability, CapabilityError, CpKind, representable_alignment,
                       representable_length, set_bounds, set_op_bounds)

HEADER = 16
MIN_CLASS = 16

# instruction mix of the allocator fast paths, excluding the op-bounds call
MALLOC_COST = {"integer": 3, "branch": 2, "load": 1, "store": 2, "cap": 2}
FREE_COST = {"integer": 1, "branch": 2, "load": 2, "store": 2, "cap": 1}
# csetwbrbound
WBR_COST = {"cap": 1}
# per 8-byte word of the zero-fill loop: sd, addi, bne
ZERO_FILL_COST = {"store": 1, "integer": 1, "branch": 1}


class HeapError(Exception):
    pass


class OutOfMemory(HeapError):
    pass


class InvalidFree(HeapError):
    pass


@dataclass
class HeapStats:
    mallocs: int = 0
    frees: int = 0
    reused: int = 0
    zeroed_bytes: int = 0


def size_class(size: int) -> int:
    return max(MIN_CLASS, 1 << (size - 1).bit_length())


def _align_up(value: int, align: int) -> int:
    return (value + align - 1) & -align


@dataclass
class Heap:
    """Allocator state.  ``memory`` is a bytearray shared with the machine."""

    arena: Capability
    memory: bytearray
    wbr: bool = True
    counters: Counter = field(default_factory=Counter)
    stats: HeapStats = field(default_factory=HeapStats)

    def __post_init__(self):
        self.bump = self.arena.base
        self.free_lists: dict[int, list[int]] = {}
        self.live: dict[int, int] = {}   # user base -> size class

    def _charge(self, cost: dict[str, int], times: int = 1) -> None:
        for category, n in cost.items():
            self.counters[category] += n * times

    def malloc(self, size: int, zeroed: bool = False) -> Capability:
        if size <= 0:
            raise OutOfMemory(f"refusing allocation of {size} bytes")
        user = representable_length(_align_up(size, 16))
        cls = size_class(user)
        align = max(16, representable_alignment(cls))

        blocks = self.free_lists.get(cls)
        if blocks:
            ptr = blocks.pop()
            self.stats.reused += 1
        else:
            ptr = _align_up(self.bump + HEADER, align)
            if ptr + cls > self.arena.top:
                raise OutOfMemory(f"arena exhausted allocating {size} bytes")
            self.bump = ptr + cls
        self._charge(MALLOC_COST)
        self.memory[ptr - HEADER:ptr - HEADER + 8] = cls.to_bytes(8, "little")

        try:
            cap = set_bounds(replace(self.arena, addr=ptr), user)
            if zeroed:
                self.memory[ptr:ptr + user] = bytes(user)
                self._charge(ZERO_FILL_COST, user // 8)
                self.stats.zeroed_bytes += user
            elif self.wbr:
                cap = set_op_bounds(cap, CpKind.WRITE_BEFORE_READ, 0)
                self._charge(WBR_COST)
        except CapabilityError as exc:
            self.free_lists.setdefault(cls, []).append(ptr)
            raise OutOfMemory(str(exc)) from exc
        self.live[ptr] = cls
        self.stats.mallocs += 1
        return cap

    def free(self, cap: Capability | int) -> None:
        base = cap.base if isinstance(cap, Capability) and cap.tag else None
        if base is None or base not in self.live or cap.addr != base:
            where = f"{base:#x}" if base is not None else "an untagged value"
            raise InvalidFree(f"free of {where} which is not a live allocation")
        cls = self.live.pop(base)
        self.free_lists.setdefault(cls, []).append(base)
        self._charge(FREE_COST)
        self.stats.frees += 1
