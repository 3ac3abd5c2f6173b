"""Reference models the tests compare the library against.

They are written from the field definitions directly and share no code
with ``monvm`` beyond the enum of conditional kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

DISABLED = 7


@dataclass(frozen=True)
class Decoded:
    base: int
    top: int
    addr: int
    op_top: int | None
    cp: int
    perms: int


def window_decode(meta: int, cursor: int) -> Decoded:
    """Decode by locating the aligned window that holds the address.

    The encoding stores the low mantissa bits of base, top and operation
    top.  Every one of them lies in a span of 2**(E+14) bytes that starts
    one eighth of a span below the base, and the address lies in that span
    too.  Finding the span start from the address recovers the high bits.
    """
    perms = meta >> 52
    cp = meta >> 49 & 7
    ie = meta >> 29 & 1
    t12 = meta >> 17 & 0xFFF
    b14 = meta >> 3 & 0x3FFF
    conditional = cp != DISABLED
    width = 48 if conditional else 64
    addr = cursor & ((1 << width) - 1)

    if ie:
        e = (t12 & 7) << 3 | (b14 & 7)
        b14 &= ~7
        t12 &= ~7
        length = (4096 + (t12 - (b14 & 0xFFF)) % 4096) << e
    else:
        e = 0
        length = (t12 - (b14 & 0xFFF)) % 4096

    span = 1 << (e + 14)
    r = ((b14 >> 11) - 1) % 8
    rw = r << (e + 11)
    start = addr - (addr - rw) % span
    base = (start + ((b14 << e) - rw) % span) % (1 << width)
    top = base + length

    op_top = None
    if conditional:
        o_hi, o_e = cursor >> 53 & 0x7FF, cursor >> 48 & 0x1F
        if ie:
            o = (o_hi << 3 | (o_e >> e & 7)) << e | (o_e & ((1 << e) - 1))
        else:
            o = o_hi << 3 | o_e >> 2
        op_top = base + (o - (b14 << e)) % span
    return Decoded(base, top, addr, op_top, cp, perms)


@dataclass
class ShadowAllocation:
    """Per-byte model of one Write-before-Read allocation.

    ``written`` is every byte any store touched.  ``readable`` grows only
    when a store begins inside or right at the end of the readable prefix.
    """

    size: int
    strict: bool = False
    written: set[int] = field(default_factory=set)
    readable: set[int] = field(default_factory=set)

    def _adjacent(self, offset: int) -> bool:
        return offset == 0 or (offset - 1) in self.readable

    def store(self, offset: int, size: int) -> bool:
        """Apply a store; False if it is denied."""
        if offset < 0 or offset + size > self.size:
            return False
        touches_prefix = self._adjacent(offset) or offset in self.readable
        if self.strict and not touches_prefix:
            return False
        span = set(range(offset, offset + size))
        self.written |= span
        if touches_prefix:
            self.readable |= span
        return True

    def load(self, offset: int, size: int) -> bool:
        if offset < 0 or offset + size > self.size:
            return False
        return set(range(offset, offset + size)) <= self.readable

    @property
    def frontier(self) -> int:
        n = 0
        while n in self.readable:
            n += 1
        return n
