"""128-bit compressed capabilities carrying a compressed operation bound.

The meta word holds permissions, the conditional-permission control bits,
otype and the CHERI Concentrate style bounds (I_E, T, B).  For conditional
capabilities the upper 16 bits of the cursor are reused for the operation
top, which restricts the address of such capabilities to 48 bits.

Meta word layout::

    [63:52] p      hardware permissions
    [51:49] p_op   conditional-permission kind (0b111 = disabled)
    [48]    f      flag
    [47:30] otype
    [29]    I_E
    [28:17] T[11:0]  (T[2:0] = T_E when I_E = 1)
    [16:3]  B[13:0]  (B[2:0] = B_E when I_E = 1)
    [2:0]   zero

Cursor word of a conditional capability::

    [63:53] O[13:3]
    [52:48] O_E
    [47:0]  address
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

MW = 14
ADDR_BITS = 48
ADDR_MASK = (1 << ADDR_BITS) - 1
CURSOR_BITS = 64
CURSOR_MASK = (1 << CURSOR_BITS) - 1
MAX_COND_EXP = 2
OTYPE_UNSEALED = (1 << 18) - 1

_T_MASK = (1 << (MW - 2)) - 1      # T[11:0] is what is stored
_B_MASK = (1 << MW) - 1
_FIELD_MASK = _B_MASK


class CapabilityError(Exception):
    """Base class of all capability manipulation errors.

    ``trap`` names the machine trap raised when an instruction hits this error.
    """

    trap = "TagViolation"


class TagViolation(CapabilityError):
    trap = "TagViolation"


class MonotonicityViolation(CapabilityError):
    trap = "BoundsViolation"


class OutOfBounds(CapabilityError):
    trap = "BoundsViolation"


class OpBoundsIncrease(CapabilityError):
    trap = "OpBoundsViolation"


class RepresentabilityViolation(CapabilityError):
    trap = "RepresentabilityViolation"


class AddressMaskViolation(CapabilityError):
    trap = "AddressMaskViolation"


class NotRepresentable(CapabilityError):
    trap = "RepresentabilityViolation"


class Access(enum.Enum):
    LOAD = "load"
    STORE = "store"
    FETCH = "fetch"


class CpKind(enum.IntEnum):
    """Conditional-permission kind, stored verbatim in the 3-bit p_op field."""

    WRITE_BEFORE_READ = 0
    WRITE_BEFORE_EXECUTE = 1
    WRITE_BEFORE_READ_ONLY = 2
    WRITE_BEFORE_EXECUTE_ONLY = 3
    WRITE_ONCE = 4
    READ_ONCE = 5
    EXECUTE_ONCE = 6
    DISABLED = 7

    @property
    def tracked(self) -> Access | None:
        """The operation whose occurrence moves the operation top."""
        return _TRACKED.get(self)

    @property
    def gated(self) -> Access | None:
        """The access kind that is conditionally granted."""
        return _GATED.get(self)

    @property
    def mnemonic(self) -> str:
        return _MNEMONICS[self]


_TRACKED = {
    CpKind.WRITE_BEFORE_READ: Access.STORE,
    CpKind.WRITE_BEFORE_EXECUTE: Access.STORE,
    CpKind.WRITE_BEFORE_READ_ONLY: Access.STORE,
    CpKind.WRITE_BEFORE_EXECUTE_ONLY: Access.STORE,
    CpKind.WRITE_ONCE: Access.STORE,
    CpKind.READ_ONCE: Access.LOAD,
    CpKind.EXECUTE_ONCE: Access.FETCH,
}

# access kind whose permission (R, W or X) is the conditional one
_GATED = {
    CpKind.WRITE_BEFORE_READ: Access.LOAD,
    CpKind.WRITE_BEFORE_EXECUTE: Access.FETCH,
    CpKind.WRITE_BEFORE_READ_ONLY: Access.LOAD,
    CpKind.WRITE_BEFORE_EXECUTE_ONLY: Access.FETCH,
    CpKind.WRITE_ONCE: Access.STORE,
    CpKind.READ_ONCE: Access.LOAD,
    CpKind.EXECUTE_ONCE: Access.FETCH,
}

# kinds whose tracked operation must hit the operation top exactly
_EXACT = frozenset({
    CpKind.WRITE_BEFORE_READ_ONLY,
    CpKind.WRITE_BEFORE_EXECUTE_ONLY,
    CpKind.WRITE_ONCE,
    CpKind.READ_ONCE,
    CpKind.EXECUTE_ONCE,
})

_MNEMONICS = {
    CpKind.WRITE_BEFORE_READ: "csetwbrbound",
    CpKind.WRITE_BEFORE_EXECUTE: "csetwbxbound",
    CpKind.WRITE_BEFORE_READ_ONLY: "csetrobound",
    CpKind.WRITE_BEFORE_EXECUTE_ONLY: "csetxobound",
    CpKind.WRITE_ONCE: "csetwtbound",
    CpKind.READ_ONCE: "csetrtbound",
    CpKind.EXECUTE_ONCE: "csetxtbound",
}
MNEMONIC_KINDS = {m: k for k, m in _MNEMONICS.items()}


# bit positions inside the 12-bit hardware permission field
_PERM_BITS = {"execute": 1, "read": 2, "write": 3, "load_cap": 4, "store_cap": 5}


@dataclass(frozen=True)
class Permissions:
    read: bool = True
    write: bool = True
    execute: bool = True
    load_cap: bool = True
    store_cap: bool = True

    @classmethod
    def from_bits(cls, bits: int) -> Permissions:
        return cls(**{name: bool(bits >> pos & 1) for name, pos in _PERM_BITS.items()})

    @classmethod
    def none(cls) -> Permissions:
        return cls(False, False, False, False, False)

    def to_bits(self) -> int:
        return sum(1 << pos for name, pos in _PERM_BITS.items() if getattr(self, name))

    def __and__(self, other: Permissions) -> Permissions:
        return Permissions.from_bits(self.to_bits() & other.to_bits())

    def __le__(self, other: Permissions) -> bool:
        return self.to_bits() & ~other.to_bits() == 0

    def allows(self, access: Access) -> bool:
        if access is Access.LOAD:
            return self.read
        if access is Access.STORE:
            return self.write
        return self.execute


@dataclass(frozen=True)
class Capability:
    """A decoded capability.

    ``top`` is one past the last accessible byte.  ``op_top`` is ``None`` for
    conventional capabilities.  ``malformed`` is set by :func:`decode` for bit
    patterns that no legal derivation can produce.
    """

    tag: bool
    perms: Permissions
    base: int
    top: int
    addr: int
    cp: CpKind = CpKind.DISABLED
    op_top: int | None = None
    otype: int = OTYPE_UNSEALED
    flag: bool = False
    malformed: bool = field(default=False, compare=True)

    @property
    def length(self) -> int:
        return self.top - self.base

    @property
    def conditional(self) -> bool:
        return self.cp is not CpKind.DISABLED

    @property
    def exponent(self) -> int:
        return bounds_format(self.length)[1]

    @property
    def offset(self) -> int:
        return self.addr - self.base

    def __repr__(self) -> str:
        cp = "" if not self.conditional else f" {self.cp.name} o={self.op_top:#x}"
        perms = "".join(c if getattr(self.perms, n) else "-"
                        for c, n in zip("rwxLS", ("read", "write", "execute", "load_cap", "store_cap")))
        return (f"Capability({'v' if self.tag else 'untagged'} {perms} "
                f"[{self.base:#x},{self.top:#x}) a={self.addr:#x}{cp})")


def root_capability(top: int = 1 << ADDR_BITS) -> Capability:
    return Capability(tag=True, perms=Permissions(), base=0, top=top, addr=0)


@dataclass(frozen=True)
class EncodedCapability:
    meta: int
    cursor: int
    tag: bool = True

    def to_hex(self) -> str:
        return f"{int(self.tag)}:{self.meta:016X}:{self.cursor:016X}"

    @classmethod
    def from_hex(cls, text: str) -> EncodedCapability:
        try:
            tag, meta, cursor = text.strip().split(":")
            if tag not in ("0", "1") or len(meta) != 16 or len(cursor) != 16:
                raise ValueError
            return cls(int(meta, 16), int(cursor, 16), tag == "1")
        except ValueError:
            raise ValueError(f"malformed capability vector {text!r}") from None

    def to_bytes(self) -> bytes:
        # cursor in the low half, as CHERI stores the address first
        return self.cursor.to_bytes(8, "little") + self.meta.to_bytes(8, "little")

    @classmethod
    def from_bytes(cls, data: bytes, tag: bool) -> EncodedCapability:
        return cls(int.from_bytes(data[8:16], "little"), int.from_bytes(data[0:8], "little"), tag)


# -- bounds arithmetic -------------------------------------------------------

def bounds_format(length: int) -> tuple[int, int]:
    """Return (I_E, E) used to encode a region of ``length`` bytes."""
    if length < 1 << (MW - 2):
        return 0, 0
    return 1, length.bit_length() - (MW - 1)


def round_bounds(base: int, length: int) -> tuple[int, int]:
    """Smallest encodable [base', top') containing [base, base+length)."""
    top = base + length
    ie, e = bounds_format(length)
    if not ie:
        return base, top
    while True:
        mask = (1 << (e + 3)) - 1
        new_base, new_top = base & ~mask, (top + mask) & ~mask
        if new_top - new_base < 1 << (e + MW - 1):
            return new_base, new_top
        e += 1


def representable_length(length: int) -> int:
    """Length a region of ``length`` bytes is rounded to when suitably aligned."""
    base, top = round_bounds(0, length)
    return top - base


def representable_alignment(length: int) -> int:
    """Base alignment needed for ``length`` bytes to be encoded exactly."""
    ie, e = bounds_format(representable_length(length))
    return 1 << (e + 3) if ie else 1


def correction(a3: int, r: int, x3: int) -> int:
    """Correction applied to a_top for a bound whose top mantissa bits are x3."""
    a_low, x_low = a3 < r, x3 < r
    if a_low == x_low:
        return 0
    return 1 if x_low else -1


def in_representable_region(base: int, addr: int, exponent: int, width: int) -> bool:
    """Whether ``addr`` lies in the window from which ``base`` can be recovered."""
    span = exponent + MW
    if span >= width:
        return True
    bottom = ((base >> (exponent + MW - 3)) - 1) << (exponent + MW - 3)
    return (addr - bottom) % (1 << width) < 1 << span


# -- decode / encode ---------------------------------------------------------

def decode(enc: EncodedCapability) -> Capability:
    meta, cursor = enc.meta & CURSOR_MASK, enc.cursor & CURSOR_MASK
    perms = Permissions.from_bits(meta >> 52)
    cp = CpKind(meta >> 49 & 7)
    flag = bool(meta >> 48 & 1)
    otype = meta >> 30 & OTYPE_UNSEALED
    ie = meta >> 29 & 1
    t_field = meta >> 17 & _T_MASK
    b_field = meta >> 3 & _B_MASK
    conditional = cp is not CpKind.DISABLED

    if conditional:
        addr, width = cursor & ADDR_MASK, ADDR_BITS
        o_hi, o_e = cursor >> 53 & 0x7FF, cursor >> 48 & 0x1F
    else:
        addr, width = cursor, CURSOR_BITS
        o_hi = o_e = 0

    if not ie:
        e = 0
        t, b = t_field, b_field
        carry = (t & _T_MASK) < (b & _T_MASK)
        l_msb = 0
        o = o_hi << 3 | o_e >> 2
        o_low = 0
    else:
        e = (t_field & 7) << 3 | (b_field & 7)
        t, b = t_field & ~7, b_field & ~7
        # compared on bits [11:3]; the low bits are zero here
        carry = (t >> 3 & 0x1FF) < (b >> 3 & 0x1FF)
        l_msb = 1
        o = o_hi << 3 | (o_e >> e & 7)
        o_low = o_e & ((1 << e) - 1)
    t |= ((b >> 12) + carry + l_msb & 3) << 12

    a_top = addr >> (e + MW)
    a3 = addr >> (e + MW - 3) & 7
    r = ((b >> 11) - 1) & 7
    c_b = correction(a3, r, b >> 11)
    c_t = correction(a3, r, t >> 11)
    base = ((a_top + c_b) << (e + MW) | b << e) % (1 << width)
    top = ((a_top + c_t) << (e + MW) | t << e) % (1 << (width + 1))
    if e < width - MW + 1 and (top >> (width - 1)) - (base >> (width - 1)) > 1:
        top ^= 1 << width

    op_top = None
    malformed = base > top
    if conditional:
        c_o = correction(a3, r, o >> 11)
        op_top = ((a_top + c_o) << (e + MW) | o << e | o_low) % (1 << width)
        malformed = malformed or e > MAX_COND_EXP or not base <= op_top <= top

    return Capability(tag=enc.tag, perms=perms, base=base, top=top, addr=addr, cp=cp,
                      op_top=op_top, otype=otype, flag=flag, malformed=malformed)


def encode(cap: Capability) -> EncodedCapability:
    """Exact encoding of ``cap``; raises :class:`NotRepresentable` otherwise."""
    length = cap.top - cap.base
    if length < 0 or cap.base < 0 or cap.top > 1 << ADDR_BITS:
        raise NotRepresentable(f"bounds [{cap.base:#x},{cap.top:#x}) out of range")
    conditional = cap.conditional
    if conditional:
        if cap.addr >> ADDR_BITS:
            raise NotRepresentable("conditional capability address exceeds 48 bits")
        if cap.op_top is None or not cap.base <= cap.op_top <= cap.top:
            raise NotRepresentable("operation top outside bounds")
    elif not 0 <= cap.addr <= CURSOR_MASK:
        raise NotRepresentable("address exceeds 64 bits")

    ie, e = bounds_format(length)
    if ie:
        mask = (1 << (e + 3)) - 1
        if cap.base & mask or cap.top & mask:
            raise NotRepresentable(f"bounds not aligned to {mask + 1} bytes")
    if conditional and e > MAX_COND_EXP:
        raise NotRepresentable(f"exponent {e} too large for an operation bound")

    b_field = cap.base >> e & _B_MASK
    t_field = cap.top >> e & _T_MASK
    if ie:
        b_field = (b_field & ~7) | (e & 7)
        t_field = (t_field & ~7) | (e >> 3)
    meta = (cap.perms.to_bits() << 52 | cap.cp << 49 | int(cap.flag) << 48
            | (cap.otype & OTYPE_UNSEALED) << 30 | ie << 29 | t_field << 17 | b_field << 3)

    if conditional:
        o = cap.op_top >> e & _FIELD_MASK
        o_e = (o & 7) << 2 if not ie else cap.op_top & ((1 << (e + 3)) - 1)
        cursor = (o >> 3) << 53 | o_e << 48 | cap.addr
    else:
        cursor = cap.addr

    enc = EncodedCapability(meta, cursor, cap.tag)
    if decode(enc) != replace(cap, malformed=False):
        raise NotRepresentable(f"address {cap.addr:#x} outside representable window")
    return enc


def is_representable(cap: Capability) -> bool:
    try:
        encode(cap)
    except NotRepresentable:
        return False
    return True


# -- derivation --------------------------------------------------------------

def _require_tag(cap: Capability) -> None:
    if not cap.tag:
        raise TagViolation("capability tag is clear")


def set_bounds(cap: Capability, length: int) -> Capability:
    """Narrow ``cap`` to [addr, addr+length), rounding outward to the encoding grid."""
    _require_tag(cap)
    if length < 0 or cap.addr < cap.base or cap.addr + length > cap.top:
        raise MonotonicityViolation(
            f"[{cap.addr:#x},{cap.addr + length:#x}) exceeds [{cap.base:#x},{cap.top:#x})")
    base, top = round_bounds(cap.addr, length)
    if base < cap.base or top > cap.top:
        raise MonotonicityViolation("rounded bounds exceed the parent")
    if not cap.conditional:
        return replace(cap, base=base, top=top)
    if bounds_format(top - base)[1] > MAX_COND_EXP:
        raise RepresentabilityViolation("conditional capability would need exponent > 2")
    return replace(cap, base=base, top=top, op_top=min(max(cap.op_top, base), top))


def set_op_bounds(cap: Capability, kind: CpKind, length: int) -> Capability:
    """Make ``cap`` conditional with operation top ``base + length``."""
    if kind is CpKind.DISABLED:
        raise ValueError("an operation bound needs a conditional kind")
    _require_tag(cap)
    if cap.addr >> ADDR_BITS:
        raise AddressMaskViolation(f"address {cap.addr:#x} uses the upper 16 bits")
    if cap.exponent > MAX_COND_EXP:
        raise RepresentabilityViolation(f"exponent {cap.exponent} exceeds {MAX_COND_EXP}")
    op_top = cap.base + length
    if length < 0 or op_top > cap.top:
        raise OutOfBounds(f"operation top {op_top:#x} beyond top {cap.top:#x}")
    if cap.conditional:
        if cap.cp is not kind:
            raise OpBoundsIncrease(f"cannot turn a {cap.cp.name} capability into {kind.name}")
        if op_top > cap.op_top:
            raise OpBoundsIncrease(f"operation top may only decrease ({cap.op_top:#x} -> {op_top:#x})")
    return replace(cap, cp=kind, op_top=op_top)


def set_addr(cap: Capability, addr: int) -> Capability:
    """Move the cursor; the tag is dropped if bounds can no longer be recovered."""
    if cap.conditional and cap.tag and addr >> ADDR_BITS:
        raise AddressMaskViolation(f"address {addr:#x} uses the upper 16 bits")
    addr &= CURSOR_MASK
    moved = replace(cap, addr=addr)
    if not cap.tag:
        return moved
    width = ADDR_BITS if cap.conditional else CURSOR_BITS
    if not in_representable_region(cap.base, addr, cap.exponent, width):
        return replace(moved, tag=False)
    return moved


def and_perms(cap: Capability, mask: int) -> Capability:
    return replace(cap, perms=Permissions.from_bits(cap.perms.to_bits() & mask))


# -- access checks -----------------------------------------------------------

class Fault(enum.Enum):
    TAG = "TagViolation"
    PERMIT = "PermitViolation"
    BOUNDS = "BoundsViolation"
    OP_BOUNDS = "OpBoundsViolation"


class Mode(enum.Enum):
    NOCAP = "nocap"
    PURECAP = "purecap"
    WBR = "wbr"


@dataclass(frozen=True)
class EnforcementConfig:
    mode: Mode = Mode.WBR
    strict_store: bool = False
    auto_init: bool = False

    @property
    def conditional(self) -> bool:
        return self.mode is Mode.WBR


def check_access(cap: Capability, addr: int, size: int, access: Access,
                 config: EnforcementConfig = EnforcementConfig()) -> Fault | None:
    """Return ``None`` if the access is allowed, else the reason it is denied."""
    if config.mode is Mode.NOCAP:
        return None
    if not cap.tag:
        return Fault.TAG
    end = addr + size
    if addr < cap.base or end > cap.top:
        return Fault.BOUNDS
    if not cap.perms.allows(access):
        return Fault.PERMIT
    if not config.conditional or not cap.conditional:
        return None

    kind, op_top = cap.cp, cap.op_top
    if access is kind.tracked:
        if kind in _EXACT:
            if addr != op_top:
                return Fault.OP_BOUNDS
        elif config.strict_store and addr > op_top:
            return Fault.OP_BOUNDS
    elif access is kind.gated and end > op_top:
        return Fault.OP_BOUNDS
    return None


def tracks(cap: Capability, access: Access) -> bool:
    return cap.conditional and cap.cp.tracked is access


def advance_op_top(cap: Capability, addr: int, size: int) -> Capability:
    """Extend the operation top over an access that reaches or straddles it."""
    if not cap.conditional:
        return cap
    end = addr + size
    if addr <= cap.op_top < end:
        return replace(cap, op_top=min(end, cap.top))
    return cap
