"""Randomised and exhaustive checks of the compressed capability codec."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..capcodec import (ADDR_BITS, CapabilityError, Capability, CpKind, EncodedCapability,
                        and_perms, correction, decode, encode, root_capability, set_addr,
                        set_bounds, set_op_bounds)

COND_KINDS = [k for k in CpKind if k is not CpKind.DISABLED]


def correction_oracle(a3: int, x3: int, b3: int) -> int:
    """Correction found by trying each of -1, 0, +1.

    Positions are counted in units of 2**(E + MW - 3).  The representable
    window starts at a position congruent to ``b3 - 1`` modulo 8 and is
    eight units wide; the address and the bound both lie inside it.  The
    right correction is the one whose candidate bound position lands there.
    """
    start = 80 + (b3 - 1) % 8                      # any window start will do
    addr = next(p for p in range(start, start + 8) if p % 8 == a3)
    hits = [c for c in (-1, 0, 1) if start <= (addr // 8 + c) * 8 + x3 < start + 8]
    assert len(hits) == 1
    return hits[0]


def correction_sweep() -> list[tuple[int, int, int, int, int]]:
    """Compare the codec against the oracle on all 8 x 8 x 8 inputs.

    Returns the mismatches as (a3, x3, b3, codec, oracle).
    """
    bad = []
    for a3 in range(8):
        for x3 in range(8):
            for b3 in range(8):
                got = correction(a3, (b3 - 1) % 8, x3)
                want = correction_oracle(a3, x3, b3)
                if got != want:
                    bad.append((a3, x3, b3, got, want))
    return bad


def random_capability(rng: random.Random) -> tuple[Capability, tuple[int, int]]:
    """A capability derived from the root by random legal steps.

    Also returns the (base, length) request whose rounding produced its bounds.
    """
    root = root_capability()
    while True:
        conditional = rng.random() < 0.5
        bits = rng.randrange(0, 15) if conditional else rng.randrange(0, ADDR_BITS)
        length = rng.randrange(0, 1 << bits) if bits else rng.randrange(0, 2)
        base = rng.randrange(0, (1 << ADDR_BITS) - length + 1)
        try:
            cap = set_bounds(set_addr(root, base), length)
            if conditional:
                cap = set_op_bounds(cap, rng.choice(COND_KINDS), rng.randrange(0, cap.length + 1))
        except CapabilityError:
            continue
        cap = and_perms(cap, rng.getrandbits(6))
        if rng.random() < 0.8:
            addr = rng.randrange(cap.base, cap.top + 1)
        else:
            addr = rng.randrange(0, 1 << ADDR_BITS)
        moved = set_addr(cap, addr)
        if moved.tag:
            return moved, (base, length)


@dataclass
class CodecReport:
    n: int
    seed: int
    identity_failures: list[str] = field(default_factory=list)
    containment_failures: list[str] = field(default_factory=list)
    correction_mismatches: list[tuple] = field(default_factory=list)
    golden_failures: list[str] = field(default_factory=list)
    golden_checked: int = 0
    seconds: float = 0.0

    @property
    def failures(self) -> int:
        return (len(self.identity_failures) + len(self.containment_failures)
                + len(self.correction_mismatches) + len(self.golden_failures))

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_dict(self) -> dict:
        return {"schema": "monvm.codec/1", "n": self.n, "seed": self.seed,
                "identity_failures": self.identity_failures[:20],
                "containment_failures": self.containment_failures[:20],
                "correction_mismatches": [list(m) for m in self.correction_mismatches],
                "golden_checked": self.golden_checked,
                "golden_failures": self.golden_failures,
                "failures": self.failures, "passed": self.passed,
                "seconds": round(self.seconds, 3)}

    def summary(self) -> str:
        return "\n".join([
            f"random capabilities: {self.n} (seed {self.seed})",
            f"  decode(encode(c)) == c failures: {len(self.identity_failures)}",
            f"  rounded bounds containment failures: {len(self.containment_failures)}",
            f"correction table: 512 entries, {len(self.correction_mismatches)} mismatches",
            f"golden vectors: {self.golden_checked} checked, {len(self.golden_failures)} failures",
            "PASS" if self.passed else "FAIL",
        ])


def read_vectors(path: str | Path) -> list[tuple[int, EncodedCapability]]:
    """(line number, vector) for each non-comment line of a vector file."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if text:
            out.append((lineno, EncodedCapability.from_hex(text)))
    return out


def check_vectors(path: str | Path) -> tuple[int, list[str]]:
    """Decode and re-encode every vector; the bits must come back unchanged."""
    failures = []
    vectors = read_vectors(path)
    for lineno, enc in vectors:
        try:
            again = encode(decode(enc))
        except CapabilityError as exc:
            failures.append(f"line {lineno}: {exc}")
            continue
        if again.to_bytes() != enc.to_bytes() or again.tag != enc.tag:
            failures.append(f"line {lineno}: {enc.to_hex()} re-encodes as {again.to_hex()}")
    return len(vectors), failures


def fuzz(n: int, seed: int = 1, golden: str | Path | None = None) -> CodecReport:
    if n <= 0:
        raise ValueError("n must be positive")
    start = time.perf_counter()
    rng = random.Random(seed)
    report = CodecReport(n, seed)
    for _ in range(n):
        cap, (base, length) = random_capability(rng)
        if not (cap.base <= base and base + length <= cap.top):
            report.containment_failures.append(f"{cap!r} does not cover [{base:#x},+{length:#x})")
        try:
            back = decode(encode(cap))
        except CapabilityError as exc:
            report.identity_failures.append(f"{cap!r}: {exc}")
            continue
        if back != cap:
            report.identity_failures.append(f"{cap!r} decodes as {back!r}")
    report.correction_mismatches = correction_sweep()
    if golden is not None:
        report.golden_checked, report.golden_failures = check_vectors(golden)
    report.seconds = time.perf_counter() - start
    return report
