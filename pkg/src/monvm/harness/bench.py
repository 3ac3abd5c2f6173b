"""Overhead experiment: instruction counts of the same source under each
build mode, plus the allocator churn series over chunk sizes."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..asm import assemble
from ..backend import BuildOptions, build
from ..capcodec import EnforcementConfig, Mode
from ..machine import DEFAULT_FUEL, Machine, RunResult
from ..mir import Module, parse_mir

BENCH_MODES = ("nocap", "purecap", "wbr-no-linearize", "wbr", "zeroed")
ALLOC_MODES = ("nocap", "wbr", "zeroed")
ALLOC_SIZES = tuple(32 << k for k in range(8))         # 32 B .. 4 KiB
ALLOC_VOLUME = 1 << 20
ALLOC_KERNEL = "churn"


class BenchError(RuntimeError):
    pass


def _setup(mode: str) -> tuple[BuildOptions, EnforcementConfig, bool | None]:
    """Build options, enforcement and heap flavour for a benchmark mode.

    ``wbr-no-linearize`` keeps the instrumentation and the conditional heap
    but drops store linearization; the stale copies that leaves behind
    would trap, so its run only enforces conventional bounds.
    """
    if mode == "wbr-no-linearize":
        return BuildOptions("wbr", linearize=False), EnforcementConfig(Mode.PURECAP), True
    if mode == "zeroed":
        return BuildOptions("zeroed"), EnforcementConfig(Mode.PURECAP), None
    if mode in ("nocap", "purecap", "wbr"):
        return BuildOptions(mode), EnforcementConfig(Mode(mode)), None
    raise BenchError(f"unknown benchmark mode {mode!r}")


def run_mode(module: Module, mode: str, fuel: int = DEFAULT_FUEL) -> RunResult:
    """Compile ``module`` for ``mode`` and run it; it must exit cleanly."""
    opts, config, heap_op_bounds = _setup(mode)
    result = Machine(assemble(build(module, opts)), config,
                     heap_op_bounds=heap_op_bounds).run(fuel)
    if result.status != "halted":
        raise BenchError(f"{mode}: {result.trap}")
    return result


@dataclass
class ProgramOverhead:
    name: str
    counts: dict[str, int]
    output: list[int]

    def delta(self, mode: str, baseline: str = "nocap") -> float:
        return self.counts[mode] / self.counts[baseline] - 1

    @property
    def ordered(self) -> bool:
        """nocap <= purecap <= wbr-no-linearize <= wbr."""
        c = self.counts
        return c["nocap"] <= c["purecap"] <= c["wbr-no-linearize"] <= c["wbr"]

    @property
    def linearization_share(self) -> float:
        """Fraction of the wbr-over-purecap instructions due to linearization."""
        total = self.counts["wbr"] - self.counts["purecap"]
        return (self.counts["wbr"] - self.counts["wbr-no-linearize"]) / total if total else 0.0


@dataclass
class AllocatorRow:
    size: int
    mallocs: int
    counts: dict[str, int]

    def extra_per_malloc(self, mode: str) -> float:
        return (self.counts[mode] - self.counts["nocap"]) / self.mallocs


@dataclass
class OverheadReport:
    programs: list[ProgramOverhead] = field(default_factory=list)
    allocator: list[AllocatorRow] = field(default_factory=list)
    volume: int = ALLOC_VOLUME
    seconds: float = 0.0

    def program(self, name: str) -> ProgramOverhead:
        return next(p for p in self.programs if p.name == name)

    @property
    def wbr_allocator_constant(self) -> bool:
        extras = {row.extra_per_malloc("wbr") for row in self.allocator}
        return len(extras) <= 1

    @property
    def zeroed_scaling_error(self) -> float:
        """Largest relative gap between extra-count ratios and size ratios."""
        if not self.allocator:
            return 0.0
        first = self.allocator[0]
        worst = 0.0
        for row in self.allocator[1:]:
            ratio = row.extra_per_malloc("zeroed") / first.extra_per_malloc("zeroed")
            worst = max(worst, abs(ratio / (row.size / first.size) - 1))
        return worst

    def to_dict(self) -> dict:
        return {
            "schema": "monvm.bench/1",
            "programs": [dict(asdict(p), ordered=p.ordered,
                              linearization_share=p.linearization_share,
                              deltas={m: p.delta(m) for m in p.counts})
                         for p in self.programs],
            "allocator": {
                "volume": self.volume,
                "rows": [dict(asdict(r), extra_per_malloc={m: r.extra_per_malloc(m)
                                                           for m in r.counts if m != "nocap"})
                         for r in self.allocator],
                "wbr_constant": self.wbr_allocator_constant,
                "zeroed_scaling_error": self.zeroed_scaling_error,
            },
            "seconds": round(self.seconds, 3),
        }

    def summary(self) -> str:
        lines = []
        for p in self.programs:
            lines.append(f"{p.name}: instructions per mode (delta over nocap)")
            for mode, count in p.counts.items():
                lines.append(f"  {mode:18}{count:>10}  {100 * p.delta(mode):+6.2f}%")
            lines.append(f"  ordering nocap <= purecap <= wbr-no-linearize <= wbr: "
                         f"{'holds' if p.ordered else 'VIOLATED'}")
            lines.append(f"  share of wbr-over-purecap due to linearization: "
                         f"{100 * p.linearization_share:.1f}%")
        if self.allocator:
            lines.append(f"allocator churn, {self.volume} bytes per size: "
                         "extra instructions per malloc over nocap")
            lines.append(f"  {'size':>6}{'mallocs':>9}" + "".join(
                f"{m:>10}" for m in ALLOC_MODES if m != "nocap"))
            for row in self.allocator:
                lines.append(f"  {row.size:>6}{row.mallocs:>9}" + "".join(
                    f"{row.extra_per_malloc(m):>10.2f}" for m in ALLOC_MODES if m != "nocap"))
            lines.append(f"  wbr constant across sizes: {self.wbr_allocator_constant}; "
                         f"zeroed worst deviation from linear: {100 * self.zeroed_scaling_error:.2f}%")
        return "\n".join(lines)


def bench_program(name: str, module: Module, modes=BENCH_MODES) -> ProgramOverhead:
    results = {mode: run_mode(module, mode) for mode in modes}
    outputs = {tuple(r.output) for r in results.values()}
    if len(outputs) != 1:
        raise BenchError(f"{name}: output differs between modes")
    return ProgramOverhead(name, {m: r.instructions for m, r in results.items()},
                           results[modes[0]].output)


def _churn_module(kernel: str, size: int, count: int) -> Module:
    return parse_mir(kernel + f"""
func @main() -> int {{
entry:
  %r = call @{ALLOC_KERNEL}({size}, {count})
  ret 0
}}
""")


def allocator_series(kernel: str, sizes=ALLOC_SIZES, volume: int = ALLOC_VOLUME,
                     modes=ALLOC_MODES) -> list[AllocatorRow]:
    """Allocate and free ``volume`` bytes in chunks of each size, per mode."""
    if volume < max(sizes):
        raise BenchError(f"volume of {volume} bytes is smaller than the {max(sizes)}-byte chunk")
    rows = []
    for size in sizes:
        count = volume // size
        module = _churn_module(kernel, size, count)
        rows.append(AllocatorRow(size, count, {m: run_mode(module, m).instructions for m in modes}))
    return rows


def bench(directory: str | Path, volume: int = ALLOC_VOLUME, sizes=ALLOC_SIZES) -> OverheadReport:
    """Benchmark every ``*.mir`` in ``directory``.

    A file defining ``@churn(size, count)`` is the allocator kernel; every
    other file is a whole program measured in each build mode.
    """
    start = time.perf_counter()
    report = OverheadReport(volume=volume)
    for path in sorted(Path(directory).glob("*.mir")):
        text = path.read_text()
        module = parse_mir(text)
        if ALLOC_KERNEL in {f.name for f in module.functions}:
            report.allocator = allocator_series(text, sizes, volume)
        else:
            report.programs.append(bench_program(path.stem, module))
    report.seconds = time.perf_counter() - start
    return report
