"""Detection experiment: run every corpus case in a fresh machine and
tabulate how many bad cases trap and how many good ones are flagged."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..asm import ParseError as AsmParseError
from ..asm import assemble
from ..backend import BuildOptions, LoweringError, build
from ..capcodec import EnforcementConfig, Mode
from ..machine import DEFAULT_FUEL, DEFAULT_MEMORY, ConfigError, RunResult, run
from ..mir import InstrumentMode, ParseError, VerifyError, interpret, parse_mir

EXPECTATION_KINDS = ("exit", "trap", "false-positive")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Expectation:
    kind: str           # "exit", "trap" or "false-positive"
    value: str          # exit code or trap kind name

    @classmethod
    def parse(cls, text: str) -> Expectation:
        kind, _, value = text.strip().partition(":")
        if kind not in EXPECTATION_KINDS or not value:
            raise ManifestError(f"bad expectation {text!r}")
        if kind == "exit":
            int(value)
        return cls(kind, value)

    @property
    def bad(self) -> bool:
        return self.kind == "trap"

    def __str__(self) -> str:
        return f"{self.kind}:{self.value}"


@dataclass(frozen=True)
class CorpusCase:
    id: str
    source: Path
    expected: Expectation
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class CaseConfig:
    """Build and run settings shared by every case of a corpus run."""

    mode: str = "wbr"
    strict_store: bool = False
    auto_init: bool = False
    instrument: InstrumentMode = InstrumentMode.ALL
    linearize: bool = True
    registers: int = 8
    fuel: int = DEFAULT_FUEL
    memsize: int = DEFAULT_MEMORY

    @property
    def enforcement(self) -> EnforcementConfig:
        return EnforcementConfig(Mode(self.mode), self.strict_store, self.auto_init)

    @property
    def build_options(self) -> BuildOptions:
        return BuildOptions(self.mode, self.instrument, self.linearize, self.registers)


@dataclass
class CaseResult:
    id: str
    expected: str
    bad: bool
    status: str                       # "halted", "trapped" or "error"
    exit_code: int | None = None
    trap_kind: str | None = None
    trap: str | None = None
    trap_site: tuple[int, int, int] | None = None     # (pc, low, high)
    output: list[int] = field(default_factory=list)
    zero_filled: list[tuple[int, int, int]] = field(default_factory=list)
    instructions: int = 0
    message: str = ""
    flagged: bool = False
    deviation: bool = False

    @property
    def verdict(self) -> str:
        if self.bad:
            return "detected" if self.flagged else "missed"
        return "flagged" if self.flagged else "passed"


@dataclass
class ConfusionMatrix:
    bad_detected: int = 0
    bad_missed: int = 0
    good_passed: int = 0
    good_flagged: int = 0
    cases: list[CaseResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def total(self) -> int:
        return self.bad_detected + self.bad_missed + self.good_passed + self.good_flagged

    @property
    def deviations(self) -> list[CaseResult]:
        return [c for c in self.cases if c.deviation]

    def add(self, result: CaseResult) -> None:
        self.cases.append(result)
        name = {"detected": "bad_detected", "missed": "bad_missed",
                "passed": "good_passed", "flagged": "good_flagged"}[result.verdict]
        setattr(self, name, getattr(self, name) + 1)

    def to_dict(self) -> dict:
        return {
            "schema": "monvm.corpus/1",
            "config": self.config,
            "bad_detected": self.bad_detected, "bad_missed": self.bad_missed,
            "good_passed": self.good_passed, "good_flagged": self.good_flagged,
            "total": self.total, "deviations": [c.id for c in self.deviations],
            "seconds": round(self.seconds, 3),
            "cases": [dict(asdict(c), verdict=c.verdict) for c in self.cases],
        }

    def summary(self) -> str:
        bad = self.bad_detected + self.bad_missed
        good = self.good_passed + self.good_flagged
        return "\n".join([
            f"{'':10}{'cases':>8}{'flagged':>10}{'rate':>8}",
            f"{'bad':10}{bad:>8}{self.bad_detected:>10}{_rate(self.bad_detected, bad):>8}",
            f"{'good':10}{good:>8}{self.good_flagged:>10}{_rate(self.good_flagged, good):>8}",
            f"deviations from expectation: {len(self.deviations)}",
        ])


def _rate(part: int, whole: int) -> str:
    return f"{100 * part / whole:.0f}%" if whole else "-"


def load_manifest(directory: str | Path) -> list[CorpusCase]:
    """Read ``manifest.tsv`` (id, path, expectation, comma-separated tags)."""
    directory = Path(directory)
    path = directory / "manifest.tsv"
    if not path.exists():
        raise ManifestError(f"no manifest.tsv in {directory}")
    cases = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 3:
                raise ManifestError(f"{path}:{lineno}: expected id, path, expectation[, tags]")
            tags = tuple(t for t in row[3].split(",") if t) if len(row) > 3 else ()
            cases.append(CorpusCase(row[0], directory / row[1], Expectation.parse(row[2]), tags))
    ids = [c.id for c in cases]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate case ids")
    return cases


def compile_source(source: Path, config: CaseConfig) -> str:
    """Assembly text for a ``.mir`` or ``.s`` corpus file."""
    text = source.read_text()
    if source.suffix == ".s":
        return text
    return build(parse_mir(text), config.build_options)


def _flagged(result: RunResult) -> bool:
    if result.trap is not None and result.trap.kind.value == "OpBoundsViolation":
        return True
    return bool(result.zero_filled)


def _deviates(case: CorpusCase, res: CaseResult, config: CaseConfig) -> bool:
    exp = case.expected
    if res.status == "error":
        return True
    if config.mode != "wbr":
        # enforcement of initialisation is off: every case must run to the end
        return res.status != "halted" or (exp.kind == "exit" and res.exit_code != int(exp.value))
    if exp.kind == "exit":
        return (res.status != "halted" or res.exit_code != int(exp.value)
                or bool(res.zero_filled))
    if config.auto_init:
        return res.status != "halted" or not res.zero_filled
    return res.status != "trapped" or res.trap_kind != exp.value


def run_case(case: CorpusCase, config: CaseConfig = CaseConfig()) -> CaseResult:
    """Build and run one case in a fresh machine."""
    res = CaseResult(case.id, str(case.expected), case.expected.bad, "error")
    try:
        program = assemble(compile_source(case.source, config))
        result = run(program, config.enforcement, config.fuel, config.memsize)
    except (OSError, ParseError, VerifyError, LoweringError, AsmParseError, ConfigError) as exc:
        res.message = f"{type(exc).__name__}: {exc}"
        res.deviation = True
        return res
    res.status, res.exit_code, res.output = result.status, result.exit_code, result.output
    res.zero_filled, res.instructions = result.zero_filled, result.instructions
    if result.trap is not None:
        res.trap_kind, res.trap = result.trap.kind.value, str(result.trap)
        lo, hi = result.trap.access_range or (0, 0)
        res.trap_site = (result.trap.pc, lo, hi)
        res.message = result.trap.message
    res.flagged = _flagged(result)
    res.deviation = _deviates(case, res, config)
    return res


def test_corpus(directory: str | Path, config: CaseConfig = CaseConfig(),
                jobs: int = 1) -> ConfusionMatrix:
    """Run every case of the corpus in ``directory`` (one machine per case)."""
    cases = load_manifest(directory)
    start = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(run_case, cases, [config] * len(cases)))
    else:
        results = [run_case(c, config) for c in cases]
    matrix = ConfusionMatrix(config={k: (v.value if hasattr(v, "value") else v)
                                     for k, v in asdict(config).items()})
    for r in results:
        matrix.add(r)
    matrix.seconds = time.perf_counter() - start
    return matrix


test_corpus.__test__ = False     # not a pytest test despite its name


@dataclass
class ParityRow:
    id: str
    trap_site: tuple[int, int, int] | None      # where the wbr run stopped
    zero_filled: list[tuple[int, int, int]]     # loads auto-init turned into zero
    completed: bool                             # auto-init run reached its exit
    interp_uninit: int                          # uninitialised reads per the reference interpreter

    @property
    def parity(self) -> bool:
        return (self.completed and self.trap_site is not None
                and bool(self.zero_filled) and self.zero_filled[0] == self.trap_site)


@dataclass
class ParityReport:
    rows: list[ParityRow]

    @property
    def all_complete(self) -> bool:
        return all(r.completed for r in self.rows)

    @property
    def all_parity(self) -> bool:
        return all(r.parity for r in self.rows)

    def to_dict(self) -> dict:
        return {"schema": "monvm.parity/1", "all_complete": self.all_complete,
                "all_parity": self.all_parity,
                "cases": [dict(asdict(r), parity=r.parity) for r in self.rows]}

    def summary(self) -> str:
        lines = [f"{'case':28}{'wbr trap pc':>12}{'zero-filled':>13}{'first pc':>10}  parity"]
        for r in self.rows:
            trap = f"{r.trap_site[0]:#x}" if r.trap_site else "-"
            first = f"{r.zero_filled[0][0]:#x}" if r.zero_filled else "-"
            lines.append(f"{r.id:28}{trap:>12}{len(r.zero_filled):>13}{first:>10}  "
                         f"{'yes' if r.parity else 'NO'}")
        return "\n".join(lines)


def auto_init_parity(directory: str | Path, config: CaseConfig = CaseConfig()) -> ParityReport:
    """Run each case expected to flag twice, trapping and zero-filling.

    The first zero-filled load of the auto-init run must be the load the
    trapping run stopped at; the auto-init run must reach its exit.
    """
    rows = []
    for case in load_manifest(directory):
        if case.expected.kind == "exit":
            continue
        trapping = run_case(case, CaseConfig(**{**asdict(config), "mode": "wbr", "auto_init": False}))
        filling = run_case(case, CaseConfig(**{**asdict(config), "mode": "wbr", "auto_init": True}))
        uninit = 0
        if case.source.suffix == ".mir":
            uninit = len(interpret(parse_mir(case.source.read_text()), auto_init=True).uninit_reads)
        rows.append(ParityRow(case.id, trapping.trap_site, filling.zero_filled,
                              filling.status == "halted", uninit))
    return ParityReport(rows)
