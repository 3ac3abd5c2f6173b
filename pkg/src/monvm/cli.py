"""``monvm``: run, build and evaluate conditional-capability programs."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .asm import ParseError as AsmParseError
from .asm import assemble
from .backend import BUILD_MODES, BuildOptions, LoweringError, build
from .capcodec import CapabilityError, EncodedCapability, EnforcementConfig, Mode, decode
from .harness import BENCH_DIR, CORPUS_DIR, CaseConfig, ManifestError, auto_init_parity, data_path
from .harness import test_corpus as run_corpus
from .harness.bench import ALLOC_VOLUME, BenchError, bench
from .harness.codec_check import fuzz
from .machine import DEFAULT_FUEL, DEFAULT_MEMORY, ConfigError, run
from .mir import InstrumentMode, ParseError, VerifyError, parse_mir

GOLDEN_VECTORS = data_path("golden_vectors.txt")


class UsageError(Exception):
    pass


def _write_json(path: str | None, payload: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2, default=str) + "\n")


def _add_build_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--instrument", choices=[m.value for m in InstrumentMode], default="all",
                   help="which stack allocations get an operation bound")
    p.add_argument("--linearize", dest="linearize", action="store_true", default=True)
    p.add_argument("--no-linearize", dest="linearize", action="store_false",
                   help="skip store linearization")
    p.add_argument("--registers", type=int, default=8, metavar="K",
                   help="allocatable registers (default 8)")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=[m.value for m in Mode], default="wbr")
    p.add_argument("--strict-store", action="store_true",
                   help="also trap stores beyond the operation top")
    p.add_argument("--auto-init", action="store_true",
                   help="read uninitialised memory as zero instead of trapping")
    p.add_argument("--fuel", type=int, default=DEFAULT_FUEL)
    p.add_argument("--mem", type=int, default=DEFAULT_MEMORY, metavar="BYTES")


def _build_options(args, mode: str) -> BuildOptions:
    return BuildOptions(mode, InstrumentMode(args.instrument), args.linearize, args.registers)


def cmd_run(args) -> int:
    path = Path(args.file)
    text = path.read_text()
    source = build(parse_mir(text), _build_options(args, args.mode)) if path.suffix == ".mir" else text
    config = EnforcementConfig(Mode(args.mode), args.strict_store, args.auto_init)
    result = run(assemble(source), config, args.fuel, args.mem)
    for value in result.output:
        print(value)
    if result.status == "halted":
        print(f"EXIT {result.exit_code}")
    else:
        print(result.trap)
        if result.trap.message:
            print(f"  {result.trap.message}")
        if result.trap.instruction:
            print(f"  at: {result.trap.instruction}")
    if result.zero_filled:
        print(f"note: {len(result.zero_filled)} loads were zero-filled")
    counters = " ".join(f"{k}={v}" for k, v in result.counters.items())
    print(f"instructions: {result.instructions} ({counters})")
    _write_json(args.json, {
        "schema": "monvm.run/1", "status": result.status, "exit_code": result.exit_code,
        "trap": str(result.trap) if result.trap else None, "output": result.output,
        "counters": result.counters, "instructions": result.instructions,
        "zero_filled": result.zero_filled})
    return 0 if result.status == "halted" else 1


def cmd_build(args) -> int:
    module = parse_mir(Path(args.file).read_text())
    opts = _build_options(args, args.mode)
    text = build(module, BuildOptions(opts.mode, opts.instrument, opts.linearize,
                                      opts.registers, args.comments))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_test_corpus(args) -> int:
    config = CaseConfig(args.mode, args.strict_store, args.auto_init,
                        InstrumentMode(args.instrument), args.linearize, args.registers,
                        args.fuel, args.mem)
    matrix = run_corpus(args.dir, config, jobs=args.jobs)
    if args.verbose:
        for case in matrix.cases:
            detail = case.trap or (f"EXIT {case.exit_code}" if case.status == "halted" else case.message)
            mark = "DEVIATION " if case.deviation else ""
            print(f"{mark}{case.id:28} {case.expected:34} {case.verdict:9} {detail}")
    print(matrix.summary())
    print(f"bad_detected={matrix.bad_detected} bad_missed={matrix.bad_missed} "
          f"good_passed={matrix.good_passed} good_flagged={matrix.good_flagged} "
          f"({matrix.seconds:.2f}s)")
    for case in matrix.deviations:
        print(f"deviation: {case.id} expected {case.expected}, got "
              f"{case.trap or case.status} {case.message}".rstrip())
    payload = matrix.to_dict()
    if args.parity:
        parity = auto_init_parity(args.dir, config)
        print(parity.summary())
        print(f"auto-init: all complete={parity.all_complete} parity={parity.all_parity}")
        payload["parity"] = parity.to_dict()
    _write_json(args.json, payload)
    return 1 if matrix.deviations else 0


def cmd_bench(args) -> int:
    report = bench(args.dir, volume=args.volume)
    print(report.summary())
    _write_json(args.json, report.to_dict())
    return 0


def cmd_codec(args) -> int:
    if args.codec_cmd == "decode":
        try:
            enc = EncodedCapability.from_hex(args.vector)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        cap = decode(enc)
        print(repr(cap))
        print(f"base={cap.base:#x} top={cap.top:#x} length={cap.length:#x} addr={cap.addr:#x}")
        if cap.conditional:
            print(f"kind={cap.cp.name} op_top={cap.op_top:#x}")
        if cap.malformed:
            print("malformed: no legal derivation produces these bits")
        return 0
    report = fuzz(args.n, args.seed, args.golden)
    print(report.summary())
    _write_json(args.json, report.to_dict())
    return 0 if report.passed else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monvm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a .s or .mir program")
    p.add_argument("file")
    _add_run_flags(p)
    _add_build_flags(p)
    p.add_argument("--json", metavar="PATH", help="also write the result as JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("build", help="compile MIR to assembly")
    p.add_argument("file")
    p.add_argument("--mode", choices=BUILD_MODES, default="wbr")
    _add_build_flags(p)
    p.add_argument("--comments", action="store_true", help="annotate the assembly")
    p.add_argument("-o", "--output", metavar="OUT.s")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("test-corpus", help="run the detection corpus")
    p.add_argument("dir", nargs="?", default=str(CORPUS_DIR))
    _add_run_flags(p)
    _add_build_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="cases run in parallel")
    p.add_argument("--parity", action="store_true",
                   help="also compare trapping and auto-init runs of flagged cases")
    p.add_argument("-v", "--verbose", action="store_true", help="one line per case")
    p.add_argument("--json", metavar="PATH")
    p.set_defaults(func=cmd_test_corpus)

    p = sub.add_parser("bench", help="instruction-count overhead per build mode")
    p.add_argument("dir", nargs="?", default=str(BENCH_DIR))
    p.add_argument("--volume", type=int, default=ALLOC_VOLUME,
                   help="bytes allocated per chunk size in the allocator series")
    p.add_argument("--json", metavar="PATH")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("codec", help="capability codec checks")
    csub = p.add_subparsers(dest="codec_cmd", required=True)
    f = csub.add_parser("fuzz", help="random round trips and the correction sweep")
    f.add_argument("--n", type=int, default=100_000)
    f.add_argument("--seed", type=int, default=1)
    f.add_argument("--golden", default=str(GOLDEN_VECTORS), help="vector file to round-trip")
    f.add_argument("--json", metavar="PATH")
    d = csub.add_parser("decode", help="decode one tag:meta:cursor vector")
    d.add_argument("vector")
    p.set_defaults(func=cmd_codec)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if getattr(args, "registers", 8) < 4:
        parser.error("--registers must be at least 4")
    if getattr(args, "n", 1) <= 0:
        parser.error("--n must be positive")
    try:
        return args.func(args)
    except (OSError, UsageError, ManifestError, ConfigError) as exc:
        print(f"monvm: {exc}", file=sys.stderr)
        return 2
    except (ParseError, AsmParseError, VerifyError, LoweringError, CapabilityError,
            BenchError) as exc:
        print(f"monvm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
