"""From MIR to machine assembly: pass pipelines, register allocation, lowering."""

from __future__ import annotations

from dataclasses import dataclass

from ..capcodec import Mode
from ..mir import InstrumentMode, Module, bound_allocas, cp_instrument, optimize, store_linearize, zero_heap
from .lower import LoweredModule, LoweringError, lower, lower_module, start_stub
from .regalloc import Allocation, FunctionLayout, Interval, Reg, Slot, linear_scan

BUILD_MODES = ("nocap", "purecap", "wbr", "zeroed")


@dataclass(frozen=True)
class BuildOptions:
    """How to compile a module.

    ``mode`` picks the pass pipeline: ``nocap`` (no bounds), ``purecap``
    (bounded stack allocations), ``wbr`` (plus operation bounds) or
    ``zeroed`` (purecap with a zero-filling heap).
    """

    mode: str = "wbr"
    instrument: InstrumentMode = InstrumentMode.ALL
    linearize: bool = True
    registers: int = 8
    emit_comments: bool = False


def prepare(module: Module, opts: BuildOptions = BuildOptions()) -> Module:
    """Run the MIR pass pipeline selected by ``opts``."""
    if opts.mode not in BUILD_MODES:
        raise ValueError(f"unknown build mode {opts.mode!r}")
    module = optimize(module)
    if opts.mode == "nocap":
        return module
    module = bound_allocas(module)
    if opts.mode == "zeroed":
        return zero_heap(module)
    if opts.mode == "wbr":
        module = cp_instrument(module, opts.instrument)
        if opts.linearize:
            module = store_linearize(module)
    return module


def build(module: Module, opts: BuildOptions = BuildOptions()) -> str:
    """Compile ``module`` to assembly text."""
    return lower(prepare(module, opts), opts.registers, opts.emit_comments)


def run_mode(mode: str) -> Mode:
    """Enforcement mode a binary built in ``mode`` is meant to run under."""
    return {"nocap": Mode.NOCAP, "purecap": Mode.PURECAP, "zeroed": Mode.PURECAP}.get(mode, Mode.WBR)


__all__ = [
    "Allocation", "BUILD_MODES", "BuildOptions", "FunctionLayout", "Interval", "LoweredModule",
    "LoweringError", "Reg", "Slot", "build", "linear_scan", "lower", "lower_module", "prepare",
    "run_mode", "start_stub",
]
