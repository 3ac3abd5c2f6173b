"""SSA intermediate representation, its passes and a reference interpreter."""

from .interp import InterpResult, interpret
from .ir import Block, Function, Instr, Module, format_module
from .parser import ParseError, parse_mir
from .passes import (InstrumentMode, bound_allocas, cp_instrument, optimize, store_linearize,
                     zero_heap)
from .verify import VerifyError, verify_module

__all__ = [
    "Block", "Function", "Instr", "InstrumentMode", "InterpResult", "Module", "ParseError",
    "VerifyError", "bound_allocas", "cp_instrument", "format_module", "interpret", "optimize",
    "parse_mir", "store_linearize", "verify_module", "zero_heap",
]
