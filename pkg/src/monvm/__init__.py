"""Simulator of conditional capabilities on a CHERI-style machine.

Submodules:

``capcodec``
    Compressed capability format with operation bounds, derivation and
    access checks.
``asm``, ``machine``, ``runtime``
    Assembler, tagged-memory machine and its heap allocator.
``mir``, ``backend``
    SSA intermediate form with the instrumentation passes, and lowering
    to machine assembly.
``harness``
    Detection corpus, overhead benchmarks and codec checks.
"""

from .asm import assemble
from .backend import BuildOptions, build
from .capcodec import (Capability, CpKind, EncodedCapability, EnforcementConfig, Mode, decode,
                       encode)
from .machine import Machine, RunResult, TrapKind, run
from .mir import interpret, parse_mir

__version__ = "0.1.0"
