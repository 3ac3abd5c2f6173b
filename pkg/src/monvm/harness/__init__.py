"""Experiments: corpus detection, overhead benchmarks and codec checks."""

from importlib import resources
from pathlib import Path

from .corpus import (CaseConfig, CaseResult, ConfusionMatrix, CorpusCase, Expectation,
                     ManifestError, ParityReport, auto_init_parity, load_manifest, run_case,
                     test_corpus)


def data_path(*parts: str) -> Path:
    """Location of a file shipped in the package's data directory."""
    return Path(str(resources.files("monvm").joinpath("data", *parts)))


CORPUS_DIR = data_path("corpus")
BENCH_DIR = data_path("bench")
