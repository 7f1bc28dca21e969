from .core import (
    ALL_MODES,
    CSV_HEADER,
    BenchConfig,
    BenchReport,
    BenchRow,
    ConfigError,
    EquivalenceError,
    emit_report,
    equivalence_gate,
    read_report,
    run_benchmark,
    run_sweep,
)

__all__ = [
    "ALL_MODES",
    "CSV_HEADER",
    "BenchConfig",
    "BenchReport",
    "BenchRow",
    "ConfigError",
    "EquivalenceError",
    "emit_report",
    "equivalence_gate",
    "read_report",
    "run_benchmark",
    "run_sweep",
]
