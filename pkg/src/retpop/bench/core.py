"""Imagination throughput benchmark.

Each run builds a seeded world model, checks that greedy rollouts agree
across generation modes and that every mode makes exactly its closed-form
number of sequential calls, and only then times the rollouts.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..retnet import ModelConfig
from ..world_model import (
    TokenHistogramPolicy,
    TokenTrajectory,
    WorldModelBundle,
    expected_calls,
    imagine_rollout,
    init_bundle,
    train_forward,
)

MODE_ALIASES = {"pop-default": "default", "pop-combined": "combined", "no-pop-oracle": "oracle"}
ALL_MODES = tuple(MODE_ALIASES)
TRAIN_FORWARD = "train-forward"
CSV_HEADER = ["config", "mode", "calls", "tokens_per_call", "wall_ms_mean", "wall_ms_std", "tok_per_s", "speedup"]


class EquivalenceError(RuntimeError):
    """Generation modes disagreed; timings would be meaningless."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    K: int = 64
    N: int = 512
    d_model: int = 256
    d_ffn: int = 1024
    L: int = 5
    h: int = 4
    H: int = 10
    blocks_per_chunk: int = 3
    batch: int = 1
    modes: tuple = ALL_MODES
    seed: int = 0
    precision: str = "f64"
    repetitions: int = 3
    context: int = 2
    n_actions: int = 18
    temperature: float = 0.5
    train_forward: bool = False
    max_params: int = 50_000_000

    @classmethod
    def reference(cls, **overrides) -> "BenchConfig":
        return replace(cls(), **overrides)

    def validate(self) -> None:
        for mode in self.modes:
            if mode not in MODE_ALIASES:
                raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(ALL_MODES)}")
        if self.precision not in ("f64", "f32"):
            raise ConfigError(f"precision must be f64 or f32, got {self.precision!r}")
        if min(self.K, self.N, self.d_model, self.d_ffn, self.L, self.h, self.H, self.batch,
               self.repetitions, self.context, self.blocks_per_chunk) < 1:
            raise ConfigError("all sizes must be positive")
        if self.n_params() > self.max_params:
            raise ConfigError(f"model would hold {self.n_params():,} parameters, above the cap of {self.max_params:,}")

    def n_params(self) -> int:
        d = self.d_model
        per_layer = 5 * d * d + 2 * d * self.d_ffn + 6 * d
        return self.L * per_layer + self.N * d + self.n_actions * d + self.K * d + d * (self.N + 5)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(n_layers=self.L, n_heads=self.h, d_model=self.d_model, d_ffn=self.d_ffn,
                               tokens_per_obs=self.K, vocab_size=self.N, n_actions=self.n_actions,
                               blocks_per_chunk=self.blocks_per_chunk)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def digest(self) -> str:
        fields = {k: v for k, v in asdict(self).items() if k not in ("modes", "repetitions", "train_forward")}
        return hashlib.sha1(json.dumps(fields, sort_keys=True).encode()).hexdigest()[:10]


@dataclass
class BenchRow:
    config: str
    mode: str
    calls: int
    tokens_per_call: float
    wall_ms_mean: float
    wall_ms_std: float
    wall_ms_median: float
    tok_per_s: float
    speedup: float = float("nan")


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def row(self, mode: str) -> BenchRow:
        for r in self.rows:
            if r.mode == mode:
                return r
        raise KeyError(mode)

    def __len__(self) -> int:
        return len(self.rows)


def build_model(config: BenchConfig) -> WorldModelBundle:
    config.validate()
    return init_bundle(config.model_config(), seed=config.seed, dtype=config.dtype)


def make_contexts(config: BenchConfig, bundle: WorldModelBundle) -> list[TokenTrajectory]:
    rng = np.random.default_rng([config.seed, 11])
    c = bundle.config
    return [
        TokenTrajectory(rng.integers(0, c.vocab_size, (config.context, c.tokens_per_obs)),
                        rng.integers(0, c.n_actions, config.context))
        for _ in range(config.batch)
    ]


def equivalence_gate(config: BenchConfig, bundle: WorldModelBundle | None = None,
                     modes=ALL_MODES) -> dict[str, int]:
    """Greedy rollouts must match token for token across ``modes`` and make
    exactly the closed-form number of sequential calls. Returns the call counts."""
    bundle = build_model(config) if bundle is None else bundle
    contexts = make_contexts(config, bundle)
    policy = TokenHistogramPolicy(bundle.config.vocab_size, bundle.config.n_actions, seed=config.seed)
    traces = {m: imagine_rollout(bundle, contexts, policy, config.H, MODE_ALIASES[m], temperature=0.0,
                                 seed=config.seed) for m in modes}
    ref_mode = modes[0]
    ref = traces[ref_mode]
    for mode, tr in traces.items():
        want = expected_calls(MODE_ALIASES[mode], config.H, bundle.K)
        if tr.sequential_call_count != want:
            raise EquivalenceError(f"{mode}: {tr.sequential_call_count} sequential calls, expected {want}")
        for name in ("obs", "actions", "rewards", "dones"):
            if not np.array_equal(getattr(tr, name), getattr(ref, name)):
                raise EquivalenceError(f"{mode} and {ref_mode} disagree on imagined {name}")
    return {m: t.sequential_call_count for m, t in traces.items()}


def _time(fn, repetitions: int) -> list[float]:
    fn()  # warm-up
    out = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        out.append((time.perf_counter() - start) * 1e3)
    return out


def run_benchmark(config: BenchConfig, bundle: WorldModelBundle | None = None) -> BenchReport:
    """Gate, then time each requested mode. Model construction and the gate are not timed."""
    config.validate()
    bundle = build_model(config) if bundle is None else bundle
    gate_modes = tuple(dict.fromkeys(("pop-default", "no-pop-oracle") + tuple(config.modes)))
    equivalence_gate(config, bundle, gate_modes)

    contexts = make_contexts(config, bundle)
    policy = TokenHistogramPolicy(bundle.config.vocab_size, bundle.config.n_actions, seed=config.seed)
    digest = config.digest()
    generated = config.batch * config.H * bundle.K
    report = BenchReport()
    for mode in config.modes:
        last = {}

        def rollout(mode=mode):
            last["trace"] = imagine_rollout(bundle, contexts, policy, config.H, MODE_ALIASES[mode],
                                            temperature=config.temperature, seed=config.seed)

        walls = _time(rollout, config.repetitions)
        trace = last["trace"]
        want = expected_calls(MODE_ALIASES[mode], config.H, bundle.K)
        if trace.sequential_call_count != want:
            raise EquivalenceError(f"{mode}: {trace.sequential_call_count} sequential calls, expected {want}")
        report.rows.append(_row(digest, mode, trace.sequential_call_count,
                                float(np.mean(trace.call_costs)), walls, generated))

    if config.train_forward:
        rng = np.random.default_rng([config.seed, 13])
        segment = TokenTrajectory(rng.integers(0, bundle.config.vocab_size, (config.H, bundle.K)),
                                  rng.integers(0, bundle.config.n_actions, config.H))
        walls = _time(lambda: train_forward(segment, bundle), config.repetitions)
        n_chunks = -(-config.H // config.blocks_per_chunk)
        report.rows.append(_row(digest, TRAIN_FORWARD, n_chunks, config.H * (2 * bundle.K + 1) / n_chunks,
                                walls, config.H * bundle.K))

    if any(r.mode == "no-pop-oracle" for r in report.rows):
        base = report.row("no-pop-oracle").wall_ms_median
        for r in report.rows:
            if r.mode in MODE_ALIASES:
                r.speedup = base / r.wall_ms_median
    return report


def _row(digest, mode, calls, tokens_per_call, walls, generated) -> BenchRow:
    mean = statistics.fmean(walls)
    std = statistics.pstdev(walls) if len(walls) > 1 else 0.0
    return BenchRow(digest, mode, calls, tokens_per_call, mean, std, statistics.median(walls),
                    generated / (mean / 1e3))


def run_sweep(config: BenchConfig, Ks) -> BenchReport:
    report = BenchReport()
    for K in Ks:
        report.rows.extend(run_benchmark(replace(config, K=int(K))).rows)
    return report


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _csv_values(row: BenchRow) -> list[str]:
    return [_fmt(getattr(row, name)) for name in CSV_HEADER]


def emit_report(report: BenchReport, path=None, format: str = "csv") -> str:
    """Render the report as CSV or an aligned text table; write it if ``path`` is given."""
    if not report.rows:
        raise ValueError("empty benchmark report")
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in report.rows:
            writer.writerow(_csv_values(row))
        text = buf.getvalue()
    elif format == "text":
        header = CSV_HEADER[:6] + ["wall_ms_median"] + CSV_HEADER[6:]
        table = [header] + [[_fmt(getattr(r, name)) for name in header] for r in report.rows]
        widths = [max(len(line[i]) for line in table) for i in range(len(header))]
        text = "\n".join("  ".join(cell.rjust(w) for cell, w in zip(line, widths)) for line in table) + "\n"
    else:
        raise ValueError(f"unknown report format {format!r}")
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as err:
            raise OSError(f"cannot write report to {path}: {err}") from err
    return text


def read_report(path) -> list[dict]:
    """Parse a CSV report back into typed rows."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    casts = {"calls": int, "tokens_per_call": float, "wall_ms_mean": float, "wall_ms_std": float,
             "tok_per_s": float, "speedup": float}
    return [{k: casts.get(k, str)(v) for k, v in row.items()} for row in rows]
