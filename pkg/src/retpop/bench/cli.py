"""``bench`` command line: run, verify, sweep.

Exit codes: 0 success, 1 bad usage or configuration, 2 generation modes disagree.
Set ``RPOP_THREADS`` to cap BLAS threads.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from threadpoolctl import threadpool_limits

from ..serialization import ModelFormatError, load_bundle
from .core import (
    ALL_MODES,
    BenchConfig,
    ConfigError,
    EquivalenceError,
    emit_report,
    equivalence_gate,
    run_benchmark,
    run_sweep,
)

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _modes(text: str) -> tuple:
    if text == "all":
        return ALL_MODES
    modes = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in modes if m not in ALL_MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"unknown mode(s) {bad}; choose from {', '.join(ALL_MODES)} or all")
    return modes


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_model_args(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    p.add_argument("--preset", choices=["paper"], default="paper",
                   help="start from the reference configuration (the only preset; other flags override it)")
    if sweep:
        p.add_argument("--K", type=_int_list, help="comma-separated token counts, e.g. 16,32,64")
    else:
        p.add_argument("--model", help="load weights from an RPOPv1 bundle instead of seeding them")
        p.add_argument("--K", type=int, help="tokens per observation")
    p.add_argument("--N", type=int, help="vocabulary size")
    p.add_argument("--d-model", type=int)
    p.add_argument("--d-ffn", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--blocks-per-chunk", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--context", type=int, help="context blocks before imagination starts")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["f64", "f32"])
    p.add_argument("--max-params", type=int, help="refuse models larger than this")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bench", description="Imagination throughput benchmark")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="gate, then time each mode")
    _add_model_args(run)
    run.add_argument("--mode", type=_modes, default=ALL_MODES, help="comma list of modes or 'all'")
    run.add_argument("--reps", type=int)
    run.add_argument("--train-forward", action="store_true", help="also time the teacher-forced pass")
    run.add_argument("--out", help="write the report here instead of stdout")
    run.add_argument("--format", choices=["csv", "text"], default="csv")

    verify = sub.add_parser("verify", help="only run the equivalence gate")
    _add_model_args(verify)
    verify.add_argument("--mode", type=_modes, default=ALL_MODES)

    sweep = sub.add_parser("sweep", help="run over several observation sizes")
    _add_model_args(sweep, sweep=True)
    sweep.add_argument("--mode", type=_modes, default=ALL_MODES)
    sweep.add_argument("--reps", type=int)
    sweep.add_argument("--out")
    sweep.add_argument("--format", choices=["csv", "text"], default="csv")
    return parser


_FIELD_MAP = {
    "K": "K", "N": "N", "d_model": "d_model", "d_ffn": "d_ffn", "layers": "L", "heads": "h",
    "horizon": "H", "blocks_per_chunk": "blocks_per_chunk", "batch": "batch", "context": "context",
    "seed": "seed", "precision": "precision", "max_params": "max_params", "reps": "repetitions",
}


def config_from_args(args, skip=()) -> BenchConfig:
    overrides = {
        field: getattr(args, arg)
        for arg, field in _FIELD_MAP.items()
        if arg not in skip and getattr(args, arg, None) is not None
    }
    overrides["modes"] = args.mode
    if getattr(args, "train_forward", False):
        overrides["train_forward"] = True
    config = BenchConfig.reference(**overrides)
    config.validate()
    return config


def _bundle_for(args, config: BenchConfig):
    if not args.model:
        return config, None
    bundle = load_bundle(args.model)
    c = bundle.config
    config = replace(config, K=c.tokens_per_obs, N=c.vocab_size, d_model=c.d_model, d_ffn=c.d_ffn,
                     L=c.n_layers, h=c.n_heads, n_actions=c.n_actions)
    return config, bundle.astype(config.dtype)


def _emit(report, args) -> None:
    text = emit_report(report, args.out, args.format)
    if args.out is None:
        sys.stdout.write(text)


def _dispatch(args) -> int:
    if args.command == "sweep":
        Ks = args.K or [16, 32, 64]
        config = config_from_args(args, skip=("K",))
        report = run_sweep(config, Ks)
        _emit(report, args)
        return EXIT_OK

    config = config_from_args(args)
    config, bundle = _bundle_for(args, config)
    if args.command == "verify":
        counts = equivalence_gate(config, bundle, tuple(dict.fromkeys(("pop-default",) + config.modes)))
        for mode, calls in counts.items():
            print(f"{mode}: {calls} sequential calls, trajectories identical")
        return EXIT_OK

    report = run_benchmark(config, bundle)
    _emit(report, args)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("RPOP_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"bench: RPOP_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=limit):
            return _dispatch(args)
    except EquivalenceError as err:
        print(f"bench: equivalence check failed: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigError, ModelFormatError, OSError) as err:
        print(f"bench: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
