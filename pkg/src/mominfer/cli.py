"""Command line entry point: ``mominfer run|sweep|maxlen|equiv|trace``.

Exit codes: 0 success, 1 equivalence mismatch, 2 I/O or config error,
3 device or host budget exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .analytics import AnalyticalInputs, predict_max_context
from .harness import (
    DEFAULT_LENGTHS,
    DEFAULT_SWEEP_STRATEGIES,
    ConfigError,
    RunConfig,
    emit_memory_trace,
    emit_report,
    equivalence_check,
    load_config,
    run_experiment,
    search_max_context,
    sweep_context_lengths,
    write_sweep_csv,
)
from .strategies import KINDS, StrategyConfig

EXIT_OK, EXIT_MISMATCH, EXIT_IO, EXIT_BUDGET = 0, 1, 2, 3

_UNSET = object()


def _bytes_or_unlimited(text: str) -> int | None:
    if text.lower() in ("unlimited", "none"):
        return None
    value = int(float(text))
    if value < 0:
        raise argparse.ArgumentTypeError("byte counts must be non-negative")
    return value


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat JSON config file")
    shared.add_argument("--strategy", choices=KINDS)
    shared.add_argument("--partition-size", type=int)
    shared.add_argument("--offload", action="store_true", default=None)
    shared.add_argument("--seq-len", type=int)
    shared.add_argument("--decode-tokens", type=int)
    shared.add_argument("--seed", type=int)
    shared.add_argument("--device-budget", type=_bytes_or_unlimited, default=_UNSET)
    shared.add_argument("--host-budget", type=_bytes_or_unlimited, default=_UNSET)
    shared.add_argument("--bandwidth", type=float)
    shared.add_argument("--out", help="output path")
    shared.add_argument("--format", choices=("json", "csv"), default="json")
    mode = shared.add_mutually_exclusive_group()
    mode.add_argument("--accounting-only", dest="accounting_only", action="store_true", default=None,
                      help="track bytes and flops without doing the arithmetic")
    mode.add_argument("--compute", dest="accounting_only", action="store_false",
                      help="do the arithmetic (needed for checksums and timings)")

    p = argparse.ArgumentParser(prog="mominfer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[shared], help="one prefill + decode run")
    sw = sub.add_parser("sweep", parents=[shared], help="peaks across context lengths")
    sw.add_argument("--lengths", type=_int_list, default=list(DEFAULT_LENGTHS))
    sw.add_argument("--strategies", default=",".join(DEFAULT_SWEEP_STRATEGIES))
    sub.add_parser("maxlen", parents=[shared], help="largest prompt within the device budget")
    eq = sub.add_parser("equiv", parents=[shared], help="bitwise equivalence against Standard")
    eq.add_argument("--partition-sizes", type=_int_list, default=[1, 16, 256, 257, 300])
    eq.add_argument("--self-test", action="store_true",
                    help="flip one weight bit in the first arm; the check must fail")
    sub.add_parser("trace", parents=[shared], help="per-stage memory snapshots as CSV")
    return p


def resolve_config(args, accounting_default: bool = False) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    model = cfg.model
    if args.seed is not None:
        model = dataclasses.replace(model, seed=args.seed)
    strategy = StrategyConfig(
        args.strategy or cfg.strategy.kind,
        args.partition_size or cfg.strategy.partition_size,
        cfg.strategy.offload if args.offload is None else args.offload,
    )
    updates = dict(model=model, strategy=strategy)
    for key in ("seq_len", "decode_tokens", "bandwidth"):
        if getattr(args, key) is not None:
            updates[key] = getattr(args, key)
    for key in ("device_budget", "host_budget"):
        if getattr(args, key) is not _UNSET:
            updates[key] = getattr(args, key)
    if args.accounting_only is not None:
        updates["accounting_only"] = args.accounting_only
    elif not args.config:
        updates["accounting_only"] = accounting_default
    return dataclasses.replace(cfg, **updates)


def _summary(report) -> str:
    fields = ("seq_len", "device_peak_bytes", "prefill_peak_bytes", "bytes_device_to_host",
              "bytes_host_to_device", "prefill_wall_seconds", "decode_tokens_per_second",
              "logits_checksum", "failed_stage")
    d = report.to_dict()
    return " ".join(f"{k}={d.get(k)}" for k in fields if k in d)


def _cmd_run(args) -> int:
    cfg = resolve_config(args)
    report = run_experiment(cfg)
    if args.out:
        emit_report(report, args.out, args.format)
    print(f"{cfg.strategy.name}: {_summary(report)}")
    return EXIT_OK if report.ok else EXIT_BUDGET


def _cmd_trace(args) -> int:
    cfg = resolve_config(args)
    report = run_experiment(cfg)
    if args.out:
        emit_memory_trace(report, args.out)
    else:
        emit_memory_trace(report, sys.stdout)
    return EXIT_OK if report.ok else EXIT_BUDGET


def _cmd_sweep(args) -> int:
    cfg = resolve_config(args, accounting_default=True)
    names = [s for s in args.strategies.split(",") if s]
    for name in names:
        StrategyConfig.parse(name)
    rows = sweep_context_lengths(cfg, args.lengths, names)
    write_sweep_csv(rows, args.out or sys.stdout)
    return EXIT_OK


def _cmd_maxlen(args) -> int:
    cfg = resolve_config(args, accounting_default=True)
    if cfg.device_budget is None:
        print("maxlen needs --device-budget", file=sys.stderr)
        return EXIT_IO
    res = search_max_context(cfg, cfg.strategy, cfg.device_budget)
    inp = AnalyticalInputs.from_config(
        cfg.model, 1, M_max=cfg.device_budget,
        O_offload=cfg.staging_bytes if cfg.strategy.offload else 0,
    )
    predicted = predict_max_context(inp, cfg.strategy)
    out = dict(strategy=res.strategy, device_budget=res.device_budget, found=res.found,
               predicted=predicted, verified=res.verified, probes=len(res.probes))
    text = json.dumps(out, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_equiv(args) -> int:
    cfg = resolve_config(args)
    S = args.seq_len or 257
    report = equivalence_check(S, args.partition_sizes, seed=cfg.model.seed, model=cfg.model,
                               n_decode=args.decode_tokens if args.decode_tokens is not None else 20,
                               self_test=args.self_test)
    for line in report.lines():
        print(line)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(dataclasses.asdict(report), fh, indent=2)
    return EXIT_OK if report.passed else EXIT_MISMATCH


COMMANDS = {"run": _cmd_run, "trace": _cmd_trace, "sweep": _cmd_sweep,
            "maxlen": _cmd_maxlen, "equiv": _cmd_equiv}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
