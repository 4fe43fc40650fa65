"""Experiment runner: single runs, sweeps, max-context search, equivalence checks.

Every run builds its own :class:`MemorySystem`, so runs never share pools.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .analytics import AnalyticalInputs, analytic_memory_model, flop_count
from .memtrack import (
    BudgetExceeded,
    MemSnapshot,
    MemorySystem,
    open_text,
    snapshot_dict,
    write_snapshots_csv,
)
from .model import Model, ModelConfig, Weights, init_weights
from .strategies import StrategyConfig, decode_greedy, decode_steps, prefill
from .tensor import ExecContext

RUN_KEYS = ("seq_len", "decode_tokens", "device_budget", "host_budget", "bandwidth",
            "staging_bytes", "accounting_only")
STRATEGY_KEYS = ("strategy", "partition_size", "offload")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    seq_len: int = 1024
    decode_tokens: int = 200
    device_budget: int | None = None
    host_budget: int | None = None
    bandwidth: float = 25e9
    staging_bytes: int = 0
    accounting_only: bool = False

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.decode_tokens < 0:
            raise ValueError("decode_tokens must be >= 0")
        if self.staging_bytes < 0:
            raise ValueError("staging_bytes must be non-negative")

    def to_flat(self) -> dict:
        flat = self.model.to_dict()
        flat.update(strategy=self.strategy.kind, partition_size=self.strategy.partition_size,
                    offload=self.strategy.offload)
        flat.update({k: getattr(self, k) for k in RUN_KEYS})
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> RunConfig:
        known = set(ModelConfig.field_names()) | set(STRATEGY_KEYS) | set(RUN_KEYS)
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            model = ModelConfig(**{k: flat[k] for k in ModelConfig.field_names() if k in flat})
            strategy = StrategyConfig(
                flat.get("strategy", "standard"),
                flat.get("partition_size", 2048),
                flat.get("offload", False),
            )
            return cls(model, strategy, **{k: flat[k] for k in RUN_KEYS if k in flat})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    """Read a flat JSON object of model, strategy and budget keys."""
    with open(path) as fh:
        try:
            flat = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(flat, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return RunConfig.from_flat(flat)


def make_tokens(config: ModelConfig, n: int) -> list[int]:
    """Synthetic prompt: uniform ids from a stream seeded by the model seed."""
    rng = np.random.default_rng([config.seed, 0x746F6B])
    return rng.integers(0, config.vocab_size, n).tolist()


def logits_checksum(logits: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(logits).tobytes(), digest_size=8).hexdigest()


DECODE_FIELDS = ("decode_peak_bytes", "decode_wall_seconds", "decode_tokens_per_second",
                 "generated_tokens")


@dataclass
class RunReport:
    config: dict
    strategy: dict
    seq_len: int
    n_decode: int
    mode: str
    weights_bytes: int
    kv_bytes: int | None
    device_peak_bytes: int
    host_peak_bytes: int
    prefill_peak_bytes: int | None
    bytes_device_to_host: int
    bytes_host_to_device: int
    transfer_count: int
    simulated_transfer_seconds: float
    prefill_wall_seconds: float | None
    flops: dict
    flops_analytic: dict
    scope_transients: dict
    logits_checksum: str | None
    analytic: dict
    snapshots: list[dict]
    failed_stage: str | None = None
    decode_peak_bytes: int | None = None
    decode_wall_seconds: float | None = None
    decode_tokens_per_second: float | None = None
    generated_tokens: list[int] | None = None

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def mem_snapshots(self) -> list[MemSnapshot]:
        return [MemSnapshot(**s) for s in self.snapshots]

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.failed_stage is not None:
            for name in DECODE_FIELDS:
                out.pop(name)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> RunReport:
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        return cls(**data)


REPORT_CSV_COLUMNS = (
    "strategy", "partition_size", "offload", "seq_len", "n_decode", "mode", "failed_stage",
    "weights_bytes", "kv_bytes", "device_peak_bytes", "host_peak_bytes", "prefill_peak_bytes",
    "decode_peak_bytes", "bytes_device_to_host", "bytes_host_to_device", "transfer_count",
    "simulated_transfer_seconds", "prefill_wall_seconds", "decode_tokens_per_second",
    "flops_prefill", "flops_final_block", "flops_decode", "mlp_transient_bytes",
    "analytic_total_bytes", "logits_checksum",
)


def report_csv_row(r: RunReport) -> list:
    values = {
        **{k: getattr(r, k) for k in REPORT_CSV_COLUMNS if hasattr(r, k)},
        "strategy": r.strategy["kind"],
        "partition_size": r.strategy["partition_size"],
        "offload": r.strategy["offload"],
        "flops_prefill": r.flops.get("prefill", 0),
        "flops_final_block": r.flops.get("final_block", 0),
        "flops_decode": r.flops.get("decode", 0),
        "mlp_transient_bytes": r.scope_transients.get("mlp"),
        "analytic_total_bytes": r.analytic.get("total_bytes"),
    }
    return ["" if values[c] is None else values[c] for c in REPORT_CSV_COLUMNS]


def _weights_for(cfg: RunConfig, weights: Weights | None) -> Weights:
    if weights is not None:
        if weights.config != cfg.model:
            raise ValueError("weights were built for a different model config")
        if not cfg.accounting_only and not weights.has_data:
            raise ValueError("compute runs need materialized weights")
        return weights
    return Weights.shapes_only(cfg.model) if cfg.accounting_only else init_weights(cfg.model)


def analytic_inputs(cfg: RunConfig) -> AnalyticalInputs:
    s = cfg.strategy
    M = math.ceil(cfg.seq_len / s.partition_size) if s.kind == "miniseq" else 1
    return AnalyticalInputs.from_config(
        cfg.model, cfg.seq_len, M=M, M_max=cfg.device_budget,
        O_offload=cfg.staging_bytes if s.offload else 0,
    )


def run_experiment(cfg: RunConfig, weights: Weights | None = None,
                   tokens: Sequence[int] | None = None) -> RunReport:
    """Prefill, reload if offloaded, decode ``cfg.decode_tokens`` tokens.

    Out-of-budget is not an exception here: the report records the stage
    that failed and carries no decode fields.
    """
    mem = MemorySystem(cfg.device_budget, cfg.host_budget, cfg.bandwidth)
    ctx = ExecContext(mem, compute=not cfg.accounting_only, width=cfg.model.element_width)
    if tokens is None:
        tokens = make_tokens(cfg.model, cfg.seq_len)
    elif len(tokens) != cfg.seq_len:
        raise ValueError("token count does not match seq_len")
    stage = "load"
    result = None
    checksum = None
    decode = {}
    failed = None
    try:
        model = Model(_weights_for(cfg, weights), ctx)
        if cfg.strategy.offload and cfg.staging_bytes:
            mem.device.alloc(cfg.staging_bytes, "staging")
        stage = "prefill"
        result = prefill(tokens, model, cfg.strategy)
        if ctx.compute:
            checksum = logits_checksum(result.last_logits.data)
        stage = "decode"
        steps: list[float] = []
        with mem.device.scope("decode") as rec:
            generated = decode_greedy(result, model, cfg.decode_tokens, steps)
        decode = dict(
            decode_peak_bytes=rec.peak,
            decode_wall_seconds=sum(steps),
            decode_tokens_per_second=1.0 / statistics.median(steps) if steps else None,
            generated_tokens=generated,
        )
    except BudgetExceeded:
        # a failure after the "prefill" snapshot happened while reloading
        if stage == "prefill" and any(s.label == "prefill" for s in mem.snapshots):
            stage = "reload"
        failed = stage

    analytic = analytic_memory_model(analytic_inputs(cfg))
    return RunReport(
        config=cfg.model.to_dict(),
        strategy=cfg.strategy.to_dict(),
        seq_len=cfg.seq_len,
        n_decode=cfg.decode_tokens,
        mode="accounting" if cfg.accounting_only else "compute",
        weights_bytes=cfg.model.param_count() * cfg.model.element_width,
        kv_bytes=result.cache.nbytes if result is not None else None,
        device_peak_bytes=mem.device.peak,
        host_peak_bytes=mem.host.peak,
        prefill_peak_bytes=result.peak_bytes if result is not None else None,
        bytes_device_to_host=mem.ledger.bytes_device_to_host,
        bytes_host_to_device=mem.ledger.bytes_host_to_device,
        transfer_count=mem.ledger.transfer_count,
        simulated_transfer_seconds=mem.ledger.simulated_transfer_seconds,
        prefill_wall_seconds=result.wall_seconds if result is not None else None,
        flops=dict(ctx.flops),
        flops_analytic=flop_count(cfg.model, cfg.strategy, cfg.seq_len, cfg.decode_tokens).to_dict(),
        scope_transients=dict(mem.device.scope_peaks),
        logits_checksum=checksum,
        analytic=analytic.to_dict(),
        snapshots=[snapshot_dict(s) for s in mem.snapshots],
        failed_stage=failed,
        **decode,
    )


@dataclass
class DecodeParity:
    seq_len: int
    n_decode: int
    tokens_per_second: dict[str, float]
    generated: dict[str, list[int]]

    @property
    def spread(self) -> float:
        """(fastest - slowest) / slowest."""
        rates = list(self.tokens_per_second.values())
        return max(rates) / min(rates) - 1.0


def measure_decode_parity(base: RunConfig, strategies: Sequence[StrategyConfig],
                          weights: Weights | None = None) -> DecodeParity:
    """Decode throughput of several strategies measured side by side.

    Every strategy is prefilled first; the decode steps then run round-robin,
    one step per strategy per round, so slow drift of the host machine hits
    all of them alike. Throughput is one over the median step time.
    """
    weights = _weights_for(base, weights)
    tokens = make_tokens(base.model, base.seq_len)
    runs = []
    for strat in strategies:
        mem = MemorySystem(base.device_budget, base.host_budget, base.bandwidth)
        model = Model(weights, ExecContext(mem, compute=not base.accounting_only,
                                           width=base.model.element_width))
        result = prefill(tokens, model, strat)
        runs.append((strat.name, decode_steps(result, model, base.decode_tokens), [], []))
    for _ in range(base.decode_tokens):
        for _, steps, times, out in runs:
            t0 = time.perf_counter()
            out.append(next(steps))
            times.append(time.perf_counter() - t0)
    for _, steps, _, _ in runs:
        next(steps, None)
    return DecodeParity(
        base.seq_len, base.decode_tokens,
        {name: 1.0 / statistics.median(times) for name, _, times, _ in runs},
        {name: out for name, _, _, out in runs},
    )


def emit_report(report: RunReport, path, fmt: str = "json") -> None:
    """Write one report as JSON or a single-row CSV; OSError on bad paths."""
    if fmt == "json":
        Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_CSV_COLUMNS)
            writer.writerow(report_csv_row(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def emit_memory_trace(run: RunReport | Iterable[MemSnapshot], path) -> None:
    snaps = run.mem_snapshots() if isinstance(run, RunReport) else list(run)
    write_snapshots_csv(snaps, path)


# --- sweeps ---------------------------------------------------------------

DEFAULT_LENGTHS = (1024, 4096, 16384, 65536)
DEFAULT_SWEEP_STRATEGIES = ("standard", "standard+offload", "miniseq", "miniseq+offload", "chunked")
SWEEP_COLUMNS = ("seq_len", "strategy", "status", "prefill_peak_bytes", "device_peak_bytes",
                 "ratio_vs_standard", "prefill_wall_seconds", "decode_tokens_per_second",
                 "simulated_transfer_seconds")
OOM = "OOM"


@dataclass
class SweepRow:
    seq_len: int | str
    strategy: str
    status: str
    prefill_peak_bytes: int | None = None
    device_peak_bytes: int | None = None
    ratio_vs_standard: float | None = None
    prefill_wall_seconds: float | None = None
    decode_tokens_per_second: float | None = None
    simulated_transfer_seconds: float | None = None


def sweep_context_lengths(base: RunConfig, lengths: Sequence[int] = DEFAULT_LENGTHS,
                          strategies: Sequence[str] = DEFAULT_SWEEP_STRATEGIES,
                          weights: Weights | None = None) -> list[SweepRow]:
    """One row per (length, strategy) plus a per-strategy mean row.

    The ratio divides a strategy's prefill peak by the Standard prefill peak
    under the same offload setting, falling back to plain Standard.
    """
    rows = []
    for S in lengths:
        cell = {}
        for name in strategies:
            strat = StrategyConfig.parse(name, base.strategy.partition_size)
            rep = run_experiment(replace(base, seq_len=S, strategy=strat), weights)
            cell[name] = rep
        for name, rep in cell.items():
            if not rep.ok:
                rows.append(SweepRow(S, name, OOM))
                continue
            offload = name.endswith("+offload")
            ref = cell.get("standard+offload" if offload else "standard")
            if ref is None or not ref.ok:
                ref = cell.get("standard")
            ratio = None
            if ref is not None and ref.ok:
                ratio = rep.prefill_peak_bytes / ref.prefill_peak_bytes
            rows.append(SweepRow(S, name, "ok", rep.prefill_peak_bytes, rep.device_peak_bytes,
                                 ratio, rep.prefill_wall_seconds, rep.decode_tokens_per_second,
                                 rep.simulated_transfer_seconds))
    for name in strategies:
        ok = [r for r in rows if r.strategy == name and r.status == "ok"]
        if not ok:
            continue
        rates = [r.decode_tokens_per_second for r in ok if r.decode_tokens_per_second]
        rows.append(SweepRow(
            "mean", name, "ok",
            prefill_wall_seconds=statistics.fmean(r.prefill_wall_seconds for r in ok),
            decode_tokens_per_second=statistics.fmean(rates) if rates else None,
        ))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], target) -> None:
    with open_text(target) as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            values = [getattr(r, c) for c in SWEEP_COLUMNS]
            if r.status == OOM:
                values = [r.seq_len, r.strategy] + [OOM] * (len(SWEEP_COLUMNS) - 2)
            writer.writerow(["" if v is None else v for v in values])


# --- maximum context --------------------------------------------------------

@dataclass
class MaxContextResult:
    strategy: str
    device_budget: int
    found: int
    probes: list[tuple[int, bool]]
    verified: bool


def search_max_context(base: RunConfig, strategy: StrategyConfig, device_budget: int,
                       weights: Weights | None = None, ceiling: int = 2**24) -> MaxContextResult:
    """Doubling then bisection on whether a full run stays within budget."""
    probes: dict[int, bool] = {}

    def ok(S: int) -> bool:
        if S not in probes:
            cfg = replace(base, seq_len=S, strategy=strategy, device_budget=device_budget)
            probes[S] = run_experiment(cfg, weights).ok
        return probes[S]

    if not ok(1):
        found = 0
    else:
        lo = 1
        while lo < ceiling and ok(min(2 * lo, ceiling)):
            lo = min(2 * lo, ceiling)
        if lo >= ceiling:
            found = ceiling
        else:
            hi = min(2 * lo, ceiling)
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if ok(mid):
                    lo = mid
                else:
                    hi = mid
            found = lo
    # monotonicity check: the answer passes and the next length fails
    verified = found == 0 or (ok(found) and (found >= ceiling or not ok(found + 1)))
    return MaxContextResult(strategy.name, device_budget, found, sorted(probes.items()), verified)


# --- equivalence ------------------------------------------------------------

@dataclass
class ArmResult:
    name: str
    logits_equal: bool
    cache_equal: bool
    tokens_equal: bool
    divergence: str | None = None

    @property
    def passed(self) -> bool:
        return self.logits_equal and self.cache_equal and self.tokens_equal


@dataclass
class EquivalenceReport:
    seq_len: int
    arms: list[ArmResult]

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.arms)

    def lines(self) -> list[str]:
        out = []
        for a in self.arms:
            status = "PASS" if a.passed else f"FAIL at {a.divergence}"
            out.append(f"S={self.seq_len} {a.name}: {status}")
        return out


def _first_diff(a: np.ndarray, b: np.ndarray) -> tuple[int, ...] | None:
    if a.shape != b.shape:
        return ()
    bad = np.argwhere(a.view(np.uint32) != b.view(np.uint32))
    return tuple(int(i) for i in bad[0]) if len(bad) else None


def _capture(cfg: RunConfig, weights: Weights, tokens, n_decode: int):
    ctx = ExecContext(MemorySystem(), compute=True)
    model = Model(weights, ctx)
    result = prefill(tokens, model, cfg.strategy)
    logits = result.last_logits.data.copy()
    cache = [(kv.keys().copy(), kv.values().copy()) for kv in result.cache.layers]
    generated = decode_greedy(result, model, n_decode)
    return logits, cache, generated


def perturbed(weights: Weights, layer: int = 0, role: str = "w_up", bit: int = 22) -> Weights:
    """Copy of ``weights`` with one bit of one entry flipped."""
    layers = [dict(lw) for lw in weights.layers]
    arr = layers[layer][role].copy()
    arr.view(np.uint32)[0, 0] ^= np.uint32(1 << bit)
    layers[layer][role] = arr
    return Weights(weights.config, dict(weights.globals), layers)


def equivalence_arms(S: int, c_list: Sequence[int]) -> list[StrategyConfig]:
    arms = []
    for C in c_list:
        arms.append(StrategyConfig("miniseq", C, False))
        arms.append(StrategyConfig("miniseq", C, True))
        arms.append(StrategyConfig("chunked", C))
    return arms


def equivalence_check(S: int, c_list: Sequence[int], seed: int = 0,
                      model: ModelConfig | None = None, n_decode: int = 20,
                      self_test: bool = False, weights: Weights | None = None) -> EquivalenceReport:
    """Compare every mini-sequence and chunked arm against one Standard run.

    With ``self_test`` the first arm runs on weights with one flipped bit,
    which must be reported as a mismatch.
    """
    config = model if model is not None else ModelConfig(seed=seed)
    if model is not None and model.seed != seed:
        config = replace(model, seed=seed)
    if weights is None or weights.config != config:
        weights = init_weights(config)
    tokens = make_tokens(config, S)
    base = RunConfig(config, StrategyConfig(), seq_len=S)
    ref_logits, ref_cache, ref_tokens = _capture(base, weights, tokens, n_decode)
    arms = []
    for i, strat in enumerate(equivalence_arms(S, c_list)):
        w = perturbed(weights) if self_test and i == 0 else weights
        logits, cache, generated = _capture(replace(base, strategy=strat), w, tokens, n_decode)
        name = f"{strat.name} C={strat.partition_size}"
        where = None
        d = _first_diff(ref_logits, logits)
        logits_ok = d is None
        if d is not None:
            where = f"logits{list(d)}"
        cache_ok = True
        for layer, ((rk, rv), (k, v)) in enumerate(zip(ref_cache, cache)):
            for label, a, b in (("K", rk, k), ("V", rv, v)):
                d = _first_diff(a, b)
                if d is not None and cache_ok:
                    cache_ok = False
                    where = where or f"layer {layer} {label}{list(d)}"
        tokens_ok = generated == ref_tokens
        if not tokens_ok and where is None:
            t = next(j for j, (x, y) in enumerate(zip(generated, ref_tokens)) if x != y)
            where = f"token {t}"
        arms.append(ArmResult(name, logits_ok, cache_ok, tokens_ok, where))
    return EquivalenceReport(S, arms)
