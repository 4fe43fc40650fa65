"""Acceptance criteria, each checked at its stated tolerance.

Every test logs one PASS/FAIL line (collected in the terminal summary) before
asserting. Accounting-only runs are used wherever only bytes or FLOPs are
measured; they replay the exact allocation sequence of compute mode.
"""

import math
import time

import pytest

from mominfer.analytics import MB, AnalyticalInputs, analytic_memory_model, predict_max_context
from mominfer.harness import (
    RunConfig,
    equivalence_check,
    measure_decode_parity,
    run_experiment,
    search_max_context,
    sweep_context_lengths,
)
from mominfer.model import ModelConfig, Weights
from mominfer.strategies import StrategyConfig

DESK = ModelConfig()
W_DESK = DESK.param_count() * DESK.element_width


def meta(strategy=StrategyConfig(), **kw):
    kw.setdefault("decode_tokens", 0)
    return RunConfig(DESK, strategy, accounting_only=True, **kw)


def verdict(log, n, ok, detail):
    log(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    return ok


def test_criterion_1_exact_equivalence(acceptance_log, desk_weights):
    t0 = time.perf_counter()
    failures = []
    arms = 0
    for S in (1, 257, 1024, 4096):
        c_list = sorted({1, 16, S, S + 7})
        rep = equivalence_check(S, c_list, n_decode=20, weights=desk_weights)
        arms += len(rep.arms)
        failures += [line for line in rep.lines() if "FAIL" in line]
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    detail = f"{arms} arms bitwise equal to standard" if not failures else "; ".join(failures[:3])
    assert verdict(acceptance_log, 1, ok, f"{detail}, {elapsed:.0f} s (limit 120 s)")


def test_criterion_2_mlp_transient_scales_as_one_over_m(acceptance_log):
    S = 32768
    t0 = time.perf_counter()
    std = run_experiment(meta(seq_len=S)).scope_transients["mlp"]
    parts = []
    ok = True
    for M in (4, 8, 16):
        mini = run_experiment(meta(StrategyConfig("miniseq", math.ceil(S / M)), seq_len=S))
        ratio = mini.scope_transients["mlp"] / std
        ok &= 1 / M <= ratio <= 1.1 / M
        parts.append(f"M={M}: {ratio:.5f} (1/M={1 / M:.5f})")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    assert verdict(acceptance_log, 2, ok, ", ".join(parts) + f", {elapsed:.0f} s")


def test_criterion_3_analytic_fidelity(acceptance_log):
    hand = [
        analytic_memory_model(AnalyticalInputs(S=1000, d=64, I=256, V=512, L=4, w=4)).kv_bytes == 2_048_000,
        analytic_memory_model(AnalyticalInputs(S=1024, d=64, I=256, V=512, L=1, w=4)).intermediate_bytes
        == 1_048_576,
        analytic_memory_model(AnalyticalInputs(S=1024, d=64, I=256, V=512, L=1, w=4, M=8))
        .intermediate_mini_bytes == 131_072,
        predict_max_context(AnalyticalInputs(S=1, d=64, I=1, V=2, L=4, w=4, W_model=10 * MB,
                                             M_max=100 * MB), StrategyConfig("miniseq", 1, True)) == 43_945,
    ]
    parts = [f"hand values {sum(hand)}/{len(hand)}"]
    ok = all(hand)
    for S in (16384, 32768):
        measured = run_experiment(meta(seq_len=S)).prefill_peak_bytes
        predicted = analytic_memory_model(AnalyticalInputs.from_config(DESK, S)).total_bytes
        ratio = measured / predicted
        ok &= abs(ratio - 1) <= 0.15
        parts.append(f"S={S} standard peak {measured} vs predicted {predicted} ({ratio:.3f}x, limit 1+-0.15)")
    assert verdict(acceptance_log, 3, ok, "; ".join(parts))


def test_criterion_4_max_context_extension(acceptance_log):
    budget = W_DESK + 64 * MB
    base = meta(decode_tokens=200)
    t0 = time.perf_counter()
    arms = {
        "standard": StrategyConfig(),
        "chunked": StrategyConfig("chunked", 2048),
        "mom": StrategyConfig("miniseq", 2048, True),
    }
    found, predicted = {}, {}
    inp = AnalyticalInputs.from_config(DESK, 1, M_max=budget)
    for key, strat in arms.items():
        res = search_max_context(base, strat, budget)
        assert res.verified
        found[key] = res.found
        predicted[key] = predict_max_context(inp, strat)
    elapsed = time.perf_counter() - t0
    order = found["standard"] < found["chunked"] < found["mom"]
    doubled = found["mom"] >= 2 * found["standard"]
    within = {k: abs(found[k] / predicted[k] - 1) <= 0.10 for k in arms}
    ok = order and doubled and all(within.values()) and elapsed < 300
    detail = ", ".join(f"{k} found {found[k]} predicted {predicted[k]}"
                       f"{'' if within[k] else ' (outside 10%)'}" for k in arms)
    detail += (f"; ordering {'ok' if order else 'violated'}, mom/standard {found['mom'] / found['standard']:.2f}"
               f" (need >= 2), {elapsed:.0f} s")
    assert verdict(acceptance_log, 4, ok, detail)


def test_criterion_5_ratio_trend(acceptance_log):
    lengths = (4096, 16384, 65536)
    rows = sweep_context_lengths(meta(StrategyConfig(partition_size=2048)), lengths,
                                 ["standard", "standard+offload", "miniseq", "miniseq+offload"])
    ratio = {(r.seq_len, r.strategy): r.ratio_vs_standard for r in rows if r.seq_len != "mean"}
    plain = [ratio[(S, "miniseq")] for S in lengths]
    off = [ratio[(S, "miniseq+offload")] for S in lengths]
    decreasing = all(a > b for a, b in zip(plain, plain[1:])) and all(a > b for a, b in zip(off, off[1:]))
    lower = all(o < p for o, p in zip(off, plain))
    detail = (f"mini/standard {[round(r, 3) for r in plain]}, with offload {[round(r, 3) for r in off]}"
              f" at S={list(lengths)}")
    assert verdict(acceptance_log, 5, decreasing and lower, detail)


def test_criterion_6_offload_ledger_conservation(acceptance_log, desk_weights):
    cases = [(meta(StrategyConfig("miniseq", 2048, True), seq_len=S, decode_tokens=5), None)
             for S in (1, 1000, 4096, 16384)]
    cases.append((RunConfig(DESK, StrategyConfig("miniseq", 64, True), seq_len=257, decode_tokens=5),
                  desk_weights))
    ok = True
    worst = 0.0
    for cfg, weights in cases:
        rep = run_experiment(cfg, weights)
        kv = 2 * cfg.seq_len * DESK.kv_dim * DESK.n_layers * DESK.element_width
        ok &= rep.bytes_device_to_host == rep.bytes_host_to_device == kv
        layer = kv // DESK.n_layers
        for s in rep.snapshots:
            if s["label"].startswith("prefill"):
                worst = max(worst, s["device_kv_peak"] / layer, s["device_kv"] / layer)
        ok &= worst <= 2
    detail = f"ledger equals 2*S*d_kv*L*w for {len(cases)} runs, max device kv during prefill {worst:.2f} layers"
    assert verdict(acceptance_log, 6, ok, detail)


def test_criterion_7_final_block_flops(acceptance_log):
    ok = True
    for S in (1, 257, 4096, 32768):
        std = run_experiment(meta(seq_len=S)).flops["final_block"]
        mini = run_experiment(meta(StrategyConfig("miniseq", 2048, True), seq_len=S)).flops["final_block"]
        ok &= std == S * mini
    assert verdict(acceptance_log, 7, ok, "standard final-block FLOPs = S x mini-sequence for S in 1, 257, 4096, 32768")


def test_criterion_8_decode_parity(acceptance_log, desk_weights):
    S, n = 16384, 200
    strats = [StrategyConfig(), StrategyConfig("miniseq", 2048, True), StrategyConfig("miniseq", 2048),
              StrategyConfig("chunked", 2048)]
    flops = {s.name: run_experiment(meta(s, seq_len=S, decode_tokens=n)).flops["decode"] for s in strats}
    same_flops = len(set(flops.values())) == 1
    timed = [strats[0], strats[1], strats[3]]
    parity = measure_decode_parity(RunConfig(DESK, seq_len=S, decode_tokens=n), timed, desk_weights)
    same_tokens = len({tuple(g) for g in parity.generated.values()}) == 1
    ok = same_flops and same_tokens and parity.spread <= 0.05
    rates = ", ".join(f"{k} {v:.2f} tok/s" for k, v in parity.tokens_per_second.items())
    detail = (f"decode FLOPs {'identical' if same_flops else flops}; {rates}; spread {parity.spread:.1%}"
              f" (limit 5%)")
    assert verdict(acceptance_log, 8, ok, detail)


def test_criterion_9_trace_shape(acceptance_log):
    rep = run_experiment(meta(seq_len=16384, decode_tokens=200))
    snaps = rep.mem_snapshots()
    top = max(snaps, key=lambda s: s.device_peak)
    prefill_peak = max(s.device_peak for s in snaps if s.stage == "prefill")
    decode = [s for s in snaps if s.stage == "decode"]
    ok = top.stage == "prefill" and len(decode) == 200 and all(s.device_current < prefill_peak for s in decode)
    detail = (f"trace max {top.device_peak} at '{top.label}', highest decode current "
              f"{max(s.device_current for s in decode)} < prefill peak {prefill_peak}")
    assert verdict(acceptance_log, 9, ok, detail)
