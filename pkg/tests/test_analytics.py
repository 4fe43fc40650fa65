import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SMALL, make_model, tokens_for
from mominfer.analytics import (
    DEFAULT_CEILING,
    MB,
    AnalyticalInputs,
    analytic_memory_model,
    flop_count,
    predict_max_context,
    stage_bounds,
)
from mominfer.model import ModelConfig, Weights
from mominfer.strategies import StrategyConfig, decode_greedy, prefill

STD = StrategyConfig("standard")
CHUNK = StrategyConfig("chunked", 2048)
MOM = StrategyConfig("miniseq", 2048, True)


def test_memory_model_hand_values():
    kv = analytic_memory_model(AnalyticalInputs(S=1000, d=64, I=256, V=512, L=4, w=4)).kv_bytes
    assert kv == 2_048_000
    b = analytic_memory_model(AnalyticalInputs(S=1024, d=64, I=256, V=512, L=1, w=4))
    assert b.intermediate_bytes == 1_048_576
    m = analytic_memory_model(AnalyticalInputs(S=1024, d=64, I=256, V=512, L=1, w=4, M=8))
    assert m.intermediate_mini_bytes == 131_072


def test_memory_model_identities():
    inp = AnalyticalInputs(S=3000, d=128, I=512, V=32000, L=6, w=2, d_kv=32, M=7,
                           W_model=5 * MB, O_offload=MB, M_max=80 * MB)
    b = analytic_memory_model(inp)
    assert b.kv_bytes == 2 * 3000 * 32 * 6 * 2
    assert b.intermediate_bytes == max(3000 * 128, 3000 * 512, 32000) * 2
    assert b.intermediate_mini_bytes == math.ceil(3000 / 7) * 512 * 2
    assert b.total_bytes == 5 * MB + b.kv_bytes + b.intermediate_bytes
    assert b.available_bytes == 74 * MB


def test_vocab_can_win_the_max():
    b = analytic_memory_model(AnalyticalInputs(S=2, d=8, I=32, V=100_000, L=1, w=4))
    assert b.intermediate_bytes == 400_000


def test_inputs_validation():
    with pytest.raises(ValueError):
        AnalyticalInputs(S=0, d=1, I=1, V=2, L=1)
    with pytest.raises(ValueError):
        AnalyticalInputs(S=1, d=1, I=1, V=2, L=1, M=0)


def test_predict_mom_decode_bound_example():
    inp = AnalyticalInputs(S=1, d=64, I=1, V=2, L=4, w=4, W_model=10 * MB, M_max=100 * MB)
    found = predict_max_context(inp, StrategyConfig("miniseq", 1, True))
    assert found == (90 * 10**6) // 2048 == 43_945
    assert stage_bounds(inp, StrategyConfig("miniseq", 1, True), found)["decode"] <= 100 * MB


def test_predict_is_floor_of_closed_form():
    inp = AnalyticalInputs(S=1, d=256, I=1024, V=4096, L=4, w=4, W_model=25 * MB, M_max=89 * MB)
    # standard: W + 8192 S + 4096 S <= M_max
    assert predict_max_context(inp, STD) == (64 * MB) // (8192 + 4096)
    # chunked with C=2048 once S >= C: W + 8192 S + 2048 * 4096 <= M_max
    assert predict_max_context(inp, CHUNK) == (64 * MB - 2048 * 4096) // 8192


def test_predict_degenerate_cases():
    inp = AnalyticalInputs(S=1, d=1, I=1, V=2, L=1, w=1, W_model=10, M_max=10)
    assert predict_max_context(inp, STD) == 0
    tiny = AnalyticalInputs(S=1, d=1, I=1, V=2, L=1, w=1, W_model=0, M_max=10**30)
    assert predict_max_context(tiny, STD) == DEFAULT_CEILING
    assert predict_max_context(tiny, STD, ceiling=1000) == 1000


@settings(max_examples=150, deadline=None)
@given(
    st.integers(16, 1024), st.integers(1, 8), st.integers(1, 8), st.integers(2, 50_000),
    st.integers(1, 8), st.sampled_from([2, 4]), st.integers(0, 50 * MB), st.integers(1, 500 * MB),
    st.integers(1, 4096),
)
def test_predicted_ordering(d, kv_div, i_mul, V, L, w, W, room, C):
    """Standard <= Chunked <= MOM for any shared inputs."""
    inp = AnalyticalInputs(S=1, d=d, I=i_mul * d, V=V, L=L, w=w, d_kv=max(1, d // kv_div),
                           W_model=W, M_max=W + room)
    s = predict_max_context(inp, StrategyConfig("standard"))
    c = predict_max_context(inp, StrategyConfig("chunked", C))
    m = predict_max_context(inp, StrategyConfig("miniseq", C, True))
    assert s <= c <= m


def test_flop_final_block_ratio_is_exactly_S():
    cfg = ModelConfig()
    for S in (1, 100, 4096, 123_457):
        std = flop_count(cfg, STD, S)
        mini = flop_count(cfg, MOM, S)
        assert std.final_block == S * mini.final_block
        assert std.prefill == mini.prefill


def test_flop_decode_is_strategy_independent():
    cfg = ModelConfig()
    values = {flop_count(cfg, s, 777, 200).decode for s in (STD, CHUNK, MOM, StrategyConfig("miniseq", 64))}
    assert len(values) == 1


def test_flop_growth_exponents():
    cfg = ModelConfig()
    S = np.array([1024, 2048, 4096])
    attn = [flop_count(cfg, STD, int(s)).prefill_attention for s in S]
    mlp = [flop_count(cfg, STD, int(s)).prefill_mlp for s in S]
    attn_slope = np.polyfit(np.log(S), np.log(attn), 1)[0]
    mlp_slope = np.polyfit(np.log(S), np.log(mlp), 1)[0]
    assert attn_slope == pytest.approx(2.0, abs=0.01)
    assert mlp_slope == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("name", ["standard", "miniseq", "miniseq+offload", "chunked"])
@pytest.mark.parametrize("S", [1, 13, 50])
def test_flop_formula_matches_runtime_counter(name, S):
    """Closed form and the counters incremented by the kernels agree exactly."""
    strat = StrategyConfig.parse(name, 7)
    model = make_model(Weights.shapes_only(SMALL), compute=False)
    res = prefill(list(range(S)), model, strat)
    decode_greedy(res, model, 5)
    counted = model.ctx.flops
    predicted = flop_count(SMALL, strat, S, 5)
    assert counted["prefill"] == predicted.prefill
    assert counted["final_block"] == predicted.final_block
    assert counted["decode"] == predicted.decode


def test_measured_minisequence_transient_matches_ceiling_form():
    cfg = ModelConfig()
    S, M = 8192, 8
    model = make_model(Weights.shapes_only(cfg), compute=False)
    prefill([0] * S, model, StrategyConfig("miniseq", math.ceil(S / M)))
    pred = analytic_memory_model(AnalyticalInputs.from_config(cfg, S, M=M)).intermediate_mini_bytes
    measured = model.ctx.mem.device.scope_peaks["mlp"]
    # gate and up buffers are each one ceil(S/M) x I block
    assert measured == 2 * pred
