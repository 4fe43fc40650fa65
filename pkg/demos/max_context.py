"""Longest prompt each strategy can serve under a fixed device budget.

The search runs the full pipeline (prefill, reload, 200 decode steps) in
accounting mode and bisects on success; the prediction is the closed-form
bound. The gap for standard and chunked is the full-width logits and the
two live SwiGLU projections that the closed form does not count.

    python3 demos/max_context.py
"""

from mominfer import AnalyticalInputs, RunConfig, StrategyConfig, predict_max_context, search_max_context
from mominfer.analytics import MB
from mominfer.model import ModelConfig


def main():
    cfg = ModelConfig()
    budget = cfg.param_count() * cfg.element_width + 64 * MB
    base = RunConfig(cfg, decode_tokens=200, accounting_only=True)
    inp = AnalyticalInputs.from_config(cfg, 1, M_max=budget)
    print(f"device budget {budget:,} bytes (weights + 64 MB)")
    for strat in (StrategyConfig(), StrategyConfig("chunked", 2048), StrategyConfig("miniseq", 2048, True)):
        res = search_max_context(base, strat, budget)
        pred = predict_max_context(inp, strat)
        print(f"  {strat.name:<16} found {res.found:>6}  predicted {pred:>6}  ({len(res.probes)} probes)")


if __name__ == "__main__":
    main()
