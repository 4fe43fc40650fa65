"""Prefill peak of each strategy relative to the standard pass, by prompt length.

Accounting-only runs replay the exact allocation sequence of a real forward
pass without doing the arithmetic, so long prompts cost milliseconds.

    python3 demos/memory_sweep.py
"""

from mominfer import RunConfig, StrategyConfig, sweep_context_lengths
from mominfer.model import ModelConfig

MiB = 2**20


def main():
    base = RunConfig(ModelConfig(), StrategyConfig(partition_size=2048), decode_tokens=0,
                     accounting_only=True)
    names = ["standard", "standard+offload", "miniseq", "miniseq+offload", "chunked"]
    rows = sweep_context_lengths(base, (4096, 16384, 65536), names)
    print(f"{'S':>6} {'strategy':<17} {'prefill peak':>13} {'ratio':>6}")
    for r in rows:
        if r.seq_len == "mean":
            continue
        print(f"{r.seq_len:>6} {r.strategy:<17} {r.prefill_peak_bytes / MiB:>9.1f} MiB {r.ratio_vs_standard:>6.3f}")


if __name__ == "__main__":
    main()
