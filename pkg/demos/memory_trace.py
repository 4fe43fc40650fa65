"""Device memory over one run, as a text chart, standard vs MOM.

Standard peaks at the full-width LM head before the first token; MOM keeps
at most one layer of K/V on the device during prefill and peaks in decode,
once the whole cache is back.

    python3 demos/memory_trace.py
"""

from mominfer import RunConfig, StrategyConfig, run_experiment
from mominfer.model import ModelConfig

MiB = 2**20


def chart(rep, width=50):
    snaps = [s for s in rep.mem_snapshots() if not s.label.startswith("decode") or s.label.endswith((" 1", "200"))]
    top = max(s.device_peak for s in snaps)
    for s in snaps:
        bar = "#" * round(width * s.device_peak / top)
        print(f"  {s.label:<16} {s.device_peak / MiB:7.1f} MiB {bar}")


def main():
    for strat in (StrategyConfig(), StrategyConfig("miniseq", 2048, True)):
        rep = run_experiment(RunConfig(ModelConfig(), strat, seq_len=16384, decode_tokens=200,
                                       accounting_only=True))
        print(f"{strat.name}: run peak {rep.device_peak_bytes / MiB:.1f} MiB")
        chart(rep)
        print()


if __name__ == "__main__":
    main()
