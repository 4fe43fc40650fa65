"""Deterministic long-context inference with two-tier memory accounting.

Mini-sequence MLP partitioning, last-token final block, KV offload/reload and
chunked prefill on a small Llama-style decoder, plus the closed-form memory
model they are checked against.
"""

from .analytics import (
    AnalyticalInputs,
    FlopBreakdown,
    MemoryBreakdown,
    analytic_memory_model,
    flop_count,
    predict_max_context,
)
from .harness import (
    RunConfig,
    RunReport,
    emit_memory_trace,
    emit_report,
    equivalence_check,
    load_config,
    measure_decode_parity,
    run_experiment,
    search_max_context,
    sweep_context_lengths,
)
from .memtrack import (
    AccountingError,
    BudgetExceeded,
    MemoryPool,
    MemorySystem,
    MemSnapshot,
    TransferLedger,
    pool_free,
    pool_transfer,
)
from .model import KvCache, Model, ModelConfig, Weights, init_weights
from .strategies import (
    PrefillResult,
    StrategyConfig,
    decode_greedy,
    decode_steps,
    prefill,
    prefill_chunked,
    prefill_minisequence,
    prefill_standard,
    reload_cache,
)
from .tensor import ExecContext, Tensor

__version__ = "0.1.0"
