"""Closed-form memory model, maximum-context prediction and FLOP counts.

All byte quantities are plain integers; ``w`` is the element width so the
model can be evaluated for 2-byte formats even though the engine runs
float32.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from .model import ModelConfig
from .strategies import StrategyConfig

MB = 10**6
DEFAULT_CEILING = 2**31


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class AnalyticalInputs:
    S: int
    d: int
    I: int
    V: int
    L: int
    w: int = 4
    d_kv: int | None = None  # None means d
    M: int = 1
    W_model: int = 0
    O_offload: int = 0
    M_max: int | None = None

    def __post_init__(self):
        for name in ("S", "d", "I", "V", "L", "w", "M"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_kv is not None and self.d_kv < 1:
            raise ValueError("d_kv must be >= 1")
        if self.W_model < 0 or self.O_offload < 0:
            raise ValueError("W_model and O_offload must be non-negative")

    @property
    def kv_width(self) -> int:
        return self.d if self.d_kv is None else self.d_kv

    @classmethod
    def from_config(cls, config: ModelConfig, S: int, *, M: int = 1, M_max: int | None = None,
                    O_offload: int = 0, gqa: bool = False) -> AnalyticalInputs:
        return cls(
            S=S, d=config.d_model, I=config.d_ff, V=config.vocab_size, L=config.n_layers,
            w=config.element_width, d_kv=config.kv_dim if gqa else None, M=M,
            W_model=config.param_count() * config.element_width,
            O_offload=O_offload, M_max=M_max,
        )


@dataclass(frozen=True)
class MemoryBreakdown:
    kv_bytes: int
    intermediate_bytes: int
    intermediate_mini_bytes: int
    total_bytes: int
    available_bytes: int | None

    def to_dict(self) -> dict:
        return asdict(self)


def kv_bytes(S: int, d_kv: int, L: int, w: int) -> int:
    return 2 * S * d_kv * L * w


def analytic_memory_model(inp: AnalyticalInputs) -> MemoryBreakdown:
    kv = kv_bytes(inp.S, inp.kv_width, inp.L, inp.w)
    inter = max(inp.S * inp.d, inp.S * inp.I, inp.V) * inp.w
    inter_mini = _ceil_div(inp.S, inp.M) * inp.I * inp.w
    available = None if inp.M_max is None else inp.M_max - inp.W_model - inp.O_offload
    return MemoryBreakdown(kv, inter, inter_mini, inp.W_model + kv + inter, available)


def stage_bounds(inp: AnalyticalInputs, strategy: StrategyConfig, S: int) -> dict[str, int]:
    """Predicted device bytes of each binding stage for a prompt of S tokens."""
    kv = kv_bytes(S, inp.kv_width, inp.L, inp.w)
    C = min(strategy.partition_size, S)
    if strategy.kind == "standard":
        inter = max(S * inp.d, S * inp.I, inp.V) * inp.w
        return {"prefill": inp.W_model + kv + inter}
    if strategy.kind == "chunked" or not strategy.offload:
        return {"prefill": inp.W_model + kv + C * inp.I * inp.w}
    return {
        "prefill": inp.W_model + inp.O_offload + _ceil_div(kv, inp.L) + C * inp.I * inp.w,
        "decode": inp.W_model + kv,
    }


def predict_max_context(inp: AnalyticalInputs, strategy: StrategyConfig,
                        ceiling: int = DEFAULT_CEILING) -> int:
    """Largest S whose binding constraint fits in ``inp.M_max`` (``inp.S`` is ignored).

    Every bound is non-decreasing in S, so bisection finds the floor of the
    analytic solution. Returns 0 if nothing fits and ``ceiling`` if
    everything up to it does.
    """
    if inp.M_max is None:
        raise ValueError("M_max (device capacity) is required")
    if inp.M_max - inp.W_model - inp.O_offload <= 0:
        return 0

    def fits(S: int) -> bool:
        return max(stage_bounds(inp, strategy, S).values()) <= inp.M_max

    if not fits(1):
        return 0
    if fits(ceiling):
        return ceiling
    lo, hi = 1, ceiling
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class FlopBreakdown:
    prefill: int  # everything before the final block's MLP
    final_block: int  # final-block MLP plus LM head
    decode: int
    prefill_attention: int  # score and value products only
    prefill_mlp: int  # all MLP matmuls of the prompt pass

    @property
    def total_prefill(self) -> int:
        return self.prefill + self.final_block

    def to_dict(self) -> dict:
        return asdict(self)


def flop_count(config: ModelConfig, strategy: StrategyConfig, S: int, n_decode: int = 0) -> FlopBreakdown:
    """Multiply-add counts (2mkn per matmul) of the engine's execution.

    Causal attention visits ``pos + 1`` keys for the query at ``pos``; each
    visit costs 4 * head_dim flops per head (scores and value mix).
    """
    if S < 1 or n_decode < 0:
        raise ValueError("need S >= 1 and n_decode >= 0")
    d, kv, I, V, L = config.d_model, config.kv_dim, config.d_ff, config.vocab_size, config.n_layers
    proj = 2 * d * d + 2 * 2 * d * kv + 2 * d * d
    mlp = 3 * 2 * d * I
    head = 2 * d * V
    per_key = 4 * config.head_dim * config.n_heads

    def attn(n: int, start: int) -> int:
        return per_key * (n * start + n * (n + 1) // 2)

    prefill_attention = L * attn(S, 0)
    prefill = L * S * proj + prefill_attention + (L - 1) * S * mlp
    final_rows = 1 if strategy.kind == "miniseq" else S
    final_block = final_rows * (mlp + head)
    decode = sum(L * (proj + attn(1, p) + mlp) + head for p in range(S, S + n_decode))
    return FlopBreakdown(prefill, final_block, decode, prefill_attention,
                         (L - 1) * S * mlp + final_rows * mlp)


def with_budget(inp: AnalyticalInputs, M_max: int) -> AnalyticalInputs:
    return replace(inp, M_max=M_max)
