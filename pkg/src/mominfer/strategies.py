"""Prefill strategies, KV offload/reload and greedy decoding.

Three ways to run the prompt through the same model:

* ``standard``: every block at full sequence width, logits for all rows.
* ``miniseq``: attention at full width, non-final MLPs on row partitions of
  ``partition_size`` tokens, the final block on the last token only, and
  optionally each layer's K/V offloaded to host right after its attention.
* ``chunked``: the whole stack per prompt chunk with a growing cache.

All three produce bitwise-identical last logits and caches because every
kernel is row-independent with a fixed accumulation order.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .memtrack import DEVICE
from .model import (
    KvCache,
    Model,
    attention_block,
    embed,
    final_logits,
    mlp_block,
    swiglu_mlp,
)
from .tensor import Tensor, add_, concat_seq, rmsnorm, slice_last_token

KINDS = ("standard", "miniseq", "chunked")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "standard"
    partition_size: int = 2048
    offload: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if self.partition_size < 1:
            raise ValueError("partition_size must be >= 1")
        if self.kind == "chunked" and self.offload:
            raise ValueError("chunked prefill has no offload variant")

    @property
    def name(self) -> str:
        return self.kind + ("+offload" if self.offload else "")

    @classmethod
    def parse(cls, name: str, partition_size: int = 2048) -> StrategyConfig:
        """``"miniseq+offload"`` style names, as used by sweeps."""
        kind, _, suffix = name.partition("+")
        if suffix not in ("", "offload"):
            raise ValueError(f"bad strategy name {name!r}")
        return cls(kind, partition_size, suffix == "offload")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PrefillResult:
    last_logits: Tensor
    cache: KvCache
    wall_seconds: float
    peak_bytes: int  # device high-water mark before any reload
    seq_len: int = field(default=0)


def partition_bounds(n: int, size: int) -> list[tuple[int, int]]:
    """Row ranges (C, ..., C, remainder) covering [0, n)."""
    if size < 1:
        raise ValueError("partition size must be >= 1")
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def _snap(model: Model, label: str) -> None:
    model.ctx.mem.snapshot(label)


def prefill_standard(tokens: Sequence[int], model: Model, offload: bool = False) -> PrefillResult:
    t0 = time.perf_counter()
    ctx = model.ctx
    n_layers = model.config.n_layers
    cache = model.new_cache()
    ctx.bucket = "prefill"
    x = embed(model, tokens)
    for layer in range(n_layers):
        attention_block(model, x, cache, layer, 0)
        _snap(model, f"prefill/attn{layer}")
        if offload:
            cache.offload_layer(layer)
        if layer == n_layers - 1:
            ctx.bucket = "final_block"
            mlp_block(model, x, layer, "mlp_final")
        else:
            mlp_block(model, x, layer)
        _snap(model, f"prefill/mlp{layer}")
    logits = final_logits(model, x)
    x.free()
    last = slice_last_token(logits)
    logits.free()
    return _close(model, last, cache, offload, t0, len(tokens))


def prefill_minisequence(tokens: Sequence[int], model: Model, partition_size: int,
                         offload: bool = True) -> PrefillResult:
    t0 = time.perf_counter()
    ctx = model.ctx
    cfg = model.config
    cache = model.new_cache()
    bounds = partition_bounds(len(tokens), partition_size)
    ctx.bucket = "prefill"
    x = embed(model, tokens)
    for layer in range(cfg.n_layers):
        attention_block(model, x, cache, layer, 0)
        _snap(model, f"prefill/attn{layer}")
        if offload:
            cache.offload_layer(layer)
        if layer < cfg.n_layers - 1:
            h = rmsnorm(x, model.layers[layer]["mlp_norm"], cfg.norm_eps)
            parts = []
            for a, b in bounds:
                with ctx.scope("mlp"):
                    parts.append(swiglu_mlp(model, h.rows(a, b), layer))
            m = concat_seq(parts)
            for p in parts:
                p.free()
            h.free()
            add_(x, m)
            m.free()
        else:
            # only the last position feeds the first generated token
            x_last = slice_last_token(x)
            x.free()
            x = x_last
            ctx.bucket = "final_block"
            mlp_block(model, x, layer, "mlp_final")
        _snap(model, f"prefill/mlp{layer}")
    last = final_logits(model, x)
    x.free()
    return _close(model, last, cache, offload, t0, len(tokens))


def prefill_chunked(tokens: Sequence[int], model: Model, partition_size: int) -> PrefillResult:
    t0 = time.perf_counter()
    ctx = model.ctx
    n_layers = model.config.n_layers
    cache = model.new_cache()
    last = None
    for i, (a, b) in enumerate(partition_bounds(len(tokens), partition_size)):
        ctx.bucket = "prefill"
        x = embed(model, tokens[a:b])
        for layer in range(n_layers):
            attention_block(model, x, cache, layer, a)
            if layer == n_layers - 1:
                ctx.bucket = "final_block"
                mlp_block(model, x, layer, "mlp_final")
            else:
                mlp_block(model, x, layer)
        logits = final_logits(model, x)
        x.free()
        if b == len(tokens):
            last = slice_last_token(logits)
        logits.free()
        _snap(model, f"prefill/chunk{i}")
    return _close(model, last, cache, False, t0, len(tokens))


def _close(model: Model, last: Tensor, cache: KvCache, offload: bool, t0: float, n: int) -> PrefillResult:
    _snap(model, "prefill")
    peak = model.ctx.mem.device.peak
    if offload:
        reload_cache(cache, model)
        _snap(model, "reload")
    return PrefillResult(last, cache, time.perf_counter() - t0, peak, n)


def prefill(tokens: Sequence[int], model: Model, strategy: StrategyConfig) -> PrefillResult:
    if strategy.kind == "standard":
        return prefill_standard(tokens, model, strategy.offload)
    if strategy.kind == "miniseq":
        return prefill_minisequence(tokens, model, strategy.partition_size, strategy.offload)
    return prefill_chunked(tokens, model, strategy.partition_size)


def reload_cache(cache: KvCache, model: Model) -> int:
    """Bring every host-resident layer back to the device; returns bytes moved."""
    return sum(kv.move(DEVICE) for kv in cache.layers)


def greedy_token(logits: Tensor) -> int:
    """Argmax of a 1 x V row; ties go to the lowest index."""
    if logits.data is None:
        return 0
    return int(np.argmax(logits.data[0]))


def decode_steps(result: PrefillResult, model: Model, n_new: int) -> Iterator[int]:
    """Yield ``n_new`` greedy tokens one step at a time.

    The same code runs after every prefill strategy. A step's work is done
    by the time its token is yielded, so callers can time or interleave steps.
    """
    cache = result.cache
    if not cache.device_resident():
        raise ValueError("cache must be device-resident before decoding; reload it first")
    ctx = model.ctx
    logits = result.last_logits
    for step in range(n_new):
        ctx.bucket = "decode"
        token = greedy_token(logits)
        logits.free()
        pos = cache.cached_len
        x = embed(model, [token])
        for layer in range(model.config.n_layers):
            attention_block(model, x, cache, layer, pos)
            mlp_block(model, x, layer, "mlp_decode")
        logits = final_logits(model, x)
        x.free()
        _snap(model, f"decode step {step + 1}")
        yield token
    logits.free()


def decode_greedy(result: PrefillResult, model: Model, n_new: int,
                  step_seconds: list[float] | None = None) -> list[int]:
    """Generate ``n_new`` tokens, optionally recording each step's wall time."""
    out: list[int] = []
    steps = decode_steps(result, model, n_new)
    while True:
        t0 = time.perf_counter()
        token = next(steps, None)
        if token is None:
            break
        if step_seconds is not None:
            step_seconds.append(time.perf_counter() - t0)
        out.append(token)
    return out
