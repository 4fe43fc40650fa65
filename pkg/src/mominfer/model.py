"""Llama-style decoder: config, seeded weights, KV cache and the block ops."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import _kernels
from .memtrack import DEVICE, HOST, Allocation, BudgetExceeded
from .tensor import (
    DTYPE,
    ExecContext,
    Tensor,
    add_,
    matmul,
    rmsnorm,
    rope_apply,
    swish_gate_,
)

LAYER_ROLES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "attn_norm", "mlp_norm")
GLOBAL_ROLES = ("embed", "final_norm", "lm_head")
_ROLE_CODE = {name: code for code, name in enumerate(GLOBAL_ROLES + LAYER_ROLES)}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 8
    n_kv_heads: int = 8
    d_ff: int | None = None  # defaults to 4 * d_model
    vocab_size: int = 4096
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    seed: int = 0
    element_width: int = 4

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "element_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be > 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be a multiple of n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_heads must be a multiple of n_kv_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def weight_shapes(self) -> dict[str, tuple[int, int] | tuple[int]]:
        d, kv, i, v = self.d_model, self.kv_dim, self.d_ff, self.vocab_size
        return {
            "embed": (v, d), "final_norm": (d,), "lm_head": (d, v),
            "wq": (d, d), "wk": (d, kv), "wv": (d, kv), "wo": (d, d),
            "w_gate": (d, i), "w_up": (d, i), "w_down": (i, d),
            "attn_norm": (d,), "mlp_norm": (d,),
        }

    def param_count(self) -> int:
        d, kv, i, v, n = self.d_model, self.kv_dim, self.d_ff, self.vocab_size, self.n_layers
        per_layer = 2 * d * d + 2 * d * kv + 3 * d * i + 2 * d
        return n * per_layer + 2 * v * d + d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class Weights:
    """Weight arrays, or ``None`` placeholders for accounting-only runs."""

    config: ModelConfig
    globals: dict[str, np.ndarray | None]
    layers: list[dict[str, np.ndarray | None]]

    @property
    def nbytes(self) -> int:
        return self.config.param_count() * self.config.element_width

    @property
    def has_data(self) -> bool:
        return self.globals["embed"] is not None

    @classmethod
    def shapes_only(cls, config: ModelConfig) -> Weights:
        return cls(
            config,
            {r: None for r in GLOBAL_ROLES},
            [{r: None for r in LAYER_ROLES} for _ in range(config.n_layers)],
        )


def _draw(config: ModelConfig, layer: int, role: str) -> np.ndarray:
    shape = config.weight_shapes()[role]
    if role.endswith("norm"):
        return np.ones(shape, DTYPE)
    ss = np.random.SeedSequence([config.seed, layer, _ROLE_CODE[role]])
    bound = 1.0 / np.sqrt(config.d_model)
    return np.random.Generator(np.random.PCG64(ss)).uniform(-bound, bound, shape).astype(DTYPE)


def init_weights(config: ModelConfig) -> Weights:
    """Fill every matrix from PCG64 seeded with (seed, layer, role).

    Global matrices use layer 0 and block ``l`` uses ``l + 1``. Entries are
    uniform in [-1/sqrt(d), 1/sqrt(d)]; norm gains are ones.
    """
    return Weights(
        config,
        {r: _draw(config, 0, r) for r in GLOBAL_ROLES},
        [{r: _draw(config, l + 1, r) for r in LAYER_ROLES} for l in range(config.n_layers)],
    )


class KvLayer:
    """K and V rows of one layer.

    Each append charges one K and one V segment to the pool the layer lives
    in; offloading moves every segment. The backing buffer grows by doubling
    but only the written rows are ever charged.
    """

    def __init__(self, ctx: ExecContext, kv_dim: int):
        self.ctx = ctx
        self.kv_dim = kv_dim
        self.length = 0
        self.tier = DEVICE
        self.segments: list[Allocation] = []
        self._k = np.empty((0, kv_dim), DTYPE) if ctx.compute else None
        self._v = np.empty((0, kv_dim), DTYPE) if ctx.compute else None

    @property
    def nbytes(self) -> int:
        return sum(h.size for h in self.segments)

    def extend(self, n: int) -> tuple[Tensor, Tensor]:
        if self.tier != DEVICE:
            raise ValueError("cannot append to a host-resident cache layer")
        size = n * self.kv_dim * self.ctx.width
        pool = self.ctx.mem.device
        hk = pool.alloc(size, "kv")
        try:
            hv = pool.alloc(size, "kv")
        except BudgetExceeded:
            pool.free(hk)
            raise
        self.segments += [hk, hv]
        lo, hi = self.length, self.length + n
        if self.ctx.compute:
            if hi > self._k.shape[0]:
                cap = max(hi, 2 * self._k.shape[0], 16)
                for name in ("_k", "_v"):
                    grown = np.empty((cap, self.kv_dim), DTYPE)
                    grown[:lo] = getattr(self, name)[:lo]
                    setattr(self, name, grown)
            k = Tensor((n, self.kv_dim), self.ctx, hk, self._k[lo:hi])
            v = Tensor((n, self.kv_dim), self.ctx, hv, self._v[lo:hi])
        else:
            k = Tensor((n, self.kv_dim), self.ctx, hk, None)
            v = Tensor((n, self.kv_dim), self.ctx, hv, None)
        self.length = hi
        return k, v

    def keys(self) -> np.ndarray | None:
        return None if self._k is None else self._k[: self.length]

    def values(self) -> np.ndarray | None:
        return None if self._v is None else self._v[: self.length]

    def move(self, destination: str) -> int:
        """Transfer every segment to ``destination``; returns bytes moved."""
        if destination == self.tier:
            return 0
        mem = self.ctx.mem
        moved = []
        try:
            for h in self.segments:
                moved.append(mem.transfer(h, destination))
        except BudgetExceeded:
            # put already-moved segments back so the layer stays in one tier
            for i, h in enumerate(moved):
                moved[i] = mem.transfer(h, self.tier)
            self.segments = moved + self.segments[len(moved):]
            raise
        self.segments = moved
        self.tier = destination
        if self._k is not None:
            # the bytes cross a tier boundary: land them in a fresh buffer
            self._k = self._k.copy()
            self._v = self._v.copy()
        return self.nbytes


class KvCache:
    def __init__(self, ctx: ExecContext, config: ModelConfig):
        self.config = config
        self.layers = [KvLayer(ctx, config.kv_dim) for _ in range(config.n_layers)]

    @property
    def cached_len(self) -> int:
        lengths = {kv.length for kv in self.layers}
        if len(lengths) != 1:
            raise ValueError(f"cache layers disagree on length: {sorted(lengths)}")
        return lengths.pop()

    @property
    def nbytes(self) -> int:
        return sum(kv.nbytes for kv in self.layers)

    @property
    def residency(self) -> list[str]:
        return [kv.tier for kv in self.layers]

    def offload_layer(self, layer: int) -> int:
        return self.layers[layer].move(HOST)

    def device_resident(self) -> bool:
        return all(t == DEVICE for t in self.residency)


class Model:
    """Weights bound to one run's device pool."""

    def __init__(self, weights: Weights, ctx: ExecContext):
        self.config = weights.config
        self.weights = weights
        self.ctx = ctx
        if ctx.compute and not weights.has_data:
            raise ValueError("compute mode needs materialized weights")
        shapes = self.config.weight_shapes()
        self.globals = {r: ctx.adopt(weights.globals[r], shapes[r], "weights") for r in GLOBAL_ROLES}
        self.layers = [
            {r: ctx.adopt(lw[r], shapes[r], "weights") for r in LAYER_ROLES}
            for lw in weights.layers
        ]

    @property
    def weights_bytes(self) -> int:
        return self.weights.nbytes

    def new_cache(self) -> KvCache:
        return KvCache(self.ctx, self.config)


def embed(model: Model, tokens: Sequence[int]) -> Tensor:
    if len(tokens) == 0:
        raise ValueError("embed needs at least one token")
    ids = np.asarray(tokens, dtype=np.int64)
    v = model.config.vocab_size
    if ids.min() < 0 or ids.max() >= v:
        raise ValueError(f"token id outside [0, {v})")
    out = model.ctx.empty((len(ids), model.config.d_model))
    if model.ctx.compute:
        np.take(model.globals["embed"].data, ids, axis=0, out=out.data)
    return out


def attention_layer(model: Model, x: Tensor, cache: KvCache, layer: int, start_position: int) -> Tensor:
    """Causal GQA attention of rows at absolute positions start_position + i.

    Appends this call's K and V to the cache and returns the o-projection;
    the caller adds it to the residual stream.
    """
    cfg = model.config
    kv = cache.layers[layer]
    if kv.length != start_position:
        raise ValueError(f"layer {layer} cache holds {kv.length} positions, call starts at {start_position}")
    w = model.layers[layer]
    n = x.shape[0]
    ctx = model.ctx
    q = matmul(x, w["wq"])
    k_new, v_new = kv.extend(n)
    matmul(x, w["wk"], out=k_new)
    matmul(x, w["wv"], out=v_new)
    rope_apply(q, cfg.n_heads, cfg.head_dim, start_position, cfg.rope_theta)
    rope_apply(k_new, cfg.n_kv_heads, cfg.head_dim, start_position, cfg.rope_theta)
    att = ctx.empty((n, cfg.d_model))
    visible = n * start_position + n * (n + 1) // 2
    ctx.count(4 * cfg.head_dim * cfg.n_heads * visible)
    if ctx.compute:
        _kernels.causal_attention_into(
            q.data, kv.keys(), kv.values(), start_position,
            cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, att.data,
        )
    q.free()
    out = matmul(att, w["wo"])
    att.free()
    return out


def swiglu_mlp(model: Model, x: Tensor, layer: int) -> Tensor:
    """(swish(x Wg) * (x Wu)) Wd; the n x I gate and up buffers are the peak."""
    w = model.layers[layer]
    gate = matmul(x, w["w_gate"])
    up = matmul(x, w["w_up"])
    swish_gate_(gate, up)
    up.free()
    out = matmul(gate, w["w_down"])
    gate.free()
    return out


def lm_head_logits(model: Model, x: Tensor) -> Tensor:
    return matmul(x, model.globals["lm_head"], tag="logits")


def attention_block(model: Model, x: Tensor, cache: KvCache, layer: int, start_position: int) -> None:
    """x += attn(norm(x)), in place."""
    ctx = model.ctx
    with ctx.scope("attention"):
        h = rmsnorm(x, model.layers[layer]["attn_norm"], model.config.norm_eps)
        o = attention_layer(model, h, cache, layer, start_position)
        h.free()
        add_(x, o)
        o.free()


def mlp_block(model: Model, x: Tensor, layer: int, label: str = "mlp") -> None:
    """x += mlp(norm(x)), in place; the MLP call's transient is tracked under ``label``."""
    h = rmsnorm(x, model.layers[layer]["mlp_norm"], model.config.norm_eps)
    with model.ctx.scope(label):
        m = swiglu_mlp(model, h, layer)
    h.free()
    add_(x, m)
    m.free()


def final_logits(model: Model, x: Tensor) -> Tensor:
    """Final norm then LM head over every row of ``x``."""
    h = rmsnorm(x, model.globals["final_norm"], model.config.norm_eps)
    with model.ctx.scope("lm_head"):
        logits = lm_head_logits(model, h)
    h.free()
    return logits
