"""Device tensors whose bytes are charged to a :class:`MemorySystem`.

A tensor either carries float32 data (compute mode) or only its shape
(accounting-only mode, ``data is None``). Both modes run the exact same
allocation sequence, so large-S memory experiments can skip the arithmetic.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from math import prod
from typing import Sequence

import numpy as np

from . import _kernels
from .memtrack import DEVICE, Allocation, MemorySystem

DTYPE = np.float32


class ExecContext:
    """Per-run state shared by every op: memory, compute flag, flop counters.

    ``bucket`` names the counter that matmul and attention flops go to; the
    strategies switch it between "prefill", "final_block" and "decode".
    """

    def __init__(self, mem: MemorySystem | None = None, compute: bool = True, width: int = 4):
        if compute and width != 4:
            raise ValueError("compute mode runs float32; element_width must be 4")
        self.mem = mem if mem is not None else MemorySystem()
        self.compute = compute
        self.width = width
        self.flops: Counter[str] = Counter()
        self.bucket = "prefill"

    def empty(self, shape: Sequence[int], tag: str = "activation") -> Tensor:
        shape = tuple(int(s) for s in shape)
        handle = self.mem.device.alloc(prod(shape) * self.width, tag)
        data = np.empty(shape, DTYPE) if self.compute else None
        return Tensor(shape, self, handle, data)

    def adopt(self, array: np.ndarray | None, shape: Sequence[int], tag: str) -> Tensor:
        """Charge an existing buffer (e.g. a weight matrix) to the device pool."""
        shape = tuple(int(s) for s in shape)
        handle = self.mem.device.alloc(prod(shape) * self.width, tag)
        return Tensor(shape, self, handle, array if self.compute else None)

    def scope(self, label: str):
        return self.mem.device.scope(label)

    def count(self, flops: int) -> None:
        self.flops[self.bucket] += flops


@dataclass(eq=False)
class Tensor:
    shape: tuple[int, ...]
    ctx: ExecContext
    handle: Allocation | None
    data: np.ndarray | None = field(repr=False)
    base: Tensor | None = field(default=None, repr=False)

    @property
    def element_width(self) -> int:
        return self.ctx.width

    @property
    def nbytes(self) -> int:
        return prod(self.shape) * self.ctx.width

    @property
    def tier(self) -> str | None:
        owner = self.base if self.base is not None else self
        return owner.handle.pool.tier if owner.handle and owner.handle.pool else None

    @property
    def rows_count(self) -> int:
        return self.shape[0]

    def rows(self, start: int, stop: int) -> Tensor:
        """A view of rows [start, stop); views own no bytes."""
        if not 0 <= start < stop <= self.shape[0]:
            raise IndexError(f"row range [{start}, {stop}) outside {self.shape[0]} rows")
        data = self.data[start:stop] if self.data is not None else None
        return Tensor((stop - start,) + self.shape[1:], self.ctx, None, data,
                      base=self.base or self)

    def free(self) -> None:
        if self.base is not None:
            raise ValueError("cannot free a view")
        self.ctx.mem.device.free(self.handle)

    def numpy(self) -> np.ndarray:
        if self.data is None:
            raise ValueError("accounting-only tensor has no data")
        return self.data


def _require_device(*tensors: Tensor) -> None:
    for t in tensors:
        if t.tier != DEVICE:
            raise ValueError(f"tensor {t.shape} is not device-resident")


def matmul(a: Tensor, b: Tensor, out: Tensor | None = None, tag: str = "activation") -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    _require_device(a, b)
    m, k = a.shape
    n = b.shape[1]
    if out is None:
        out = a.ctx.empty((m, n), tag)
    elif out.shape != (m, n):
        raise ValueError(f"matmul output shape {out.shape} != {(m, n)}")
    a.ctx.count(2 * m * k * n)
    if a.ctx.compute:
        _kernels.matmul_into(a.data, b.data, out.data)
    return out


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if len(x.shape) != 2 or gain.shape != (x.shape[1],):
        raise ValueError(f"rmsnorm shape mismatch: {x.shape} with gain {gain.shape}")
    _require_device(x)
    out = x.ctx.empty(x.shape)
    if x.ctx.compute:
        _kernels.rmsnorm_into(x.data, gain.data, DTYPE(eps), out.data)
    return out


def rope_apply(x: Tensor, n_heads: int, head_dim: int, start_position: int,
               theta: float = 10000.0) -> Tensor:
    """Rotate interleaved pairs (2j, 2j+1) of every head in place.

    ``x`` is [S, n_heads * head_dim]; row i sits at absolute position
    ``start_position + i``.
    """
    if head_dim % 2:
        raise ValueError("rope needs an even head_dim")
    if start_position < 0:
        raise ValueError("start_position must be non-negative")
    if x.shape[1] != n_heads * head_dim:
        raise ValueError(f"rope width {x.shape[1]} != {n_heads} x {head_dim}")
    if x.ctx.compute:
        _kernels.rope_inplace(x.data, n_heads, head_dim, start_position, float(theta))
    return x


def slice_last_token(x: Tensor) -> Tensor:
    if x.shape[0] < 1:
        raise ValueError("cannot slice the last token of an empty tensor")
    out = x.ctx.empty((1,) + x.shape[1:])
    if x.ctx.compute:
        out.data[:] = x.data[-1:]
    return out


def concat_seq(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("nothing to concatenate")
    tail = parts[0].shape[1:]
    if any(p.shape[1:] != tail for p in parts):
        raise ValueError("concat_seq parts disagree on trailing dims")
    ctx = parts[0].ctx
    out = ctx.empty((sum(p.shape[0] for p in parts),) + tail)
    if ctx.compute:
        np.concatenate([p.data for p in parts], axis=0, out=out.data)
    return out


def add_(x: Tensor, y: Tensor) -> Tensor:
    """Residual add in place: x += y."""
    if x.shape != y.shape:
        raise ValueError(f"add shape mismatch: {x.shape} vs {y.shape}")
    if x.ctx.compute:
        np.add(x.data, y.data, out=x.data)
    return x


def swish_gate_(gate: Tensor, up: Tensor) -> Tensor:
    """gate <- swish(gate) * up, in place."""
    if gate.shape != up.shape:
        raise ValueError(f"gate/up shape mismatch: {gate.shape} vs {up.shape}")
    if gate.ctx.compute:
        _kernels.swish_gate_inplace(gate.data, up.data)
    return gate
