"""Two-tier byte accounting: budgeted pools, a transfer ledger and snapshots.

Every tensor the engine creates is charged here. A device allocation that
would overflow the budget raises :class:`BudgetExceeded`, which is the
engine's out-of-memory signal.
"""

from __future__ import annotations

import csv
import itertools
from collections import defaultdict
from contextlib import contextmanager, nullcontext
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

DEVICE = "device"
HOST = "host"

DEFAULT_BANDWIDTH = 25e9  # bytes/s

SNAPSHOT_CSV_COLUMNS = ("label", "device_current", "device_peak", "host_current")

_ids = itertools.count(1)


class BudgetExceeded(Exception):
    """An allocation or transfer would push a pool past its capacity."""

    def __init__(self, tier: str, requested: int, current: int, capacity: int):
        self.tier = tier
        self.requested = requested
        self.current = current
        self.capacity = capacity
        super().__init__(
            f"{tier} budget exceeded: {current} + {requested} > {capacity} bytes"
        )


class AccountingError(RuntimeError):
    """Contract violation in the accounting layer (double free, foreign handle)."""


@dataclass(eq=False)
class Allocation:
    """Handle for one live block of bytes in a pool."""

    id: int
    size: int
    tag: str
    pool: MemoryPool | None

    @property
    def live(self) -> bool:
        return self.pool is not None


@dataclass
class ScopeRecord:
    label: str
    entry: int
    peak: int

    @property
    def transient(self) -> int:
        return self.peak - self.entry


class MemoryPool:
    """Byte-exact pool with a hard capacity (``None`` means unbounded)."""

    def __init__(self, tier: str, capacity: int | None = None):
        if capacity is not None and capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.tier = tier
        self.capacity = capacity
        self.current = 0
        self.peak = 0
        self.window_peak = 0
        self.by_tag: dict[str, int] = defaultdict(int)
        self.window_tag_peak: dict[str, int] = defaultdict(int)
        self.scope_peaks: dict[str, int] = {}
        self._live: dict[int, Allocation] = {}
        self._scopes: list[ScopeRecord] = []

    def __repr__(self) -> str:
        return (
            f"MemoryPool({self.tier!r}, capacity={self.capacity}, "
            f"current={self.current}, peak={self.peak})"
        )

    @property
    def live_allocations(self) -> dict[int, int]:
        return {h: a.size for h, a in self._live.items()}

    def room(self) -> int | None:
        return None if self.capacity is None else self.capacity - self.current

    def _check(self, size: int) -> None:
        if self.capacity is not None and self.current + size > self.capacity:
            raise BudgetExceeded(self.tier, size, self.current, self.capacity)

    def _charge(self, alloc: Allocation) -> None:
        self._live[alloc.id] = alloc
        self.current += alloc.size
        self.by_tag[alloc.tag] += alloc.size
        cur = self.current
        if cur > self.peak:
            self.peak = cur
        if cur > self.window_peak:
            self.window_peak = cur
        tagged = self.by_tag[alloc.tag]
        if tagged > self.window_tag_peak[alloc.tag]:
            self.window_tag_peak[alloc.tag] = tagged
        for rec in self._scopes:
            if cur > rec.peak:
                rec.peak = cur

    def _release(self, alloc: Allocation) -> None:
        del self._live[alloc.id]
        self.current -= alloc.size
        self.by_tag[alloc.tag] -= alloc.size
        alloc.pool = None

    def alloc(self, size: int, tag: str = "activation") -> Allocation:
        if size <= 0:
            raise ValueError(f"allocation size must be positive, got {size}")
        self._check(size)
        alloc = Allocation(next(_ids), int(size), tag, self)
        self._charge(alloc)
        return alloc

    def free(self, handle: Allocation) -> None:
        if handle.pool is not self or handle.id not in self._live:
            raise AccountingError(f"free of unknown or dead handle {handle.id}")
        self._release(handle)

    def reset_peak(self) -> None:
        self.peak = self.current
        self.window_peak = self.current

    @contextmanager
    def scope(self, label: str) -> Iterator[ScopeRecord]:
        """Track the high-water mark above the entry level while the block runs.

        The largest transient seen for each label is kept in ``scope_peaks``.
        """
        rec = ScopeRecord(label, self.current, self.current)
        self._scopes.append(rec)
        try:
            yield rec
        finally:
            self._scopes.remove(rec)
            if rec.transient > self.scope_peaks.get(label, -1):
                self.scope_peaks[label] = rec.transient


def pool_free(handle: Allocation) -> None:
    if handle.pool is None:
        raise AccountingError(f"double free of handle {handle.id}")
    handle.pool.free(handle)


@dataclass
class TransferLedger:
    bandwidth: float = DEFAULT_BANDWIDTH
    bytes_device_to_host: int = 0
    bytes_host_to_device: int = 0
    transfer_count: int = 0

    @property
    def simulated_transfer_seconds(self) -> float:
        return (self.bytes_device_to_host + self.bytes_host_to_device) / self.bandwidth

    def record(self, source_tier: str, size: int) -> None:
        if source_tier == DEVICE:
            self.bytes_device_to_host += size
        else:
            self.bytes_host_to_device += size
        self.transfer_count += 1


def pool_transfer(
    handle: Allocation, destination: MemoryPool, ledger: TransferLedger | None = None
) -> Allocation:
    """Move an allocation between tiers; atomic on failure.

    Returns the new handle; the old one becomes invalid.
    """
    source = handle.pool
    if source is None:
        raise AccountingError(f"transfer of dead handle {handle.id}")
    if source is destination:
        raise AccountingError("transfer source and destination are the same pool")
    destination._check(handle.size)
    source._release(handle)
    moved = Allocation(next(_ids), handle.size, handle.tag, destination)
    destination._charge(moved)
    if ledger is not None:
        ledger.record(source.tier, handle.size)
    return moved


@dataclass
class MemSnapshot:
    label: str
    device_current: int
    device_peak: int
    host_current: int
    device_kv: int = 0
    device_kv_peak: int = 0

    @property
    def stage(self) -> str:
        return self.label.split("/", 1)[0].split(" ", 1)[0]


@dataclass
class MemorySystem:
    """Device and host pools plus the ledger and snapshot stream of one run."""

    device_capacity: int | None = None
    host_capacity: int | None = None
    bandwidth: float = DEFAULT_BANDWIDTH
    device: MemoryPool = field(init=False)
    host: MemoryPool = field(init=False)
    ledger: TransferLedger = field(init=False)
    snapshots: list[MemSnapshot] = field(init=False, default_factory=list)

    def __post_init__(self) -> None:
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        self.device = MemoryPool(DEVICE, self.device_capacity)
        self.host = MemoryPool(HOST, self.host_capacity)
        self.ledger = TransferLedger(self.bandwidth)

    def pool(self, tier: str) -> MemoryPool:
        return self.device if tier == DEVICE else self.host

    def transfer(self, handle: Allocation, destination: str) -> Allocation:
        return pool_transfer(handle, self.pool(destination), self.ledger)

    def snapshot(self, label: str) -> MemSnapshot:
        """Record the current levels and the device high-water mark since the last snapshot."""
        dev = self.device
        snap = MemSnapshot(
            label=label,
            device_current=dev.current,
            device_peak=dev.window_peak,
            host_current=self.host.current,
            device_kv=dev.by_tag.get("kv", 0),
            device_kv_peak=dev.window_tag_peak.get("kv", 0),
        )
        self.snapshots.append(snap)
        dev.window_peak = dev.current
        dev.window_tag_peak = defaultdict(int, dev.by_tag)
        return snap


def open_text(target):
    """Context manager yielding a writable text stream for a path or an open stream."""
    if hasattr(target, "write"):
        return nullcontext(target)
    return open(target, "w", newline="")


def write_snapshots_csv(snapshots: Iterable[MemSnapshot], target) -> None:
    with open_text(target) as fh:
        writer = csv.writer(fh)
        writer.writerow(SNAPSHOT_CSV_COLUMNS)
        for s in snapshots:
            writer.writerow([s.label, s.device_current, s.device_peak, s.host_current])


def snapshot_dict(s: MemSnapshot) -> dict:
    return asdict(s)
