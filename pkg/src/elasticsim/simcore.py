"""Deterministic event engine with a virtual clock, plus checksums and the cost model.

Every other module runs inside callbacks of :class:`EventLoop`.  Time is an
integer count of nanoseconds; there is no real time anywhere.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable

NS_PER_S = 1_000_000_000
GiB = 1 << 30
MiB = 1 << 20
KiB = 1 << 10

CHANNELS = ("h2d", "d2h", "d2d", "net", "store")


class SimError(Exception):
    """Base class for simulator faults."""


def seconds(ns: int) -> float:
    return ns / NS_PER_S


@dataclass
class SimClock:
    now: int = 0

    def advance_to(self, t: int) -> None:
        if t < self.now:
            raise SimError(f"clock regression {self.now} -> {t}")
        self.now = t


@dataclass(frozen=True)
class CostModel:
    """Bandwidths in bytes/second, latencies in seconds."""

    h2d_bw: float = 16 * GiB
    d2h_bw: float = 16 * GiB
    d2d_bw: float = 600 * GiB
    net_bw: float = 25 * GiB
    net_latency: float = 10e-6
    kernel_cost: float = 50e-6
    store_bw: float = 2 * GiB
    dispatch_latency: float = 2e-6
    barrier_fixed: float = 100e-6
    restore_fixed: float = 200e-6

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("barrier_fixed", "restore_fixed"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0")
            elif v <= 0:
                raise ValueError(f"{f.name} must be > 0")
        if self.d2d_bw <= self.h2d_bw:
            raise ValueError("d2d_bw must exceed h2d_bw")

    def with_overrides(self, **kw: float) -> "CostModel":
        return replace(self, **kw)

    def transfer_time(self, nbytes: int, channel: str) -> int:
        """Duration in ns of moving ``nbytes`` over ``channel``."""
        if nbytes < 0:
            raise ValueError("negative byte count")
        bw = {
            "h2d": self.h2d_bw,
            "d2h": self.d2h_bw,
            "d2d": self.d2d_bw,
            "net": self.net_bw,
            "store": self.store_bw,
        }.get(channel)
        if bw is None:
            raise ValueError(f"unknown channel {channel!r}")
        t = nbytes / bw
        if channel == "net":
            t += self.net_latency
        return round(t * NS_PER_S)

    def kernel_ns(self) -> int:
        return round(self.kernel_cost * NS_PER_S)

    def dispatch_ns(self) -> int:
        return round(self.dispatch_latency * NS_PER_S)


def transfer_time(nbytes: int, channel: str, cost: CostModel | None = None) -> int:
    return (cost or CostModel()).transfer_time(nbytes, channel)


def digest_of(content: bytes | bytearray | memoryview) -> int:
    """64-bit content checksum (blake2b truncated to 8 bytes)."""
    return int.from_bytes(hashlib.blake2b(content, digest_size=8).digest(), "little")


def hexdigest(d: int) -> str:
    return f"{d:016x}"


@dataclass(order=True)
class _Entry:
    time: int
    seq: int
    callback: Callable[[], Any] = field(compare=False)
    label: str = field(compare=False, default="")
    cancelled: bool = field(compare=False, default=False)


class EventLoop:
    """Single-threaded discrete-event loop with FIFO tie-breaking."""

    def __init__(self, seed: int = 0):
        self.clock = SimClock()
        self._heap: list[_Entry] = []
        self._seq = 0
        self._by_id: dict[int, _Entry] = {}
        self.rng = random.Random(seed)
        self.processed: list[tuple[int, str]] = []
        self.record = False

    @property
    def now(self) -> int:
        return self.clock.now

    def schedule(self, delay: int, callback: Callable[[], Any], label: str = "") -> int:
        if delay < 0:
            raise ValueError("negative delay")
        return self.schedule_at(self.now + delay, callback, label)

    def schedule_at(self, time: int, callback: Callable[[], Any], label: str = "") -> int:
        if time < self.now:
            raise ValueError("cannot schedule in the past")
        self._seq += 1
        e = _Entry(time, self._seq, callback, label)
        heapq.heappush(self._heap, e)
        self._by_id[e.seq] = e
        return e.seq

    def cancel(self, event_id: int) -> None:
        e = self._by_id.pop(event_id, None)
        if e is not None:
            e.cancelled = True

    def pending(self) -> int:
        return sum(1 for e in self._heap if not e.cancelled)

    def step(self) -> bool:
        while self._heap:
            e = heapq.heappop(self._heap)
            self._by_id.pop(e.seq, None)
            if e.cancelled:
                continue
            self.clock.advance_to(e.time)
            if self.record:
                self.processed.append((e.time, e.label))
            e.callback()
            return True
        return False

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> None:
        while self._heap:
            if stop is not None and stop():
                return
            while self._heap and self._heap[0].cancelled:
                heapq.heappop(self._heap)
            if not self._heap:
                break
            nxt = self._heap[0]
            if until is not None and nxt.time > until:
                self.clock.advance_to(until)
                return
            self.step()
        if until is not None and until > self.now:
            self.clock.advance_to(until)


TRACE_VERSION = 1


class Trace:
    """Line-delimited JSON trace.  Records carry t, kind, job, rank, payload."""

    def __init__(self, clock: SimClock | None = None):
        self.clock = clock or SimClock()
        self.records: list[dict] = []

    def emit(self, kind: str, job: str | None = None, rank: int | None = None, t: int | None = None, **payload: Any) -> None:
        self.records.append(
            {
                "t": self.clock.now if t is None else t,
                "kind": kind,
                "job": job,
                "rank": rank,
                "payload": payload,
            }
        )

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def lines(self) -> list[str]:
        head = json.dumps({"trace_version": TRACE_VERSION}, sort_keys=True)
        return [head] + [json.dumps(r, sort_keys=True, default=_jsonable) for r in self.records]

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"


def _jsonable(o: Any) -> Any:
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if hasattr(o, "__dict__"):
        return o.__dict__
    raise TypeError(f"not serializable: {type(o)}")
