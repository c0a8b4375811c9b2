"""Per-GPU device proxy.

Workers never touch the device directly.  Their calls go through a
:class:`ProxyServer`, which owns the device, hands out virtual handles,
records state-changing calls in a replay log, allocates memory with a
bi-directional allocator and orchestrates context switches between ranks
time-sliced on the device.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .simcore import CostModel, SimError
from .splice import (
    BufferLedger,
    LocalAccumulator,
    SquashConfig,
    Squasher,
    SwitchReport,
    execute_plan,
    plan_switch,
)
from .vdev import Category, Device, DeviceBuffer, DeviceFault, KernelDesc, Stream

ALIGN = 256
HANDLE_KINDS = ("stream", "event", "communicator", "module")


class OutOfMemory(DeviceFault):
    pass


class ProxyFault(SimError):
    pass


def _align(n: int, a: int = ALIGN) -> int:
    return (n + a - 1) // a * a


# ---------------------------------------------------------------------------
# Allocator
# ---------------------------------------------------------------------------

class BidiAllocator:
    """Stable allocations grow down from ``high``, transient ones up from ``low``.

    Each end has its own cursor and hole list, so the stable end's layout
    depends only on the sequence of stable allocs and frees.
    """

    def __init__(self, low: int, high: int, align: int = ALIGN):
        if low % align or high % align or high <= low:
            raise ValueError("bad allocator region")
        self.low, self.high, self.align = low, high, align
        self.stable_cursor = high
        self.transient_cursor = low
        self.stable_holes: list[tuple[int, int]] = []
        self.transient_holes: list[tuple[int, int]] = []
        self.live: dict[int, tuple[int, bool]] = {}  # addr -> (size, stable)

    def alloc(self, size: int, stable: bool) -> int:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        size = _align(size, self.align)
        if stable:
            addr = self._from_holes(self.stable_holes, size, top=True)
            if addr is None:
                if self.stable_cursor - size < self.transient_cursor:
                    raise OutOfMemory(f"stable allocation of {size} bytes does not fit")
                self.stable_cursor -= size
                addr = self.stable_cursor
        else:
            addr = self._from_holes(self.transient_holes, size, top=False)
            if addr is None:
                if self.transient_cursor + size > self.stable_cursor:
                    raise OutOfMemory(f"transient allocation of {size} bytes does not fit")
                addr = self.transient_cursor
                self.transient_cursor += size
        self.live[addr] = (size, stable)
        return addr

    @staticmethod
    def _from_holes(holes: list[tuple[int, int]], size: int, top: bool) -> int | None:
        order = sorted(range(len(holes)), key=lambda i: holes[i][0], reverse=top)
        for i in order:
            a, s = holes[i]
            if s < size:
                continue
            if top:
                addr = a + s - size
                holes[i] = (a, s - size)
            else:
                addr = a
                holes[i] = (a + size, s - size)
            if holes[i][1] == 0:
                holes.pop(i)
            return addr
        return None

    def free(self, addr: int) -> int:
        if addr not in self.live:
            raise DeviceFault(f"free of unallocated address {addr}")
        size, stable = self.live.pop(addr)
        holes = self.stable_holes if stable else self.transient_holes
        holes.append((addr, size))
        holes.sort()
        merged: list[tuple[int, int]] = []
        for a, s in holes:
            if merged and merged[-1][0] + merged[-1][1] == a:
                merged[-1] = (merged[-1][0], merged[-1][1] + s)
            else:
                merged.append((a, s))
        if stable:
            if merged and merged[0][0] == self.stable_cursor:
                self.stable_cursor += merged.pop(0)[1]
            self.stable_holes = merged
        else:
            if merged and merged[-1][0] + merged[-1][1] == self.transient_cursor:
                self.transient_cursor = merged.pop()[0]
            self.transient_holes = merged
        return size

    def stable_state(self) -> tuple:
        stable_live = tuple(sorted((a, s) for a, (s, st) in self.live.items() if st))
        return (self.stable_cursor, tuple(self.stable_holes), stable_live)

    def state(self) -> dict:
        return {
            "low": self.low, "high": self.high, "align": self.align,
            "stable_cursor": self.stable_cursor, "transient_cursor": self.transient_cursor,
            "stable_holes": [list(h) for h in self.stable_holes],
            "transient_holes": [list(h) for h in self.transient_holes],
            "live": [[a, s, st] for a, (s, st) in sorted(self.live.items())],
        }

    @classmethod
    def from_state(cls, d: dict) -> "BidiAllocator":
        a = cls(d["low"], d["high"], d["align"])
        a.stable_cursor = d["stable_cursor"]
        a.transient_cursor = d["transient_cursor"]
        a.stable_holes = [tuple(h) for h in d["stable_holes"]]
        a.transient_holes = [tuple(h) for h in d["transient_holes"]]
        a.live = {x[0]: (x[1], bool(x[2])) for x in d["live"]}
        return a


# ---------------------------------------------------------------------------
# Handles and the replay log
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VirtualHandle:
    id: int
    kind: str


@dataclass(frozen=True)
class DeviceCall:
    name: str
    args: tuple = ()


@dataclass
class Response:
    value: Any = None
    error: str | None = None
    latency_ns: int = 0
    round_trip: bool = True
    done: int = 0
    queued: bool = False


@dataclass(frozen=True)
class LogEntry:
    rank: int
    name: str
    kind: str  # create | destroy | configure
    vid: int
    args: tuple = ()

    def to_list(self) -> list:
        return [self.rank, self.name, self.kind, self.vid, list(self.args)]

    @classmethod
    def from_list(cls, x) -> "LogEntry":
        return cls(x[0], x[1], x[2], x[3], tuple(x[4]))


_CREATE = {"create_stream": "stream", "create_event": "event", "comm_init": "communicator", "load_module": "module"}
_DESTROY = {"destroy_stream": "stream", "destroy_event": "event", "comm_destroy": "communicator",
            "unload_module": "module"}
_CONFIGURE = {"set_stream_priority", "set_cache_config"}
_DEVICE = {"launch_kernel", "memcpy", "stream_synchronize", "device_synchronize", "record_event",
           "stream_wait_event"}


def compact(log: list[LogEntry]) -> list[LogEntry]:
    """Drop create/destroy pairs; keep the last configure per (handle, key)."""
    destroyed = {(e.rank, e.vid) for e in log if e.kind == "destroy"}
    last_cfg: dict[tuple, int] = {}
    for i, e in enumerate(log):
        if e.kind == "configure":
            last_cfg[(e.rank, e.vid, e.name)] = i
    out = []
    for i, e in enumerate(log):
        if (e.rank, e.vid) in destroyed:
            continue
        if e.kind == "configure" and last_cfg[(e.rank, e.vid, e.name)] != i:
            continue
        out.append(e)
    return out


# ---------------------------------------------------------------------------
# Proxy server
# ---------------------------------------------------------------------------

_phys_ids = itertools.count(1)


class ProxyServer:
    """Serializes all device access of the ranks placed on one GPU."""

    def __init__(self, gpu: int, device: Device | None = None, cost: CostModel | None = None,
                 squash: SquashConfig | None = None, scratch_capacity: int | None = None):
        self.gpu = gpu
        self.cost = cost or CostModel()
        self.device = device or Device(gpu, cost=self.cost)
        self.registered_ranks: list[int] = []
        self.active_rank: int | None = None
        self.vhandle_map: dict[tuple[int, int], tuple[str, Any]] = {}  # (rank, vid) -> (kind, physical)
        self.handle_config: dict[tuple[int, int], dict] = {}
        self.next_vid: dict[int, int] = {}
        self.replay_log: list[LogEntry] = []
        self.allocators: dict[int, BidiAllocator] = {}
        self.categories: dict[int, dict[int, Category]] = {}
        self.comm_counts: dict[int, int] = {}
        self.queues: dict[int, deque] = {}
        self.ledger = BufferLedger(self.device)
        self.accumulator = LocalAccumulator()
        self.squash_config = squash or SquashConfig()
        self.squasher: Squasher | None = None
        self.scratch_capacity = scratch_capacity
        self.misclassify: dict[int, set[str]] = {}
        self.switches: list[SwitchReport] = []
        self.dispatch_count = 0
        self._pending_fault: str | None = None
        self._error_cache: str | None = None
        self._notify: str | None = None
        self.gc_hook: Callable[[], int] | None = None
        self.dispatch_ns = self.cost.dispatch_ns()
        self.device_free_at = 0
        self.skip_swap_in = False  # fault hook for mutation tests

    # -- registration -------------------------------------------------------
    def register(self, rank: int, allocator: BidiAllocator | None = None, next_vid: int = 1) -> None:
        if rank in self.registered_ranks:
            raise ProxyFault(f"rank {rank} registered twice on GPU {self.gpu}")
        self.registered_ranks.append(rank)
        self.allocators[rank] = allocator or BidiAllocator(0, self.device.capacity)
        self.categories.setdefault(rank, {})
        self.next_vid[rank] = next_vid
        self.queues[rank] = deque()
        if self.active_rank is None:
            self.active_rank = rank

    @property
    def allocator(self) -> BidiAllocator:
        return self.allocators[self.active_rank]

    def _check(self, rank: int) -> None:
        if rank not in self.registered_ranks:
            raise ProxyFault(f"rank {rank} is not registered on GPU {self.gpu}")

    # -- handles --------------------------------------------------------------
    def _new_handle(self, rank: int, kind: str, physical: Any) -> VirtualHandle:
        vid = self.next_vid[rank]
        self.next_vid[rank] = vid + 1
        self.vhandle_map[(rank, vid)] = (kind, physical)
        return VirtualHandle(vid, kind)

    def resolve(self, rank: int, vid: int) -> Any:
        entry = self.vhandle_map.get((rank, vid))
        if entry is None:
            raise ProxyFault(f"unknown virtual handle {vid} of rank {rank}")
        return entry[1]

    def remap(self, rank: int, vid: int, physical: Any) -> None:
        kind = self.vhandle_map[(rank, vid)][0] if (rank, vid) in self.vhandle_map else "stream"
        self.vhandle_map[(rank, vid)] = (kind, physical)

    def _physical(self, kind: str, args: tuple) -> Any:
        if kind == "stream":
            return self.device.create_stream()
        return (kind, next(_phys_ids))

    def stream(self, rank: int, vid: int) -> Stream:
        s = self.resolve(rank, vid)
        if not isinstance(s, Stream):
            raise ProxyFault(f"handle {vid} is not a stream")
        return s

    # -- dispatch -------------------------------------------------------------
    def inject_fault(self, message: str = "injected device fault") -> None:
        """The next kernel executed on the server fails with ``message``."""
        self._pending_fault = message

    def dispatch(self, rank: int, call: DeviceCall, now: int = 0) -> Response:
        self._check(rank)
        self.dispatch_count += 1
        if call.name == "get_last_error":
            # Served from the status piggybacked on the last launch.
            err, self._error_cache = self._error_cache, None
            self._notify = None
            return Response(err, None, 0, round_trip=False)
        notify, self._notify = self._notify, None
        if call.name in _DEVICE and rank != self.active_rank:
            self.queues[rank].append((call, now))
            return Response(queued=True, error=notify, latency_ns=self.dispatch_ns, round_trip=False)
        resp = self._execute(rank, call, now)
        if notify and resp.error is None:
            resp.error = notify
        return resp

    def _execute(self, rank: int, call: DeviceCall, now: int) -> Response:
        lat = self.dispatch_ns
        name, args = call.name, call.args
        if name in _CREATE:
            kind = _CREATE[name]
            h = self._new_handle(rank, kind, self._physical(kind, args))
            self.replay_log.append(LogEntry(rank, name, "create", h.id, args))
            return Response(h.id, latency_ns=2 * lat)
        if name in _DESTROY:
            vid = args[0]
            kind, phys = self.vhandle_map.get((rank, vid), (None, None))
            if kind != _DESTROY[name]:
                return Response(error=f"unknown virtual handle {vid}", latency_ns=2 * lat)
            if isinstance(phys, Stream):
                self.device.destroy_stream(phys)
            del self.vhandle_map[(rank, vid)]
            self.handle_config.pop((rank, vid), None)
            self.replay_log.append(LogEntry(rank, name, "destroy", vid, args))
            return Response(None, latency_ns=2 * lat)
        if name in _CONFIGURE:
            vid, value = args
            self.resolve(rank, vid)
            self.handle_config.setdefault((rank, vid), {})[name] = value
            self.replay_log.append(LogEntry(rank, name, "configure", vid, args))
            return Response(None, latency_ns=2 * lat)
        if name == "launch_kernel":
            desc, svid = args
            done = self.device.launch_kernel(desc, self.stream(rank, svid), now + lat)
            if self._pending_fault is not None:
                self._error_cache = self._notify = self._pending_fault
                self._pending_fault = None
            # Fire-and-forget: the client does not wait for the server.
            return Response(None, latency_ns=lat, round_trip=False, done=done)
        if name == "memcpy":
            src, dst, nbytes, svid = args
            done = self.device.copy(src, dst, nbytes, self.stream(rank, svid), now + lat)
            return Response(None, latency_ns=lat, round_trip=False, done=done)
        if name == "stream_synchronize":
            done = self.stream(rank, args[0]).tail
            return Response(None, latency_ns=2 * lat, done=max(done, now + 2 * lat))
        if name == "device_synchronize":
            return Response(None, latency_ns=2 * lat, done=self.device.device_sync(now + 2 * lat))
        if name == "record_event":
            ev, svid = args
            self.vhandle_map[(rank, ev)] = ("event", self.device.record_event(self.stream(rank, svid)))
            return Response(None, latency_ns=lat, round_trip=False)
        if name == "stream_wait_event":
            svid, ev = args
            phys = self.resolve(rank, ev)
            if hasattr(phys, "time"):
                self.device.stream_wait_event(self.stream(rank, svid), phys)
            return Response(None, latency_ns=lat, round_trip=False)
        raise ProxyFault(f"unsupported call {name!r}")

    def drain_queue(self, rank: int, now: int) -> list[Response]:
        out = []
        q = self.queues[rank]
        while q:
            call, _ = q.popleft()
            out.append(self._execute(rank, call, now))
        return out

    # -- replay ---------------------------------------------------------------
    def replay(self, log: list[LogEntry], ranks: list[int] | None = None) -> None:
        """Re-create handles from ``log`` and remap their virtual ids."""
        for e in compact(log):
            if ranks is not None and e.rank not in ranks:
                continue
            if e.rank not in self.registered_ranks:
                self.register(e.rank)
            if e.kind == "create":
                kind = _CREATE[e.name]
                self.vhandle_map[(e.rank, e.vid)] = (kind, self._physical(kind, e.args))
                self.next_vid[e.rank] = max(self.next_vid[e.rank], e.vid + 1)
            elif e.kind == "configure":
                self.handle_config.setdefault((e.rank, e.vid), {})[e.name] = e.args[1]
            self.replay_log.append(e)

    def handle_state(self) -> dict:
        """Virtual view of handles and configuration (no physical ids)."""
        return {
            k: (kind, dict(self.handle_config.get(k, {})))
            for k, (kind, _) in sorted(self.vhandle_map.items())
        }

    def rank_log(self, rank: int) -> list[LogEntry]:
        return compact([e for e in self.replay_log if e.rank == rank])

    # -- memory -----------------------------------------------------------------
    def alloc(self, rank: int, size: int, stability: str, category: Category, name: str = "") -> int:
        self._check(rank)
        stable = stability == "stable"
        if name and name in self.misclassify.get(rank, ()):
            stable = not stable
        alloc = self.allocators[rank]
        try:
            addr = alloc.alloc(size, stable)
        except OutOfMemory:
            if self.gc_hook is None or not self.gc_hook():
                raise
            addr = alloc.alloc(size, stable)
        self.categories[rank][addr] = category
        if rank == self.active_rank:
            self.ledger.invalidate(addr, alloc.live[addr][0])
            self.device.register(DeviceBuffer(addr, alloc.live[addr][0], category, owner=rank))
        return addr

    def free(self, rank: int, addr: int) -> None:
        self.allocators[rank].free(addr)
        self.categories[rank].pop(addr, None)
        if rank == self.active_rank:
            self.device.unregister(addr)

    def live_buffers(self, rank: int) -> dict[int, tuple[int, Category]]:
        alloc = self.allocators[rank]
        return {a: (s, self.categories[rank][a]) for a, (s, _) in alloc.live.items()}

    def gc_host_cache(self) -> int:
        keep = {e.digest for v in self.ledger.views.values() for e in v.values()}
        drop = [d for d in self.ledger.host_cache if d not in keep]
        for d in drop:
            del self.ledger.host_cache[d]
        return len(drop)

    # -- time-slicing -------------------------------------------------------------
    def context_switch(self, next_rank: int, now: int = 0, reason: str = "") -> SwitchReport:
        self._check(next_rank)
        prev = self.active_rank
        report = SwitchReport(self.gpu, prev, next_rank, reason, start=now)
        if prev == next_rank:
            return report
        if prev is not None:
            report.checksum_bytes = self.ledger.capture(prev, self.live_buffers(prev))
        plan = plan_switch(self.ledger, prev, next_rank)
        if self.skip_swap_in:
            plan.swap_ins.clear()
        res = execute_plan(self.ledger, plan, self.cost, self.scratch_capacity)
        report.swap_out_bytes = res.swap_out
        report.swap_in_bytes = res.swap_in
        report.d2d_bytes = res.d2d_bytes
        report.d2d_copies = res.d2d_copies
        report.staged = res.staged
        report.duration_ns = res.duration_ns + self.cost.transfer_time(report.checksum_bytes, "d2d")
        self.device.clear_resident()
        for addr, (size, cat) in sorted(self.live_buffers(next_rank).items()):
            self.device.register(DeviceBuffer(addr, size, cat, owner=next_rank))
        self.active_rank = next_rank
        self.gc_host_cache()
        self.switches.append(report)
        return report

    def view_of(self, rank: int, addr: int, size: int) -> np.ndarray:
        if rank != self.active_rank:
            raise ProxyFault(f"rank {rank} is not resident on GPU {self.gpu}")
        return self.device.view(addr, size)
