"""Virtual accelerator: flat memory with buffers, plus streams and kernels.

All tensor math is uint64 with wrap-around, so any two executions that apply
the same multiset of operations leave bit-identical memory.  Data effects of
an operation are applied when it is issued; its *completion time* is computed
from stream order and event edges.  Issue order always respects those edges,
so the applied order is a linear extension of happens-before.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .simcore import MiB, CostModel, SimError, digest_of

WORD = 8
DTYPE = np.uint64


class DeviceFault(SimError):
    """A fault that aborts the job (dangling address, bad handle, ...)."""


class Category(str, enum.Enum):
    PARAM = "P"
    OPT_STATE = "O"
    GRAD = "G"
    ACTIVATION = "A"
    SCRATCH = "S"


@dataclass
class DeviceBuffer:
    addr: int
    size: int
    category: Category
    live: bool = True
    owner: int | None = None

    @property
    def end(self) -> int:
        return self.addr + self.size

    def overlaps(self, addr: int, size: int) -> bool:
        return self.addr < addr + size and addr < self.end


@dataclass
class Stream:
    sid: int
    tail: int = 0
    destroyed: bool = False
    completed: list[tuple[int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class Event:
    stream: Stream
    time: int


@dataclass(frozen=True)
class KernelDesc:
    kernel_id: str
    reads: tuple[int, ...]
    writes: tuple[int, ...]
    transform: str
    params: tuple = ()


Transform = Callable[[list[np.ndarray], tuple], list[np.ndarray]]
TRANSFORMS: dict[str, Transform] = {}


def register_transform(tag: str) -> Callable[[Transform], Transform]:
    def deco(fn: Transform) -> Transform:
        TRANSFORMS[tag] = fn
        return fn

    return deco


@register_transform("identity")
def _identity(reads, params):
    return [reads[0].copy()]


@register_transform("add")
def _add(reads, params):
    out = reads[0].copy()
    for r in reads[1:]:
        out += r
    return [out]


@register_transform("fill")
def _fill(reads, params):
    (nwords, value) = params
    return [np.full(nwords, value, dtype=DTYPE)]


_op_ids = itertools.count(1)


class Device:
    """One simulated GPU: a flat word-addressed memory and its streams."""

    def __init__(self, gpu_id: int, capacity: int = 4 * MiB, cost: CostModel | None = None):
        if capacity % WORD:
            raise ValueError("capacity must be a multiple of 8")
        self.gpu_id = gpu_id
        self.capacity = capacity
        self.cost = cost or CostModel()
        self.memory = np.zeros(capacity // WORD, dtype=DTYPE)
        self.buffers: dict[int, DeviceBuffer] = {}
        self.streams: dict[int, Stream] = {}
        self._sid = itertools.count(1)
        self.kernels_executed = 0
        self.fault: DeviceFault | None = None
        self.default_stream = self.create_stream()

    # -- memory -----------------------------------------------------------
    def register(self, buf: DeviceBuffer) -> DeviceBuffer:
        if buf.addr < 0 or buf.end > self.capacity or buf.addr % WORD or buf.size % WORD:
            raise DeviceFault(f"buffer [{buf.addr},{buf.end}) outside device")
        for other in self.buffers.values():
            if other.overlaps(buf.addr, buf.size):
                raise DeviceFault(f"buffer at {buf.addr} overlaps live buffer at {other.addr}")
        self.buffers[buf.addr] = buf
        return buf

    def unregister(self, addr: int) -> DeviceBuffer:
        buf = self.buffers.pop(addr, None)
        if buf is None:
            raise DeviceFault(f"free of unknown address {addr}")
        buf.live = False
        return buf

    def clear_resident(self) -> None:
        self.buffers.clear()

    def view(self, addr: int, size: int) -> np.ndarray:
        if addr < 0 or addr + size > self.capacity or addr % WORD or size % WORD:
            raise DeviceFault(f"bad range [{addr},{addr + size})")
        return self.memory[addr // WORD:(addr + size) // WORD]

    def read(self, addr: int, size: int) -> bytes:
        return self.view(addr, size).tobytes()

    def write(self, addr: int, data: bytes | np.ndarray) -> None:
        arr = np.frombuffer(data, dtype=DTYPE) if isinstance(data, (bytes, bytearray)) else data
        self.view(addr, arr.size * WORD)[:] = arr

    def digest(self, addr: int, size: int) -> int:
        return digest_of(self.view(addr, size).data)

    def _buffer(self, addr: int) -> DeviceBuffer:
        buf = self.buffers.get(addr)
        if buf is None or not buf.live:
            raise DeviceFault(f"dangling device address {addr}")
        return buf

    # -- streams and events -----------------------------------------------
    def create_stream(self) -> Stream:
        s = Stream(next(self._sid))
        self.streams[s.sid] = s
        return s

    def destroy_stream(self, s: Stream) -> None:
        s.destroyed = True
        self.streams.pop(s.sid, None)

    def _enqueue(self, stream: Stream, issue_time: int, duration: int) -> int:
        if stream.destroyed:
            raise DeviceFault(f"stream {stream.sid} destroyed")
        start = max(stream.tail, issue_time)
        stream.tail = start + duration
        stream.completed.append((stream.tail, next(_op_ids)))
        return stream.tail

    def record_event(self, stream: Stream) -> Event:
        if stream.destroyed:
            raise DeviceFault(f"stream {stream.sid} destroyed")
        return Event(stream, stream.tail)

    def stream_wait_event(self, stream: Stream, event: Event) -> None:
        if event.stream.destroyed:
            raise DeviceFault("waiting on an event of a destroyed stream")
        stream.tail = max(stream.tail, event.time)

    def stream_wait_time(self, stream: Stream, t: int) -> None:
        stream.tail = max(stream.tail, t)

    def device_sync(self, issue_time: int = 0) -> int:
        """Time at which every enqueued operation has completed."""
        return max([issue_time] + [s.tail for s in self.streams.values()])

    # -- operations ---------------------------------------------------------
    def launch_kernel(self, desc: KernelDesc, stream: Stream | None = None, issue_time: int = 0) -> int:
        """Execute ``desc`` and return its completion time."""
        stream = stream or self.default_stream
        reads = [self._buffer(a) for a in desc.reads]
        writes = [self._buffer(a) for a in desc.writes]
        fn = TRANSFORMS.get(desc.transform)
        if fn is None:
            raise DeviceFault(f"unknown transform {desc.transform!r}")
        outs = fn([self.view(b.addr, b.size) for b in reads], desc.params)
        if len(outs) != len(writes):
            raise DeviceFault(f"{desc.kernel_id}: {len(outs)} outputs for {len(writes)} writes")
        for buf, out in zip(writes, outs):
            if out.size * WORD > buf.size:
                raise DeviceFault(f"{desc.kernel_id}: write exceeds buffer at {buf.addr}")
            self.view(buf.addr, out.size * WORD)[:] = out
        self.kernels_executed += 1
        return self._enqueue(stream, issue_time, self.cost.kernel_ns())

    def copy(self, src, dst, nbytes: int, stream: Stream | None = None, issue_time: int = 0) -> int:
        """Copy between ``("dev", addr)`` locations and host numpy arrays.

        Returns completion time.  Host arrays must be uint64.
        """
        stream = stream or self.default_stream
        src_dev = isinstance(src, tuple)
        dst_dev = isinstance(dst, tuple)
        if src_dev and dst_dev:
            channel = "d2d"
            if src[1] != dst[1] and src[1] < dst[1] + nbytes and dst[1] < src[1] + nbytes:
                raise DeviceFault("overlapping d2d copy must be staged")
        elif src_dev:
            channel = "d2h"
        elif dst_dev:
            channel = "h2d"
        else:
            raise DeviceFault("host-to-host copy is not a device operation")
        words = nbytes // WORD
        data = self.view(src[1], nbytes).copy() if src_dev else np.asarray(src, dtype=DTYPE)[:words].copy()
        if dst_dev:
            self.view(dst[1], nbytes)[:] = data
        else:
            dst[:words] = data
        return self._enqueue(stream, issue_time, self.cost.transfer_time(nbytes, channel))
