"""Replica splicing for ranks time-sliced on one device.

* switch planning: swap out only contents the host cache lacks, swap in only
  contents the device lacks, and turn "present at another address" into a
  device-to-device move (cycles staged through scratch);
* local accumulation of data-parallel collectives so the vendor library
  sees one participant per device;
* squashing of the optimizer window on all but one sharing rank, guarded by
  post-facto validation from buffer checksums;
* the time-slicing overhead monitor.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .simcore import CostModel, SimError, digest_of
from .vdev import DTYPE, WORD, Category, Device


class SpliceError(SimError):
    pass


@dataclass
class ViewEntry:
    size: int
    category: Category
    digest: int
    pending: bool = False  # output of an accumulated collective; content is dead


@dataclass
class Move:
    src: int  # device address, or negative id for scratch slot
    dst: int
    size: int
    digest: int


@dataclass
class SwitchPlan:
    swap_outs: list[tuple[int, int, int, Category]] = field(default_factory=list)  # (addr, size, digest, cat)
    swap_ins: list[tuple[int, int, int, Category]] = field(default_factory=list)
    d2d_moves: list[Move] = field(default_factory=list)
    gc_frees: list[tuple[int, int]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.swap_outs or self.swap_ins or self.d2d_moves)


@dataclass
class SwitchReport:
    gpu: int
    from_rank: int | None
    to_rank: int
    reason: str = ""
    swap_out_bytes: Counter = field(default_factory=Counter)
    swap_in_bytes: Counter = field(default_factory=Counter)
    d2d_bytes: int = 0
    d2d_copies: int = 0
    staged: int = 0
    checksum_bytes: int = 0
    duration_ns: int = 0
    start: int = 0

    @property
    def total_swap_out(self) -> int:
        return sum(self.swap_out_bytes.values())

    @property
    def total_swap_in(self) -> int:
        return sum(self.swap_in_bytes.values())

    def po_swap_out(self) -> int:
        return self.swap_out_bytes[Category.PARAM.value] + self.swap_out_bytes[Category.OPT_STATE.value]

    def to_record(self) -> dict:
        return {
            "gpu": self.gpu, "from": self.from_rank, "to": self.to_rank, "reason": self.reason,
            "swap_out": dict(self.swap_out_bytes), "swap_in": dict(self.swap_in_bytes),
            "d2d_bytes": self.d2d_bytes, "d2d_copies": self.d2d_copies, "staged": self.staged,
            "checksum_bytes": self.checksum_bytes, "duration_ns": self.duration_ns,
        }


class BufferLedger:
    """Per-GPU record of device contents and the host cache, with per-rank views."""

    def __init__(self, device: Device):
        self.device = device
        self.device_entries: dict[int, tuple[int, int]] = {}  # addr -> (size, digest)
        self.host_cache: dict[int, bytes] = {}
        self.views: dict[int, dict[int, ViewEntry]] = {}

    # -- device content tracking ---------------------------------------------
    def invalidate(self, addr: int, size: int) -> list[tuple[int, int]]:
        gone = [(a, s) for a, (s, _) in self.device_entries.items() if a < addr + size and addr < a + s]
        for a, _ in gone:
            del self.device_entries[a]
        return gone

    def note_device(self, addr: int, size: int, digest: int) -> None:
        self.invalidate(addr, size)
        self.device_entries[addr] = (size, digest)

    def find_on_device(self, digest: int, size: int) -> int | None:
        for a, (s, d) in sorted(self.device_entries.items()):
            if d == digest and s == size:
                return a
        return None

    def cache_put(self, digest: int, data: bytes) -> None:
        if digest_of(data) != digest:
            raise SpliceError("host cache entry does not match its digest")
        self.host_cache[digest] = data

    def capture(self, rank: int, live: dict[int, tuple[int, Category]]) -> int:
        """Checksum ``rank``'s live buffers from the device into its view.

        Returns the number of bytes checksummed.
        """
        view = self.views.setdefault(rank, {})
        old = view
        new: dict[int, ViewEntry] = {}
        nbytes = 0
        for addr, (size, cat) in sorted(live.items()):
            prev = old.get(addr)
            pending = prev is not None and prev.pending and prev.size == size
            if pending:
                new[addr] = prev
                continue
            d = self.device.digest(addr, size)
            nbytes += size
            new[addr] = ViewEntry(size, cat, d)
            self.note_device(addr, size, d)
        self.views[rank] = new
        return nbytes


def plan_switch(ledger: BufferLedger, from_rank: int | None, to_rank: int) -> SwitchPlan:
    """Plan the transfers that make the device hold ``to_rank``'s view.

    ``from_rank``'s view must already be captured.
    """
    plan = SwitchPlan()
    queued: set[int] = set()
    if from_rank is not None:
        for addr, e in sorted(ledger.views.get(from_rank, {}).items()):
            if e.pending:
                continue
            if e.digest not in ledger.host_cache and e.digest not in queued:
                plan.swap_outs.append((addr, e.size, e.digest, e.category))
                queued.add(e.digest)
    for addr, e in sorted(ledger.views.get(to_rank, {}).items()):
        if e.pending:
            continue
        cur = ledger.device_entries.get(addr)
        if cur == (e.size, e.digest):
            continue
        src = ledger.find_on_device(e.digest, e.size)
        if src is not None:
            plan.d2d_moves.append(Move(src, addr, e.size, e.digest))
        elif e.digest in ledger.host_cache or e.digest in queued:
            plan.swap_ins.append((addr, e.size, e.digest, e.category))
        else:
            raise SpliceError(f"content {e.digest:016x} of rank {to_rank} at {addr} is lost")
    dests = [(a, s) for a, s, *_ in plan.swap_ins] + [(m.dst, m.size) for m in plan.d2d_moves]
    for a, s in dests:
        for ea, (es, _) in ledger.device_entries.items():
            if ea < a + s and a < ea + es and (ea, es) not in plan.gc_frees:
                plan.gc_frees.append((ea, es))
    return plan


def _overlap(a: int, sa: int, b: int, sb: int) -> bool:
    return a < b + sb and b < a + sa


def sequence_moves(moves: list[Move]) -> list[tuple[str, int, int, int]]:
    """Order device moves so no source is clobbered before it is read.

    Returns copy steps ``(kind, src, dst, size)`` with kind ``d2d``,
    ``stage`` (device -> scratch slot) or ``unstage`` (scratch -> device).
    Scratch slots are negative integers.  Cycles cost one extra copy each.
    """
    pending = [Move(m.src, m.dst, m.size, m.digest) for m in moves if m.src != m.dst]
    steps: list[tuple[str, int, int, int]] = []
    slot = 0
    while pending:
        for i, m in enumerate(pending):
            blocked = any(
                j != i and o.src >= 0 and _overlap(m.dst, m.size, o.src, o.size) for j, o in enumerate(pending)
            ) or (m.src >= 0 and _overlap(m.src, m.size, m.dst, m.size))
            if not blocked:
                steps.append(("unstage" if m.src < 0 else "d2d", m.src, m.dst, m.size))
                pending.pop(i)
                break
        else:
            m = next(x for x in pending if x.src >= 0)
            slot -= 1
            steps.append(("stage", m.src, slot, m.size))
            m.src = slot
    return steps


@dataclass
class ExecResult:
    duration_ns: int
    swap_out: Counter
    swap_in: Counter
    d2d_bytes: int
    d2d_copies: int
    staged: int


def execute_plan(ledger: BufferLedger, plan: SwitchPlan, cost: CostModel,
                 scratch_capacity: int | None = None) -> ExecResult:
    """Carry out ``plan`` on the device; every write is digest-verified."""
    dev = ledger.device
    t = 0
    out_c: Counter = Counter()
    in_c: Counter = Counter()
    for addr, size, digest, cat in plan.swap_outs:
        data = dev.read(addr, size)
        ledger.cache_put(digest, data)
        t += cost.transfer_time(size, "d2h")
        out_c[cat.value] += size
    steps = sequence_moves(plan.d2d_moves)
    staged_bytes = sum(s for k, _, _, s in steps if k == "stage")
    via_host = scratch_capacity is not None and staged_bytes > scratch_capacity
    scratch: dict[int, np.ndarray] = {}
    d2d_bytes = copies = staged = 0
    for kind, src, dst, size in steps:
        if kind == "stage":
            scratch[dst] = dev.view(src, size).copy()
            staged += 1
            t += cost.transfer_time(size, "d2h" if via_host else "d2d")
        elif kind == "unstage":
            dev.view(dst, size)[:] = scratch.pop(src)
            t += cost.transfer_time(size, "h2d" if via_host else "d2d")
        else:
            dev.view(dst, size)[:] = dev.view(src, size)
            t += cost.transfer_time(size, "d2d")
        if kind != "stage":
            d2d_bytes += size
        copies += 1
    for m in plan.d2d_moves:
        if dev.digest(m.dst, m.size) != m.digest:
            raise SpliceError(f"d2d move to {m.dst} produced wrong content")
    for m in plan.d2d_moves:
        ledger.note_device(m.dst, m.size, m.digest)
    for addr, size, digest, cat in plan.swap_ins:
        data = ledger.host_cache[digest]
        if digest_of(data) != digest:
            raise SpliceError("host cache corruption")
        dev.write(addr, data)
        ledger.note_device(addr, size, digest)
        t += cost.transfer_time(size, "h2d")
        in_c[cat.value] += size
    return ExecResult(t, out_c, in_c, d2d_bytes, copies, staged)


# ---------------------------------------------------------------------------
# Local accumulation
# ---------------------------------------------------------------------------

@dataclass
class _Acc:
    total: np.ndarray
    ranks: set = field(default_factory=set)
    outputs: dict = field(default_factory=dict)  # rank -> (addr, nwords) or None
    result: np.ndarray | None = None
    time: int = 0
    installed: set = field(default_factory=set)


class LocalAccumulator:
    """Scratch-buffer accumulation of data-parallel collectives on one GPU."""

    def __init__(self):
        self.accs: dict[tuple[int, int], _Acc] = {}

    def add(self, key: tuple[int, int], rank: int, data: np.ndarray, output: tuple[int, int] | None) -> np.ndarray:
        acc = self.accs.get(key)
        if acc is None:
            acc = _Acc(np.zeros(data.size, dtype=DTYPE))
            self.accs[key] = acc
        if rank in acc.ranks:
            raise SpliceError(f"rank {rank} accumulated twice into {key}")
        acc.total += data
        acc.ranks.add(rank)
        acc.outputs[rank] = output
        return acc.total

    def count(self, key) -> int:
        acc = self.accs.get(key)
        return 0 if acc is None else len(acc.ranks)

    def complete(self, key, result: np.ndarray, time: int) -> None:
        acc = self.accs[key]
        acc.result = result.copy()
        acc.time = time

    def result(self, key) -> tuple[np.ndarray, int] | None:
        acc = self.accs.get(key)
        if acc is None or acc.result is None:
            return None
        return acc.result, acc.time

    def ready_outputs(self, rank: int) -> list[tuple[tuple[int, int], int, int, np.ndarray, int]]:
        """Completed results not yet installed for ``rank``."""
        out = []
        for key, acc in sorted(self.accs.items()):
            if acc.result is not None and rank in acc.outputs and rank not in acc.installed:
                o = acc.outputs[rank]
                if o is not None:
                    out.append((key, o[0], o[1], acc.result, acc.time))
        return out

    def mark_installed(self, key, rank: int) -> None:
        acc = self.accs[key]
        acc.installed.add(rank)
        if acc.installed >= {r for r, o in acc.outputs.items() if o is not None}:
            del self.accs[key]

    def busy(self) -> bool:
        return bool(self.accs)


def on_dp_allreduce(grads: list[np.ndarray]) -> np.ndarray:
    """Device-level payload of locally accumulated gradients (element-wise sum)."""
    total = np.zeros(grads[0].size, dtype=DTYPE)
    for g in grads:
        total += g
    return total


# ---------------------------------------------------------------------------
# Squashing and validation
# ---------------------------------------------------------------------------

@dataclass
class SquashConfig:
    enabled: bool = True
    validation_period: int = 4
    window: str = "optimizer_step"
    root_rank_rule: str = "last-in-cycle"


@dataclass
class ValidationRecord:
    mutations: tuple  # ((addr, size, digest), ...)
    d2h: tuple  # (digest, ...)


def validate_window(records: dict[int, ValidationRecord]) -> tuple[bool, str]:
    recs = list(records.items())
    if not recs:
        return True, ""
    r0, ref = recs[0]
    for r, rec in recs[1:]:
        ma = {(a, s) for a, s, _ in ref.mutations}
        mb = {(a, s) for a, s, _ in rec.mutations}
        if ma != mb:
            return False, f"mutation addresses differ between ranks {r0} and {r}"
        if ref.mutations != rec.mutations:
            return False, f"mutation checksums differ between ranks {r0} and {r}"
        if ref.d2h != rec.d2h:
            return False, f"device-to-host copies differ between ranks {r0} and {r}"
    return True, ""


class Squasher:
    """Squash state of one GPU's sharing group."""

    def __init__(self, config: SquashConfig, group: tuple[int, ...], first_step: int = 0):
        self.config = config
        self.group = tuple(group)
        self.first_step = first_step
        self.disabled = not config.enabled or len(self.group) < 2
        self.pre: dict[int, dict[int, dict]] = {}  # step -> rank -> {addr: ViewEntry}
        self.records: dict[int, dict[int, ValidationRecord]] = {}
        self.outcomes: list[tuple[int, bool, str]] = []
        self.executed = 0
        self.squashed = 0

    def is_validation(self, step: int) -> bool:
        k = self.config.validation_period
        return step == self.first_step or (k > 0 and step % k == 0)

    def squashes(self, rank: int, step: int) -> bool:
        return not self.disabled and rank in self.pre.get(step, {})

    def root_done(self, rank: int, step: int, mutated: dict[int, ViewEntry]) -> list[int]:
        """Root finished window ``step``: pre-apply its result to the others."""
        if self.disabled or self.is_validation(step):
            return []
        targets = [r for r in self.group if r != rank]
        self.pre.setdefault(step, {})
        for r in targets:
            self.pre[step][r] = mutated
        return targets

    def consume(self, rank: int, step: int) -> None:
        self.pre.get(step, {}).pop(rank, None)
        if step in self.pre and not self.pre[step]:
            del self.pre[step]

    def record(self, step: int, rank: int, rec: ValidationRecord) -> tuple[bool, str] | None:
        recs = self.records.setdefault(step, {})
        recs[rank] = rec
        if len(recs) < len(self.group):
            return None
        ok, why = validate_window(recs)
        del self.records[step]
        self.outcomes.append((step, ok, why))
        if not ok:
            self.disabled = True
            self.pre.clear()
        return ok, why


def monitor_overhead(sliced_minibatch_ns: float, n: int, dedicated_minibatch_ns: float,
                     threshold: float = 0.05) -> tuple[float, str]:
    """Time-slicing overhead relative to ``n`` dedicated mini-batches."""
    if n <= 1:
        return 0.0, "keep"
    overhead = sliced_minibatch_ns / (n * dedicated_minibatch_ns) - 1.0
    return overhead, ("disable_time_slicing" if overhead > threshold else "keep")
