"""Simulated collective-communication library.

A collective on ``(comm_id, seq)`` completes once every participant has
contributed.  Participants are ranks, except on communicators the proxies
splice (data-parallel or meta with ranks sharing a GPU): those see one
participant per GPU, the way the vendor library sees one rank per device.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .simcore import CostModel, SimError
from .vdev import DTYPE, WORD

OPS = ("sum_allreduce", "send", "recv", "broadcast", "allgather")


class CollectiveFault(SimError):
    pass


class DeadlockError(CollectiveFault):
    pass


@dataclass
class Communicator:
    comm_id: int
    members: tuple[int, ...]
    kind: str = "other"
    ring: dict[int, int] = field(default_factory=dict)  # rank -> gpu
    classified: str = "unknown"  # unknown | data_parallel | other | meta
    inited: set = field(default_factory=set)

    @property
    def established(self) -> bool:
        return len(self.inited) == len(self.members)

    def gpus(self) -> list[int]:
        return sorted({self.ring[r] for r in self.members})

    @property
    def spliced(self) -> bool:
        """True when contributions are pre-accumulated per GPU."""
        return self.classified in ("data_parallel", "meta") and len(self.gpus()) < len(self.members)


@dataclass
class CollectiveCall:
    comm_id: int
    seq: int
    op: str
    nwords: int
    async_: bool = False


@dataclass
class Completion:
    comm_id: int
    seq: int
    op: str
    time: int
    outputs: dict  # participant -> np.ndarray | None


@dataclass
class _Pending:
    call: CollectiveCall
    participants: tuple
    contribs: dict = field(default_factory=dict)  # participant -> (data, ready, extra)


class CollectiveEngine:
    """Matches collectives across ranks and keeps the issuance ledger."""

    def __init__(self, cost: CostModel | None = None):
        self.cost = cost or CostModel()
        self.comms: dict[int, Communicator] = {}
        self.issued: dict[int, dict[int, int]] = {}  # comm -> rank -> next seq
        self.pending: dict[tuple[int, int], _Pending] = {}
        self.completed: dict[tuple[int, int], Completion] = {}
        self.order_log: dict[int, list[tuple[int, int]]] = {}  # rank -> [(comm, seq)]
        self.completed_count = 0
        self.bytes_moved = 0

    # -- setup --------------------------------------------------------------
    def comm_init(self, comm_id: int, rank: int, members: Iterable[int], kind: str = "other",
                  gpu: int | None = None) -> Communicator:
        members = tuple(sorted(members))
        if not members:
            raise CollectiveFault("empty member list")
        if rank not in members:
            raise CollectiveFault(f"rank {rank} not a member of communicator {comm_id}")
        comm = self.comms.get(comm_id)
        if comm is None:
            comm = Communicator(comm_id, members, kind)
            if kind == "meta":
                comm.classified = "meta"
            self.comms[comm_id] = comm
            self.issued[comm_id] = {r: 0 for r in members}
        elif comm.members != members:
            raise CollectiveFault(f"mismatched member lists for communicator {comm_id}")
        comm.inited.add(rank)
        comm.ring[rank] = rank if gpu is None else gpu
        return comm

    def rendezvous(self, placement: dict[int, int]) -> None:
        """Rebuild every ring against ``placement`` (rank -> gpu); seqs kept."""
        missing = [r for c in self.comms.values() for r in c.members if r not in placement]
        if missing:
            raise CollectiveFault(f"rendezvous missing workers {sorted(set(missing))}")
        if self.pending:
            raise CollectiveFault("rendezvous with collectives in flight")
        for c in self.comms.values():
            c.ring = {r: placement[r] for r in c.members}
            if c.classified != "meta":
                c.classified = "unknown"

    def device_world(self, comm_id: int) -> int:
        c = self.comms[comm_id]
        return len(c.gpus()) if c.spliced else len(c.members)

    # -- issuing ------------------------------------------------------------
    def next_seq(self, comm_id: int, rank: int) -> int:
        return self.issued[comm_id][rank]

    def record_issue(self, comm_id: int, rank: int) -> int:
        if comm_id not in self.comms:
            raise CollectiveFault(f"unknown communicator {comm_id}")
        seq = self.issued[comm_id][rank]
        self.issued[comm_id][rank] = seq + 1
        self.order_log.setdefault(rank, []).append((comm_id, seq))
        return seq

    def participants(self, comm_id: int) -> tuple:
        c = self.comms[comm_id]
        if c.spliced:
            return tuple(("gpu", g) for g in c.gpus())
        return tuple(("rank", r) for r in c.members)

    def contribute(self, call: CollectiveCall, participant, data: np.ndarray | None, ready: int,
                   extra: Any = None) -> Completion | None:
        """Add one participant's contribution; return the completion if last."""
        key = (call.comm_id, call.seq)
        p = self.pending.get(key)
        if p is None:
            p = _Pending(call, self.participants(call.comm_id))
            self.pending[key] = p
        else:
            same = p.call.op == call.op or {p.call.op, call.op} == {"send", "recv"}
            if p.call.op in ("send", "recv") and p.call.op == call.op:
                same = False
            if not same or p.call.nwords != call.nwords:
                raise CollectiveFault(
                    f"mismatched collective on comm {call.comm_id} seq {call.seq}: "
                    f"{p.call.op}/{p.call.nwords} vs {call.op}/{call.nwords}"
                )
        if participant not in p.participants:
            raise CollectiveFault(f"{participant} is not a participant of comm {call.comm_id}")
        if participant in p.contribs:
            raise CollectiveFault(f"{participant} contributed twice to {key}")
        p.contribs[participant] = (data, ready, extra)
        if len(p.contribs) < len(p.participants):
            return None
        del self.pending[key]
        comp = self._complete(p)
        self.completed[key] = comp
        self.completed_count += 1
        return comp

    def _complete(self, p: _Pending) -> Completion:
        call = p.call
        nbytes = call.nwords * WORD
        t = max(ready for _, ready, _ in p.contribs.values()) + self.cost.transfer_time(nbytes, "net")
        self.bytes_moved += nbytes
        outs: dict = {}
        if call.op == "sum_allreduce":
            total = np.zeros(call.nwords, dtype=DTYPE)
            for data, _, _ in p.contribs.values():
                total += data[:call.nwords]
            outs = {q: total for q in p.participants}
        elif call.op in ("send", "recv"):
            payload = next(d for d, _, x in p.contribs.values() if x == "send")
            outs = {q: (payload.copy() if x == "recv" else None) for q, (_, _, x) in p.contribs.items()}
        elif call.op == "broadcast":
            payload = next(d for d, _, x in p.contribs.values() if x == "root")
            outs = {q: payload.copy() for q in p.participants}
        elif call.op == "allgather":
            full = np.zeros(call.nwords, dtype=DTYPE)
            for data, _, (seg, nseg) in p.contribs.values():
                w = call.nwords // nseg
                full[seg * w:(seg + 1) * w] = data[seg * w:(seg + 1) * w]
            outs = {q: full for q in p.participants}
        else:
            raise CollectiveFault(f"unknown op {call.op}")
        return Completion(call.comm_id, call.seq, call.op, t, outs)

    # -- audits ---------------------------------------------------------------
    def in_flight(self) -> list[tuple[int, int]]:
        """Collectives issued by some but not all members, or not yet completed."""
        out = set(self.pending)
        for cid, per_rank in self.issued.items():
            if len(set(per_rank.values())) > 1:
                out.add((cid, min(per_rank.values())))
        return sorted(out)

    def check_deadlock(self) -> None:
        bad = self.in_flight()
        if bad:
            raise DeadlockError(f"quiescent with partially issued collectives {bad}")

    def check_program_order(self, ignore: Callable[[int], bool] = lambda cid: False) -> None:
        ranks = sorted(self.order_log)
        for i, a in enumerate(ranks):
            for b in ranks[i + 1:]:
                shared = {cid for cid, c in self.comms.items() if a in c.members and b in c.members and not ignore(cid)}
                if not shared:
                    continue
                pa = [x for x in self.order_log[a] if x[0] in shared]
                pb = [x for x in self.order_log[b] if x[0] in shared]
                k = min(len(pa), len(pb))
                if pa[:k] != pb[:k]:
                    raise CollectiveFault(f"program order differs between ranks {a} and {b}")

    def snapshot(self) -> dict:
        return {
            "issued": {str(c): {str(r): s for r, s in v.items()} for c, v in self.issued.items()},
        }
