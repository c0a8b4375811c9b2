"""Transparent distributed barrier built from tandem meta-allreduces.

Each rank runs a :class:`BarrierAgent`.  The agent never talks to other ranks
directly: its only channel is a 2-integer SUM allreduce ``(need, ack)`` issued
on a dedicated all-ranks communicator at the same program points on every
rank.  While in phase 1 the metas are asynchronous and harvested lazily; a
rank that has seen a request (directly or through ``SUM(need) > 0``) moves to
phase 2, where every collective it issues is synchronous.  ``SUM(ack) ==
world_size`` on a harvested meta means every rank has issued the same
collectives and none are in flight, so the barrier is acquired.

:func:`explore` is an explicit-state checker that drives the same agent over
an abstract data-parallel program through every interleaving and every
command delivery point.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

MODES = ("boundary", "allreduce")


class Phase(enum.IntEnum):
    PHASE1 = 1
    PHASE2 = 2
    ACQUIRED = 3


class BarrierError(Exception):
    pass


@dataclass(frozen=True)
class MetaPayload:
    need_barrier: int
    ack_barrier: int

    def as_words(self) -> tuple[int, int]:
        return (self.need_barrier, self.ack_barrier)


@dataclass
class BarrierAgent:
    rank: int
    world_size: int
    phase: Phase = Phase.PHASE1
    got_command: bool = False
    outstanding: deque = field(default_factory=deque)  # meta seqs not yet harvested

    @property
    def sync_mode(self) -> bool:
        return self.phase == Phase.PHASE2

    @property
    def acquired(self) -> bool:
        return self.phase == Phase.ACQUIRED

    def deliver_command(self, direct: bool = True) -> None:
        """Record a barrier request; ``direct=False`` leaves the phase change to
        the harvest of the meta that carries it."""
        self.got_command = True
        if direct and self.phase == Phase.PHASE1:
            # A directly received request is itself an acknowledgement.
            self.phase = Phase.PHASE2

    def payload(self) -> MetaPayload:
        return MetaPayload(int(self.got_command), int(self.phase >= Phase.PHASE2))

    def issued(self, seq: int) -> None:
        self.outstanding.append(seq)

    def harvest(self, result: Callable[[int], tuple[int, int] | None]) -> list[Phase]:
        """Examine completed metas in issue order; return phase transitions made."""
        moves = []
        while self.outstanding and self.phase != Phase.ACQUIRED:
            sums = result(self.outstanding[0])
            if sums is None:
                break
            self.outstanding.popleft()
            need, ack = sums
            if need > 0 and self.phase == Phase.PHASE1:
                self.phase = Phase.PHASE2
                moves.append(self.phase)
            if ack == self.world_size:
                if self.phase != Phase.PHASE2:
                    raise BarrierError(f"rank {self.rank} saw full ack outside phase 2")
                self.phase = Phase.ACQUIRED
                moves.append(self.phase)
        return moves

    def release(self) -> None:
        if self.phase != Phase.ACQUIRED:
            raise BarrierError(f"rank {self.rank} released before acquisition")
        self.phase = Phase.PHASE1
        self.got_command = False
        self.outstanding.clear()

    def key(self) -> tuple:
        return (int(self.phase), self.got_command, tuple(self.outstanding))

    @classmethod
    def from_key(cls, rank: int, world: int, key: tuple) -> "BarrierAgent":
        return cls(rank, world, Phase(key[0]), key[1], deque(key[2]))

    def to_dict(self) -> dict:
        return {"phase": self.phase.name, "got_command": self.got_command, "outstanding": list(self.outstanding)}

    @classmethod
    def from_dict(cls, rank: int, world: int, d: dict) -> "BarrierAgent":
        return cls(rank, world, Phase[d["phase"]], d["got_command"], deque(d["outstanding"]))


def release_all(agents: Iterable[BarrierAgent]) -> None:
    agents = list(agents)
    if not all(a.acquired for a in agents):
        raise BarrierError("release before all ranks acquired")
    for a in agents:
        a.release()


# ---------------------------------------------------------------------------
# Exhaustive protocol exploration
# ---------------------------------------------------------------------------

@dataclass
class ExploreResult:
    world: int
    minibatches: int
    mode: str
    states: int = 0
    deliveries: int = 0
    acquisitions: int = 0
    end_acquisitions: int = 0
    deadlocks: int = 0
    safety_violations: int = 0
    max_boundaries: int = 0
    bound_violations: int = 0

    @property
    def ok(self) -> bool:
        return not (self.deadlocks or self.safety_violations or self.bound_violations)


def _program(minibatches: int, allreduces: int) -> tuple:
    prog = []
    for _ in range(minibatches):
        prog += ["ar"] * allreduces + ["wait", "bnd"]
    return tuple(prog + ["end"])


def explore(world: int, minibatches: int, allreduces: int = 1, mode: str = "boundary",
            targets: Iterable[tuple[int, ...]] | None = None, max_boundaries: int = 2) -> ExploreResult:
    """Enumerate every interleaving and command delivery point.

    Ranks run the abstract data-parallel program ``(ar^k wait bnd)^mb end``
    on dedicated devices.  A collective completes when every rank has issued
    it.  Each reachable state with a pending command may also take a
    "deliver" transition to each target set (default: every single rank,
    plus all ranks at once).
    """
    if mode not in MODES:
        raise ValueError(mode)
    prog = _program(minibatches, allreduces)
    if targets is None:
        targets = [(r,) for r in range(world)] + ([tuple(range(world))] if world > 1 else [])
    targets = [tuple(t) for t in targets]
    res = ExploreResult(world, minibatches, mode)

    # rank-local state: (pc, sub, agent_key, data_issued, meta_issued, bnd_since)
    #   sub: 0 fresh, 1 meta issued & waiting, 2 data issued & waiting (sync)
    # global: (ranks, meta_sums, delivered)
    #   meta_sums: tuple of (issued_count, need, ack) per meta seq
    init_rank = (0, 0, BarrierAgent(0, world).key(), 0, 0, -1)
    start = (tuple(init_rank for _ in range(world)), (), False)
    seen = {start}
    stack = [start]

    def meta_result(sums, seq):
        if seq < len(sums) and sums[seq][0] == world:
            return sums[seq][1], sums[seq][2]
        return None

    while stack:
        state = stack.pop()
        res.states += 1
        ranks, sums, delivered = state
        agents = [BarrierAgent.from_key(r, world, ranks[r][2]) for r in range(world)]
        if delivered and all(a.acquired for a in agents):
            res.acquisitions += 1
            data_counts = {rk[3] for rk in ranks}
            if len(data_counts) != 1 or any(s[0] != world for s in sums):
                res.safety_violations += 1
            b = max(rk[5] for rk in ranks)
            res.max_boundaries = max(res.max_boundaries, b)
            if b > max_boundaries:
                res.bound_violations += 1
            continue
        finished = all(prog[rk[0]] == "end" for rk in ranks)
        if finished:
            if delivered:
                # Quiescent job end: a consistent cut by construction.
                res.end_acquisitions += 1
                b = max(rk[5] for rk in ranks)
                res.max_boundaries = max(res.max_boundaries, b + 1)
                if b + 1 > max_boundaries:
                    res.bound_violations += 1
                if any(s[0] != world for s in sums):
                    res.safety_violations += 1
            continue
        succs = []
        if not delivered:
            for tgt in targets:
                new = list(ranks)
                for r in tgt:
                    a = BarrierAgent.from_key(r, world, ranks[r][2])
                    a.deliver_command()
                    pc, sub, _, d, m, _b = new[r]
                    new[r] = (pc, sub, a.key(), d, m, 0)
                succs.append((tuple(new), sums, True))
                res.deliveries += 1
        for r in range(world):
            nxt = _step_rank(r, ranks, sums, prog, mode, world, meta_result)
            if nxt is not None:
                succs.append((nxt[0], nxt[1], delivered))
        if not succs:
            res.deadlocks += 1
            continue
        for s in succs:
            if s not in seen:
                seen.add(s)
                stack.append(s)
    return res


def _step_rank(r, ranks, sums, prog, mode, world, meta_result):
    pc, sub, akey, data, meta, bsince = ranks[r]
    agent = BarrierAgent.from_key(r, world, akey)
    if agent.acquired:
        return None
    instr = prog[pc]
    sums = list(sums)

    def data_done(count):
        return all(rk[3] >= count for rk in ranks)

    def issue_meta():
        nonlocal meta
        p = agent.payload()
        while len(sums) <= meta:
            sums.append((0, 0, 0))
        c, n, a = sums[meta]
        sums[meta] = (c + 1, n + p.need_barrier, a + p.ack_barrier)
        agent.issued(meta)
        meta += 1

    def harvest():
        agent.harvest(lambda s: meta_result(sums, s))

    def pack(pc2, sub2, b2=bsince):
        new = list(ranks)
        new[r] = (pc2, sub2, agent.key(), data, meta, b2)
        return tuple(new), tuple(sums)

    if instr == "end":
        return None
    if instr == "ar":
        if sub == 0:
            harvest()
            if mode == "allreduce":
                issue_meta()
                if agent.sync_mode:
                    return pack(pc, 1)
            data += 1
            if agent.sync_mode:
                return pack(pc, 2)
            return pack(pc + 1, 0)
        if sub == 1:
            if meta_result(sums, meta - 1) is None:
                return None
            harvest()
            if agent.acquired:
                return pack(pc, 0)
            data += 1
            return pack(pc, 2)
        if sub == 2:
            if not data_done(data):
                return None
            harvest()
            return pack(pc + 1, 0)
    if instr == "wait":
        if not data_done(data):
            return None
        return pack(pc + 1, 0)
    if instr == "bnd":
        b2 = bsince + 1 if bsince >= 0 else bsince
        if sub == 0:
            harvest()
            issue_meta()
            if agent.sync_mode:
                return pack(pc, 1, b2)
            return pack(pc + 1, 0, b2)
        if sub == 1:
            if meta_result(sums, meta - 1) is None:
                return None
            harvest()
            return pack(pc + 1, 0)
    raise AssertionError(instr)
