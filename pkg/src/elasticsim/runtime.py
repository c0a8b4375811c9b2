"""Job runtime: interprets per-rank programs on simulated proxies.

Each rank is a :class:`Worker` holding only host-visible state (program
counter, symbolic buffer table, virtual handles, host arrays, file log,
barrier agent).  Device work goes through the :class:`~.proxy.ProxyServer`
of the GPU the rank is placed on.  With time-slicing several ranks share a
proxy; only the active one runs, and the proxy switches at the points where
the active rank would otherwise wait on its local peers.

The scheduler is a deterministic "lowest host clock first" loop over the
runnable ranks, so two runs of the same job produce identical traces.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .barrier import MODES, BarrierAgent, BarrierError, Phase, release_all
from .collectives import CollectiveCall, CollectiveEngine, Completion, DeadlockError
from .proxy import BidiAllocator, DeviceCall, LogEntry, ProxyServer
from .simcore import MiB, CostModel, SimError, Trace, digest_of
from .splice import SquashConfig, Squasher, ValidationRecord, ViewEntry, monitor_overhead
from .vdev import DTYPE, WORD, Category, Device, KernelDesc
from .workload.program import JobPlan, host_batch, init_program, step_program, file_content
from .workload.spec import JobSpec, SpecError, slicing_groups

META_COMM = 0
STABLE_CATEGORIES = ("P", "O", "G")


@dataclass
class RuntimeConfig:
    slicing: int = 1
    squash: bool = True
    validation_period: int = 4
    eager_dispatch: bool = True
    barrier_mode: str = "boundary"  # "off" issues no metas; such a job cannot be checkpointed
    proxied: bool = True  # False: dedicated baseline, no dispatch cost, no metas
    device_capacity: int = 4 * MiB
    slack_fraction: float = 0.02
    scratch_capacity: int | None = None
    trace_dispatch: bool = False
    misclassify: dict = field(default_factory=dict)  # rank -> buffer names with flipped stability
    skip_swap_in: bool = False  # fault hook: drop swap-ins from every plan

    def __post_init__(self):
        if self.barrier_mode not in MODES + ("off",):
            raise ValueError(f"barrier_mode must be one of {MODES + ('off',)}")
        if not 0 <= self.slack_fraction < 1:
            raise ValueError("slack_fraction must be in [0, 1)")

    def region_high(self) -> int:
        high = int(self.device_capacity * (1 - self.slack_fraction))
        return high // 256 * 256


@dataclass
class Worker:
    rank: int
    gpu: int
    agent: BarrierAgent
    rng: random.Random
    phase: str = "init"  # init | train | done
    step: int = 0
    idx: int = 0
    sub: int = 0
    addr: dict = field(default_factory=dict)  # buffer name -> device address
    streams: dict = field(default_factory=dict)  # stream name -> virtual handle
    host: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)  # path -> bytes, None once deleted
    written: list = field(default_factory=list)  # mutation log, set semantics
    host_time: int = 0
    waiting: list = field(default_factory=list)
    outstanding: list = field(default_factory=list)
    inbox: list = field(default_factory=list)
    parked: str | None = None
    inited: bool = False
    yield_req: str | None = None
    window: str | None = None
    window_pre: dict = field(default_factory=dict)
    window_d2h: list = field(default_factory=list)
    executed_instr: int = 0

    @property
    def pc(self) -> tuple:
        return (self.phase, self.step, self.idx, self.sub)


@dataclass
class InboxEntry:
    key: tuple
    addr: int
    nwords: int
    data: np.ndarray
    time: int
    spliced: bool


class JobRuntime:
    """One job's ranks together with the proxies they run on."""

    def __init__(self, spec: JobSpec, cost: CostModel | None = None, config: RuntimeConfig | None = None,
                 trace: Trace | None = None, job: str = "job", gpu_ids: list[int] | None = None,
                 start_time: int = 0, _restoring: bool = False):
        spec.validate()
        self.spec = spec
        self.cost = cost or CostModel()
        self.config = config or RuntimeConfig()
        self.trace = trace if trace is not None else Trace()
        self.job = job
        self.plan = JobPlan.build(spec)
        self.topo = self.plan.topo
        groups = slicing_groups(self.topo, self.config.slicing)
        if gpu_ids is None:
            gpu_ids = list(range(len(groups)))
        if len(gpu_ids) != len(groups):
            raise SpecError(f"need {len(groups)} GPUs, got {len(gpu_ids)}")
        self.groups = {g: grp for g, grp in zip(gpu_ids, groups)}
        self.placement = {r: g for g, grp in self.groups.items() for r in grp}
        self.engine = CollectiveEngine(self.cost)
        self.proxies: dict[int, ProxyServer] = {}
        self.workers: dict[int, Worker] = {}
        self.done_time: dict[tuple, int] = {}
        self.meta_results: dict[int, tuple[int, int]] = {}
        self.local_done: set = set()
        self.acc_ready: dict[tuple, int] = {}
        self.issue_out: dict[tuple, tuple] = {}
        self.squash_d2h: dict[tuple, list] = {}
        self.step_ledger: list[tuple[int, int]] = []
        self.step_end: dict[int, int] = {}
        self.init_end = start_time
        self.all_inited = False
        self.stop_step: int | None = None
        self.barrier_requested = False
        self.barrier_state: str | None = None  # None | requested | acquired | end
        self.instr_count = 0
        self.squashed_kernels = 0
        self.executed_window_kernels = 0
        self.validation_outcomes: list[tuple[int, int, bool, str]] = []
        self._local_members = {}
        for cid, c in self.plan.comms.items():
            for r in c.members:
                key = (cid, self.placement[r])
                self._local_members[key] = self._local_members.get(key, 0) + 1
        if not _restoring:
            self._build_fresh(start_time)

    # ------------------------------------------------------------------ setup
    def _new_proxy(self, gpu: int) -> ProxyServer:
        cfg = self.config
        dev = Device(gpu, cfg.device_capacity, self.cost)
        p = ProxyServer(gpu, dev, self.cost, SquashConfig(cfg.squash, cfg.validation_period),
                        cfg.scratch_capacity)
        if not cfg.proxied:
            p.dispatch_ns = 0
        p.skip_swap_in = cfg.skip_swap_in
        p.misclassify = {r: set(v) for r, v in cfg.misclassify.items()}
        return p

    def _build_fresh(self, start_time: int) -> None:
        for g, grp in self.groups.items():
            p = self._new_proxy(g)
            for r in grp:
                p.register(r, BidiAllocator(0, self.config.region_high()))
            self._check_partition(grp)
            self.proxies[g] = p
        for r in range(self.spec.world_size):
            self.workers[r] = Worker(r, self.placement[r], BarrierAgent(r, self.spec.world_size),
                                     random.Random(self.spec.seed * 7919 + r), host_time=start_time)
        self.trace.emit("job_start", self.job, None, start_time, world=self.spec.world_size,
                        gpus=len(self.proxies), slicing=self.config.slicing)

    def _check_partition(self, grp) -> None:
        parts = {self.topo.coords[r].partition for r in grp}
        if len(parts) > 1:
            raise SpecError(f"ranks {grp} span model-parallel partitions {sorted(parts)}")

    def proxy_of(self, rank: int) -> ProxyServer:
        return self.proxies[self.placement[rank]]

    def _sliced(self, w: Worker) -> bool:
        return len(self.proxy_of(w.rank).registered_ranks) > 1

    # ---------------------------------------------------------------- program
    def _instr(self, w: Worker) -> tuple:
        if w.phase == "init":
            return init_program(self.plan, w.rank)[w.idx]
        return step_program(self.plan, w.rank, w.step)[w.idx]

    def _advance(self, w: Worker) -> None:
        w.idx += 1
        w.sub = 0
        if w.phase == "init" and w.idx >= len(init_program(self.plan, w.rank)):
            w.phase, w.idx = "train", 0

    # -------------------------------------------------------------- scheduling
    def _key_done(self, key) -> bool:
        if key == "init":
            return self.all_inited
        return key in self.done_time

    def _blocked(self, w: Worker) -> bool:
        return any(not self._key_done(k) for k in w.waiting)

    def _eff_time(self, w: Worker) -> int:
        t = w.host_time
        for k in w.waiting:
            if k != "init":
                t = max(t, self.done_time.get(k, t))
        return t

    def _runnable(self, w: Worker) -> bool:
        if w.phase == "done" or w.parked:
            return False
        if self.proxy_of(w.rank).active_rank != w.rank:
            return False
        return not self._blocked(w)

    def run(self, max_instr: int | None = None) -> str:
        """Run until done, barrier acquired, all stopped, or ``max_instr`` executed."""
        executed = 0
        while True:
            if max_instr is not None and executed >= max_instr:
                return "paused"
            best = None
            for w in self.workers.values():
                if self._runnable(w):
                    key = (self._eff_time(w), w.rank)
                    if best is None or key < best[0]:
                        best = (key, w)
            if best is None:
                return self._quiescent()
            self._step(best[1])
            executed += 1

    def _quiescent(self) -> str:
        ws = list(self.workers.values())
        if all(w.phase == "done" for w in ws):
            if self.barrier_requested and self.barrier_state == "requested":
                self._acquired("end")
                return "acquired"
            return "done"
        if self.barrier_state == "acquired":
            return "acquired"
        if all(w.phase == "done" or w.parked == "stop" for w in ws):
            return "stopped"
        if self.barrier_requested and all(w.phase == "done" or w.parked == "barrier" for w in ws):
            self._acquired("boundary")
            return "acquired"
        stuck = {w.rank: (w.pc, w.waiting) for w in ws if w.phase != "done" and not w.parked}
        raise DeadlockError(f"no runnable rank; in flight {self.engine.in_flight()}; waiting {stuck}")

    def _step(self, w: Worker) -> None:
        if w.waiting:
            self._finish_wait(w)
        if w.phase == "train" and w.idx == 0 and w.sub == 0 and self.stop_step is not None \
                and w.step >= self.stop_step:
            w.parked = "stop"
        else:
            instr = self._instr(w)
            getattr(self, "_op_" + instr[0])(w, *instr[1:])
            w.executed_instr += 1
            self.instr_count += 1
        if self._sliced(w):
            self._maybe_switch(w)

    def _finish_wait(self, w: Worker) -> None:
        t = self._eff_time(w)
        w.host_time = t
        w.waiting = []
        self._install_inbox(w)

    # ------------------------------------------------------------ time-slicing
    def _local_incomplete(self, w: Worker) -> bool:
        g = w.gpu
        for k in w.waiting:
            if k == "init":
                if not all(self.workers[r].inited for r in self.proxies[g].registered_ranks):
                    return True
                continue
            if self.engine.comms[k[0]].spliced and (g, k) not in self.local_done:
                return True
        return False

    def _eligible(self, w: Worker) -> bool:
        return w.phase != "done" and not w.parked and not self._local_incomplete(w)

    def _maybe_switch(self, w: Worker) -> None:
        reason = None
        if w.yield_req:
            reason, w.yield_req = w.yield_req, None
        elif w.phase == "done":
            reason = "done"
        elif w.parked:
            reason = w.parked
        elif w.waiting and self._local_incomplete(w):
            reason = "init" if w.waiting == ["init"] else self._wait_reason(w)
        if reason is None:
            return
        p = self.proxy_of(w.rank)
        order = p.registered_ranks
        i = order.index(w.rank)
        for j in range(1, len(order)):
            cand = self.workers[order[(i + j) % len(order)]]
            if self._eligible(cand):
                self._switch(p, w, cand, reason)
                return

    def _wait_reason(self, w: Worker) -> str:
        kinds = {self.engine.comms[k[0]].classified for k in w.waiting if k != "init"}
        return "meta_sync" if kinds == {"meta"} else "dp_sync"

    def _switch(self, p: ProxyServer, w: Worker, nxt: Worker, reason: str) -> None:
        if w.phase != "done":
            live_a = [a for a, (_, c) in p.live_buffers(w.rank).items() if c == Category.ACTIVATION]
            if live_a:
                raise SimError(f"rank {w.rank} switched out with live activations at {live_a}")
        t0 = p.device.device_sync(w.host_time)
        rep = p.context_switch(nxt.rank, t0, reason)
        end = t0 + rep.duration_ns
        p.device_free_at = end
        install = self._install_inbox(nxt)
        p.device_free_at += install
        nxt.host_time = max(nxt.host_time, t0 if self.config.eager_dispatch else p.device_free_at)
        self.trace.emit("switch", self.job, w.rank, t0, **rep.to_record())

    def _install_inbox(self, w: Worker) -> int:
        p = self.proxy_of(w.rank)
        if p.active_rank != w.rank or not w.inbox:
            return 0
        cost = 0
        for e in w.inbox:
            p.device.view(e.addr, e.nwords * WORD)[:] = e.data[:e.nwords]
            p.ledger.invalidate(e.addr, e.nwords * WORD)
            view = p.ledger.views.get(w.rank, {})
            if e.addr in view:
                del view[e.addr]
            if e.spliced:
                cost += self.cost.transfer_time(e.nwords * WORD, "d2d")
                p.accumulator.mark_installed(e.key, w.rank)
        w.inbox = []
        return cost

    # ------------------------------------------------------------------ helpers
    def _lat(self, w: Worker) -> int:
        return self.proxy_of(w.rank).dispatch_ns

    def _issue_time(self, w: Worker) -> int:
        return max(w.host_time, self.proxy_of(w.rank).device_free_at)

    def _stream(self, w: Worker):
        p = self.proxy_of(w.rank)
        return p.stream(w.rank, w.streams["main"])

    def _buf(self, w: Worker, name: str) -> int:
        return w.addr[name]

    def _dispatch(self, w: Worker, call: DeviceCall, now: int | None = None):
        p = self.proxy_of(w.rank)
        resp = p.dispatch(w.rank, call, self._issue_time(w) if now is None else now)
        if resp.error:
            raise SimError(f"rank {w.rank}: device error {resp.error}")
        w.host_time += resp.latency_ns
        if self.config.trace_dispatch:
            self.trace.emit("dispatch", self.job, w.rank, w.host_time, call=call.name)
        return resp

    # ------------------------------------------------------------ instructions
    def _op_stream(self, w: Worker, name: str) -> None:
        w.streams[name] = self._dispatch(w, DeviceCall("create_stream")).value
        self._advance(w)

    def _op_comm_init(self, w: Worker, cid: int) -> None:
        c = self.plan.comms[cid]
        self._dispatch(w, DeviceCall("comm_init", (cid,)))
        self.engine.comm_init(cid, w.rank, c.members, c.kind, w.gpu)
        p = self.proxy_of(w.rank)
        p.comm_counts[cid] = p.comm_counts.get(cid, 0) + 1
        self._advance(w)
        if self._sliced(w):
            w.yield_req = "comm_init"

    def _op_alloc(self, w: Worker, name: str, nbytes: int, cat: str) -> None:
        stability = "stable" if cat in STABLE_CATEGORIES else "transient"
        w.addr[name] = self.proxy_of(w.rank).alloc(w.rank, nbytes, stability, Category(cat), name)
        w.host_time += self._lat(w)
        self._advance(w)

    def _op_free(self, w: Worker, name: str) -> None:
        self.proxy_of(w.rank).free(w.rank, w.addr.pop(name))
        w.host_time += self._lat(w)
        self._advance(w)

    def _op_kernel(self, w: Worker, kid, reads, writes, transform, params) -> None:
        if w.window == "squashed":
            self.squashed_kernels += 1
            self.proxy_of(w.rank).squasher.squashed += 1
            self._advance(w)
            return
        if w.window is not None:
            self.executed_window_kernels += 1
            sq = self.proxy_of(w.rank).squasher
            if sq is not None:
                sq.executed += 1
        desc = KernelDesc(kid, tuple(w.addr[n] for n in reads), tuple(w.addr[n] for n in writes), transform, params)
        self._dispatch(w, DeviceCall("launch_kernel", (desc, w.streams["main"])))
        self._advance(w)

    def _op_h2d(self, w: Worker, name: str, key, nwords: int) -> None:
        data = host_batch(key, nwords, self.spec.seed)
        self._dispatch(w, DeviceCall("memcpy", (data, ("dev", w.addr[name]), nwords * WORD, w.streams["main"])))
        self._advance(w)

    def _op_d2h(self, w: Worker, name: str, nwords: int, tag: str) -> None:
        if w.window == "squashed":
            served = self.squash_d2h[(w.gpu, w.step)]
            data = np.array(served[len(w.window_d2h)], dtype=DTYPE)
            w.window_d2h.append(None)
            w.host_time += self._lat(w)
        else:
            data = np.zeros(nwords, dtype=DTYPE)
            resp = self._dispatch(w, DeviceCall("memcpy", (("dev", w.addr[name]), data, nwords * WORD,
                                                           w.streams["main"])))
            w.host_time = max(w.host_time, resp.done)
            if w.window == "root":
                self.squash_d2h.setdefault((w.gpu, w.step), []).append(data.tolist())
        if w.window == "validate":
            w.window_d2h.append(digest_of(data.tobytes()))
        w.host[tag] = data.tolist()
        self._advance(w)

    def _op_file_write(self, w: Worker, path: str, key) -> None:
        w.files[path] = file_content(key)
        track_file_write(w.written, path, "w")
        w.host_time += self._lat(w)
        self._advance(w)

    def _op_file_delete(self, w: Worker, path: str) -> None:
        w.files[path] = None
        self._advance(w)

    def _op_init_done(self, w: Worker) -> None:
        if w.sub == 0:
            w.inited = True
            w.sub = 1
            if all(x.inited for x in self.workers.values()):
                self._classify()
            w.waiting = ["init"]
            return
        self._advance(w)

    def _classify(self) -> None:
        """Intent inference: a communicator with several local members is data-parallel."""
        for cid, c in self.engine.comms.items():
            if c.classified == "meta":
                continue
            local = max(p.comm_counts.get(cid, 0) for p in self.proxies.values())
            c.classified = "data_parallel" if local > 1 else "other"
        self.all_inited = True
        self.init_end = max(w.host_time for w in self.workers.values())
        dp = sorted(cid for cid, c in self.engine.comms.items() if c.classified == "data_parallel")
        self.trace.emit("classify", self.job, None, self.init_end, data_parallel=dp)
        for g, p in self.proxies.items():
            if len(p.registered_ranks) > 1:
                p.squasher = Squasher(p.squash_config, tuple(p.registered_ranks), first_step=self._min_step())

    def _min_step(self) -> int:
        return min(w.step for w in self.workers.values())

    # -- collectives -----------------------------------------------------------
    def _harvest(self, w: Worker) -> None:
        before = w.agent.phase
        w.agent.harvest(lambda seq: self.meta_results.get(seq))
        if w.agent.phase != before:
            self.trace.emit("barrier_phase", self.job, w.rank, w.host_time, phase=w.agent.phase.name)

    def _issue(self, w: Worker, cid: int, op: str, data, out_addr: int | None, nwords: int,
               async_: bool, extra=None) -> tuple:
        seq = self.engine.record_issue(cid, w.rank)
        key = (cid, seq)
        call = CollectiveCall(cid, seq, op, nwords, async_)
        w.host_time += self._lat(w)
        ready = w.host_time
        if data is not None and cid != META_COMM:
            ready = max(ready, self._stream(w).tail)
        comm = self.engine.comms[cid]
        if out_addr is not None:
            self.issue_out[(cid, seq, w.rank)] = (out_addr, nwords)
        if comm.spliced:
            p = self.proxy_of(w.rank)
            if data is not None and cid != META_COMM:
                ready += self.cost.transfer_time(nwords * WORD, "d2d")
            total = p.accumulator.add(key, w.rank, data, (out_addr, nwords) if out_addr is not None else None)
            if out_addr is not None:
                p.ledger.views.setdefault(w.rank, {})[out_addr] = ViewEntry(nwords * WORD, Category.GRAD, 0, True)
            rk = (w.gpu, key)
            self.acc_ready[rk] = max(self.acc_ready.get(rk, 0), ready)
            if p.accumulator.count(key) == self._local_members[(cid, w.gpu)]:
                self.local_done.add(rk)
                comp = self.engine.contribute(call, ("gpu", w.gpu), total.copy(), self.acc_ready.pop(rk), extra)
                if cid == META_COMM:
                    del p.accumulator.accs[key]
                if comp is not None:
                    self._complete(comp)
        else:
            comp = self.engine.contribute(call, ("rank", w.rank), data, ready, extra)
            if comp is not None:
                self._complete(comp)
        if self.config.trace_dispatch:
            self.trace.emit("collective", self.job, w.rank, w.host_time, comm=cid, seq=seq, op=op)
        return key

    def _complete(self, comp: Completion) -> None:
        key = (comp.comm_id, comp.seq)
        self.done_time[key] = comp.time
        if comp.comm_id == META_COMM:
            out = next(iter(comp.outputs.values()))
            self.meta_results[comp.seq] = (int(out[0]), int(out[1]))
        for part, out in comp.outputs.items():
            if out is None:
                continue
            if part[0] == "rank":
                ranks = [part[1]]
                spliced = False
            else:
                p = self.proxies[part[1]]
                acc = p.accumulator.accs.get(key)
                if acc is None:
                    continue
                p.accumulator.complete(key, out, comp.time)
                ranks = sorted(r for r, o in acc.outputs.items() if o is not None)
                spliced = True
            for r in ranks:
                tgt = self.issue_out.pop((comp.comm_id, comp.seq, r), None)
                if tgt is None:
                    continue
                w = self.workers[r]
                w.inbox.append(InboxEntry(key, tgt[0], tgt[1], out.copy(), comp.time, spliced))
                self._install_inbox(w)
        self.engine.completed.pop(key, None)

    def _meta(self, w: Worker) -> tuple:
        pl = w.agent.payload()
        key = self._issue(w, META_COMM, "sum_allreduce", np.array(pl.as_words(), dtype=DTYPE), None, 2,
                          not w.agent.sync_mode)
        w.agent.issued(key[1])
        return key

    @property
    def _uniform_phase(self) -> bool:
        """Sliced model-parallel jobs enter phase 2 only from a harvested meta,
        and harvest the previous boundary meta before issuing the next one, so
        every rank switches to sync mode at the same boundary.  Otherwise a
        leading replica can pass a boundary asynchronously and block on a
        pipeline peer that waits for the replica lagging behind it on a GPU."""
        return self._metas and self.config.slicing > 1 and (self.spec.tp > 1 or self.spec.pp > 1)

    @property
    def _metas(self) -> bool:
        return self.config.proxied and self.config.barrier_mode != "off"

    def _op_allreduce(self, w: Worker, cid: int, name: str, nwords: int, async_: bool, dp_grad: bool) -> None:
        proxied = self._metas
        allreduce_mode = proxied and dp_grad and self.config.barrier_mode == "allreduce"
        if w.sub == 0:
            if proxied:
                self._harvest(w)
            if allreduce_mode:
                key = self._meta(w)
                if w.agent.sync_mode:
                    w.sub = 1
                    w.waiting = [key]
                    return
            self._data_allreduce(w, cid, name, nwords, async_)
            return
        if w.sub == 1:
            self._harvest(w)
            if w.agent.acquired:
                w.sub = 0
                self._park_barrier(w)
                return
            self._data_allreduce(w, cid, name, nwords, async_)
            return
        if proxied:
            self._harvest(w)
        self._advance(w)

    def _data_allreduce(self, w: Worker, cid: int, name: str, nwords: int, async_: bool) -> None:
        addr = w.addr[name]
        data = self.proxy_of(w.rank).device.view(addr, nwords * WORD).copy()
        sync = (not async_) or (self.config.proxied and w.agent.sync_mode)
        key = self._issue(w, cid, "sum_allreduce", data, addr, nwords, not sync)
        if sync:
            w.sub = 2
            w.waiting = [key]
        else:
            w.outstanding.append(key)
            self._advance(w)

    def _op_send(self, w: Worker, cid: int, name: str, nwords: int) -> None:
        if w.sub == 0:
            data = self.proxy_of(w.rank).device.view(w.addr[name], nwords * WORD).copy()
            w.waiting = [self._issue(w, cid, "send", data, None, nwords, False, "send")]
            w.sub = 2
            return
        self._advance(w)

    def _op_recv(self, w: Worker, cid: int, name: str, nwords: int) -> None:
        if w.sub == 0:
            w.waiting = [self._issue(w, cid, "recv", None, w.addr[name], nwords, False, "recv")]
            w.sub = 2
            return
        self._stream_after(w)
        self._advance(w)

    def _op_allgather(self, w: Worker, cid: int, name: str, nwords: int, seg: int, nseg: int) -> None:
        if w.sub == 0:
            addr = w.addr[name]
            data = self.proxy_of(w.rank).device.view(addr, nwords * WORD).copy()
            w.waiting = [self._issue(w, cid, "allgather", data, addr, nwords, False, (seg, nseg))]
            w.sub = 2
            return
        self._stream_after(w)
        self._advance(w)

    def _stream_after(self, w: Worker) -> None:
        self.proxy_of(w.rank).device.stream_wait_time(self._stream(w), w.host_time)

    def _op_sync_wait(self, w: Worker) -> None:
        if w.sub == 0 and w.outstanding:
            w.waiting, w.outstanding = list(w.outstanding), []
            w.sub = 1
            return
        self._stream_after(w)
        self._advance(w)

    # -- optimizer window --------------------------------------------------------
    def _digests(self, w: Worker) -> dict[int, tuple[int, Category, int]]:
        p = self.proxy_of(w.rank)
        out = {}
        for addr, (size, cat) in sorted(p.live_buffers(w.rank).items()):
            out[addr] = (size, cat, p.device.digest(addr, size))
        return out

    def _op_opt_begin(self, w: Worker) -> None:
        p = self.proxy_of(w.rank)
        sq = p.squasher
        w.window_d2h = []
        w.window_pre = {}
        if sq is None or not self.config.proxied:
            w.window = "exec"
        elif sq.is_validation(w.step) and not sq.disabled:
            w.window = "validate"
        elif sq.squashes(w.rank, w.step):
            w.window = "squashed"
        elif sq.disabled:
            w.window = "exec"
        else:
            w.window = "root"
        if w.window in ("validate", "root"):
            w.window_pre = self._digests(w)
            nbytes = sum(s for s, _, _ in w.window_pre.values())
            w.host_time += self.cost.transfer_time(nbytes, "d2d")
        self._advance(w)

    def _op_opt_end(self, w: Worker) -> None:
        p = self.proxy_of(w.rank)
        sq = p.squasher
        mode = w.window
        if mode in ("validate", "root"):
            post = self._digests(w)
            w.host_time += self.cost.transfer_time(sum(s for s, _, _ in post.values()), "d2d")
            changed = {a: v for a, v in post.items() if w.window_pre.get(a) != v}
            if mode == "validate":
                rec = ValidationRecord(tuple(sorted((a, s, d) for a, (s, _, d) in changed.items())),
                                       tuple(w.window_d2h))
                res = sq.record(w.step, w.rank, rec)
                if res is not None:
                    self.validation_outcomes.append((w.gpu, w.step, res[0], res[1]))
                    self.trace.emit("validation", self.job, w.rank, w.host_time, gpu=w.gpu, step=w.step,
                                    ok=res[0], reason=res[1])
            else:
                mutated = {a: ViewEntry(s, c, d) for a, (s, c, d) in changed.items()}
                for r in sq.root_done(w.rank, w.step, mutated):
                    view = p.ledger.views.get(r, {})
                    if all(a in view and view[a].size == e.size for a, e in mutated.items()):
                        for a, e in mutated.items():
                            view[a] = ViewEntry(e.size, e.category, e.digest)
                    else:
                        sq.consume(r, w.step)
        elif mode == "squashed":
            sq.consume(w.rank, w.step)
            if w.step not in sq.pre:
                self.squash_d2h.pop((w.gpu, w.step), None)
        w.window = None
        w.window_pre = {}
        self._advance(w)

    # -- boundary ------------------------------------------------------------------
    def _op_boundary(self, w: Worker) -> None:
        if w.sub == 0:
            w.host_time = max(w.host_time, self.proxy_of(w.rank).device.device_sync(0))
            if self._metas:
                if self._uniform_phase and w.agent.outstanding:
                    prev = (META_COMM, w.agent.outstanding[0])
                    if not self._key_done(prev):
                        w.waiting = [prev]
                        return
                self._harvest(w)
                if w.agent.acquired:
                    raise BarrierError(f"rank {w.rank} acquired before its boundary meta")
                key = self._meta(w)
                if w.agent.sync_mode:
                    w.sub = 1
                    w.waiting = [key]
                    return
            self._finish_boundary(w)
            return
        self._harvest(w)
        self._finish_boundary(w)
        if w.agent.acquired:
            self._park_barrier(w)

    def _finish_boundary(self, w: Worker) -> None:
        self.step_ledger.append((w.rank, w.step))
        self.step_end[w.step] = max(self.step_end.get(w.step, 0), w.host_time)
        self.trace.emit("step_done", self.job, w.rank, w.host_time, step=w.step)
        w.host["loader_cursor"] = w.rng.getrandbits(63)
        w.step += 1
        w.idx = 0
        w.sub = 0
        if w.step >= self.spec.minibatches:
            w.phase = "done"

    # --------------------------------------------------------------- barrier API
    def _park_barrier(self, w: Worker) -> None:
        w.parked = "barrier"
        self.trace.emit("barrier_parked", self.job, w.rank, w.host_time, pc=list(w.pc))

    def request_barrier(self, ranks=(0,)) -> None:
        if not self._metas:
            raise BarrierError("barrier disabled for this job")
        direct = not self._uniform_phase
        if self.barrier_state in ("requested", "acquired"):
            for r in ranks:
                self.workers[r].agent.deliver_command(direct)
            return
        self.barrier_requested = True
        self.barrier_state = "requested"
        self.stop_step = None
        for w in self.workers.values():
            if w.parked == "stop":
                w.parked = None
        t = max(w.host_time for w in self.workers.values())
        self.trace.emit("barrier_request", self.job, None, t, ranks=list(ranks))
        for r in ranks:
            self.workers[r].agent.deliver_command(direct)
            self.trace.emit("barrier_phase", self.job, r, t, phase=self.workers[r].agent.phase.name)

    def _acquired(self, how: str) -> None:
        self.barrier_state = "acquired" if how == "boundary" else "end"
        if self.engine.in_flight():
            raise BarrierError(f"acquired with collectives in flight: {self.engine.in_flight()}")
        for cid, per_rank in self.engine.issued.items():
            if len(set(per_rank.values())) > 1:
                raise BarrierError(f"non-uniform issuance on communicator {cid}")
        t = max(w.host_time for w in self.workers.values())
        self.trace.emit("barrier_acquired", self.job, None, t, how=how,
                        steps=sorted({w.step for w in self.workers.values()}))

    def acquire(self, ranks=(0,)) -> str:
        """Request the barrier and run until it is acquired (or the job ends)."""
        self.request_barrier(ranks)
        status = self.run()
        if status not in ("acquired",):
            raise BarrierError(f"barrier not acquired: {status}")
        return self.barrier_state

    def release_barrier(self) -> None:
        if self.barrier_state == "end":
            self.barrier_state = None
            self.barrier_requested = False
            return
        if self.barrier_state != "acquired":
            raise BarrierError("release without acquisition")
        active = [w.agent for w in self.workers.values() if w.phase != "done"]
        release_all(active)
        for w in self.workers.values():
            w.parked = None
        self.barrier_state = None
        self.barrier_requested = False
        t = max(w.host_time for w in self.workers.values())
        self.trace.emit("barrier_release", self.job, None, t)

    # ----------------------------------------------------------------- driving
    def run_steps(self, k: int) -> str:
        """Run until every rank has started mini-batch ``current + k`` (or finished)."""
        self.stop_step = self._min_step() + k
        for w in self.workers.values():
            if w.parked == "stop":
                w.parked = None
        return self.run()

    def run_to_end(self) -> str:
        self.stop_step = None
        for w in self.workers.values():
            if w.parked == "stop":
                w.parked = None
        return self.run()

    @property
    def finished(self) -> bool:
        return all(w.phase == "done" for w in self.workers.values())

    @property
    def now(self) -> int:
        return max(w.host_time for w in self.workers.values())

    # ------------------------------------------------------------------ results
    def buffer_bytes(self, rank: int, addr: int, size: int) -> bytes:
        """Content of one of ``rank``'s buffers, resident or not."""
        p = self.proxy_of(rank)
        w = self.workers[rank]
        for e in w.inbox:
            if e.addr == addr:
                arr = np.frombuffer(p.device.read(addr, size) if p.active_rank == rank else b"\0" * size,
                                    dtype=DTYPE).copy()
                arr[:e.nwords] = e.data[:e.nwords]
                return arr.tobytes()
        if p.active_rank == rank:
            return p.device.read(addr, size)
        ve = p.ledger.views[rank][addr]
        data = p.ledger.host_cache.get(ve.digest)
        if data is None:
            src = p.ledger.find_on_device(ve.digest, ve.size)
            if src is None:
                raise SimError(f"content of rank {rank} at {addr} unavailable")
            data = p.device.read(src, ve.size)
        if digest_of(data) != ve.digest:
            raise SimError("buffer content does not match its digest")
        return data

    def device_contents(self, rank: int) -> list[tuple[int, int, str, bytes]]:
        p = self.proxy_of(rank)
        return [(a, s, c.value, self.buffer_bytes(rank, a, s)) for a, (s, c) in sorted(p.live_buffers(rank).items())]

    def final_state(self) -> dict[int, dict[str, np.ndarray]]:
        out = {}
        n = self.spec.params_per_layer
        words = {"P": n, "O": n // self.spec.zero_shard, "G": n}
        for r, w in self.workers.items():
            sizes = self.proxy_of(r).live_buffers(r)
            st = {}
            for name, addr in sorted(w.addr.items()):
                if name[0] in "POG" and name[1:].isdigit():
                    # allocations are rounded up; the padding is not job state
                    raw = self.buffer_bytes(r, addr, sizes[addr][0])[:words[name[0]] * WORD]
                    st[name] = np.frombuffer(raw, dtype=DTYPE).copy()
            out[r] = st
        return out

    def step_times(self) -> list[int]:
        out = []
        prev = self.init_end
        for t in sorted(self.step_end):
            out.append(self.step_end[t] - prev)
            prev = self.step_end[t]
        return out

    def switch_reports(self):
        return [rep for p in self.proxies.values() for rep in p.switches]

    def overhead(self, dedicated: list[int] | None = None, threshold: float = 0.05) -> tuple[float, str]:
        """Steady-state time-slicing overhead against the dedicated run."""
        n = self.config.slicing
        if n <= 1:
            return 0.0, "keep"
        if dedicated is None:
            dedicated = baseline_step_times(self.spec)
        mine = self.step_times()
        validation = set()
        for p in self.proxies.values():
            if p.squasher is not None:
                validation |= {t for t in range(len(mine)) if p.squasher.is_validation(t)}
        steady = [t for t in range(1, len(mine)) if t not in validation] or list(range(len(mine)))
        sliced = sum(mine[t] for t in steady) / len(steady)
        ded = sum(dedicated[t] for t in steady) / len(steady)
        return monitor_overhead(sliced, n, ded, threshold)

    # ----------------------------------------------------------- snapshot state
    def worker_state(self, rank: int) -> dict:
        w = self.workers[rank]
        p = self.proxy_of(rank)
        return {
            "rank": rank,
            "pc": list(w.pc),
            "addr": dict(sorted(w.addr.items())),
            "streams": dict(sorted(w.streams.items())),
            "next_vid": p.next_vid[rank],
            "host": {k: w.host[k] for k in sorted(w.host)},
            "written": list(w.written),
            "rng": _rng_state(w.rng),
            "barrier": w.agent.to_dict(),
            "outstanding": [list(k) for k in w.outstanding],
            "inited": w.inited,
            "allocator": p.allocators[rank].state(),
        }

    @classmethod
    def restore(cls, spec: JobSpec, workers: dict[int, dict], devices: dict[int, list],
                logs: dict[int, list[LogEntry]], issued: dict[int, dict[int, int]],
                files: dict[int, dict], cost: CostModel | None = None, config: RuntimeConfig | None = None,
                trace: Trace | None = None, job: str = "job", gpu_ids: list[int] | None = None,
                start_time: int = 0, done_time: dict | None = None) -> "JobRuntime":
        """Rebuild a job from host-visible worker state plus device contents."""
        rt = cls(spec, cost, config, trace, job, gpu_ids, start_time, _restoring=True)
        for g, grp in rt.groups.items():
            p = rt._new_proxy(g)
            rt._check_partition(grp)
            for r in grp:
                ws = workers[r]
                p.register(r, BidiAllocator.from_state(ws["allocator"]), next_vid=1)
                p.replay(logs[r], ranks=[r])
                p.next_vid[r] = ws["next_vid"]
                for a, (s, _) in p.allocators[r].live.items():
                    p.categories[r][a] = Category("S")
                for a, s, c, data in devices[r]:
                    p.categories[r][a] = Category(c)
                    if r == p.active_rank:
                        p.device.write(a, data)
                        p.ledger.note_device(a, s, digest_of(data))
                    else:
                        d = digest_of(data)
                        p.ledger.host_cache[d] = bytes(data)
                        p.ledger.views.setdefault(r, {})[a] = ViewEntry(s, Category(c), d)
            from .vdev import DeviceBuffer
            for a, (s, c) in sorted(p.live_buffers(p.active_rank).items()):
                p.device.register(DeviceBuffer(a, s, c, owner=p.active_rank))
            for cid in sorted(rt.plan.comms):
                n = rt._local_members.get((cid, g), 0)
                if n:
                    p.comm_counts[cid] = n
            rt.proxies[g] = p
        for cid, c in rt.plan.comms.items():
            for r in c.members:
                rt.engine.comm_init(cid, r, c.members, c.kind, rt.placement[r])
            rt.engine.issued[cid] = {r: issued[cid][r] for r in c.members}
        rt.engine.rendezvous(rt.placement)
        for r, ws in workers.items():
            phase, step, idx, sub = ws["pc"]
            w = Worker(r, rt.placement[r], BarrierAgent.from_dict(r, spec.world_size, ws["barrier"]),
                       random.Random(), phase=phase, step=step, idx=idx, sub=sub,
                       addr=dict(ws["addr"]), streams=dict(ws["streams"]), host=dict(ws["host"]),
                       files=dict(files.get(r, {})), written=list(ws["written"]), host_time=start_time,
                       outstanding=[tuple(k) for k in ws["outstanding"]], inited=ws["inited"])
            w.rng.setstate(_rng_from(ws["rng"]))
            if w.agent.acquired:
                w.agent.release()
            rt.workers[r] = w
        rt.done_time.update(done_time or {})
        rt._classify()
        rt.init_end = start_time
        rt.trace.emit("restore", job, None, start_time, gpus=sorted(rt.proxies), slicing=rt.config.slicing,
                      steps=sorted({w.step for w in rt.workers.values()}))
        return rt


def track_file_write(log: list[str], path: str, mode: str = "w") -> bool:
    """Append ``path`` to a rank's mutation log if opened writable."""
    if not any(c in mode for c in "wax+"):
        return False
    if path not in log:
        log.append(path)
    return True


def _rng_state(rng: random.Random) -> list:
    v, internal, gauss = rng.getstate()
    return [v, list(internal), gauss]


def _rng_from(x) -> tuple:
    return (x[0], tuple(x[1]), x[2])


def baseline_step_times(spec: JobSpec, cost: CostModel | None = None) -> list[int]:
    """Per-mini-batch time of the job on dedicated GPUs with every mechanism off."""
    rt = JobRuntime(spec, cost, RuntimeConfig(slicing=1, squash=False, proxied=False), trace=Trace())
    rt.run()
    return rt.step_times()
