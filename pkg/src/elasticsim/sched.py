"""Fleet scheduler: SLA tiers, GPU-fraction accounting and elastic placement.

The planner is a deterministic greedy policy ordered by tier.  Every job in
the fleet is backed by a real :class:`~elasticsim.runtime.JobRuntime`; preempt,
migrate and resize are carried out with on-demand checkpoints and restores,
so their latency comes from the checkpoint manifest and the executed-step
ledger can be audited afterwards.

Time model: the fleet clock counts integer nanoseconds of fleet time.  Each
job declares how much dedicated fleet time one of its mini-batches stands for
(``minibatch_ns``).  A job sliced ``N`` ways progresses at ``1/N`` of its
dedicated rate.  Accounting uses :class:`fractions.Fraction` so window
fractions can be compared exactly against hand-computed values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

from .ckpt import BlobStore, CheckpointManifest, checkpoint_job, migration_latency, restore_job
from .runtime import JobRuntime, RuntimeConfig, baseline_step_times
from .simcore import CostModel, EventLoop, SimError, Trace
from .workload.spec import TIERS, JobSpec, RankTopology, SpecError, max_slicing, slicing_groups

HOUR = 3600 * 10**9
TIER_ORDER = {t: i for i, t in enumerate(TIERS)}
DEFAULT_TARGETS = {"Premium": Fraction(95, 100), "Standard": Fraction(70, 100), "Basic": None}


class SchedError(SimError):
    pass


# ---------------------------------------------------------------------------
# Fleet
# ---------------------------------------------------------------------------

@dataclass
class Gpu:
    gid: int
    region: str
    cluster: str
    node: str
    healthy: bool = True
    job: str | None = None
    residents: list = field(default_factory=list)  # ranks of ``job`` on this GPU
    free_at: int = 0  # when a departing job's checkpoint finishes

    @property
    def domain(self) -> tuple[str, str, str]:
        return (self.region, self.cluster, self.node)

    @property
    def slicing(self) -> int:
        return len(self.residents)

    @property
    def idle(self) -> bool:
        return self.healthy and self.job is None


class Fleet:
    """GPU nodes grouped into clusters by region.  A node is one locality domain."""

    def __init__(self):
        self.gpus: dict[int, Gpu] = {}

    def add_node(self, region: str, cluster: str, node: str, ngpus: int) -> list[int]:
        if ngpus < 1:
            raise SchedError(f"node {region}/{cluster}/{node} must have at least one GPU")
        base = max(self.gpus, default=-1) + 1
        ids = list(range(base, base + ngpus))
        for g in ids:
            self.gpus[g] = Gpu(g, region, cluster, node)
        return ids

    @classmethod
    def uniform(cls, nodes: int, gpus_per_node: int, clusters: int = 1, regions: int = 1) -> "Fleet":
        f = cls()
        for r in range(regions):
            for c in range(clusters):
                for n in range(nodes):
                    f.add_node(f"r{r}", f"c{c}", f"n{n}", gpus_per_node)
        return f

    @classmethod
    def from_config(cls, cfg: dict) -> "Fleet":
        """``{"regions": [{"name", "clusters": [{"name", "nodes", "gpus_per_node"}]}]}``"""
        f = cls()
        for reg in cfg["regions"]:
            for cl in reg["clusters"]:
                for n in range(int(cl["nodes"])):
                    f.add_node(reg["name"], cl["name"], f"n{n}", int(cl["gpus_per_node"]))
        return f

    def nodes(self) -> dict[tuple, list[int]]:
        out: dict[tuple, list[int]] = {}
        for g in sorted(self.gpus):
            out.setdefault(self.gpus[g].domain, []).append(g)
        return out

    def idle(self) -> list[int]:
        return [g for g in sorted(self.gpus) if self.gpus[g].idle]

    def healthy_count(self) -> int:
        return sum(1 for g in self.gpus.values() if g.healthy)

    def of_job(self, job: str) -> list[int]:
        return [g for g in sorted(self.gpus) if self.gpus[g].job == job]

    def assign(self, job: str, groups: dict[int, tuple]) -> None:
        for g, ranks in groups.items():
            gpu = self.gpus[g]
            if not gpu.idle:
                raise SchedError(f"GPU {g} is not available")
            gpu.job, gpu.residents = job, list(ranks)

    def release(self, job: str, free_at: int = 0) -> list[int]:
        out = self.of_job(job)
        for g in out:
            gpu = self.gpus[g]
            gpu.job, gpu.residents = None, []
            gpu.free_at = max(gpu.free_at, free_at)
        return out

    def choose(self, k: int, locality: bool = False, exclude: tuple = ()) -> list[int] | None:
        """Pick ``k`` idle GPUs, preferring a single node (best fit)."""
        by_node: dict[tuple, list[int]] = {}
        for g in self.idle():
            if self.gpus[g].domain not in exclude:
                by_node.setdefault(self.gpus[g].domain, []).append(g)
        fits = [d for d, gs in by_node.items() if len(gs) >= k]
        if fits:
            best = min(fits, key=lambda d: (len(by_node[d]), d))
            return by_node[best][:k]
        if locality:
            return None
        out: list[int] = []
        for d in sorted(by_node, key=lambda d: (-len(by_node[d]), d)):
            out += by_node[d][: k - len(out)]
            if len(out) == k:
                return out
        return None

    def violations(self, topos: dict[str, RankTopology]) -> list[str]:
        """GPUs whose residents break the same-partition/same-shard rule."""
        bad = []
        for g in sorted(self.gpus):
            gpu = self.gpus[g]
            if gpu.job is None:
                continue
            topo = topos.get(gpu.job)
            if topo is None:
                continue
            parts = {topo.coords[r].partition for r in gpu.residents}
            if len(parts) > 1:
                bad.append(f"GPU {g}: ranks {gpu.residents} span partitions {sorted(parts)}")
            if gpu.slicing > max_slicing(topo.spec):
                bad.append(f"GPU {g}: slicing {gpu.slicing} exceeds limit")
            if not gpu.healthy:
                bad.append(f"GPU {g}: job resident on failed GPU")
        return bad

    def state(self) -> list[dict]:
        return [{"gid": g.gid, "domain": list(g.domain), "healthy": g.healthy, "job": g.job,
                 "residents": list(g.residents)} for g in (self.gpus[k] for k in sorted(self.gpus))]


# ---------------------------------------------------------------------------
# SLA accounting
# ---------------------------------------------------------------------------

@dataclass
class SlaRecord:
    job: str
    tier: str
    T_ideal: Fraction = Fraction(0)
    T_real: Fraction = Fraction(0)
    window_ideal: Fraction = Fraction(0)
    window_real: Fraction = Fraction(0)
    windows: list = field(default_factory=list)  # [(hour, ideal, real)]
    gpu_ns: int = 0  # device time actually held, the billing basis

    def add(self, interval: int, ratio: Fraction, gpus: int = 0) -> None:
        self.T_ideal += interval * ratio
        self.T_real += interval
        self.window_ideal += interval * ratio
        self.window_real += interval
        self.gpu_ns += interval * gpus

    @property
    def gpu_fraction(self) -> Fraction | None:
        return self.T_ideal / self.T_real if self.T_real else None

    def close_window(self, hour: int) -> Fraction | None:
        if not self.window_real:
            return None
        frac = self.window_ideal / self.window_real
        self.windows.append((hour, self.window_ideal, self.window_real))
        self.window_ideal = self.window_real = Fraction(0)
        return frac

    def fractions(self) -> list[Fraction]:
        return [i / r for _, i, r in self.windows]


@dataclass
class SchedAction:
    kind: str  # place | preempt | migrate | resize | restore
    job: str
    t: int
    gpus: tuple = ()
    slicing: int = 1
    latency: int = 0
    reason: str = ""

    def to_dict(self) -> dict:
        return {"action": self.kind, "gpus": list(self.gpus), "slicing": self.slicing,
                "latency": self.latency, "reason": self.reason}


# ---------------------------------------------------------------------------
# Jobs
# ---------------------------------------------------------------------------

@dataclass
class FleetJob:
    jid: str
    spec: JobSpec
    tier: str
    arrival: int
    minibatch_ns: int
    locality: bool = False
    ckpt_interval: int | None = None
    state: str = "pending"  # pending queued starting running draining migrating done rejected
    rt: JobRuntime | None = None
    slicing: int = 1
    manifest: CheckpointManifest | None = None  # resume point while off the fleet
    last_ckpt: CheckpointManifest | None = None
    periodic: CheckpointManifest | None = None
    periodic_len: int = 0
    work: Fraction = Fraction(0)
    ledger: list = field(default_factory=list)  # committed (rank, step) executions
    recomputed: list = field(default_factory=list)
    preemptions: int = 0
    completion_ev: int | None = None
    drain_until: int = 0  # still computing toward the barrier until then
    done_at: int | None = None
    final_state: dict | None = None
    gpus_held: int = 0
    pin: list | None = None  # requested GPUs for the first placement
    fixed_slicing: int | None = None
    held: bool = False  # preempted by command; waits for resume
    segments: int = 0
    validation_failures: int = 0
    sla: SlaRecord = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.tier not in TIERS:
            raise SpecError(f"unknown tier {self.tier!r}")
        self.topo = RankTopology.build(self.spec)
        if self.sla is None:
            self.sla = SlaRecord(self.jid, self.tier)

    @property
    def world(self) -> int:
        return self.spec.world_size

    @property
    def total_work(self) -> int:
        return self.spec.minibatches * self.minibatch_ns

    def legal_slicings(self) -> list[int]:
        m = max_slicing(self.spec)
        if self.fixed_slicing is not None:
            return [self.fixed_slicing]
        return [n for n in range(1, m + 1) if m % n == 0]

    def gpus_for(self, n: int) -> int:
        return self.world // n

    def full_ledger(self) -> list:
        seg = [tuple(x) for x in self.rt.step_ledger] if self.rt is not None else []
        return self.ledger + seg


class Scheduler:
    def __init__(self, fleet: Fleet, cost: CostModel | None = None, trace: Trace | None = None,
                 targets: dict | None = None, config: RuntimeConfig | None = None, seed: int = 0):
        self.fleet = fleet
        self.cost = cost or CostModel()
        self.loop = EventLoop(seed)
        self.trace = trace or Trace(self.loop.clock)
        self.targets = dict(DEFAULT_TARGETS if targets is None else targets)
        self.config = config or RuntimeConfig()
        self.store = BlobStore()
        self.jobs: dict[str, FleetJob] = {}
        self.actions: list[SchedAction] = []
        self.violations: list[dict] = []
        self.last = 0
        self._tick_armed = False
        self.manifests: list[CheckpointManifest] = []
        self.illegal: list[tuple[int, str]] = []

    # ------------------------------------------------------------------ API
    @property
    def now(self) -> int:
        return self.loop.now

    def submit(self, spec: JobSpec, arrival: int = 0, tier: str | None = None, minibatch_ns: int = 60 * 10**9,
               locality: bool = False, ckpt_interval: int | None = None, jid: str | None = None,
               pin: list[int] | None = None, slicing: int | None = None) -> str:
        spec.validate()
        jid = jid or spec.name
        if jid in self.jobs:
            raise SchedError(f"duplicate job id {jid!r}")
        job = FleetJob(jid, spec, tier or spec.tier, arrival, minibatch_ns, locality, ckpt_interval)
        job.pin = list(pin) if pin else None
        if slicing is not None:
            slicing_groups(job.topo, slicing)  # raises if illegal
            job.fixed_slicing = slicing
        self.jobs[jid] = job
        self.loop.schedule_at(arrival, lambda: self._arrive(job), f"arrive {jid}")
        self._arm_tick()
        return jid

    def fail_node(self, at: int, domain: tuple) -> None:
        self.loop.schedule_at(at, lambda: self._fail(tuple(domain)), f"fail {domain}")

    def add_capacity(self, at: int, region: str, cluster: str, node: str, ngpus: int) -> None:
        def go():
            self._accrue()
            ids = self.fleet.add_node(region, cluster, node, ngpus)
            self.trace.emit("capacity", None, None, self.now, added=ids)
            self.plan("capacity_change")
        self.loop.schedule_at(at, go, "capacity")

    def command(self, at: int, kind: str, job: str, slicing: int | None = None) -> None:
        """Scripted operator command such as preempt or resize."""
        if kind not in ("barrier", "preempt", "resume", "resize"):
            raise SchedError(f"unknown command {kind!r}")
        self.loop.schedule_at(at, lambda: self._command(kind, job, slicing), f"{kind} {job}")

    def _command(self, kind: str, jid: str, slicing: int | None) -> None:
        self._accrue()
        job = self.jobs[jid]
        self.trace.emit("command", jid, None, self.now, command=kind)
        running = job.state == "running" and job.rt is not None and not job.rt.finished
        if kind == "barrier" and running:
            self._sync(job)
            man = checkpoint_job(job.rt, self.store, "periodic", prev=job.last_ckpt)
            self._record_ckpt(job, man)
        elif kind == "preempt" and running:
            job.held = True
            self._preempt(job, "operator command")
        elif kind == "resume" and job.held:
            job.held = False
            self.plan("resume")
        elif kind == "resize" and running and slicing is not None:
            slicing_groups(job.topo, slicing)
            job.fixed_slicing = slicing
            self._move(job, slicing, "operator command", "resize")

    def _record_ckpt(self, job: FleetJob, man: CheckpointManifest, latency: dict | None = None) -> None:
        self.manifests.append(man)
        payload = dict(ckpt_kind=man.kind, S_G=man.S_G, S_Cr=man.S_Cr, S_Cr_incremental=man.S_Cr_incremental,
                       steps=min(man.steps.values()))
        if latency is not None:
            payload["latency"] = latency
        self.trace.emit("checkpoint", job.jid, None, self.now, **payload)
        if man.kind == "periodic":
            job.last_ckpt = job.periodic = man
            job.periodic_len = len(job.ledger) + len(man.step_ledger)

    def run(self, until: int | None = None) -> None:
        self.loop.run(until=until)
        self._accrue()

    def account(self, job: FleetJob, interval: int, start: int | None = None) -> None:
        """Charge ``interval`` of wall-clock to ``job`` at its current rate.

        A job draining toward a checkpoint barrier keeps computing at its
        rate (its work was already credited when the checkpoint was taken).
        """
        if interval <= 0:
            return
        ratio = Fraction(1, job.slicing)
        if job.state == "running":
            job.sla.add(interval, ratio, len(self.fleet.of_job(job.jid)))
            job.work += interval * ratio
            return
        start = self.now - interval if start is None else start
        busy = max(0, min(interval, job.drain_until - start))
        if busy:
            job.sla.add(busy, ratio, job.gpus_held)
        job.sla.add(interval - busy, Fraction(0))

    # ------------------------------------------------------------------ events
    def _active(self) -> list[FleetJob]:
        return [j for j in self.jobs.values() if j.state not in ("pending", "done", "rejected")]

    def _accrue(self) -> None:
        dt = self.now - self.last
        if dt > 0:
            for j in self._active():
                self.account(j, dt, self.last)
        self.last = self.now

    def _arm_tick(self) -> None:
        if self._tick_armed:
            return
        self._tick_armed = True
        nxt = (self.now // HOUR + 1) * HOUR
        self.loop.schedule_at(nxt, self._tick, "hourly")

    def _tick(self) -> None:
        self._tick_armed = False
        self._accrue()
        hour = self.now // HOUR - 1
        for jid in sorted(self.jobs):
            j = self.jobs[jid]
            frac = j.sla.close_window(hour)
            if frac is None:
                continue
            self.trace.emit("sla_window", jid, None, self.now, hour=hour, tier=j.tier,
                            ideal=str(j.sla.windows[-1][1]), real=str(j.sla.windows[-1][2]),
                            fraction=float(frac))
            target = self.targets.get(j.tier)
            if target is not None and frac < target:
                v = {"job": jid, "tier": j.tier, "hour": hour, "fraction": float(frac), "target": float(target)}
                self.violations.append(v)
                self.trace.emit("sla_violation", jid, None, self.now, **{k: v[k] for k in ("tier", "hour", "fraction", "target")})
        self.plan("hourly_tick")
        if self._active() or any(j.state == "pending" for j in self.jobs.values()) or \
                any(j.sla.window_real for j in self.jobs.values()):
            self._arm_tick()

    def _arrive(self, job: FleetJob) -> None:
        self._accrue()
        if job.world // max_slicing(job.spec) > self.fleet.healthy_count():
            job.state = "rejected"
            self.trace.emit("rejected", job.jid, None, self.now,
                            reason=f"needs at least {job.world // max_slicing(job.spec)} GPUs")
            return
        job.state = "queued"
        self.trace.emit("arrival", job.jid, None, self.now, tier=job.tier, world=job.world)
        self.plan("arrival")

    # ------------------------------------------------------------------ runtime driving
    def _sync(self, job: FleetJob) -> None:
        """Bring the runtime up to the mini-batch its credited work has reached."""
        rt = job.rt
        if rt is None or rt.finished:
            return
        target = min(int(job.work // job.minibatch_ns), job.spec.minibatches)
        cur = min(w.step for w in rt.workers.values())
        if target > cur:
            rt.run_steps(target - cur)

    def _progress(self, job: FleetJob) -> None:
        cur = min(w.step for w in job.rt.workers.values())
        job.work = max(job.work, Fraction(cur * job.minibatch_ns))

    def _schedule_completion(self, job: FleetJob) -> None:
        if job.completion_ev is not None:
            self.loop.cancel(job.completion_ev)
            job.completion_ev = None
        if job.state != "running":
            return
        remaining = max(Fraction(0), job.total_work - job.work) * job.slicing
        at = self.now + math.ceil(remaining)
        job.completion_ev = self.loop.schedule_at(at, lambda: self._complete(job), f"complete {job.jid}")

    def _complete(self, job: FleetJob) -> None:
        self._accrue()
        job.completion_ev = None
        job.rt.run_to_end()
        job.ledger = job.full_ledger()
        job.final_state = job.rt.final_state()
        job.state, job.done_at = "done", self.now
        self._retire(job)
        self._emit_summary(job)
        job.rt = None
        self.fleet.release(job.jid, self.now)
        self.trace.emit("completion", job.jid, None, self.now, steps=job.spec.minibatches)
        self.plan("completion")

    def _retire(self, job: FleetJob) -> None:
        """Fold per-runtime statistics into the job before the runtime goes away."""
        job.validation_failures += sum(1 for o in job.rt.validation_outcomes if not o[2])

    def _emit_summary(self, job: FleetJob) -> None:
        rt = job.rt
        reps = rt.switch_reports()
        extra = {}
        if job.segments == 1 and rt.config.slicing > 1:
            # only an unbroken run has a full step-time series to compare
            ov, decision = rt.overhead(baseline_step_times(job.spec, self.cost))
            extra = {"overhead": ov, "decision": decision}
        self.trace.emit("job_summary", job.jid, None, self.now, slicing=rt.config.slicing, switches=len(reps),
                        swap_out_bytes=sum(sum(r.swap_out_bytes.values()) for r in reps),
                        po_swap_out_bytes=sum(r.po_swap_out() for r in reps),
                        d2d_bytes=sum(r.d2d_bytes for r in reps), preemptions=job.preemptions,
                        recomputed=len(job.recomputed), validation_failures=job.validation_failures, **extra)

    def _ready(self, job: FleetJob) -> None:
        self._accrue()
        if job.state in ("starting", "migrating"):
            job.state = "running"
            self._schedule_completion(job)
            self._arm_periodic(job)

    def _arm_periodic(self, job: FleetJob) -> None:
        if job.ckpt_interval:
            rt = job.rt
            self.loop.schedule(job.ckpt_interval, lambda: self._periodic(job, rt), f"ckpt {job.jid}")

    def _periodic(self, job: FleetJob, rt: JobRuntime) -> None:
        if job.rt is not rt or job.state != "running":
            return  # the job moved since this was armed
        self._accrue()
        self._sync(job)
        if not rt.finished:
            # the runtime may run ahead of credited work while the barrier is acquired
            man = checkpoint_job(rt, self.store, "periodic", prev=job.last_ckpt)
            self._record_ckpt(job, man)
            self._schedule_completion(job)
        self._arm_periodic(job)

    def _checkpoint_off(self, job: FleetJob) -> tuple[CheckpointManifest, int]:
        """On-demand checkpoint; the runtime is dropped.  Returns (manifest, latency to free GPUs).

        Acquiring the barrier lets the job run on to a later boundary; that
        drain is fleet time during which the job still holds its GPUs.
        """
        self._sync(job)
        man = checkpoint_job(job.rt, self.store, "on_demand", prev=job.last_ckpt)
        job.ledger = job.ledger + [tuple(x) for x in man.step_ledger]
        ahead = max(Fraction(0), min(man.steps.values()) * job.minibatch_ns - job.work)
        drain = math.ceil(ahead * job.slicing)
        self._progress(job)
        self._retire(job)
        job.gpus_held = len(self.fleet.of_job(job.jid))
        job.drain_until = self.now + drain
        if drain:
            self.loop.schedule(drain, self._accrue, f"drained {job.jid}")
        job.rt = None
        job.manifest = job.last_ckpt = man
        lat = migration_latency(man, self.cost)
        self._record_ckpt(job, man, lat.to_dict())
        return man, drain + lat.barrier + lat.dump + lat.upload

    def _start(self, job: FleetJob, gpus: list[int], n: int, reason: str, extra: int = 0, kind: str = "place") -> None:
        groups = slicing_groups(job.topo, n)
        cfg = RuntimeConfig(**{**self.config.__dict__, "slicing": n})
        ready = max([self.now] + [self.fleet.gpus[g].free_at for g in gpus]) + extra
        lat = 0
        if job.manifest is not None:
            man = job.manifest
            job.rt = restore_job(man, self.store, gpu_ids=gpus, slicing=n, cost=self.cost, config=cfg,
                                 job=job.jid, start_time=man.time)
            ml = migration_latency(man, self.cost)
            lat = ml.download + ml.restore
            job.manifest = None
        else:
            job.rt = JobRuntime(job.spec, self.cost, cfg, job=job.jid, gpu_ids=gpus)
        self.fleet.assign(job.jid, dict(zip(gpus, groups)))
        job.slicing = n
        job.segments += 1
        job.state = "starting" if kind == "place" else "migrating"
        act = SchedAction(kind, job.jid, self.now, tuple(gpus), n, ready - self.now + lat, reason)
        self._act(act)
        self.loop.schedule_at(ready + lat, lambda: self._ready(job), f"ready {job.jid}")

    def _act(self, act: SchedAction) -> None:
        self.actions.append(act)
        self.trace.emit("sched_action", act.job, None, act.t, **act.to_dict())

    def _preempt(self, job: FleetJob, reason: str) -> None:
        self._schedule_completion_cancel(job)
        _, lat = self._checkpoint_off(job)
        self.fleet.release(job.jid, self.now + lat)
        job.state = "queued"
        job.preemptions += 1
        self._act(SchedAction("preempt", job.jid, self.now, (), job.slicing, lat, reason))

    def _schedule_completion_cancel(self, job: FleetJob) -> None:
        if job.completion_ev is not None:
            self.loop.cancel(job.completion_ev)
            job.completion_ev = None

    def _move(self, job: FleetJob, n: int, reason: str, kind: str, exclude: tuple = ()) -> bool:
        """Resize or migrate a running job by checkpoint and restore."""
        k = job.gpus_for(n)
        old = self.fleet.of_job(job.jid)
        if kind == "resize" and k <= len(old):
            gpus = old[:k]
        else:
            # the job's own GPUs count as available for a move
            for g in old:
                self.fleet.gpus[g].job = None
            gpus = self.fleet.choose(k, job.locality, exclude)
            for g in old:
                self.fleet.gpus[g].job = job.jid
            if gpus is None:
                return False
        self._schedule_completion_cancel(job)
        _, lat = self._checkpoint_off(job)
        self.fleet.release(job.jid, self.now + lat)
        for g in gpus:
            if g in old:
                self.fleet.gpus[g].free_at = self.now  # restored in place
        self._start(job, gpus, n, reason, extra=lat, kind=kind)
        return True

    # ------------------------------------------------------------------ policy
    def plan(self, event: str = "") -> list[SchedAction]:
        """Greedy tier-ordered planning round; returns the actions taken."""
        before = len(self.actions)
        self._accrue()
        for j in self.jobs.values():
            if j.state == "running":
                self._sync(j)
        queued = sorted((j for j in self.jobs.values() if j.state == "queued" and not j.held),
                        key=lambda j: (TIER_ORDER[j.tier], j.arrival, j.jid))
        for job in queued:
            self._place(job, event)
        self._scale_up(event)
        for msg in self.legal():
            self.illegal.append((self.now, msg))
        return self.actions[before:]

    def _victims(self, job: FleetJob) -> list[FleetJob]:
        out = [v for v in self.jobs.values()
               if v.state == "running" and TIER_ORDER[v.tier] > TIER_ORDER[job.tier]
               and v.tier != "Premium" and v.rt is not None and not v.rt.finished]
        return sorted(out, key=lambda v: (-TIER_ORDER[v.tier], -v.arrival, v.jid))

    def _place(self, job: FleetJob, event: str) -> None:
        if job.pin is not None:
            pin, job.pin = job.pin, None
            n = job.world // len(pin)
            if n in job.legal_slicings() and all(self.fleet.gpus[g].idle for g in pin):
                self._start(job, pin, n, f"{event}: pinned")
                return
        free = len(self.fleet.idle())
        for n in job.legal_slicings():
            k = job.gpus_for(n)
            if k > free and n == 1 and job.tier != "Basic":
                # reclaim capacity from lower tiers before settling for a slice
                if self._reclaim(job, k - free):
                    free = len(self.fleet.idle())
            if k <= free:
                gpus = self.fleet.choose(k, job.locality)
                if gpus is None and job.locality:
                    self.defragment(job)
                    gpus = self.fleet.choose(k, job.locality)
                if gpus is not None:
                    self._start(job, gpus, n, f"{event}: placed {n}-way sliced" if n > 1 else event)
                    return

    def _reclaim(self, job: FleetJob, deficit: int) -> bool:
        victims = self._victims(job)
        if sum(len(self.fleet.of_job(v.jid)) for v in victims) < deficit:
            return False
        for v in victims:
            if deficit <= 0:
                break
            held = len(self.fleet.of_job(v.jid))
            # scale the victim down if that alone covers the deficit
            for n in v.legal_slicings():
                if n > v.slicing and held - v.gpus_for(n) >= deficit:
                    self._move(v, n, f"scale down for {job.jid}", "resize")
                    deficit -= held - v.gpus_for(n)
                    break
            else:
                self._preempt(v, f"preempted for {job.tier} job {job.jid}")
                deficit -= held
        return deficit <= 0

    def _scale_up(self, event: str) -> None:
        running = sorted((j for j in self.jobs.values() if j.state == "running" and j.slicing > 1),
                         key=lambda j: (TIER_ORDER[j.tier], j.arrival, j.jid))
        for job in running:
            if job.rt is None or job.rt.finished or job.fixed_slicing is not None:
                continue
            held = len(self.fleet.of_job(job.jid))
            free = len(self.fleet.idle())
            for n in job.legal_slicings():
                if n < job.slicing and job.gpus_for(n) - held <= free:
                    self._move(job, n, f"{event}: scale up", "resize")
                    break

    def defragment(self, job: FleetJob | None = None) -> list[SchedAction]:
        """Free one locality domain for a queued locality job with the fewest moved ranks."""
        before = len(self.actions)
        if job is None:
            cands = [j for j in self.jobs.values() if j.state == "queued" and j.locality]
            if not cands:
                return []
            job = min(cands, key=lambda j: (TIER_ORDER[j.tier], j.arrival, j.jid))
        need = job.gpus_for(job.legal_slicings()[0])
        plan = plan_defrag(self.fleet, need, {j.jid: j.world for j in self.jobs.values()})
        if plan is None:
            return []
        domain, movers = plan
        for jid in movers:
            mj = self.jobs[jid]
            self._move(mj, mj.slicing, f"defragment {'/'.join(domain)} for {job.jid}", "migrate", exclude=(domain,))
        return self.actions[before:]

    def _fail(self, domain: tuple) -> None:
        self._accrue()
        hit = sorted({g.job for g in self.fleet.gpus.values() if g.domain == domain and g.job})
        for g in self.fleet.gpus.values():
            if g.domain == domain:
                g.healthy = False
        self.trace.emit("failure", None, None, self.now, domain=list(domain), jobs=hit)
        for jid in hit:
            job = self.jobs[jid]
            self._schedule_completion_cancel(job)
            self._sync(job)  # work done up to the failure is lost past the last manifest
            full = job.full_ledger()
            if job.periodic is not None:
                keep = job.periodic_len
                job.manifest = job.last_ckpt = job.periodic
                job.work = Fraction(min(job.periodic.steps.values()) * job.minibatch_ns)
            else:
                keep = 0
                job.manifest = job.last_ckpt = None
                job.work = Fraction(0)
            job.recomputed += full[keep:]
            if job.rt is not None:
                self._retire(job)
            job.ledger = full[:keep]
            job.rt = None
            self.fleet.release(jid, self.now)
            for g in self.fleet.gpus.values():
                if g.domain == domain:
                    g.job, g.residents = None, []
            job.state = "queued"
            self._act(SchedAction("restore", jid, self.now, (), job.slicing, 0,
                                  f"node failure; {len(full) - keep} rank-steps lost"))
        self.plan("failure")

    # ------------------------------------------------------------------ reporting
    def audit(self) -> dict:
        """Per-job step audit over the committed ledger."""
        out = {}
        for jid in sorted(self.jobs):
            j = self.jobs[jid]
            counts: dict = {}
            for r, s in j.full_ledger():
                counts[(r, s)] = counts.get((r, s), 0) + 1
            repeated = sorted(k for k, v in counts.items() if v > 1)
            missing = [(r, s) for r in range(j.world) for s in range(j.spec.minibatches) if (r, s) not in counts]
            out[jid] = {"repeated": repeated, "missing": missing if j.state == "done" else [],
                        "recomputed": len(j.recomputed)}
        return out

    def legal(self) -> list[str]:
        return self.fleet.violations({j.jid: j.topo for j in self.jobs.values()})

    def summary(self) -> dict:
        jobs = {}
        for jid in sorted(self.jobs):
            j = self.jobs[jid]
            f = j.sla.gpu_fraction
            jobs[jid] = {"tier": j.tier, "state": j.state, "gpu_fraction": None if f is None else float(f),
                         "window_fractions": [float(x) for x in j.sla.fractions()], "preemptions": j.preemptions,
                         "recomputed_steps": len(j.recomputed), "gpu_seconds": j.sla.gpu_ns / 1e9,
                         "validation_failures": j.validation_failures,
                         "done_at": j.done_at}
        counts: dict[str, int] = {}
        for a in self.actions:
            counts[a.kind] = counts.get(a.kind, 0) + 1
        return {"jobs": jobs, "actions": counts, "sla_violations": list(self.violations)}


def plan_defrag(fleet: Fleet, need: int, world: dict[str, int]) -> tuple[tuple, list[str]] | None:
    """Choose the node to clear for a job needing ``need`` GPUs in one domain.

    For each node, every subset of its resident jobs is a candidate mover
    set; it works if it frees enough of the node and the movers fit in the
    GPUs left elsewhere.  The cheapest set by moved ranks wins (ties by node
    name, then job ids).  Returns None if some node already fits or no
    rearrangement helps.
    """
    nodes = fleet.nodes()
    idle = set(fleet.idle())
    if any(sum(1 for g in gids if g in idle) >= need for gids in nodes.values()):
        return None
    best = None
    for dom, gids in nodes.items():
        healthy = [g for g in gids if fleet.gpus[g].healthy]
        if len(healthy) < need:
            continue
        free_here = sum(1 for g in healthy if g in idle)
        resident = sorted({fleet.gpus[g].job for g in healthy if fleet.gpus[g].job})
        outside_idle = sum(1 for g in idle if fleet.gpus[g].domain != dom)
        for k in range(1, len(resident) + 1):
            for movers in itertools.combinations(resident, k):
                held = {m: fleet.of_job(m) for m in movers}
                freed_here = sum(1 for m in movers for g in held[m] if fleet.gpus[g].domain == dom)
                if free_here + freed_here < need:
                    continue
                # GPUs the movers hold off this node are freed and reusable too
                room = outside_idle + sum(1 for m in movers for g in held[m] if fleet.gpus[g].domain != dom)
                if room < sum(len(v) for v in held.values()):
                    continue
                key = (sum(world.get(m, 1) for m in movers), dom, movers)
                if best is None or key < best:
                    best = key
    if best is None:
        return None
    return best[1], list(best[2])
