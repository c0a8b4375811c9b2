"""Per-rank programs: plain instruction tuples interpreted by the runtime.

An instruction is ``(op, *args)``.  Buffers are referenced by symbolic names
that the worker resolves through its own address table, so a program is a
pure function of (spec, rank, step) and can be regenerated after restore.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..vdev import DTYPE, WORD, register_transform
from . import model
from .spec import CommSpec, JobSpec, RankTopology, communicators, comms_of, find_comm

PKG_PATH = "/opt/pkgs/libmodel.so"


@register_transform("init_params")
def _k_init(reads, params):
    n, layer, tp, seed = params
    return [model.init_params(n, layer, tp, seed)]


@dataclass
class JobPlan:
    spec: JobSpec
    topo: RankTopology
    comms: dict[int, CommSpec]

    @classmethod
    def build(cls, spec: JobSpec) -> "JobPlan":
        topo = RankTopology.build(spec)
        return cls(spec, topo, communicators(topo))

    def dp_comm(self, rank: int) -> int | None:
        c = self.topo.coords[rank]
        if self.spec.dp == 1:
            return None
        members = [r for r, k in self.topo.coords.items() if (k.pp, k.tp) == (c.pp, c.tp)]
        return find_comm(self.comms, "dp", members)

    def tp_comm(self, rank: int) -> int | None:
        c = self.topo.coords[rank]
        if self.spec.tp == 1:
            return None
        members = [r for r, k in self.topo.coords.items() if (k.pp, k.dp) == (c.pp, c.dp)]
        return find_comm(self.comms, "tp", members)

    def zero_comm(self, rank: int) -> int | None:
        s = self.spec.zero_shard
        c = self.topo.coords[rank]
        if s == 1:
            return None
        members = [r for r, k in self.topo.coords.items()
                   if (k.pp, k.tp, k.dp // s) == (c.pp, c.tp, c.dp // s)]
        return find_comm(self.comms, "zero", members)

    def pp_comm(self, rank: int, direction: int) -> int | None:
        c = self.topo.coords[rank]
        other = c.pp + direction
        if not 0 <= other < self.spec.pp:
            return None
        peer = self.topo.rank_of(c.dp, c.tp, other)
        return find_comm(self.comms, "pp", (rank, peer))

    def stable_names(self, rank: int) -> list[str]:
        return [f"{k}{l}" for l in range(self.spec.layers_per_stage) for k in "POG"]


def file_content(key) -> bytes:
    if key == "pkg":
        return b"\x7fELF model library v1\n" * 64
    kind, *rest = key
    if kind == "log":
        rank, step = rest
        return "".join(f"rank {rank} step {s} ok\n" for s in range(step + 1)).encode()
    if kind == "tmp":
        return f"scratch of rank {rest[0]}\n".encode()
    raise KeyError(key)


def init_program(plan: JobPlan, rank: int) -> list[tuple]:
    spec = plan.spec
    c = plan.topo.coords[rank]
    n = spec.params_per_layer
    ns = n // spec.zero_shard
    prog: list[tuple] = [("stream", "main")]
    for comm in comms_of(plan.comms, rank):
        prog.append(("comm_init", comm.comm_id))
    for l in range(spec.layers_per_stage):
        prog.append(("alloc", f"P{l}", n * WORD, "P"))
        prog.append(("alloc", f"O{l}", ns * WORD, "O"))
        prog.append(("alloc", f"G{l}", n * WORD, "G"))
    for l in range(spec.layers_per_stage):
        gid = c.pp * spec.layers_per_stage + l
        prog.append(("kernel", "init_p", (), (f"P{l}",), "init_params", (n, gid, c.tp, spec.seed)))
        prog.append(("kernel", "init_o", (), (f"O{l}",), "fill", (ns, 0)))
        prog.append(("kernel", "init_g", (), (f"G{l}",), "fill", (n, 0)))
    prog.append(("file_write", PKG_PATH, "pkg"))
    prog.append(("file_write", f"/tmp/rank{rank}.scratch", ("tmp", rank)))
    prog.append(("init_done",))
    return prog


def step_program(plan: JobPlan, rank: int, step: int) -> list[tuple]:
    return list(_step_program(plan.spec, rank, step))


@lru_cache(maxsize=4096)
def _step_program(spec: JobSpec, rank: int, step: int) -> tuple:
    plan = _plan(spec)
    c = plan.topo.coords[rank]
    n = spec.params_per_layer
    L = spec.layers_per_stage
    last_stage = c.pp == spec.pp - 1
    tp_c = plan.tp_comm(rank)
    prev_c = plan.pp_comm(rank, -1)
    next_c = plan.pp_comm(rank, +1)
    prog: list[tuple] = []
    for l in range(L):
        prog.append(("kernel", "zero_grad", (), (f"G{l}",), "fill", (n, 0)))
    for m in range(spec.microbatches):
        for l in range(L + 1):
            pad = model.act_pad(rank, step, m, l, spec.act_pad_max)
            prog.append(("alloc", f"A{m}_{l}", (n + pad) * WORD, "A"))
        pad = model.act_pad(rank, step, m, L + 1, spec.act_pad_max)
        prog.append(("alloc", f"GA{m}", (n + pad) * WORD, "A"))
        if c.pp == 0:
            prog.append(("h2d", f"A{m}_0", ("batch", c.dp, step, m), n))
        else:
            prog.append(("recv", prev_c, f"A{m}_0", n))
        for l in range(L):
            prog.append(("kernel", "fwd", (f"A{m}_{l}", f"P{l}"), (f"A{m}_{l + 1}",), "fwd", (n,)))
            if tp_c is not None:
                prog.append(("allreduce", tp_c, f"A{m}_{l + 1}", n, False, False))
        if not last_stage:
            prog.append(("send", next_c, f"A{m}_{L}", n))
    for m in range(spec.microbatches):
        if last_stage:
            prog.append(("kernel", "loss", (f"A{m}_{L}",), (f"GA{m}",), "loss_grad", (n, step)))
        else:
            prog.append(("recv", next_c, f"GA{m}", n))
        for l in reversed(range(L)):
            if tp_c is None:
                prog.append(("kernel", "bwd", (f"A{m}_{l}", f"GA{m}", f"P{l}", f"G{l}"),
                             (f"G{l}", f"GA{m}"), "bwd", (n,)))
            else:
                prog.append(("kernel", "bwd_grad", (f"A{m}_{l}", f"GA{m}", f"G{l}"), (f"G{l}",), "bwd_grad", (n,)))
                prog.append(("kernel", "bwd_act", (f"GA{m}", f"P{l}"), (f"GA{m}",), "bwd_act", (n,)))
                prog.append(("allreduce", tp_c, f"GA{m}", n, False, False))
        if prev_c is not None:
            prog.append(("send", prev_c, f"GA{m}", n))
        for l in range(L + 1):
            prog.append(("free", f"A{m}_{l}"))
        prog.append(("free", f"GA{m}"))
    dp_c = plan.dp_comm(rank)
    if dp_c is not None:
        for l in reversed(range(L)):
            # (op, comm, buffer, words, async, data-parallel gradient)
            prog.append(("allreduce", dp_c, f"G{l}", n, True, True))
        prog.append(("sync_wait",))
    prog.append(("opt_begin",))
    s = spec.zero_shard
    lo, hi = c.shard * (n // s), (c.shard + 1) * (n // s)
    for l in range(L):
        prog.append(("kernel", "opt", (f"P{l}", f"O{l}", f"G{l}"), (f"P{l}", f"O{l}"), "opt", (n, spec.dp, lo, hi)))
    if spec.adversarial:
        prog.append(("kernel", "adversarial", ("P0",), ("P0",), "adversarial", (rank,)))
    prog.append(("d2h", "P0", 4, "readout"))
    zc = plan.zero_comm(rank)
    if zc is not None:
        for l in range(L):
            prog.append(("allgather", zc, f"P{l}", n, c.shard, s))
    prog.append(("opt_end",))
    prog.append(("file_write", f"/logs/rank{rank}.log", ("log", rank, step)))
    if step == 0:
        prog.append(("file_delete", f"/tmp/rank{rank}.scratch"))
    prog.append(("boundary",))
    return tuple(prog)


@lru_cache(maxsize=64)
def _plan(spec: JobSpec) -> JobPlan:
    return JobPlan.build(spec)


def host_batch(key, n: int, seed: int) -> np.ndarray:
    kind, dp, step, m = key
    assert kind == "batch"
    return model.batch(n, dp, step, m, seed)
