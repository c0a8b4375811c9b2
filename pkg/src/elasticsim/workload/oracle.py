"""Dedicated-GPU ground truth.

Evaluates the training recurrence directly on host arrays: no device, no
proxy, no collectives engine.  Every equivalence check compares against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..vdev import DTYPE
from . import model
from .spec import JobSpec, RankTopology

State = dict[int, dict[str, np.ndarray]]


@dataclass
class OracleResult:
    spec: JobSpec
    state: State
    steps: int
    step_time_ns: int | None = None
    step_times: list[int] = field(default_factory=list)


def initial_state(spec: JobSpec, topo: RankTopology) -> State:
    n = spec.params_per_layer
    ns = n // spec.zero_shard
    L = spec.layers_per_stage
    st: State = {}
    for r, c in topo.coords.items():
        st[r] = {}
        for l in range(L):
            st[r][f"P{l}"] = model.init_params(n, c.pp * L + l, c.tp, spec.seed)
            st[r][f"O{l}"] = np.zeros(ns, dtype=DTYPE)
            st[r][f"G{l}"] = np.zeros(n, dtype=DTYPE)
    return st


def train_step(spec: JobSpec, topo: RankTopology, st: State, step: int) -> None:
    n = spec.params_per_layer
    L = spec.layers_per_stage
    rank = {(c.dp, c.tp, c.pp): r for r, c in topo.coords.items()}
    for r in st:
        for l in range(L):
            st[r][f"G{l}"][:] = 0
    for d in range(spec.dp):
        for m in range(spec.microbatches):
            # acts[p][l]: activation entering layer l of stage p (identical across tp)
            acts = []
            a = model.batch(n, d, step, m, spec.seed)
            for p in range(spec.pp):
                stage = [a]
                for l in range(L):
                    out = np.zeros(n, dtype=DTYPE)
                    for t in range(spec.tp):
                        out += model.fwd(a, st[rank[d, t, p]][f"P{l}"])
                    a = out
                    stage.append(a)
                acts.append(stage)
            ga = model.loss_grad(a, step)
            for p in reversed(range(spec.pp)):
                for l in reversed(range(L)):
                    nxt = np.zeros(n, dtype=DTYPE)
                    for t in range(spec.tp):
                        r = rank[d, t, p]
                        st[r][f"G{l}"] += model.grad_contrib(acts[p][l], ga)
                        nxt += model.bwd_act(ga, st[r][f"P{l}"])
                    ga = nxt
    if spec.dp > 1:
        for p in range(spec.pp):
            for t in range(spec.tp):
                for l in range(L):
                    total = np.zeros(n, dtype=DTYPE)
                    for d in range(spec.dp):
                        total += st[rank[d, t, p]][f"G{l}"]
                    for d in range(spec.dp):
                        st[rank[d, t, p]][f"G{l}"] = total.copy()
    s = spec.zero_shard
    w = n // s
    for r, c in topo.coords.items():
        lo, hi = c.shard * w, (c.shard + 1) * w
        for l in range(L):
            P, O, G = (st[r][f"{k}{l}"] for k in "POG")
            P[lo:hi], st[r][f"O{l}"] = model.opt_update(P[lo:hi], O, G[lo:hi], spec.dp)
        if spec.adversarial:
            st[r]["P0"][0] += np.uint64(r + 1)
    if s > 1:
        for p in range(spec.pp):
            for t in range(spec.tp):
                for g in range(spec.dp // s):
                    members = [rank[g * s + k, t, p] for k in range(s)]
                    for l in range(L):
                        full = np.zeros(n, dtype=DTYPE)
                        for k, r in enumerate(members):
                            full[k * w:(k + 1) * w] = st[r][f"P{l}"][k * w:(k + 1) * w]
                        for r in members:
                            st[r][f"P{l}"] = full.copy()


def oracle_run(spec: JobSpec, steps: int | None = None, timing: bool = True) -> OracleResult:
    """Run ``spec`` fully scaled-up with every mechanism off."""
    spec.validate()
    topo = RankTopology.build(spec)
    st = initial_state(spec, topo)
    total = spec.minibatches if steps is None else steps
    for t in range(total):
        train_step(spec, topo, st, t)
    res = OracleResult(spec, st, total)
    if timing:
        from ..runtime import baseline_step_times

        res.step_times = baseline_step_times(spec)
        res.step_time_ns = res.step_times[-1] if res.step_times else 0
    return res
