"""Integer training recurrence shared by kernels and the oracle.

Semantics-free, but it touches every buffer category the mechanisms care
about: parameters and optimizer state persist across mini-batches, gradients
accumulate over micro-batches and are summed across replicas, activations
live only within a mini-batch.
"""

from __future__ import annotations

import numpy as np

from ..vdev import DTYPE, register_transform

MASK = (1 << 64) - 1
K1 = np.uint64(0x9E3779B97F4A7C15)
K2 = np.uint64(0xBF58476D1CE4E5B9)
K3 = np.uint64(0x94D049BB133111EB)
OPT_SHIFT = np.uint64(12)


def mix(x: np.ndarray) -> np.ndarray:
    x = x.astype(DTYPE, copy=True)
    x ^= x >> np.uint64(31)
    x *= K2
    x ^= x >> np.uint64(29)
    x *= K3
    x ^= x >> np.uint64(32)
    return x


def _seeded(n: int, seed: int) -> np.ndarray:
    return mix(np.arange(n, dtype=DTYPE) + np.uint64(seed * int(K1) & MASK))


def init_params(n: int, layer: int, tp: int, seed: int) -> np.ndarray:
    return _seeded(n, 1 + layer * 7919 + tp * 104729 + seed * 15485863)


def batch(n: int, dp: int, step: int, micro: int, seed: int) -> np.ndarray:
    """Input shard of data-parallel replica ``dp``; differs per replica."""
    return _seeded(n, 3 + dp * 1000003 + step * 10007 + micro * 101 + seed * 7)


def act_pad(rank: int, step: int, micro: int, layer: int, pad_max: int) -> int:
    """Pseudo-random extra words per activation (destabilizes transient allocation)."""
    if pad_max == 0:
        return 0
    h = int(_seeded(1, 11 + rank * 131 + step * 977 + micro * 31 + layer)[0])
    return h % (pad_max + 1)


def fwd(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    return mix(a ^ p) + (a >> np.uint64(1))


def loss_grad(a: np.ndarray, step: int) -> np.ndarray:
    return mix(a + np.uint64(step * int(K3) & MASK))


def grad_contrib(a: np.ndarray, ga: np.ndarray) -> np.ndarray:
    return mix(a ^ ga) >> np.uint64(8)


def bwd_act(ga: np.ndarray, p: np.ndarray) -> np.ndarray:
    return mix(ga + p)


def opt_update(p: np.ndarray, o: np.ndarray, g_sum: np.ndarray, dp: int) -> tuple[np.ndarray, np.ndarray]:
    g = g_sum // np.uint64(dp)
    o2 = o + g
    return p - (o2 >> OPT_SHIFT), o2


# -- kernel transforms (params carry the logical word count n) --------------

@register_transform("fwd")
def _k_fwd(reads, params):
    (n,) = params
    a, p = reads
    return [fwd(a[:n], p[:n])]


@register_transform("loss_grad")
def _k_loss(reads, params):
    n, step = params
    return [loss_grad(reads[0][:n], step)]


@register_transform("bwd")
def _k_bwd(reads, params):
    (n,) = params
    a, ga, p, g = reads
    return [g[:n] + grad_contrib(a[:n], ga[:n]), bwd_act(ga[:n], p[:n])]


@register_transform("bwd_grad")
def _k_bwd_grad(reads, params):
    # tp > 1: activation gradient partials are summed by a TP allreduce later.
    (n,) = params
    a, ga, g = reads
    return [g[:n] + grad_contrib(a[:n], ga[:n])]


@register_transform("bwd_act")
def _k_bwd_act(reads, params):
    (n,) = params
    ga, p = reads
    return [bwd_act(ga[:n], p[:n])]


@register_transform("opt")
def _k_opt(reads, params):
    n, dp, lo, hi = params
    p, o, g = reads
    newp = p[:n].copy()
    newp[lo:hi], newo = opt_update(p[lo:hi], o[:hi - lo], g[lo:hi], dp)
    return [newp, newo]


@register_transform("adversarial")
def _k_adv(reads, params):
    (rank,) = params
    p = reads[0].copy()
    p[0] += np.uint64(rank + 1)
    return [p]
