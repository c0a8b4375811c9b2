"""Job specification, Megatron-order rank topology and communicator inventory."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

TIERS = ("Premium", "Standard", "Basic")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class JobSpec:
    name: str = "job"
    dp: int = 1
    tp: int = 1
    pp: int = 1
    zero_shard: int = 1
    layers: int = 2
    params_per_layer: int = 256
    minibatches: int = 4
    microbatches: int = 1
    act_pad_max: int = 64
    tier: str = "Standard"
    adversarial: bool = False
    seed: int = 0
    # Overrides Megatron order: tuple of (dp, tp, pp) per rank.
    rank_map: tuple | None = None

    @property
    def world_size(self) -> int:
        return self.dp * self.tp * self.pp

    @property
    def layers_per_stage(self) -> int:
        return self.layers // self.pp

    def validate(self) -> "JobSpec":
        for k in ("dp", "tp", "pp", "zero_shard", "layers", "params_per_layer", "minibatches", "microbatches"):
            if getattr(self, k) < 1:
                raise SpecError(f"{k} must be >= 1")
        if self.dp % self.zero_shard:
            raise SpecError("zero_shard must divide dp")
        if self.layers % self.pp:
            raise SpecError("layers must be divisible by pp")
        if self.params_per_layer % self.zero_shard:
            raise SpecError("params_per_layer must be divisible by zero_shard")
        if self.act_pad_max < 0:
            raise SpecError("act_pad_max must be >= 0")
        if self.tier not in TIERS:
            raise SpecError(f"unknown tier {self.tier!r}")
        if self.rank_map is not None:
            if len(self.rank_map) != self.world_size:
                raise SpecError("rank_map must list every rank")
            coords = {tuple(c) for c in self.rank_map}
            want = {(d, t, p) for d in range(self.dp) for t in range(self.tp) for p in range(self.pp)}
            if coords != want:
                raise SpecError("rank_map must be a bijection onto (dp, tp, pp) coordinates")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Coord:
    dp: int
    tp: int
    pp: int
    shard: int

    @property
    def partition(self) -> tuple[int, int, int]:
        """Model-parallel partition plus ZeRO shard: ranks that may share a GPU."""
        return (self.pp, self.tp, self.shard)


@dataclass
class RankTopology:
    spec: JobSpec
    coords: dict[int, Coord] = field(default_factory=dict)

    @classmethod
    def build(cls, spec: JobSpec) -> "RankTopology":
        spec.validate()
        topo = cls(spec)
        for rank in range(spec.world_size):
            if spec.rank_map is not None:
                d, t, p = spec.rank_map[rank]
            else:
                # Megatron/DeepSpeed order: tp fastest, then dp, then pp.
                t = rank % spec.tp
                d = (rank // spec.tp) % spec.dp
                p = rank // (spec.tp * spec.dp)
            topo.coords[rank] = Coord(d, t, p, d % spec.zero_shard)
        return topo

    def rank_of(self, dp: int, tp: int, pp: int) -> int:
        for r, c in self.coords.items():
            if (c.dp, c.tp, c.pp) == (dp, tp, pp):
                return r
        raise KeyError((dp, tp, pp))


@dataclass(frozen=True)
class CommSpec:
    comm_id: int
    kind: str  # meta | dp | tp | pp | zero
    members: tuple[int, ...]


def communicators(topo: RankTopology) -> dict[int, CommSpec]:
    """Every communicator the job creates, with stable ids (meta is 0)."""
    spec = topo.spec
    groups: list[tuple[str, tuple[int, ...]]] = []
    R = spec.world_size

    def group_by(key, kind):
        buckets: dict = {}
        for r in range(R):
            buckets.setdefault(key(topo.coords[r]), []).append(r)
        for k in sorted(buckets):
            members = tuple(sorted(buckets[k]))
            if len(members) > 1:
                groups.append((kind, members))

    if spec.dp > 1:
        group_by(lambda c: (c.pp, c.tp), "dp")
    if spec.tp > 1:
        group_by(lambda c: (c.pp, c.dp), "tp")
    if spec.zero_shard > 1:
        group_by(lambda c: (c.pp, c.tp, c.dp // spec.zero_shard), "zero")
    if spec.pp > 1:
        pairs = []
        for r in range(R):
            c = topo.coords[r]
            if c.pp + 1 < spec.pp:
                pairs.append((r, topo.rank_of(c.dp, c.tp, c.pp + 1)))
        for p in sorted(pairs):
            groups.append(("pp", p))
    out = {0: CommSpec(0, "meta", tuple(range(R)))}
    for i, (kind, members) in enumerate(groups, start=1):
        out[i] = CommSpec(i, kind, members)
    return out


def comms_of(comms: dict[int, CommSpec], rank: int) -> list[CommSpec]:
    return [c for _, c in sorted(comms.items()) if rank in c.members]


def find_comm(comms: dict[int, CommSpec], kind: str, members: Iterable[int]) -> int:
    m = tuple(sorted(members))
    for c in comms.values():
        if c.kind == kind and c.members == m:
            return c.comm_id
    raise KeyError((kind, m))


@dataclass(frozen=True)
class ZeroLayout:
    shard_of: dict
    max_slicing: int


def zero_layout(spec: JobSpec, slicing: int = 1) -> ZeroLayout:
    """Partial-sharding layout; replicas with equal shard index hold equal O."""
    spec.validate()
    s = spec.zero_shard
    topo = RankTopology.build(spec)
    max_slicing = spec.dp // s
    if slicing > max_slicing:
        raise SpecError(
            f"slicing {slicing} exceeds dp/zero_shard = {max_slicing}"
            + (" (job is not shrinkable)" if max_slicing == 1 else "")
        )
    return ZeroLayout({r: c.shard for r, c in topo.coords.items()}, max_slicing)


def max_slicing(spec: JobSpec) -> int:
    return spec.dp // spec.zero_shard


def slicing_groups(topo: RankTopology, slicing: int) -> list[tuple[int, ...]]:
    """Splicing-aware placement: each group shares one GPU.

    Only data-parallel replicas of one (pp, tp, shard) partition are grouped.
    """
    spec = topo.spec
    if slicing < 1 or spec.dp // spec.zero_shard % slicing:
        raise SpecError(f"slicing {slicing} must divide dp/zero_shard = {spec.dp // spec.zero_shard}")
    parts: dict[tuple, list[int]] = {}
    for r in range(spec.world_size):
        parts.setdefault(topo.coords[r].partition, []).append(r)
    groups = []
    for key in sorted(parts):
        ranks = sorted(parts[key], key=lambda r: topo.coords[r].dp)
        for i in range(0, len(ranks), slicing):
            groups.append(tuple(ranks[i:i + slicing]))
    groups.sort(key=lambda g: g[0])
    return groups
