import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elasticsim.workload import (
    JobSpec, RankTopology, SpecError, build_job, communicators, max_slicing, oracle_run,
    slicing_groups, step_program, zero_layout,
)


def megatron_inventory(dp, tp, pp):
    """Independent enumeration of communicator member sets by kind."""
    rank = lambda d, t, p: t + tp * (d + dp * p)
    inv = {"dp": set(), "tp": set(), "pp": set()}
    for p, t in itertools.product(range(pp), range(tp)):
        if dp > 1:
            inv["dp"].add(tuple(sorted(rank(d, t, p) for d in range(dp))))
    for p, d in itertools.product(range(pp), range(dp)):
        if tp > 1:
            inv["tp"].add(tuple(sorted(rank(d, t, p) for t in range(tp))))
    for d, t, p in itertools.product(range(dp), range(tp), range(pp - 1)):
        inv["pp"].add((rank(d, t, p), rank(d, t, p + 1)))
    return inv


def inventory(spec):
    inv = {"dp": set(), "tp": set(), "pp": set()}
    for c in communicators(RankTopology.build(spec)).values():
        if c.kind in inv:
            inv[c.kind].add(c.members)
    return inv


class TestSpec:
    def test_world_size(self):
        assert JobSpec(dp=4, tp=2, pp=4, layers=4).world_size == 32

    @pytest.mark.parametrize("kw", [
        dict(dp=4, zero_shard=3), dict(pp=3, layers=2), dict(dp=0), dict(tier="Gold"),
        dict(dp=2, rank_map=((0, 0, 0), (0, 0, 0))),
    ])
    def test_invalid_rejected(self, kw):
        with pytest.raises(SpecError):
            JobSpec(**kw).validate()

    def test_rank_map_override(self):
        spec = JobSpec(dp=2, pp=2, rank_map=((0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1)))
        topo = RankTopology.build(spec)
        assert topo.coords[1].pp == 1 and topo.coords[2].dp == 1


class TestTopology:
    def test_dp_only(self):
        comms = communicators(RankTopology.build(JobSpec(dp=4)))
        kinds = [c.kind for c in comms.values()]
        assert kinds == ["meta", "dp"] and comms[1].members == (0, 1, 2, 3)

    def test_dp2_pp4(self):
        inv = inventory(JobSpec(dp=2, pp=4, layers=4))
        assert len(inv["dp"]) == 4 and all(len(m) == 2 for m in inv["dp"])
        assert len(inv["pp"]) == 3 * 2

    def test_rank4_coordinate(self):
        c = RankTopology.build(JobSpec(dp=4, pp=2)).coords[4]
        assert (c.dp, c.tp, c.pp) == (0, 0, 1)

    def test_3d_matches_enumerator(self):
        assert inventory(JobSpec(dp=4, tp=2, pp=4, layers=4)) == megatron_inventory(4, 2, 4)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([1, 2, 3]), st.sampled_from([1, 2]), st.sampled_from([1, 2, 3]))
    def test_inventory_property(self, dp, tp, pp):
        assert inventory(JobSpec(dp=dp, tp=tp, pp=pp, layers=pp * 2)) == megatron_inventory(dp, tp, pp)

    def test_meta_communicator_spans_job(self):
        comms = communicators(RankTopology.build(JobSpec(dp=2, tp=2)))
        assert comms[0].kind == "meta" and comms[0].members == (0, 1, 2, 3)


class TestZero:
    def test_max_slicing(self):
        assert max_slicing(JobSpec(dp=4)) == 4
        assert max_slicing(JobSpec(dp=16, zero_shard=4, params_per_layer=256)) == 4

    def test_groups_share_shard(self):
        spec = JobSpec(dp=8, zero_shard=2)
        topo = RankTopology.build(spec)
        assert zero_layout(spec).max_slicing == 4
        groups = slicing_groups(topo, 4)
        assert len(groups) == 2
        for g in groups:
            assert len({topo.coords[r].shard for r in g}) == 1

    def test_fully_sharded_not_shrinkable(self):
        with pytest.raises(SpecError, match="not shrinkable"):
            zero_layout(JobSpec(dp=4, zero_shard=4), slicing=2)

    def test_slicing_must_divide(self):
        with pytest.raises(SpecError):
            slicing_groups(RankTopology.build(JobSpec(dp=4)), 3)

    def test_groups_stay_within_partition(self):
        spec = JobSpec(dp=4, tp=2, pp=2)
        topo = RankTopology.build(spec)
        for g in slicing_groups(topo, 2):
            assert len({topo.coords[r].partition for r in g}) == 1


class TestPrograms:
    def stable_allocs(self, prog):
        return [(i[2], i[3]) for i in prog if i[0] == "alloc" and i[3] != "A"]

    def test_stable_sequence_equal_across_replicas(self):
        plan = build_job(JobSpec(dp=4, layers=2))
        from elasticsim.workload import init_program
        seqs = {tuple(self.stable_allocs(init_program(plan, r))) for r in range(4)}
        assert len(seqs) == 1

    def test_transient_sizes_differ(self):
        spec = JobSpec(dp=4)
        sizes = {tuple(i[2] for i in step_program(build_job(spec), r, 1) if i[0] == "alloc") for r in range(4)}
        assert len(sizes) > 1

    def test_pipeline_program_has_send_recv(self):
        plan = build_job(JobSpec(dp=1, pp=2, layers=2))
        ops0 = {i[0] for i in step_program(plan, 0, 0)}
        ops1 = {i[0] for i in step_program(plan, 1, 0)}
        assert "send" in ops0 and "recv" in ops1

    def test_dp_program_has_async_allreduce_then_wait(self):
        prog = step_program(build_job(JobSpec(dp=2)), 0, 0)
        ops = [i[0] for i in prog]
        ar = [i for i in prog if i[0] == "allreduce"]
        assert all(i[4] for i in ar) and ops.index("sync_wait") > ops.index("allreduce")


class TestOracle:
    def test_deterministic(self):
        spec = JobSpec(dp=2, tp=2, pp=2, layers=2, params_per_layer=64, minibatches=2)
        a, b = oracle_run(spec, timing=False), oracle_run(spec, timing=False)
        for r in a.state:
            for k in a.state[r]:
                assert np.array_equal(a.state[r][k], b.state[r][k])

    def test_replicas_agree_after_step(self):
        spec = JobSpec(dp=4, params_per_layer=64, minibatches=2)
        st_ = oracle_run(spec, timing=False).state
        for k in ("P0", "O0"):
            assert all(np.array_equal(st_[0][k], st_[r][k]) for r in range(4))

    def test_seed_changes_state(self):
        a = oracle_run(JobSpec(dp=2, params_per_layer=64, seed=0), timing=False).state
        b = oracle_run(JobSpec(dp=2, params_per_layer=64, seed=1), timing=False).state
        assert not np.array_equal(a[0]["P0"], b[0]["P0"])

    def test_timing_present(self):
        res = oracle_run(JobSpec(dp=2, params_per_layer=64, minibatches=2))
        assert len(res.step_times) == 2 and res.step_time_ns > 0
