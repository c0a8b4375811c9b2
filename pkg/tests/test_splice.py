import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elasticsim.simcore import CostModel, digest_of
from elasticsim.splice import (
    BufferLedger, LocalAccumulator, Move, SpliceError, SquashConfig, Squasher, ValidationRecord,
    execute_plan, monitor_overhead, on_dp_allreduce, plan_switch, sequence_moves, validate_window,
)
from elasticsim.vdev import DTYPE, Category, Device

BLK = 64


def fill(dev, addr, value, size=BLK):
    dev.write(addr, np.full(size // 8, value, dtype=DTYPE))


def run_steps(memory, steps):
    """Apply copy steps to a slot->value map, independent of the device."""
    scratch = {}
    for kind, src, dst, _ in steps:
        if kind == "stage":
            scratch[dst] = memory[src]
        elif kind == "unstage":
            memory[dst] = scratch.pop(src)
        else:
            memory[dst] = memory[src]
    return memory


def min_copies(perm):
    # One copy per displaced block plus one staging copy per cycle.
    seen, cycles, moved = set(), 0, 0
    for i in range(len(perm)):
        if i in seen or perm[i] == i:
            continue
        cycles += 1
        j = i
        while j not in seen:
            seen.add(j)
            moved += 1
            j = perm[j]
    return moved + cycles


class TestSequenceMoves:
    def test_swap_costs_three_copies(self):
        moves = [Move(0, BLK, BLK, 1), Move(BLK, 0, BLK, 2)]
        steps = sequence_moves(moves)
        assert len(steps) == 3
        assert run_steps({0: "a", BLK: "b"}, steps) == {0: "b", BLK: "a"}

    def test_chain_needs_no_scratch(self):
        moves = [Move(0, BLK, BLK, 1), Move(BLK, 2 * BLK, BLK, 2)]
        steps = sequence_moves(moves)
        assert [k for k, *_ in steps] == ["d2d", "d2d"]
        assert run_steps({0: "a", BLK: "b", 2 * BLK: "c"}, steps) == {0: "a", BLK: "a", 2 * BLK: "b"}

    @settings(max_examples=200, deadline=None)
    @given(st.permutations(range(6)))
    def test_permutations_minimal_and_correct(self, perm):
        # block i moves to slot perm[i]
        moves = [Move(i * BLK, perm[i] * BLK, BLK, i) for i in range(6)]
        steps = sequence_moves(moves)
        mem = run_steps({i * BLK: i for i in range(6)}, steps)
        assert all(mem[perm[i] * BLK] == i for i in range(6))
        assert len(steps) == min_copies(perm)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=6, max_size=6))
    def test_fan_out_sources(self, srcs):
        # every slot receives a copy of some (possibly shared) original slot
        moves = [Move(s * BLK, d * BLK, BLK, s) for d, s in enumerate(srcs)]
        mem = run_steps({i * BLK: i for i in range(6)}, sequence_moves(moves))
        assert all(mem[d * BLK] == s for d, s in enumerate(srcs))


def ledger_with(views, saved=()):
    """Device holding the last rank's content; ``views`` maps rank -> {addr: fill value}.

    Ranks in ``saved`` have their content copied to the host cache, as a
    switch away from them would have done.
    """
    dev = Device(0, capacity=8 * BLK)
    led = BufferLedger(dev)
    for rank, view in views.items():
        for addr, v in view.items():
            fill(dev, addr, v)
        led.capture(rank, {a: (BLK, Category.PARAM) for a in view})
        if rank in saved:
            for addr, e in led.views[rank].items():
                led.cache_put(e.digest, dev.read(addr, BLK))
    return dev, led


class TestPlanAndExecute:
    def test_identical_views_transfer_nothing(self):
        dev, led = ledger_with({1: {0: 5, BLK: 6}, 0: {0: 5, BLK: 6}})
        plan = plan_switch(led, 0, 1)
        assert plan.swap_ins == [] and plan.d2d_moves == []
        assert len(plan.swap_outs) == 2  # first departure saves content once

    def test_swapped_contents_use_device_moves(self):
        dev, led = ledger_with({1: {0: 6, BLK: 5}, 0: {0: 5, BLK: 6}})
        plan = plan_switch(led, 0, 1)
        assert plan.swap_ins == [] and len(plan.d2d_moves) == 2
        res = execute_plan(led, plan, CostModel())
        assert res.d2d_copies == 3 and res.staged == 1
        assert dev.digest(0, BLK) == led.views[1][0].digest

    def test_second_switch_swaps_nothing_out(self):
        dev, led = ledger_with({1: {0: 1}, 0: {0: 2}}, saved=(1,))
        execute_plan(led, plan_switch(led, 0, 1), CostModel())
        plan = plan_switch(led, 1, 0)
        assert plan.swap_outs == [] and len(plan.swap_ins) == 1
        execute_plan(led, plan, CostModel())
        assert plan_switch(led, 0, 1).swap_outs == []

    def test_swap_in_restores_content(self):
        dev, led = ledger_with({1: {0: 1}, 0: {0: 2}}, saved=(1,))
        execute_plan(led, plan_switch(led, 0, 1), CostModel())
        assert dev.view(0, BLK)[0] == 1

    def test_lost_content_detected(self):
        dev, led = ledger_with({1: {0: 1}})
        fill(dev, 0, 9)
        led.capture(0, {0: (BLK, Category.PARAM)})
        with pytest.raises(SpliceError):
            plan_switch(led, None, 1)

    def test_cache_rejects_wrong_digest(self):
        led = BufferLedger(Device(0, capacity=BLK))
        with pytest.raises(SpliceError):
            led.cache_put(digest_of(b"x" * 8) ^ 1, b"x" * 8)

    def test_scratch_overflow_goes_through_host(self):
        cost = CostModel()
        _, led = ledger_with({1: {0: 6, BLK: 5}, 0: {0: 5, BLK: 6}})
        fast = execute_plan(led, plan_switch(led, 0, 1), cost)
        _, led = ledger_with({1: {0: 6, BLK: 5}, 0: {0: 5, BLK: 6}})
        slow = execute_plan(led, plan_switch(led, 0, 1), cost, scratch_capacity=0)
        assert slow.duration_ns > fast.duration_ns


class TestLocalAccumulator:
    def test_sum_and_install(self):
        acc = LocalAccumulator()
        acc.add((1, 0), 0, np.array([1, 2], dtype=DTYPE), (0, 2))
        acc.add((1, 0), 1, np.array([3, 4], dtype=DTYPE), (16, 2))
        assert acc.count((1, 0)) == 2
        total = on_dp_allreduce([np.array([1, 2], dtype=DTYPE), np.array([3, 4], dtype=DTYPE)])
        acc.complete((1, 0), total, 7)
        ready = acc.ready_outputs(1)
        assert ready[0][1] == 16 and list(ready[0][3]) == [4, 6]
        acc.mark_installed((1, 0), 0)
        assert acc.busy()
        acc.mark_installed((1, 0), 1)
        assert not acc.busy()

    def test_double_add_rejected(self):
        acc = LocalAccumulator()
        acc.add((1, 0), 0, np.zeros(1, dtype=DTYPE), None)
        with pytest.raises(SpliceError):
            acc.add((1, 0), 0, np.zeros(1, dtype=DTYPE), None)

    def test_wraparound_sum(self):
        big = np.array([2**64 - 1], dtype=DTYPE)
        assert on_dp_allreduce([big, np.array([2], dtype=DTYPE)])[0] == 1


class TestSquashing:
    def rec(self, d=1, h=()):
        return ValidationRecord(((0, 8, d),), tuple(h))

    def test_validate_window(self):
        assert validate_window({0: self.rec(), 1: self.rec()}) == (True, "")
        ok, why = validate_window({0: self.rec(1), 1: self.rec(2)})
        assert not ok and "checksums" in why
        ok, why = validate_window({0: self.rec(h=(1,)), 1: self.rec(h=(2,))})
        assert not ok and "device-to-host" in why

    def test_validation_steps_not_squashed(self):
        sq = Squasher(SquashConfig(validation_period=4), (0, 1), first_step=0)
        assert sq.root_done(1, 0, {}) == []
        assert sq.root_done(1, 1, {}) == [0]
        assert sq.squashes(0, 1) and not sq.squashes(1, 1)

    def test_failed_validation_disables(self):
        sq = Squasher(SquashConfig(), (0, 1))
        sq.root_done(1, 1, {})
        assert sq.record(4, 0, self.rec(1)) is None
        ok, _ = sq.record(4, 1, self.rec(2))
        assert not ok and sq.disabled and not sq.squashes(0, 1)

    def test_single_rank_group_never_squashes(self):
        assert Squasher(SquashConfig(), (0,)).disabled


class TestMonitor:
    def test_threshold(self):
        assert monitor_overhead(2.0, 2, 1.0) == (0.0, "keep")
        over, action = monitor_overhead(2.2, 2, 1.0)
        assert over == pytest.approx(0.1) and action == "disable_time_slicing"
        assert monitor_overhead(5.0, 1, 1.0) == (0.0, "keep")
