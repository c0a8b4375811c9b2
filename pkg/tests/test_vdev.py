import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from elasticsim.simcore import GiB, CostModel
from elasticsim.vdev import Category, Device, DeviceBuffer, DeviceFault, KernelDesc


def u64(*xs):
    return np.array(xs, dtype=np.uint64)


@pytest.fixture
def dev():
    d = Device(0, capacity=64 * 1024)
    d.register(DeviceBuffer(0, 24, Category.PARAM))
    d.register(DeviceBuffer(64, 24, Category.GRAD))
    d.register(DeviceBuffer(128, 24, Category.ACTIVATION))
    return d


class TestMemory:
    def test_overlap_rejected(self, dev):
        with pytest.raises(DeviceFault):
            dev.register(DeviceBuffer(16, 16, Category.PARAM))

    def test_outside_rejected(self, dev):
        with pytest.raises(DeviceFault):
            dev.register(DeviceBuffer(dev.capacity - 8, 16, Category.PARAM))

    def test_unregister_unknown(self, dev):
        with pytest.raises(DeviceFault):
            dev.unregister(8)


class TestKernels:
    def test_identity(self, dev):
        dev.write(0, u64(4, 5, 6))
        dev.launch_kernel(KernelDesc("copy", (0,), (128,), "identity"))
        assert list(dev.view(128, 24)) == [4, 5, 6]

    def test_add(self, dev):
        dev.write(0, u64(1, 2, 3))
        dev.write(64, u64(10, 20, 30))
        dev.launch_kernel(KernelDesc("add", (0, 64), (128,), "add"))
        assert list(dev.view(128, 24)) == [11, 22, 33]

    def test_add_wraps(self, dev):
        dev.write(0, u64(2**64 - 1, 0, 0))
        dev.write(64, u64(2, 0, 0))
        dev.launch_kernel(KernelDesc("add", (0, 64), (128,), "add"))
        assert int(dev.view(128, 8)[0]) == 1

    def test_dangling_address_faults(self, dev):
        dev.unregister(64)
        with pytest.raises(DeviceFault):
            dev.launch_kernel(KernelDesc("add", (0, 64), (128,), "add"))

    def test_kernel_cost_advances_stream(self, dev):
        t = dev.launch_kernel(KernelDesc("copy", (0,), (128,), "identity"), issue_time=1000)
        assert t == 1000 + CostModel().kernel_ns()


class TestCopies:
    def test_round_trip_preserves_digest(self, dev):
        dev.write(0, u64(7, 8, 9))
        d0 = dev.digest(0, 24)
        host = np.zeros(3, dtype=np.uint64)
        dev.copy(("dev", 0), host, 24)
        dev.write(0, u64(0, 0, 0))
        dev.copy(host, ("dev", 0), 24)
        assert dev.digest(0, 24) == d0

    def test_d2d_move_keeps_digest(self, dev):
        dev.write(0, u64(1, 1, 2))
        dev.copy(("dev", 0), ("dev", 64), 24)
        assert dev.digest(64, 24) == dev.digest(0, 24)

    def test_overlapping_d2d_must_be_staged(self, dev):
        with pytest.raises(DeviceFault):
            dev.copy(("dev", 0), ("dev", 8), 24)

    def test_large_d2h_time(self):
        assert CostModel().transfer_time(32 * GiB, "d2h") == 2_000_000_000

    def test_channel_timing(self, dev):
        host = np.zeros(3, dtype=np.uint64)
        t = dev.copy(("dev", 0), host, 24, issue_time=0)
        assert t == CostModel().transfer_time(24, "d2h")


class TestOrdering:
    def test_wait_event_orders_b_after_a(self, dev):
        s1, s2 = dev.create_stream(), dev.create_stream()
        ta = dev.launch_kernel(KernelDesc("a", (0,), (128,), "identity"), s1, issue_time=500)
        ev = dev.record_event(s1)
        dev.stream_wait_event(s2, ev)
        tb = dev.launch_kernel(KernelDesc("b", (0,), (64,), "identity"), s2, issue_time=0)
        assert tb > ta

    def test_sync_empty(self):
        d = Device(1, capacity=1024)
        assert d.device_sync(42) == 42

    def test_destroyed_stream_event_faults(self, dev):
        s = dev.create_stream()
        ev = dev.record_event(s)
        dev.destroy_stream(s)
        with pytest.raises(DeviceFault):
            dev.stream_wait_event(dev.default_stream, ev)

    @given(st.integers(0, 10_000))
    def test_random_dag_completion_is_linear_extension(self, seed):
        rng = random.Random(seed)
        d = Device(0, capacity=4096)
        d.register(DeviceBuffer(0, 8, Category.PARAM))
        d.register(DeviceBuffer(8, 8, Category.GRAD))
        streams = [d.create_stream() for _ in range(3)]
        done, edges, last_on = {}, [], {}
        events = []
        t = 0
        for i in range(50):
            s = rng.randrange(3)
            if events and rng.random() < 0.3:
                j, ev = rng.choice(events)
                d.stream_wait_event(streams[s], ev)
                edges.append((j, i))
            t += rng.randrange(3)
            done[i] = d.launch_kernel(KernelDesc(f"k{i}", (0,), (8,), "identity"), streams[s], issue_time=t)
            if s in last_on:
                edges.append((last_on[s], i))
            last_on[s] = i
            if rng.random() < 0.4:
                events.append((i, d.record_event(streams[s])))
        for a, b in edges:
            assert done[a] < done[b]
