import numpy as np
import pytest

from elasticsim.runtime import JobRuntime, RuntimeConfig, baseline_step_times, track_file_write
from elasticsim.workload import JobSpec, SpecError, oracle_run

SMALL = dict(layers=2, params_per_layer=128, minibatches=4)


def diverged(rt, oracle):
    fs = rt.final_state()
    return [(r, k) for r in oracle.state for k in oracle.state[r]
            if not np.array_equal(fs[r][k], oracle.state[r][k])]


CASES = [
    (JobSpec("dp4", dp=4, **SMALL), 1),
    (JobSpec("dp4", dp=4, **SMALL), 2),
    (JobSpec("dp4", dp=4, **SMALL), 4),
    (JobSpec("tp2", dp=2, tp=2, **SMALL), 2),
    (JobSpec("pp2", dp=2, pp=2, microbatches=2, **SMALL), 2),
    (JobSpec("z", dp=8, zero_shard=2, **SMALL), 4),
    (JobSpec("adv", dp=4, adversarial=True, **SMALL), 4),
]


class TestEquivalence:
    @pytest.mark.parametrize("spec,slicing", CASES, ids=lambda x: str(x) if isinstance(x, int) else x.name)
    def test_bit_equal_to_oracle(self, spec, slicing):
        rt = JobRuntime(spec, config=RuntimeConfig(slicing=slicing))
        assert rt.run() == "done"
        assert diverged(rt, oracle_run(spec, timing=False)) == []
        assert sorted(rt.step_ledger) == sorted((r, t) for r in range(spec.world_size) for t in range(4))

    def test_squash_off_equal(self):
        spec = JobSpec(dp=4, **SMALL)
        rt = JobRuntime(spec, config=RuntimeConfig(slicing=4, squash=False))
        rt.run()
        assert diverged(rt, oracle_run(spec, timing=False)) == []

    def test_adversarial_caught_by_validation(self):
        spec = JobSpec(dp=4, adversarial=True, **SMALL)
        rt = JobRuntime(spec, config=RuntimeConfig(slicing=4))
        rt.run()
        assert any(not ok for *_, ok, _ in rt.validation_outcomes)

    def test_misclassified_buffer_still_correct(self):
        spec = JobSpec(dp=2, **SMALL)
        rt = JobRuntime(spec, config=RuntimeConfig(slicing=2, misclassify={1: ["G0"]}))
        rt.run()
        assert diverged(rt, oracle_run(spec, timing=False)) == []

    def test_dropped_swap_in_diverges(self):
        spec = JobSpec(dp=2, **SMALL)
        rt = JobRuntime(spec, config=RuntimeConfig(slicing=2, squash=False, skip_swap_in=True))
        try:
            rt.run()
        except Exception:
            return
        assert diverged(rt, oracle_run(spec, timing=False))


class TestPerformance:
    def test_proxied_within_three_percent(self):
        spec = JobSpec(dp=4, layers=2, params_per_layer=4096, minibatches=4)
        rt = JobRuntime(spec)
        rt.run()
        base = baseline_step_times(spec)
        assert sum(rt.step_times()[1:]) / sum(base[1:]) - 1 < 0.03

    def test_eager_dispatch_faster_and_equal(self):
        spec = JobSpec(dp=2, **SMALL)
        eager = JobRuntime(spec, config=RuntimeConfig(slicing=2))
        eager.run()
        lazy = JobRuntime(spec, config=RuntimeConfig(slicing=2, eager_dispatch=False))
        lazy.run()
        assert eager.now < lazy.now
        assert diverged(eager, oracle_run(spec, timing=False)) == []
        assert diverged(lazy, oracle_run(spec, timing=False)) == []

    def test_swap_out_once_per_cycle(self):
        spec = JobSpec(dp=4, layers=1, params_per_layer=4096, minibatches=4)
        rt = JobRuntime(spec, config=RuntimeConfig(slicing=4, squash=False))
        rt.run()
        per_replica = 4096 * 8 * 2  # P plus O
        reps = [r for r in rt.switch_reports() if r.reason in ("dp_sync", "done")]
        for k in range(0, len(reps) - 3, 4):
            cycle = [r.po_swap_out() for r in reps[k:k + 4]]
            assert sum(cycle) == per_replica and sum(1 for b in cycle if b) == 1


class TestErrors:
    def test_wrong_gpu_count(self):
        with pytest.raises(SpecError):
            JobRuntime(JobSpec(dp=4), config=RuntimeConfig(slicing=2), gpu_ids=[0])

    def test_bad_config(self):
        with pytest.raises(ValueError):
            RuntimeConfig(barrier_mode="never")

    def test_track_file_write(self):
        log = []
        assert track_file_write(log, "/a", "w") and log == ["/a"]
        assert not track_file_write(log, "/b", "r") and log == ["/a"]


class TestDeterminism:
    def test_same_trace(self):
        spec = JobSpec(dp=2, **SMALL)
        a, b = JobRuntime(spec, config=RuntimeConfig(slicing=2)), JobRuntime(spec, config=RuntimeConfig(slicing=2))
        a.run()
        b.run()
        assert a.trace.dumps() == b.trace.dumps()
