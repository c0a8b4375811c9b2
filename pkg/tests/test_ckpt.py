import numpy as np
import pytest

from elasticsim.ckpt import (
    BlobStore, CheckpointManifest, RestoreError, audit_steps, checkpoint_job, migration_latency, restore_job,
)
from elasticsim.runtime import JobRuntime, RuntimeConfig
from elasticsim.simcore import CostModel, digest_of, hexdigest
from elasticsim.workload import JobSpec, oracle_run
from elasticsim.workload.program import PKG_PATH

SPEC = JobSpec("c", dp=4, layers=2, params_per_layer=256, minibatches=6)


def equal_to_oracle(rt, spec):
    ref = oracle_run(spec, timing=False).state
    fs = rt.final_state()
    return all(np.array_equal(fs[r][k], ref[r][k]) for r in ref for k in ref[r])


def checkpointed(spec=SPEC, steps=3, slicing=1, store=None):
    rt = JobRuntime(spec, config=RuntimeConfig(slicing=slicing))
    rt.run_steps(steps)
    store = store if store is not None else BlobStore()
    return rt, store, checkpoint_job(rt, store)


class TestBlobStore:
    def test_put_dedups(self):
        s = BlobStore()
        d, n = s.put(b"a" * 8)
        assert n == 8 and s.put(b"a" * 8) == (d, 0) and s.bytes_uploaded == 8

    def test_release_by_refcount(self):
        s = BlobStore()
        d, _ = s.put(b"x")
        s.put(b"x")
        s.release(d)
        assert s.has(d)
        s.release(d)
        assert not s.has(d)

    def test_corruption_detected(self):
        s = BlobStore()
        d, _ = s.put(b"abc")
        s.blobs[d] = b"abd"
        with pytest.raises(RestoreError):
            s.get(d)

    def test_disk_layout(self, tmp_path):
        s = BlobStore(tmp_path)
        d, _ = s.put(b"hello")
        h = hexdigest(d)
        assert (tmp_path / "blobs" / h[:2] / h).read_bytes() == b"hello"
        assert BlobStore(tmp_path).get(d) == b"hello"


class TestRestore:
    @pytest.mark.parametrize("before,after", [(1, 1), (1, 2), (2, 1), (4, 2), (2, 4)])
    def test_restore_across_slicing(self, before, after):
        rt, store, man = checkpointed(slicing=before)
        new = restore_job(man, store, slicing=after, gpu_ids=list(range(100, 100 + 4 // after)))
        assert new.run() == "done"
        assert equal_to_oracle(new, SPEC)
        audit = audit_steps(man.step_ledger, new.step_ledger, 4, SPEC.minibatches)
        assert audit["ok"]
        assert all(s >= 3 for _, s in new.step_ledger)

    def test_round_trip_device_identical(self):
        rt, store, man = checkpointed()
        new = restore_job(man, store)
        for r in range(4):
            assert new.device_contents(r) == rt.device_contents(r)

    def test_3d_job(self):
        spec = JobSpec("3d", dp=2, tp=2, pp=2, layers=2, params_per_layer=64, minibatches=4, microbatches=2)
        rt, store, man = checkpointed(spec, steps=2)
        new = restore_job(man, store, slicing=2, gpu_ids=[7, 8, 9, 10])
        new.run()
        assert equal_to_oracle(new, spec)

    def test_missing_blob_aborts(self):
        rt, store, man = checkpointed()
        store.blobs.pop(int(man.device["0"][0][3], 16))
        with pytest.raises(RestoreError):
            restore_job(man, store)

    def test_manifest_text_round_trip(self, tmp_path):
        rt, store, man = checkpointed(store=BlobStore(tmp_path))
        man.save(tmp_path / "m.json")
        again = CheckpointManifest.load(tmp_path / "m.json")
        assert again.to_text() == man.to_text()
        assert list(__import__("json").loads(man.to_text()))[:3] == ["version", "job", "kind"]
        new = restore_job(again, BlobStore(tmp_path))
        new.run()
        assert equal_to_oracle(new, SPEC)

    def test_deleted_file_stays_deleted(self):
        rt, store, man = checkpointed()
        assert man.files["0"]["/tmp/rank0.scratch"] is None
        new = restore_job(man, store)
        assert new.workers[0].files.get("/tmp/rank0.scratch") is None

    def test_consistent_cut(self):
        _, _, man = checkpointed()
        for per_rank in man.collectives.values():
            assert len(set(per_rank.values())) == 1


class TestSizes:
    def test_device_dedup_across_replicas(self):
        man4 = checkpointed()[2]
        man8 = checkpointed(JobSpec("c", dp=8, layers=2, params_per_layer=256, minibatches=6))[2]
        assert man4.S_G == man8.S_G
        assert man8.S_Cr == 2 * man4.S_Cr

    def test_package_file_stored_once(self):
        _, store, man = checkpointed()
        digests = {man.files[str(r)][PKG_PATH] for r in range(4)}
        assert len(digests) == 1
        assert store.refs[int(digests.pop(), 16)] == 4

    def test_incremental_small(self):
        rt, store, first = checkpointed()
        rt.release_barrier()
        before = rt._min_step()
        rt.run_steps(1)
        assert rt._min_step() > before
        second = checkpoint_job(rt, store, prev=first)
        assert second.S_Cr_incremental * 10 < first.S_Cr

    def test_no_steps_no_new_pages(self):
        rt, store, first = checkpointed()
        second = checkpoint_job(rt, store, prev=first)
        assert second.S_Cr_incremental == 0 and second.uploaded_bytes == 0


class TestLatency:
    def test_transfer_dominates(self):
        lat = migration_latency(checkpointed()[2])
        assert lat.transfer > lat.total / 2

    def test_store_bandwidth_linear(self):
        man = checkpointed()[2]
        a = migration_latency(man)
        cost = CostModel()
        b = migration_latency(man, cost.with_overrides(store_bw=cost.store_bw * 2))
        assert abs(b.transfer * 2 - a.transfer) <= 2
        assert (b.barrier, b.dump, b.restore) == (a.barrier, a.dump, a.restore)

    def test_empty_manifest(self):
        man = CheckpointManifest("j", "on_demand", 0, 0, {}, 1, {}, {}, {}, {}, {}, {}, [], [])
        cost = CostModel()
        lat = migration_latency(man, cost)
        assert lat.total == round(cost.barrier_fixed * 1e9) + round(cost.restore_fixed * 1e9)


class TestAudit:
    def test_detects_repeat_and_gap(self):
        res = audit_steps([(0, 0), (0, 1)], [(0, 1)], 1, 3)
        assert res["repeated"] == [(0, 1)] and res["missing"] == [(0, 2)] and not res["ok"]
