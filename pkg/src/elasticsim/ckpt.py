"""Consistent checkpoint and restore.

A checkpoint is taken only while every rank holds the barrier.  Host images
are stored as 4 KiB pages, deduplicated within a worker and against that
worker's previous checkpoint.  Live device buffers are deduplicated by
content across workers.  Each rank also records its compacted replay log
and the files it wrote, next to the collective sequence counters.  Blobs live in
a content-addressed store; the manifest is a JSON document with a fixed field
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .proxy import LogEntry
from .runtime import JobRuntime, RuntimeConfig, track_file_write
from .simcore import CostModel, SimError, Trace, digest_of, hexdigest
from .workload.spec import JobSpec

PAGE = 4096
STATIC_PAGES = 240  # static image of the main process
LOADER_PAGES = 16  # data-loader process, forked from main: same pages
MANIFEST_VERSION = 1


class CheckpointError(SimError):
    pass


class RestoreError(SimError):
    pass


# ---------------------------------------------------------------------------
# Blob store
# ---------------------------------------------------------------------------

class BlobStore:
    """Content-addressed store; optional on-disk layout ``blobs/<2 hex>/<digest>``."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self.blobs: dict[int, bytes] = {}
        self.refs: dict[int, int] = {}
        self.bytes_uploaded = 0

    def path_of(self, digest: int) -> Path:
        h = hexdigest(digest)
        return self.root / "blobs" / h[:2] / h

    def put(self, data: bytes) -> tuple[int, int]:
        """Store ``data``; return (digest, bytes actually transferred)."""
        d = digest_of(data)
        self.refs[d] = self.refs.get(d, 0) + 1
        if d in self.blobs:
            return d, 0
        self.blobs[d] = bytes(data)
        self.bytes_uploaded += len(data)
        if self.root is not None:
            p = self.path_of(d)
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(data)
        return d, len(data)

    def has(self, digest: int) -> bool:
        return digest in self.blobs

    def get(self, digest: int) -> bytes:
        data = self.blobs.get(digest)
        if data is None and self.root is not None and self.path_of(digest).exists():
            data = self.path_of(digest).read_bytes()
        if data is None:
            raise RestoreError(f"missing blob {hexdigest(digest)}")
        if digest_of(data) != digest:
            raise RestoreError(f"blob {hexdigest(digest)} fails verification")
        return data

    def release(self, digest: int) -> None:
        n = self.refs.get(digest, 0) - 1
        if n > 0:
            self.refs[digest] = n
            return
        self.refs.pop(digest, None)
        self.blobs.pop(digest, None)


# ---------------------------------------------------------------------------
# Worker snapshots
# ---------------------------------------------------------------------------

def _static_page(rank: int, i: int) -> bytes:
    seed = np.uint64((rank * 1_000_003 + i * 7919 + 17) & ((1 << 64) - 1))
    words = np.arange(PAGE // 8, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15) + seed
    return words.tobytes()


def _pages(blob: bytes) -> list[bytes]:
    if not blob:
        return []
    pad = (-len(blob)) % PAGE
    blob = blob + b"\0" * pad
    return [blob[i:i + PAGE] for i in range(0, len(blob), PAGE)]


@dataclass
class WorkerSnapshot:
    rank: int
    pc: list
    state: dict
    main_pages: list[bytes]
    loader_pages: list[bytes]

    @classmethod
    def take(cls, rt: JobRuntime, rank: int) -> "WorkerSnapshot":
        w = rt.workers[rank]
        if w.phase != "done" and not w.agent.acquired:
            raise CheckpointError(f"rank {rank} is not holding the barrier")
        state = rt.worker_state(rank)
        dyn = json.dumps(state, sort_keys=True).encode()
        main = [_static_page(rank, i) for i in range(STATIC_PAGES)] + _pages(dyn)
        loader = main[:LOADER_PAGES]
        return cls(rank, state["pc"], state, main, loader)

    def unique_pages(self) -> dict[int, bytes]:
        out: dict[int, bytes] = {}
        for p in self.main_pages + self.loader_pages:
            out.setdefault(digest_of(p), p)
        return out


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class CheckpointManifest:
    job: str
    kind: str
    seq: int
    time: int
    spec: dict
    slicing: int
    steps: dict  # rank -> next step to run
    workers: dict  # rank -> {"main": [hex], "loader": [hex], "state_pages": n}
    device: dict  # rank -> [[addr, size, category, hex]]
    replay_log: dict  # rank -> [entry]
    files: dict  # rank -> {path: hex | None}
    collectives: dict  # comm -> {rank: next seq}
    done_time: list  # [[comm, seq, t]] for completed-but-unwaited collectives
    step_ledger: list  # [[rank, step]] executed before the cut
    barrier_wait_ns: int = 0
    S_G: int = 0
    S_Cr: int = 0
    S_Cr_incremental: int = 0
    uploaded_bytes: int = 0
    version: int = MANIFEST_VERSION

    @property
    def S_total(self) -> int:
        return self.S_G + self.S_Cr

    def device_bytes(self) -> int:
        return sum(e[1] for v in self.device.values() for e in v)

    def unique_device_bytes(self) -> int:
        seen = {}
        for v in self.device.values():
            for e in v:
                seen[e[3]] = e[1]
        return sum(seen.values())

    def page_digests(self, rank) -> set[str]:
        w = self.workers[str(rank)]
        return set(w["main"]) | set(w["loader"])

    def to_text(self) -> str:
        order = ["version", "job", "kind", "seq", "time", "spec", "slicing", "steps", "S_G", "S_Cr",
                 "S_Cr_incremental", "uploaded_bytes", "barrier_wait_ns", "collectives", "done_time",
                 "step_ledger", "files", "replay_log", "device", "workers"]
        doc = {k: getattr(self, k) for k in order}
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CheckpointManifest":
        d = json.loads(text)
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "CheckpointManifest":
        return cls.from_text(Path(path).read_text())


def checkpoint_job(rt: JobRuntime, store: BlobStore, kind: str = "on_demand",
                   prev: CheckpointManifest | None = None, ranks=(0,), seq: int | None = None) -> CheckpointManifest:
    """Acquire the barrier, snapshot every worker and its device buffers."""
    if kind not in ("on_demand", "periodic"):
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    t_req = rt.now
    if rt.barrier_state not in ("acquired", "end"):
        if rt.finished:
            rt.request_barrier(ranks)
            rt.run()
        else:
            rt.acquire(ranks)
    t_acq = rt.now
    uploaded = 0
    workers, device, logs, files = {}, {}, {}, {}
    s_cr = s_inc = 0
    seen_dev: set[int] = set()
    s_g = 0
    for r in sorted(rt.workers):
        snap = WorkerSnapshot.take(rt, r)
        pages = snap.unique_pages()
        prev_pages = prev.page_digests(r) if prev is not None and str(r) in prev.workers else set()
        for d, data in pages.items():
            _, n = store.put(data)
            uploaded += n
            s_cr += len(data)
            if hexdigest(d) not in prev_pages:
                s_inc += len(data)
        dyn_pages = len(snap.main_pages) - STATIC_PAGES
        workers[str(r)] = {
            "main": [hexdigest(digest_of(p)) for p in snap.main_pages],
            "loader": [hexdigest(digest_of(p)) for p in snap.loader_pages],
            "state_pages": dyn_pages,
        }
        dev = []
        for addr, size, cat, data in rt.device_contents(r):
            d, n = store.put(data)
            uploaded += n
            if d not in seen_dev:
                seen_dev.add(d)
                s_g += size
            dev.append([addr, size, cat, hexdigest(d)])
        device[str(r)] = dev
        logs[str(r)] = [e.to_list() for e in rt.proxy_of(r).rank_log(r)]
        w = rt.workers[r]
        fmap = {}
        for path in w.written:
            content = w.files.get(path)
            if content is None:
                fmap[path] = None
            else:
                d, n = store.put(content)
                uploaded += n
                fmap[path] = hexdigest(d)
        files[str(r)] = fmap
    outstanding = {tuple(k) for w in rt.workers.values() for k in w.outstanding}
    man = CheckpointManifest(
        job=rt.job, kind=kind, seq=(prev.seq + 1 if prev is not None else 0) if seq is None else seq,
        time=t_acq, spec=rt.spec.to_dict(), slicing=rt.config.slicing,
        steps={str(r): w.step for r, w in sorted(rt.workers.items())},
        workers=workers, device=device, replay_log=logs, files=files,
        collectives={str(c): {str(r): s for r, s in sorted(v.items())} for c, v in sorted(rt.engine.issued.items())},
        done_time=[[k[0], k[1], rt.done_time[k]] for k in sorted(outstanding)],
        step_ledger=[list(x) for x in rt.step_ledger],
        barrier_wait_ns=t_acq - t_req, S_G=s_g, S_Cr=s_cr, S_Cr_incremental=s_inc, uploaded_bytes=uploaded,
    )
    rt.trace.emit("checkpoint", rt.job, None, t_acq, ckpt_kind=kind, seq=man.seq, S_G=s_g, S_Cr=s_cr,
                  S_Cr_incremental=s_inc, uploaded=uploaded)
    if kind == "periodic":
        rt.release_barrier()
    return man


def spec_from_dict(d: dict) -> JobSpec:
    d = dict(d)
    if d.get("rank_map") is not None:
        d["rank_map"] = tuple(tuple(x) for x in d["rank_map"])
    return JobSpec(**d)


def restore_job(man: CheckpointManifest, store: BlobStore, gpu_ids: list[int] | None = None,
                slicing: int | None = None, cost: CostModel | None = None, config: RuntimeConfig | None = None,
                trace: Trace | None = None, start_time: int = 0, job: str | None = None) -> JobRuntime:
    """Rebuild the job from ``man`` on fresh proxies and rendezvous."""
    spec = spec_from_dict(man.spec)
    cfg = config or RuntimeConfig()
    if slicing is not None:
        cfg = RuntimeConfig(**{**cfg.__dict__, "slicing": slicing})
    workers, devices, logs, files = {}, {}, {}, {}
    for rs, wman in man.workers.items():
        r = int(rs)
        main = [store.get(int(h, 16)) for h in wman["main"]]
        for h in wman["loader"]:
            store.get(int(h, 16))
        dyn = b"".join(main[STATIC_PAGES:]).rstrip(b"\0")
        workers[r] = json.loads(dyn)
        devices[r] = []
        for addr, size, cat, h in man.device[rs]:
            data = store.get(int(h, 16))
            if len(data) != size:
                raise RestoreError(f"blob size mismatch for rank {r} at {addr}")
            devices[r].append((addr, size, cat, data))
        logs[r] = [LogEntry.from_list(x) for x in man.replay_log[rs]]
        files[r] = {p: (None if h is None else store.get(int(h, 16))) for p, h in man.files[rs].items()}
    issued = {int(c): {int(r): s for r, s in v.items()} for c, v in man.collectives.items()}
    done = {(c, s): t for c, s, t in man.done_time}
    return JobRuntime.restore(spec, workers, devices, logs, issued, files, cost, cfg, trace,
                              job or man.job, gpu_ids, start_time, done)


@dataclass
class MigrationLatency:
    barrier: int
    dump: int
    upload: int
    download: int
    restore: int

    @property
    def transfer(self) -> int:
        return self.upload + self.download

    @property
    def total(self) -> int:
        return self.barrier + self.dump + self.upload + self.download + self.restore

    def to_dict(self) -> dict:
        return {"barrier": self.barrier, "dump": self.dump, "upload": self.upload, "download": self.download,
                "restore": self.restore, "total": self.total}


def migration_latency(man: CheckpointManifest, cost: CostModel | None = None,
                      include_wait: bool = True) -> MigrationLatency:
    """Per-phase migration time: barrier, dump, upload, download, restore."""
    cost = cost or CostModel()
    barrier = round(cost.barrier_fixed * 1e9) + (man.barrier_wait_ns if include_wait else 0)
    dev = man.unique_device_bytes()
    dump = cost.transfer_time(dev, "d2h")
    total = man.S_total
    upload = cost.transfer_time(man.uploaded_bytes, "store")
    download = cost.transfer_time(total, "store")
    restore = round(cost.restore_fixed * 1e9) + cost.transfer_time(dev, "h2d")
    return MigrationLatency(barrier, dump, upload, download, restore)


def audit_steps(before: list, after: list, world: int, minibatches: int, start: int = 0) -> dict:
    """Count executions of each (rank, step); work-conserving means all ones."""
    counts: dict[tuple[int, int], int] = {}
    for r, s in list(before) + list(after):
        counts[(r, s)] = counts.get((r, s), 0) + 1
    missing = [(r, s) for r in range(world) for s in range(start, minibatches) if (r, s) not in counts]
    repeated = sorted(k for k, v in counts.items() if v > 1)
    return {"missing": missing, "repeated": repeated, "ok": not missing and not repeated}
