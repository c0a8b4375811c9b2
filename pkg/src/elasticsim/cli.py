"""Scenario runner with its verifier and trace reporter.

Usage::

    elasticsim run <scenario> [--seed N] [--trace out.jsonl]
    elasticsim verify <scenario>
    elasticsim report <trace.jsonl>

A scenario is a YAML document; ``<scenario>`` may also name a bundled one
(``elasticsim run dp4_preempt``).  Cost-model parameters can be overridden
from the environment with ``ELASTICSIM_COST_<FIELD>``, for example
``ELASTICSIM_COST_NET_BW=1e10``; environment values win over the scenario.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .runtime import RuntimeConfig
from .sched import Fleet, Scheduler
from .simcore import TRACE_VERSION, CostModel, SimError
from .workload import JobSpec, SpecError, oracle_run
from .workload.spec import TIERS

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
ENV_PREFIX = "ELASTICSIM_COST_"
NS = 10**9
ORACLE_WORD_LIMIT = 50_000_000  # words of P+O summed over ranks
RUNTIME_KEYS = {"squash", "validation_period", "eager_dispatch", "barrier_mode", "device_capacity",
                "slack_fraction", "scratch_capacity", "skip_swap_in"}
JOB_KEYS = {"spec", "tier", "arrival", "minibatch_seconds", "locality", "checkpoint_interval", "pin", "slicing", "id"}
EVENT_KINDS = {"fail_node", "add_node", "barrier", "preempt", "resume", "resize"}


class ConfigError(Exception):
    """Invalid scenario; the message starts with the offending field path."""


@dataclass
class JobEntry:
    spec: JobSpec
    tier: str
    arrival: float = 0.0
    minibatch_seconds: float = 30.0
    locality: bool = False
    checkpoint_interval: float | None = None
    pin: list | None = None
    slicing: int | None = None
    id: str | None = None


@dataclass
class Scenario:
    name: str
    seed: int = 0
    cost: dict = field(default_factory=dict)
    fleet: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)
    jobs: list = field(default_factory=list)
    events: list = field(default_factory=list)
    horizon: float | None = None


# ---------------------------------------------------------------------------
# Loading and validation
# ---------------------------------------------------------------------------

def bundled_scenarios() -> list[str]:
    root = resources.files("elasticsim") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def _read(source: str) -> tuple[str, str]:
    p = Path(source)
    if p.exists():
        return p.stem, p.read_text()
    if source in bundled_scenarios():
        return source, (resources.files("elasticsim") / "scenarios" / f"{source}.yaml").read_text()
    raise ConfigError(f"{source}: no such file or bundled scenario")


def _num(v, path, lo=None, integer=False):
    ok = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok:
        raise ConfigError(f"{path}: expected {'an integer' if integer else 'a number'}, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{path}: must be >= {lo}")
    return v


def _mapping(v, path):
    if not isinstance(v, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return v


def parse_scenario(doc, name: str = "scenario") -> Scenario:
    doc = _mapping(doc, "<root>")
    unknown = set(doc) - {"name", "seed", "cost", "fleet", "runtime", "jobs", "events", "horizon_seconds"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    sc = Scenario(name=str(doc.get("name", name)))
    sc.seed = _num(doc.get("seed", 0), "seed", 0, integer=True)
    cost = _mapping(doc.get("cost", {}) or {}, "cost")
    names = {f.name for f in fields(CostModel)}
    for k, v in cost.items():
        if k not in names:
            raise ConfigError(f"cost.{k}: unknown cost parameter")
        _num(v, f"cost.{k}", 0)
    sc.cost = dict(cost)
    fleet = _mapping(doc.get("fleet"), "fleet")
    regions = fleet.get("regions")
    if not isinstance(regions, list) or not regions:
        raise ConfigError("fleet.regions: expected a non-empty list")
    for i, reg in enumerate(regions):
        _mapping(reg, f"fleet.regions[{i}]")
        if "name" not in reg:
            raise ConfigError(f"fleet.regions[{i}].name: required")
        cls = reg.get("clusters")
        if not isinstance(cls, list) or not cls:
            raise ConfigError(f"fleet.regions[{i}].clusters: expected a non-empty list")
        for j, cl in enumerate(cls):
            p = f"fleet.regions[{i}].clusters[{j}]"
            _mapping(cl, p)
            if "name" not in cl:
                raise ConfigError(f"{p}.name: required")
            _num(cl.get("nodes"), f"{p}.nodes", 1, integer=True)
            _num(cl.get("gpus_per_node"), f"{p}.gpus_per_node", 1, integer=True)
    sc.fleet = fleet
    rt = _mapping(doc.get("runtime", {}) or {}, "runtime")
    for k in rt:
        if k not in RUNTIME_KEYS:
            raise ConfigError(f"runtime.{k}: unknown runtime option")
    if rt.get("barrier_mode", "boundary") not in ("boundary", "allreduce"):
        raise ConfigError("runtime.barrier_mode: expected 'boundary' or 'allreduce'")
    sc.runtime = dict(rt)
    jobs = doc.get("jobs")
    if not isinstance(jobs, list) or not jobs:
        raise ConfigError("jobs: expected a non-empty list")
    seen = set()
    spec_fields = {f.name for f in fields(JobSpec)} - {"rank_map"}
    for i, j in enumerate(jobs):
        p = f"jobs[{i}]"
        _mapping(j, p)
        for k in j:
            if k not in JOB_KEYS:
                raise ConfigError(f"{p}.{k}: unknown key")
        sd = dict(_mapping(j.get("spec"), f"{p}.spec"))
        for k in sd:
            if k not in spec_fields:
                raise ConfigError(f"{p}.spec.{k}: unknown key")
        for k in ("dp", "tp", "pp", "zero_shard", "layers", "params_per_layer", "minibatches", "microbatches"):
            if k in sd:
                _num(sd[k], f"{p}.spec.{k}", 1, integer=True)
        tier = j.get("tier", sd.get("tier", "Standard"))
        if tier not in TIERS:
            raise ConfigError(f"{p}.tier: expected one of {list(TIERS)}")
        sd["tier"] = tier
        sd.setdefault("seed", sc.seed + i)
        try:
            spec = JobSpec(**sd).validate()
        except (SpecError, TypeError) as e:
            raise ConfigError(f"{p}.spec: {e}") from None
        entry = JobEntry(spec, tier)
        entry.arrival = _num(j.get("arrival", 0), f"{p}.arrival", 0)
        entry.minibatch_seconds = _num(j.get("minibatch_seconds", 30), f"{p}.minibatch_seconds", 1e-9)
        entry.locality = bool(j.get("locality", False))
        if j.get("checkpoint_interval") is not None:
            entry.checkpoint_interval = _num(j["checkpoint_interval"], f"{p}.checkpoint_interval", 1e-9)
        if j.get("pin") is not None:
            if not isinstance(j["pin"], list):
                raise ConfigError(f"{p}.pin: expected a list of GPU ids")
            entry.pin = [_num(g, f"{p}.pin[{k}]", 0, integer=True) for k, g in enumerate(j["pin"])]
        if j.get("slicing") is not None:
            entry.slicing = _num(j["slicing"], f"{p}.slicing", 1, integer=True)
            if (spec.dp // spec.zero_shard) % entry.slicing:
                raise ConfigError(f"{p}.slicing: must divide dp/zero_shard = {spec.dp // spec.zero_shard}")
        entry.id = str(j.get("id", spec.name))
        if entry.id in seen:
            raise ConfigError(f"{p}.id: duplicate job id {entry.id!r}")
        seen.add(entry.id)
        sc.jobs.append(entry)
    events = doc.get("events", []) or []
    if not isinstance(events, list):
        raise ConfigError("events: expected a list")
    for i, ev in enumerate(events):
        p = f"events[{i}]"
        _mapping(ev, p)
        if ev.get("kind") not in EVENT_KINDS:
            raise ConfigError(f"{p}.kind: expected one of {sorted(EVENT_KINDS)}")
        _num(ev.get("at"), f"{p}.at", 0)
        if ev["kind"] in ("barrier", "preempt", "resume", "resize") and ev.get("job") not in seen:
            raise ConfigError(f"{p}.job: unknown job {ev.get('job')!r}")
        if ev["kind"] == "resize":
            _num(ev.get("slicing"), f"{p}.slicing", 1, integer=True)
        if ev["kind"] == "fail_node":
            d = ev.get("domain")
            if not (isinstance(d, list) and len(d) == 3):
                raise ConfigError(f"{p}.domain: expected [region, cluster, node]")
        if ev["kind"] == "add_node":
            for k in ("region", "cluster", "node"):
                if k not in ev:
                    raise ConfigError(f"{p}.{k}: required")
            _num(ev.get("gpus"), f"{p}.gpus", 1, integer=True)
    sc.events = list(events)
    if doc.get("horizon_seconds") is not None:
        sc.horizon = _num(doc["horizon_seconds"], "horizon_seconds", 0)
    return sc


def load_scenario(source: str) -> Scenario:
    name, text = _read(source)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"<root>: YAML parse error: {e}") from None
    return parse_scenario(doc, name)


def cost_model(overrides: dict, environ=None) -> CostModel:
    environ = os.environ if environ is None else environ
    kw = dict(overrides)
    for f in fields(CostModel):
        key = ENV_PREFIX + f.name.upper()
        if key in environ:
            try:
                kw[f.name] = float(environ[key])
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {environ[key]!r}") from None
    try:
        return CostModel(**{k: float(v) for k, v in kw.items()})
    except ValueError as e:
        raise ConfigError(f"cost: {e}") from None


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def build(sc: Scenario, seed: int | None = None, environ=None) -> Scheduler:
    if seed is not None and seed != sc.seed:
        # a new seed reseeds every job that did not pin its own
        for i, j in enumerate(sc.jobs):
            if j.spec.seed == sc.seed + i:
                j.spec = JobSpec(**{**j.spec.to_dict(), "seed": seed + i})
        sc.seed = seed
    cost = cost_model(sc.cost, environ)
    cfg = RuntimeConfig(**sc.runtime)
    try:
        fleet = Fleet.from_config(sc.fleet)
    except SimError as e:
        raise ConfigError(f"fleet: {e}") from None
    s = Scheduler(fleet, cost, config=cfg, seed=sc.seed)
    for j in sc.jobs:
        for g in j.pin or []:
            if g not in fleet.gpus:
                raise ConfigError(f"jobs.{j.id}.pin: GPU {g} does not exist")
        try:
            s.submit(j.spec, arrival=round(j.arrival * NS), tier=j.tier, minibatch_ns=round(j.minibatch_seconds * NS),
                     locality=j.locality, jid=j.id, pin=j.pin, slicing=j.slicing,
                     ckpt_interval=None if j.checkpoint_interval is None else round(j.checkpoint_interval * NS))
        except SpecError as e:
            raise ConfigError(f"jobs.{j.id}: {e}") from None
    for ev in sc.events:
        at = round(ev["at"] * NS)
        k = ev["kind"]
        if k == "fail_node":
            s.fail_node(at, tuple(ev["domain"]))
        elif k == "add_node":
            s.add_capacity(at, ev["region"], ev["cluster"], ev["node"], ev["gpus"])
        else:
            s.command(at, k, ev["job"], ev.get("slicing"))
    return s


def execute(sc: Scenario, seed: int | None = None, environ=None) -> Scheduler:
    s = build(sc, seed, environ)
    s.trace.emit("scenario", None, None, 0, name=sc.name, seed=sc.seed, jobs=[j.id for j in sc.jobs])
    s.run(until=None if sc.horizon is None else round(sc.horizon * NS))
    return s


def summarize(s: Scheduler) -> dict:
    out = s.summary()
    out["checkpoints"] = [{"job": r["job"], "t": r["t"], **{k: r["payload"][k] for k in
                           ("ckpt_kind", "S_G", "S_Cr", "S_Cr_incremental")}} for r in s.trace.of_kind("checkpoint")]
    out["switches"] = {r["job"]: {k: v for k, v in r["payload"].items()} for r in s.trace.of_kind("job_summary")}
    out["recomputed_steps"] = sum(len(j.recomputed) for j in s.jobs.values())
    return out


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    s = execute(sc, args.seed)
    if args.trace:
        Path(args.trace).write_text(s.trace.dumps())
    print(json.dumps(summarize(s), indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def first_divergence(got: dict, want: dict) -> str | None:
    """Describe the first P/O word where ``got`` differs from ``want``."""
    for r in sorted(want):
        for name in sorted(want[r]):
            if name[0] not in "PO":
                continue
            a, b = got.get(r, {}).get(name), want[r][name]
            if a is None:
                return f"rank {r} buffer {name}: missing"
            if a.shape != b.shape:
                return f"rank {r} buffer {name}: shape {a.shape} != {b.shape}"
            diff = np.nonzero(a != b)[0]
            if diff.size:
                i = int(diff[0])
                return f"rank {r} buffer {name} word {i} (byte offset {8 * i}): {int(a[i]):#x} != {int(b[i]):#x}"
    return None


def verify(sc: Scenario, environ=None) -> tuple[bool, list[str]]:
    s = execute(sc, environ=environ)
    lines, ok = [], True

    def check(name, passed, detail=""):
        nonlocal ok
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} {name}" + (f": {detail}" if detail else ""))

    audit = s.audit()
    for jid in sorted(s.jobs):
        j = s.jobs[jid]
        if j.state != "done":
            check(f"{jid} completion", False, f"ended in state {j.state}")
            continue
        words = j.world * j.spec.layers * j.spec.params_per_layer * 2
        if words > ORACLE_WORD_LIMIT:
            lines.append(f"SKIP {jid} equivalence: oracle too large ({words} words)")
        else:
            want = oracle_run(j.spec, timing=False).state
            div = first_divergence(j.final_state, want)
            check(f"{jid} final P/O bit-equal to oracle", div is None, div or "")
        a = audit[jid]
        check(f"{jid} step ledger", not a["repeated"] and not a["missing"],
              f"repeated {a['repeated'][:3]} missing {a['missing'][:3]}" if a["repeated"] or a["missing"] else
              (f"{a['recomputed']} rank-steps replayed after failure" if a["recomputed"] else ""))
        if j.validation_failures:
            lines.append(f"NOTE {jid}: squash validation failed {j.validation_failures}x; ran on the fallback path")
    cuts = [m for m in s.manifests
            if any(len(set(v.values())) > 1 for v in m.collectives.values())]
    check("barrier safety (uniform collective counters at every checkpoint)", not cuts,
          f"{len(cuts)} inconsistent manifests" if cuts else f"{len(s.manifests)} checkpoints")
    check("placement legality", not s.illegal, s.illegal[0][1] if s.illegal else "")
    return ok, lines


def cmd_verify(args) -> int:
    sc = load_scenario(args.scenario)
    ok, lines = verify(sc)
    for ln in lines:
        print(ln)
    print("verify:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def read_trace(path: str) -> tuple[list[dict], list[str]]:
    """Records of a trace file plus warnings (truncation, bad lines)."""
    text = Path(path).read_text()
    warnings: list[str] = []
    lines = text.splitlines()
    if not lines:
        return [], warnings
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError:
        raise ConfigError(f"{path}: line 1: not a trace header") from None
    if head.get("trace_version") != TRACE_VERSION:
        raise ConfigError(f"{path}: unsupported trace version {head.get('trace_version')!r}")
    recs = []
    for i, ln in enumerate(lines[1:], start=2):
        try:
            recs.append(json.loads(ln))
        except json.JSONDecodeError:
            warnings.append(f"line {i}: truncated or malformed record; report is partial")
            break
    if text and not text.endswith("\n"):
        if not warnings:
            warnings.append("trace does not end with a newline; it may be truncated")
    return recs, warnings


def _table(title: str, header: list[str], rows: list[list]) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
    out = [title, fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in cells[1:]]
    return "\n".join(out)


def render_report(recs: list[dict]) -> str:
    mib = lambda b: f"{b / 2**20:.3f}"
    ms = lambda ns: f"{ns / 1e6:.3f}"
    sizes = [[r["job"], r["payload"]["ckpt_kind"], r["payload"].get("steps", ""), mib(r["payload"]["S_G"]),
              mib(r["payload"]["S_Cr"]), mib(r["payload"]["S_Cr_incremental"])]
             for r in recs if r["kind"] == "checkpoint"]
    lat = []
    for r in recs:
        if r["kind"] == "checkpoint" and "latency" in r["payload"]:
            L = r["payload"]["latency"]
            lat.append([r["job"]] + [ms(L[k]) for k in ("barrier", "dump", "upload", "download", "restore", "total")])
    ov = []
    for r in recs:
        if r["kind"] == "job_summary":
            p = r["payload"]
            o = p.get("overhead")
            ov.append([r["job"], p.get("slicing", ""), p.get("switches", 0), p.get("po_swap_out_bytes", 0),
                       "" if o is None else f"{100 * o:.2f}%", p.get("decision", "")])
    parts = [
        _table("Checkpoint sizes (MiB)", ["job", "kind", "step", "S_G", "S_Cr", "S_Cr_incr"], sizes),
        _table("Migration latency (ms)", ["job", "barrier", "dump", "upload", "download", "restore", "total"], lat),
        _table("Time-slicing overhead", ["job", "N", "switches", "P/O swap-out B", "overhead", "decision"], ov),
    ]
    return "\n\n".join(parts) + "\n"


def cmd_report(args) -> int:
    recs, warnings = read_trace(args.trace)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    sys.stdout.write(render_report(recs))
    return EXIT_OK


# ---------------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="elasticsim", description="Elastic GPU fleet simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="run a scenario and print a summary")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trace", default=None, help="write the JSONL trace here")
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("verify", help="run a scenario and check it against the oracle")
    p.add_argument("scenario")
    p.set_defaults(fn=cmd_verify)
    p = sub.add_parser("report", help="render tables from a trace")
    p.add_argument("trace")
    p.set_defaults(fn=cmd_report)
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
