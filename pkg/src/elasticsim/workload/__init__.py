"""Synthetic training jobs and their dedicated-run oracle."""

from .oracle import OracleResult, oracle_run
from .program import JobPlan, init_program, step_program
from .spec import (
    TIERS,
    CommSpec,
    Coord,
    JobSpec,
    RankTopology,
    SpecError,
    communicators,
    max_slicing,
    slicing_groups,
    zero_layout,
)


def build_job(spec: JobSpec) -> JobPlan:
    """Per-rank programs (generated lazily per step) plus the communicator set."""
    return JobPlan.build(spec)


__all__ = [
    "TIERS",
    "CommSpec",
    "Coord",
    "JobPlan",
    "JobSpec",
    "OracleResult",
    "RankTopology",
    "SpecError",
    "build_job",
    "communicators",
    "init_program",
    "max_slicing",
    "oracle_run",
    "slicing_groups",
    "step_program",
    "zero_layout",
]
