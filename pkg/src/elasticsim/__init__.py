"""Discrete-event simulator of transparent preemption, migration and
elastic time-slicing for distributed training jobs on a GPU fleet."""

from .simcore import CostModel, EventLoop, SimError, Trace
from .workload import JobSpec, build_job, oracle_run
from .runtime import JobRuntime, RuntimeConfig

__version__ = "0.1.0"

__all__ = ["CostModel", "EventLoop", "JobRuntime", "JobSpec", "RuntimeConfig", "SimError", "Trace",
           "build_job", "oracle_run"]
