"""Run explicit duration lists through the simulator."""

import numpy as np

from pilotfarm.config import ExperimentConfig
from pilotfarm.events import EventLog
from pilotfarm.metrics import EventDigest
from pilotfarm.model import CoordinatorConfig, PilotDescription
from pilotfarm.simulate import simulate
from pilotfarm.workload import Constant, Workload, WorkloadSpec


def single_core_config(n_tasks, m):
    p = PilotDescription("p0", m, 1, walltime_s=1e9)
    return ExperimentConfig(pilots=[p], workload=WorkloadSpec(n_tasks, Constant(0.0)),
                            coordinators={"p0": [CoordinatorConfig(n_workers=m, cpn=1)]})


def sim_makespan(durations, m):
    """Makespan of credit-pull dispatch of ``durations`` onto m single-core workers."""
    d = np.ascontiguousarray(durations, dtype=np.float64)
    cfg = single_core_config(d.size, m)
    w = Workload(cfg.workload, d, np.ones(d.size, dtype=bool))
    dig = EventDigest()
    log = EventLog()
    log.listeners.append(dig)
    out = simulate(cfg, log, w)
    assert out.clean and out.oversubscriptions == 0
    start, end, *_ = dig.arrays()
    assert start.size == d.size
    return float(end.max() - start.min())

