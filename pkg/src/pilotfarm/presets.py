"""Ready-made experiment configurations.

``python -m pilotfarm.presets DIR`` writes each one as ``DIR/<name>.json``.
"""

from __future__ import annotations

import os
import sys

from .config import ExperimentConfig, SimTiming, dump_config
from .model import Backend, CoordinatorConfig, PilotDescription
from .workload import Constant, LogNormal, Uniform, WorkloadSpec


def desk_local(n_tasks: int = 800, seed: int = 0) -> ExperimentConfig:
    """8 virtual single-core nodes, 1 s function tasks, one worker per core."""
    p = PilotDescription("p0", 8, 1, walltime_s=3600.0, backend=Backend.LOCAL)
    return ExperimentConfig(
        pilots=[p], workload=WorkloadSpec(n_tasks, Constant(1.0), seed=seed),
        coordinators={"p0": [CoordinatorConfig(n_workers=8, cpn=1)]},
        name="desk-local", backend=Backend.LOCAL, output_dir="runs/desk-local",
        host_cores=8, bin_s=10.0, join_timeout_s=600.0)


def mixed_local(n_tasks: int = 1000, seed: int = 0) -> ExperimentConfig:
    """Half function, half executable tasks with the same constant duration."""
    cfg = desk_local(n_tasks, seed)
    return ExperimentConfig(
        pilots=cfg.pilots, coordinators=cfg.coordinators,
        workload=WorkloadSpec(n_tasks, Constant(1.0), kind_mix=0.5, seed=seed),
        name="mixed-local", backend=Backend.LOCAL, output_dir="runs/mixed-local",
        host_cores=8, bin_s=10.0, join_timeout_s=900.0)


def desk_sim(n_nodes: int = 1000, n_tasks: int = 10 ** 6, seed: int = 0) -> ExperimentConfig:
    """One pilot of 56-core nodes, long-tailed 10 s mean tasks cut at 60 s."""
    p = PilotDescription("p0", n_nodes, 56, walltime_s=86400.0)
    timing = SimTiming(bootstrap_s=30.0, staging_s=10.0, coordinator_startup_s=1.0,
                       preprocess_s=5.0, worker_launch_first_s=5.0, worker_launch_spread_s=30.0)
    return ExperimentConfig(
        pilots=[p],
        workload=WorkloadSpec(n_tasks, LogNormal.with_mean(10.0, 1.0, 60.0), seed=seed),
        coordinators={"p0": [CoordinatorConfig(n_workers=n_nodes, cpn=56)]},
        name="desk-sim", output_dir="runs/desk-sim", timing=timing, bin_s=60.0)


def exp3(n_tasks: int = 10 ** 6, seed: int = 0) -> ExperimentConfig:
    """8 coordinators x 1041 workers on 8336 nodes of 56 cores.

    Each coordinator takes one node for itself.  Function durations are
    long-tailed and cut at 60 s, executables are uniform on [0, 20] s.
    """
    p = PilotDescription("p0", 8336, 56, walltime_s=86400.0)
    timing = SimTiming(bootstrap_s=78.0, staging_s=78.0, coordinator_startup_s=1.0,
                       preprocess_s=42.0, worker_launch_first_s=10.0,
                       worker_launch_spread_s=330.0)
    coords = [CoordinatorConfig(n_workers=1041, cpn=56, coordinator_cores=56)] * 8
    return ExperimentConfig(
        pilots=[p],
        workload=WorkloadSpec(n_tasks, LogNormal.with_mean(10.0, 1.0, 60.0), kind_mix=0.5,
                              seed=seed, exec_duration_model=Uniform(0.0, 20.0)),
        coordinators={"p0": coords}, name="exp3", output_dir="runs/exp3", timing=timing,
        bin_s=60.0)


def multi_pilot(n_pilots: int = 31, n_tasks: int = 310_000, seed: int = 0) -> ExperimentConfig:
    """Staggered pilots of 128 nodes each; at most 13 overlap at any time."""
    wall = 3600.0
    pilots = [PilotDescription(f"p{j:02d}", 128, 56, walltime_s=wall,
                               available_at_s=(j // 13) * (wall + 780.0) + (j % 13) * 5.0)
              for j in range(n_pilots)]
    return ExperimentConfig(
        pilots=pilots,
        workload=WorkloadSpec(n_tasks, LogNormal.with_mean(10.0, 1.0, 60.0), seed=seed),
        coordinators={p.pilot_id: [CoordinatorConfig(n_workers=128, cpn=56)] for p in pilots},
        name="multi-pilot", output_dir="runs/multi-pilot",
        timing=SimTiming(bootstrap_s=30.0, preprocess_s=5.0, worker_launch_spread_s=20.0),
        bin_s=300.0)


def gpu_sim(n_nodes: int = 1000, n_tasks: int = 57_000, seed: int = 0) -> ExperimentConfig:
    """GPU-only tasks, one worker per node with 6 GPUs."""
    p = PilotDescription("p0", n_nodes, 42, gpus_per_node=6, walltime_s=86400.0)
    return ExperimentConfig(
        pilots=[p],
        workload=WorkloadSpec(n_tasks, LogNormal.with_mean(60.0, 0.5, 600.0), seed=seed,
                              gpus_per_task=1),
        coordinators={"p0": [CoordinatorConfig(n_workers=n_nodes, cpn=42, gpn=6)]},
        name="gpu-sim", output_dir="runs/gpu-sim",
        timing=SimTiming(bootstrap_s=30.0, preprocess_s=5.0, worker_launch_spread_s=30.0),
        bin_s=60.0)


PRESETS = {"desk-local": desk_local, "mixed-local": mixed_local, "desk-sim": desk_sim,
           "exp3": exp3, "multi-pilot": multi_pilot, "gpu-sim": gpu_sim}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = argv[0] if argv else "configs"
    os.makedirs(out, exist_ok=True)
    for name, make in PRESETS.items():
        dump_config(make(), os.path.join(out, f"{name}.json"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
