import hashlib
import json
import os
import subprocess
import sys

import pytest

from pilotfarm.cli import main
from pilotfarm.config import ExperimentConfig, SimTiming, dump_config
from pilotfarm.harness import (EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, analyze, emit_plots,
                               integrate_concurrency, run_experiment)
from pilotfarm.model import Backend, CoordinatorConfig, PilotDescription
from pilotfarm.workload import Constant, LogNormal, WorkloadSpec

ARTIFACTS = ("events.log", "report.json", "report.txt", "durations.tsv", "concurrency.tsv",
             "rate.tsv", "durations.png", "concurrency.png", "rate.png")


def sim_cfg(n_tasks=3000, walltime=1e6):
    p = PilotDescription("p0", 4, 8, walltime_s=walltime)
    return ExperimentConfig(
        pilots=[p], workload=WorkloadSpec(n_tasks, LogNormal.with_mean(2.0, 1.0, 10.0),
                                          kind_mix=0.5, seed=1),
        coordinators={"p0": [CoordinatorConfig(n_workers=4, cpn=8)]},
        timing=SimTiming(bootstrap_s=3, preprocess_s=1, worker_launch_spread_s=2), bin_s=5.0)


def local_cfg(n_tasks=40, walltime=600.0, seconds=0.05):
    p = PilotDescription("p0", 2, 1, walltime_s=walltime, backend=Backend.LOCAL)
    return ExperimentConfig(
        pilots=[p], workload=WorkloadSpec(n_tasks, Constant(seconds), kind_mix=0.5),
        coordinators={"p0": [CoordinatorConfig(n_workers=2, cpn=1)]}, backend=Backend.LOCAL,
        host_cores=2, bin_s=1.0)


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "exp.json"
    dump_config(sim_cfg(), path)
    return str(path)


def digest_files(d):
    return {n: hashlib.sha256((d / n).read_bytes()).hexdigest() for n in ARTIFACTS}


def test_validate_config(cfg_file, capsys):
    assert main(["validate-config", "--config", cfg_file]) == EXIT_OK
    assert "ok:" in capsys.readouterr().out


def test_validate_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    assert main(["validate-config", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["validate-config", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG
    cfg = sim_cfg()
    cfg = ExperimentConfig(pilots=cfg.pilots, workload=cfg.workload,
                           coordinators={"p0": [CoordinatorConfig(n_workers=5, cpn=8)]})
    dump_config(cfg, bad)
    assert main(["validate-config", "--config", str(bad)]) == EXIT_CONFIG


def test_local_override_checks_capacity(cfg_file, monkeypatch):
    monkeypatch.setenv("PILOTFARM_HOST_CORES", "4")
    assert main(["validate-config", "--config", cfg_file, "--backend", "local"]) == EXIT_CONFIG


def test_run_writes_artifacts(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", cfg_file, "--out", str(out)]) == EXIT_OK
    assert "Utilization" in capsys.readouterr().out
    for name in ARTIFACTS:
        assert (out / name).stat().st_size > 0
    heads = {n: (out / n).read_text().splitlines()[0].split("\t")
             for n in ("durations.tsv", "concurrency.tsv", "rate.tsv")}
    assert heads == {"durations.tsv": ["lo_s", "hi_s", "all", "FUNCTION", "EXECUTABLE"],
                     "concurrency.tsv": ["t", "tasks", "cores", "gpus", "available_cores"],
                     "rate.tsv": ["t_start", "all", "FUNCTION", "EXECUTABLE"]}
    rep = json.loads((out / "report.json").read_text())
    assert rep["summary"]["Tasks"] == 3000


def test_plot_data_is_reproducible(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", cfg_file, "--out", str(out)]) == EXIT_OK
    first = digest_files(out)
    assert main(["plot-data", str(out)]) == EXIT_OK
    assert digest_files(out) == first
    assert main(["analyze", str(out)]) == EXIT_OK
    assert digest_files(out) == first


def test_same_seed_same_artifacts(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--config", cfg_file, "--out", str(a)])
    main(["run", "--config", cfg_file, "--out", str(b)])
    assert digest_files(a) == digest_files(b)
    c = tmp_path / "c"
    main(["run", "--config", cfg_file, "--out", str(c), "--seed", "2", "--no-figures"])
    assert (c / "events.log").read_bytes() != (a / "events.log").read_bytes()
    assert not (c / "rate.png").exists()


def test_concurrency_file_integrates_to_utilization(tmp_path):
    o = run_experiment(sim_cfg(), str(tmp_path), plots=False)
    emit_plots(str(tmp_path), figures=False)
    r = o.report
    busy = integrate_concurrency(str(tmp_path / "concurrency.tsv"), r.t_available, r.t_end)
    avail = integrate_concurrency(str(tmp_path / "concurrency.tsv"), r.t_available, r.t_end,
                                  "available_cores")
    assert busy / avail == pytest.approx(r.avg, rel=1e-12)


def test_analyze_rebins(tmp_path):
    run_experiment(sim_cfg(), str(tmp_path), plots=False)
    r = analyze(str(tmp_path), bin_s=1.0)
    assert r.rate_bin_s == 1.0
    assert json.loads((tmp_path / "report.json").read_text())["details"]["rate_bin_s"] == 1.0


def test_missing_artifacts(tmp_path, capsys):
    assert main(["analyze", str(tmp_path)]) == EXIT_RUNTIME
    assert main(["plot-data", str(tmp_path / "nope")]) == EXIT_RUNTIME
    assert "missing" in capsys.readouterr().err


def test_walltime_is_runtime_failure(tmp_path):
    o = run_experiment(sim_cfg(walltime=20.0), str(tmp_path))
    assert o.exit_code == EXIT_RUNTIME
    assert all(s.conserved for s in o.summaries.values())
    assert (tmp_path / "report.json").exists()


def test_raptor_out(cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("RAPTOR_OUT", str(tmp_path / "env"))
    assert main(["run", "--config", cfg_file, "--no-figures"]) == EXIT_OK
    assert (tmp_path / "env" / "report.json").exists()


def test_local_run(tmp_path, host8):
    o = run_experiment(local_cfg(), str(tmp_path / "run"))
    assert o.exit_code == EXIT_OK, o.errors
    s = o.summaries["p0.c0"]
    assert (s.done, s.failed, s.canceled) == (40, 0, 0)
    r = o.report
    assert r.tasks == 40 and set(r.kind_rates) == {"FUNCTION", "EXECUTABLE"}
    assert r.startup_breakdown["worker_launch_spread"] >= 0
    assert os.path.exists(tmp_path / "run" / "logs" / "p0.c0.w0000.events")
    for name in ARTIFACTS:
        assert (tmp_path / "run" / name).exists()


def test_local_walltime(tmp_path, host8):
    o = run_experiment(local_cfg(n_tasks=200, walltime=3.0, seconds=0.2), str(tmp_path))
    assert o.exit_code == EXIT_RUNTIME
    s = o.summaries["p0.c0"]
    assert s.conserved and s.canceled > 0


def test_console_script(cfg_file, tmp_path):
    r = subprocess.run([sys.executable, "-m", "pilotfarm.cli", "validate-config", "--config",
                        cfg_file], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("ok:")
