"""Experiment configuration and its JSON file form.

Schema (all keys except ``pilots`` and ``workload`` optional)::

    {
      "name": "exp",
      "backend": "SIM" | "LOCAL",
      "output_dir": "runs/exp",
      "host_cores": 8,                   # LOCAL capacity override
      "pilots": [PilotDescription, ...],
      "coordinators": {"<pilot_id>": [CoordinatorConfig, ...]},
      "workload": WorkloadSpec,
      "timing": SimTiming,               # SIM only
      "metrics": {"bin_s": 60.0, "threshold": 0.95},
      "join_timeout_s": null             # LOCAL only
    }

A pilot without coordinators runs its tasks directly on the agent
scheduler (SIM only).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

from .model import Backend, CoordinatorConfig, PilotDescription, ValidationError
from .resources import Node, host_capacity
from .scheduler import SlotMap
from .workload import SpecError, WorkloadSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimTiming:
    """Simulated start-up delays, in seconds.

    Worker ``i`` of ``n`` starts ``worker_launch_first_s +
    worker_launch_spread_s * i / (n - 1)`` after its coordinator is ready.
    """
    bootstrap_s: float = 0.0
    staging_s: float = 0.0
    coordinator_startup_s: float = 0.0
    preprocess_s: float = 0.0
    worker_launch_first_s: float = 0.0
    worker_launch_spread_s: float = 0.0
    dispatch_latency_s: float = 0.0

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and v >= 0):
                raise ConfigError(f"timing.{f.name} must be a number >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimTiming":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown timing keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    pilots: List[PilotDescription]
    workload: WorkloadSpec
    coordinators: Dict[str, List[CoordinatorConfig]] = field(default_factory=dict)
    name: str = "experiment"
    backend: Backend = Backend.SIM
    output_dir: str = "runs"
    host_cores: Optional[int] = None
    timing: SimTiming = SimTiming()
    bin_s: float = 60.0
    threshold: float = 0.95
    join_timeout_s: Optional[float] = None

    def with_backend(self, backend: Backend) -> "ExperimentConfig":
        pilots = [dataclasses.replace(p, backend=backend) for p in self.pilots]
        return dataclasses.replace(self, backend=backend, pilots=pilots)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, workload=dataclasses.replace(self.workload, seed=seed))

    def coordinators_of(self, pilot_id: str) -> List[CoordinatorConfig]:
        return self.coordinators.get(pilot_id, [])

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        """Raise ConfigError unless every reference resolves and everything fits."""
        if not self.pilots:
            raise ConfigError("at least one pilot is required")
        ids = [p.pilot_id for p in self.pilots]
        if len(set(ids)) != len(ids):
            raise ConfigError("pilot ids must be unique")
        try:
            for p in self.pilots:
                p.validate()
                if p.backend is not self.backend:
                    raise ConfigError(f"pilot {p.pilot_id} backend {p.backend.value} "
                                      f"differs from experiment backend {self.backend.value}")
            self.workload.validate()
        except (ValidationError, SpecError) as e:
            raise ConfigError(str(e)) from None
        self.timing.validate()
        if not self.bin_s > 0:
            raise ConfigError("metrics.bin_s must be > 0")
        if not 0 < self.threshold <= 1:
            raise ConfigError("metrics.threshold must lie in (0, 1]")
        unknown = set(self.coordinators) - set(ids)
        if unknown:
            raise ConfigError(f"coordinators reference unknown pilots: {sorted(unknown)}")
        if self.backend is Backend.LOCAL:
            cap = self.host_cores if self.host_cores is not None else host_capacity()
            total = sum(p.cores for p in self.pilots)
            if total > cap:
                raise ConfigError(f"LOCAL pilots need {total} cores, host capacity is {cap}")
            for p in self.pilots:
                if not self.coordinators_of(p.pilot_id):
                    raise ConfigError(f"LOCAL pilot {p.pilot_id} needs at least one coordinator")
        w = self.workload
        for p in self.pilots:
            coords = self.coordinators_of(p.pilot_id)
            self._check_fit(p, coords)
            if coords:
                small = min(coords, key=lambda c: (c.cpn, c.gpn))
                if any(w.cores_per_task > c.cpn or w.gpus_per_task > c.gpn for c in coords):
                    raise ConfigError(
                        f"tasks need {w.cores_per_task} cores/{w.gpus_per_task} gpus, "
                        f"a worker of pilot {p.pilot_id} has {small.cpn}/{small.gpn}")
            elif w.cores_per_task > p.cores_per_node or w.gpus_per_task > p.gpus_per_node:
                raise ConfigError(f"tasks do not fit a node of pilot {p.pilot_id}")

    @staticmethod
    def _check_fit(p: PilotDescription, coords: List[CoordinatorConfig]) -> None:
        for c in coords:
            try:
                c.validate(p)
            except ValidationError as e:
                raise ConfigError(f"pilot {p.pilot_id}: {e}") from None
        need = sum(c.n_workers * c.cpn + c.coordinator_cores for c in coords)
        if need > p.cores:
            raise ConfigError(f"pilot {p.pilot_id}: coordinators and workers need {need} "
                              f"cores, pilot has {p.cores}")
        # exact check: replay the first-fit placement the run will perform
        s = SlotMap([Node(i, p.cores_per_node, p.gpus_per_node) for i in range(p.n_nodes)])
        for k, c in enumerate(coords):
            if c.coordinator_cores and s.try_place((f"c{k}", c.coordinator_cores, 0)) is None:
                raise ConfigError(f"pilot {p.pilot_id}: coordinator {k} does not fit")
            for i in range(c.n_workers):
                if s.try_place((f"c{k}.w{i}", c.cpn, c.gpn)) is None:
                    raise ConfigError(f"pilot {p.pilot_id}: worker {i} of coordinator {k} "
                                      f"does not fit")

    # -- file form ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "backend": self.backend.value,
            "output_dir": self.output_dir,
            "host_cores": self.host_cores,
            "pilots": [p.to_dict() for p in self.pilots],
            "coordinators": {k: [c.to_dict() for c in v] for k, v in self.coordinators.items()},
            "workload": self.workload.to_dict(),
            "timing": self.timing.to_dict(),
            "metrics": {"bin_s": self.bin_s, "threshold": self.threshold},
            "join_timeout_s": self.join_timeout_s,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {"name", "backend", "output_dir", "host_cores", "pilots", "coordinators",
                 "workload", "timing", "metrics", "join_timeout_s"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            backend = Backend(str(d.get("backend", "SIM")).upper())
            pilots = []
            for pd in d["pilots"]:
                pd = dict(pd)
                pd.setdefault("backend", backend.value)
                pilots.append(PilotDescription.from_dict(pd))
            coords = {k: [CoordinatorConfig.from_dict(c) for c in v]
                      for k, v in (d.get("coordinators") or {}).items()}
            metrics = d.get("metrics") or {}
            return cls(pilots=pilots, workload=WorkloadSpec.from_dict(d["workload"]),
                       coordinators=coords, name=d.get("name", "experiment"), backend=backend,
                       output_dir=d.get("output_dir", "runs"), host_cores=d.get("host_cores"),
                       timing=SimTiming.from_dict(d.get("timing") or {}),
                       bin_s=metrics.get("bin_s", 60.0),
                       threshold=metrics.get("threshold", 0.95),
                       join_timeout_s=d.get("join_timeout_s"))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid config: {e!r}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


def load_config(path: os.PathLike) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return ExperimentConfig.loads(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def dump_config(cfg: ExperimentConfig, path: os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(cfg.dumps())


def resolve_output_dir(cfg: ExperimentConfig, cli_out: Optional[str] = None) -> str:
    """--out wins over RAPTOR_OUT, which wins over the config file."""
    return cli_out or os.environ.get("RAPTOR_OUT") or cfg.output_dir
