"""Synthetic workloads: task counts, kind mix and duration distributions.

A :class:`Workload` is columnar (one float per task plus a kind bit) so a
million-task simulation never builds a million description objects; it still
behaves as a sequence of :class:`TaskDescription` for the local backend.
"""

from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .model import TaskDescription, TaskKind

SLEEPER = os.path.join(os.path.dirname(os.path.abspath(__file__)), "sleeper.py")
UID_WIDTH = 7


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Constant:
    c: float

    def validate(self):
        if not (math.isfinite(self.c) and self.c >= 0):
            raise SpecError(f"constant duration must be finite and >= 0, got {self.c}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.full(n, float(self.c))

    @property
    def cutoff_s(self) -> Optional[float]:
        return None

    def to_dict(self) -> dict:
        return {"type": "constant", "c": self.c}


@dataclass(frozen=True)
class Uniform:
    a: float
    b: float

    def validate(self):
        if not (0 <= self.a <= self.b and math.isfinite(self.b)):
            raise SpecError(f"uniform bounds need 0 <= a <= b, got ({self.a}, {self.b})")

    def sample(self, rng, n):
        return rng.uniform(self.a, self.b, n)

    @property
    def cutoff_s(self):
        return None

    def to_dict(self):
        return {"type": "uniform", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class LogNormal:
    """exp(N(mu, sigma^2)) seconds; ``cutoff_s`` becomes the task timeout."""
    mu: float
    sigma: float
    cutoff_s: Optional[float] = None

    def validate(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma) and self.sigma >= 0):
            raise SpecError("lognormal needs finite mu and sigma >= 0")
        if self.cutoff_s is not None and not self.cutoff_s > 0:
            raise SpecError(f"cutoff_s must be > 0, got {self.cutoff_s}")

    def sample(self, rng, n):
        return rng.lognormal(self.mu, self.sigma, n)

    @property
    def mean(self) -> float:
        return math.exp(self.mu + self.sigma ** 2 / 2)

    @classmethod
    def with_mean(cls, mean: float, sigma: float, cutoff_s: Optional[float] = None) -> "LogNormal":
        return cls(math.log(mean) - sigma ** 2 / 2, sigma, cutoff_s)

    def to_dict(self):
        d = {"type": "lognormal", "mu": self.mu, "sigma": self.sigma}
        if self.cutoff_s is not None:
            d["cutoff_s"] = self.cutoff_s
        return d


DurationModel = Union[Constant, Uniform, LogNormal]


def duration_model(d: Mapping) -> DurationModel:
    try:
        kind = d["type"]
        if kind == "constant":
            m = Constant(d["c"])
        elif kind == "uniform":
            m = Uniform(d["a"], d["b"])
        elif kind == "lognormal":
            m = LogNormal(d["mu"], d["sigma"], d.get("cutoff_s"))
        else:
            raise SpecError(f"unknown duration model {kind!r}")
    except (KeyError, TypeError) as e:
        raise SpecError(f"bad duration model {dict(d)!r}: {e}") from None
    m.validate()
    return m


@dataclass(frozen=True)
class WorkloadSpec:
    n_tasks: int
    duration_model: DurationModel
    kind_mix: float = 1.0
    seed: int = 0
    cores_per_task: int = 1
    gpus_per_task: int = 0
    # executable tasks draw from this model when set, else from duration_model
    exec_duration_model: Optional[DurationModel] = None

    def validate(self) -> None:
        if not isinstance(self.n_tasks, int) or self.n_tasks < 0:
            raise SpecError("n_tasks must be an integer >= 0")
        if not 0.0 <= self.kind_mix <= 1.0:
            raise SpecError("kind_mix must lie in [0, 1]")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise SpecError("seed must be a 64-bit unsigned integer")
        if not isinstance(self.cores_per_task, int) or self.cores_per_task < 1:
            raise SpecError("cores_per_task must be an integer >= 1")
        if not isinstance(self.gpus_per_task, int) or self.gpus_per_task < 0:
            raise SpecError("gpus_per_task must be an integer >= 0")
        self.duration_model.validate()
        if self.exec_duration_model is not None:
            self.exec_duration_model.validate()

    def to_dict(self) -> dict:
        d = {"n_tasks": self.n_tasks, "kind_mix": self.kind_mix, "seed": self.seed,
             "duration_model": self.duration_model.to_dict(),
             "cores_per_task": self.cores_per_task, "gpus_per_task": self.gpus_per_task}
        if self.exec_duration_model is not None:
            d["exec_duration_model"] = self.exec_duration_model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorkloadSpec":
        try:
            em = d.get("exec_duration_model")
            w = cls(d["n_tasks"], duration_model(d["duration_model"]),
                    d.get("kind_mix", 1.0), d.get("seed", 0), d.get("cores_per_task", 1),
                    d.get("gpus_per_task", 0), duration_model(em) if em else None)
        except KeyError as e:
            raise SpecError(f"workload is missing {e}") from None
        w.validate()
        return w


def function_mask(n: int, mix: float) -> np.ndarray:
    """Task i is a function iff floor((i+1)*mix) > floor(i*mix).

    Spreads the kinds evenly through the sequence, so any prefix holds the
    requested fraction to within one task.
    """
    i = np.arange(n + 1, dtype=np.float64)
    f = np.floor(i * mix)
    return f[1:] > f[:-1]


class Workload(Sequence):
    def __init__(self, spec: WorkloadSpec, durations: np.ndarray, is_function: np.ndarray,
                 uid_prefix: str = "t"):
        self.spec = spec
        self.durations = durations
        self.is_function = is_function
        self.uid_prefix = uid_prefix
        fm = spec.duration_model
        em = spec.exec_duration_model or fm
        self.timeouts = (fm.cutoff_s, em.cutoff_s)

    def __len__(self) -> int:
        return len(self.durations)

    def uid(self, i: int) -> str:
        return f"{self.uid_prefix}{i:0{UID_WIDTH}d}"

    def kind(self, i: int) -> TaskKind:
        return TaskKind.FUNCTION if self.is_function[i] else TaskKind.EXECUTABLE

    def timeout(self, i: int) -> Optional[float]:
        return self.timeouts[0] if self.is_function[i] else self.timeouts[1]

    def describe(self, i: int) -> TaskDescription:
        d = float(self.durations[i])
        s = self.spec
        kw = dict(cores=s.cores_per_task, gpus=s.gpus_per_task, timeout_s=self.timeout(i),
                  tags={"duration": repr(d)})
        if self.is_function[i]:
            return TaskDescription.function(self.uid(i), "sleep", {"seconds": d}, **kw)
        return TaskDescription.executable(
            self.uid(i), [sys.executable, "-S", "-E", SLEEPER, repr(d)], **kw)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self.describe(j) for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self.describe(i)

    def effective_durations(self) -> np.ndarray:
        """Durations clamped at each task's timeout, as a worker would run them."""
        out = self.durations.copy()
        for mask, cut in ((self.is_function, self.timeouts[0]),
                          (~self.is_function, self.timeouts[1])):
            if cut is not None:
                np.minimum(out, cut, out=out, where=mask)
        return out


def generate_workload(w: WorkloadSpec, uid_prefix: str = "t") -> Workload:
    """Deterministic in ``w.seed``."""
    w.validate()
    rng = np.random.default_rng(w.seed)
    n = w.n_tasks
    durations = w.duration_model.sample(rng, n)
    is_function = function_mask(n, w.kind_mix)
    if w.exec_duration_model is not None:
        ex = w.exec_duration_model.sample(rng, n)
        durations = np.where(is_function, durations, ex)
    return Workload(w, np.ascontiguousarray(durations, dtype=np.float64), is_function,
                    uid_prefix)


def max_mean_ratio(x: np.ndarray) -> float:
    return float(x.max() / x.mean())


def calibrate_lognormal_sigma(target_ratio: float, n: int, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                              lo: float = 0.05, hi: float = 4.0, iters: int = 60) -> float:
    """Sigma whose median sampled max/mean over ``seeds`` hits ``target_ratio``.

    The ratio does not depend on mu, so samples are drawn once as standard
    normals and rescaled for each bisection step.
    """
    zs = [np.random.default_rng(s).standard_normal(n) for s in seeds]

    def ratio(sigma):
        return float(np.median([max_mean_ratio(np.exp(sigma * z)) for z in zs]))

    if not ratio(lo) <= target_ratio <= ratio(hi):
        raise SpecError(f"ratio {target_ratio} not reachable for sigma in [{lo}, {hi}]")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ratio(mid) < target_ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
