"""Task configurations and design-of-experiments task sets."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class FactorSpec:
    name: str
    min: float
    max: float
    levels: tuple

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "min", float(self.min))
        object.__setattr__(self, "max", float(self.max))
        if self.min > self.max:
            raise ConfigurationError(f"factor {self.name}: min {self.min} > max {self.max}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigurationError(f"factor {self.name}: levels must be strictly increasing")
        if levels and (levels[0] < self.min or levels[-1] > self.max):
            raise ConfigurationError(f"factor {self.name}: levels outside [{self.min}, {self.max}]")

    @property
    def span(self) -> float:
        return self.max - self.min


def evenly_spaced(name: str, lo: float, hi: float, n_levels: int) -> FactorSpec:
    if n_levels < 1:
        raise ConfigurationError("a factor needs at least one level")
    if n_levels == 1:
        levels = ((lo + hi) / 2.0,)
    else:
        levels = tuple(np.linspace(lo, hi, n_levels).tolist())
    return FactorSpec(name, lo, hi, levels)


def task_id(family: str, values: Sequence[float]) -> str:
    payload = json.dumps([family, [repr(float(v)) for v in values]])
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class TaskConfig:
    """One PDE instance: the configuration vector of its family."""

    family: str
    values: tuple
    names: tuple = ()
    id: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "names", tuple(self.names))
        if self.names and len(self.names) != len(self.values):
            raise ConfigurationError("task names and values differ in length")
        object.__setattr__(self, "id", task_id(self.family, self.values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.values[self.names.index(key)]
        return self.values[key]

    def to_record(self) -> dict:
        return {"family": self.family, "names": list(self.names), "values": list(self.values), "id": self.id}

    @classmethod
    def from_record(cls, rec: dict) -> "TaskConfig":
        task = cls(rec["family"], tuple(rec["values"]), tuple(rec.get("names", ())))
        if "id" in rec and rec["id"] != task.id:
            raise ConfigurationError(f"task id {rec['id']} does not match its values ({task.id})")
        return task


def full_factorial(factors: Sequence[FactorSpec], family: str = "") -> list[TaskConfig]:
    """Cartesian product of factor levels, first factor varying slowest."""
    if not factors:
        raise ConfigurationError("full factorial design needs at least one factor")
    for f in factors:
        if not f.levels:
            raise ConfigurationError(f"factor {f.name} has no levels")
    names = tuple(f.name for f in factors)
    return [TaskConfig(family, combo, names) for combo in itertools.product(*(f.levels for f in factors))]


def ood_extend(factors: Sequence[FactorSpec], scale: float) -> list[FactorSpec]:
    """Stretch every factor's range to ``scale`` percent of its span, anchored at min."""
    if scale < 100:
        raise ConfigurationError(f"OOD scale must be >= 100 percent, got {scale}")
    out = []
    for f in factors:
        new_max = f.min + f.span * scale / 100.0
        levels = f.levels
        if new_max > f.max and (not levels or new_max > levels[-1]):
            levels = levels + (new_max,)
        out.append(FactorSpec(f.name, f.min, max(new_max, f.max), levels))
    return out


def sample_unseen(
    factors: Sequence[FactorSpec],
    n: int,
    seed: int,
    exclude: Iterable[TaskConfig] = (),
    family: str = "",
) -> list[TaskConfig]:
    """Uniform draws over the factor box, skipping exact matches with ``exclude``."""
    if n < 1:
        raise ConfigurationError("need at least one unseen task")
    rng = np.random.default_rng(seed)
    names = tuple(f.name for f in factors)
    lo = np.array([f.min for f in factors])
    hi = np.array([f.max for f in factors])
    banned = {tuple(t.values) for t in exclude}
    out, seen = [], set()
    while len(out) < n:
        vals = tuple(float(v) for v in rng.uniform(lo, hi))
        if vals in banned or vals in seen:
            continue
        seen.add(vals)
        out.append(TaskConfig(family, vals, names))
    return out


def sample_ood(factors: Sequence[FactorSpec], scale: float, n: int, seed: int, family: str = "") -> list[TaskConfig]:
    """Tasks drawn from the band between the original upper bound and the
    extended one, in every coordinate at once."""
    if scale <= 100:
        raise ConfigurationError("OOD sampling needs a scale above 100 percent")
    extended = ood_extend(factors, scale)
    rng = np.random.default_rng(seed)
    names = tuple(f.name for f in factors)
    lo = np.array([f.max for f in factors])
    hi = np.array([f.max for f in extended])
    return [TaskConfig(family, tuple(rng.uniform(lo, hi).tolist()), names) for _ in range(n)]


def random_design(factors: Sequence[FactorSpec], n: int, seed: int, family: str = "") -> list[TaskConfig]:
    """The 'random N tasks' alternative to a factorial design."""
    return sample_unseen(factors, n, seed, family=family)


def save_tasks(tasks: Sequence[TaskConfig], path) -> None:
    """One JSON record per line: family, factor names, values, id."""
    path = Path(path)
    with path.open("w") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_record()) + "\n")


def load_tasks(path) -> list[TaskConfig]:
    with Path(path).open() as fh:
        return [TaskConfig.from_record(json.loads(line)) for line in fh if line.strip()]
