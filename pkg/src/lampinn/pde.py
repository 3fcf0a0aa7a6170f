"""PDE families, collocation sampling and the composite PINN loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ContractError, InvalidTaskError, NumericError
from .netcore import Jet
from .tasks import FactorSpec, TaskConfig, evenly_spaced

HELMHOLTZ = "helmholtz2d"
BURGERS = "burgers1d"


def _mu(task):
    return task.values if isinstance(task, TaskConfig) else task


# closed forms and residual operators -----------------------------------------


def helmholtz_exact(task, x, y):
    """A sin(x/B) sin(y/C)."""
    A, B, C = _mu(task)[:3]
    if isinstance(task, TaskConfig) and (B == 0 or C == 0):
        raise InvalidTaskError(f"Helmholtz task needs nonzero B and C, got B={B}, C={C}")
    return A * np.sin(np.divide(x, B)) * np.sin(np.divide(y, C))


def helmholtz_exact_jet(task, X) -> Jet:
    """Closed-form value, gradient and pure second derivatives of the exact field."""
    A, B, C = _mu(task)[:3]
    if B == 0 or C == 0:
        raise InvalidTaskError("Helmholtz task needs nonzero B and C")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sx, cx = np.sin(X[:, 0] / B), np.cos(X[:, 0] / B)
    sy, cy = np.sin(X[:, 1] / C), np.cos(X[:, 1] / C)
    u = A * sx * sy
    grad = np.stack([A / B * cx * sy, A / C * sx * cy], axis=-1)
    d2 = np.stack([-u / B**2, -u / C**2])
    return Jet(u, grad, d2, ((0, 0), (1, 1)))


def _d2_diag(jet):
    d2 = getattr(jet, "d2_diag", None)
    if d2 is None:
        raise ContractError("residual needs pure second derivatives in every coordinate")
    return d2


def helmholtz_residual(jet, task):
    """u_xx + u_yy + u/B^2 + u/C^2."""
    _, B, C = _mu(task)[:3]
    d2 = _d2_diag(jet)
    u = jet.value
    return d2[..., 0] + d2[..., 1] + u / B**2 + u / C**2


def burgers_residual(jet, task):
    """u_t + 2 alpha u u_x - nu u_xx, coordinates ordered (x, t)."""
    alpha, nu = _mu(task)[:2]
    d2 = _d2_diag(jet)
    u, du = jet.value, jet.d_input
    return du[..., 1] + 2.0 * alpha * u * du[..., 0] - nu * d2[..., 0]


# families --------------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    name: str
    coord_names: tuple
    factor_names: tuple
    factor_ranges: tuple  # ((lo, hi), ...)
    reference_values: tuple
    base_domain: tuple  # ((lo, hi), ...) per coordinate
    residual: Callable
    scalable: bool  # domain may be shrunk by a desk-scale factor

    def factors(self, levels=(3, 3, 3)) -> list[FactorSpec]:
        return [
            evenly_spaced(name, lo, hi, n)
            for name, (lo, hi), n in zip(self.factor_names, self.factor_ranges, levels)
        ]

    def reference_task(self) -> TaskConfig:
        return TaskConfig(self.name, self.reference_values, self.factor_names)

    def task(self, values) -> TaskConfig:
        return TaskConfig(self.name, tuple(values), self.factor_names)


FAMILIES = {
    HELMHOLTZ: Family(
        HELMHOLTZ,
        ("x", "y"),
        ("A", "B", "C"),
        ((1.0, 13.0), (2.0, 12.0), (3.0, 11.0)),
        (7.0, 7.0, 7.0),
        ((-30.0, 30.0), (-30.0, 30.0)),
        helmholtz_residual,
        True,
    ),
    BURGERS: Family(
        BURGERS,
        ("x", "t"),
        ("alpha", "nu", "A"),
        ((0.1, 2.0), (0.005, 0.5), (0.5, 10.0)),
        (1.0, 0.03, 5.0),
        ((-1.0, 1.0), (0.0, 1.0)),
        burgers_residual,
        False,
    ),
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigurationError(f"unknown PDE family {name!r}; known: {sorted(FAMILIES)}") from None


@dataclass(frozen=True)
class PdeProblem:
    family: Family
    domain: tuple  # ((lo, hi), ...)
    task: TaskConfig

    @property
    def residual(self):
        return self.family.residual

    @property
    def dim(self) -> int:
        return len(self.domain)


def make_problem(task: TaskConfig, domain_scale: float = 1.0) -> PdeProblem:
    fam = get_family(task.family)
    if len(task.values) != len(fam.factor_names):
        raise InvalidTaskError(f"{fam.name} tasks carry {len(fam.factor_names)} values, got {len(task.values)}")
    if fam.name == HELMHOLTZ and (task.values[1] == 0 or task.values[2] == 0):
        raise InvalidTaskError("Helmholtz task needs nonzero B and C")
    if fam.name == BURGERS and task.values[1] <= 0:
        raise InvalidTaskError("Burgers task needs a positive viscosity")
    if domain_scale <= 0:
        raise ConfigurationError("domain scale must be positive")
    scale = domain_scale if fam.scalable else 1.0
    domain = tuple((lo * scale, hi * scale) for lo, hi in fam.base_domain)
    return PdeProblem(fam, domain, task)


def boundary_targets(problem: PdeProblem, X: np.ndarray) -> np.ndarray:
    """Analytic boundary / initial values used for the data term."""
    mu = problem.task.values
    if problem.family.name == HELMHOLTZ:
        return helmholtz_exact(mu, X[:, 0], X[:, 1])
    alpha, nu, A = mu
    on_ic = np.isclose(X[:, 1], problem.domain[1][0])
    return np.where(on_ic, -A * np.sin(np.pi * X[:, 0]), 0.0)


# collocation -----------------------------------------------------------------


@dataclass
class CollocationSet:
    interior: np.ndarray  # (M, d)
    data_x: np.ndarray  # (N, d)
    data_y: np.ndarray  # (N,)
    seed: int


def grid_shape(m: int) -> tuple[int, int]:
    nx = max(1, int(round(math.sqrt(m))))
    ny = max(1, int(round(m / nx)))
    return nx, ny


def _perimeter_points(domain, n: int) -> np.ndarray:
    (x0, x1), (y0, y1) = domain
    w, h = x1 - x0, y1 - y0
    per = 2 * (w + h)
    s = (np.arange(n) + 0.5) * per / n
    pts = np.empty((n, 2))
    for k, sk in enumerate(s):
        if sk < w:
            pts[k] = (x0 + sk, y0)
        elif sk < w + h:
            pts[k] = (x1, y0 + sk - w)
        elif sk < 2 * w + h:
            pts[k] = (x1 - (sk - w - h), y1)
        else:
            pts[k] = (x0, y1 - (sk - 2 * w - h))
    return pts


def sample_collocation(problem: PdeProblem, m_interior: int, n_data: int, seed: int) -> CollocationSet:
    """Interior residual points plus labelled boundary/initial points.

    Helmholtz: tensor grid over the box and evenly spaced perimeter points.
    Burgers: uniform random interior; data split between the initial line
    (half) and the two walls.
    """
    if m_interior < 0 or n_data < 0 or m_interior + n_data == 0:
        raise ConfigurationError("collocation needs at least one point")
    rng = np.random.default_rng(seed)
    (x0, x1), (y0, y1) = problem.domain
    if problem.family.name == HELMHOLTZ:
        if m_interior:
            nx, ny = grid_shape(m_interior)
            gx, gy = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny), indexing="ij")
            interior = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        else:
            interior = np.empty((0, 2))
        data_x = _perimeter_points(problem.domain, n_data) if n_data else np.empty((0, 2))
    else:
        interior = np.stack(
            [rng.uniform(x0, x1, m_interior), rng.uniform(y0, y1, m_interior)], axis=-1
        ) if m_interior else np.empty((0, 2))
        n_ic = n_data // 2
        n_left = (n_data - n_ic) // 2
        n_right = n_data - n_ic - n_left
        ic = np.stack([rng.uniform(x0, x1, n_ic), np.full(n_ic, y0)], axis=-1)
        left = np.stack([np.full(n_left, x0), rng.uniform(y0, y1, n_left)], axis=-1)
        right = np.stack([np.full(n_right, x1), rng.uniform(y0, y1, n_right)], axis=-1)
        data_x = np.concatenate([ic, left, right]) if n_data else np.empty((0, 2))
    data_y = boundary_targets(problem, data_x) if len(data_x) else np.empty(0)
    return CollocationSet(interior, data_x, data_y, seed)


# loss ------------------------------------------------------------------------


def loss_terms(xp, residual, mu, interior_jet, data_pred, data_y):
    """(total, data, physics) with unit weights; empty terms contribute 0."""
    if data_y.shape[0]:
        data_term = xp.mean((data_pred - data_y) ** 2)
    else:
        data_term = 0.0 * xp.sum(data_y)
    if interior_jet is not None:
        res = residual(interior_jet, mu)
        physics = xp.mean(res**2)
    else:
        res = None
        physics = 0.0 * xp.sum(data_y)
    return data_term + physics, data_term, physics, res


@dataclass
class LossTerms:
    total: float
    data: float
    physics: float


def _provider_jet(provider, X) -> Jet:
    if hasattr(provider, "jet"):
        return provider.jet(X, hessian="diag")
    return provider(X)


def _provider_values(provider, X) -> np.ndarray:
    if hasattr(provider, "predict"):
        out = provider.predict(X)
        return out[:, 0] if out.ndim == 2 else out
    return np.asarray(provider(X)).reshape(len(X))


def pinn_loss(provider, problem: PdeProblem, colloc: CollocationSet) -> LossTerms:
    """Composite loss of a model (``.jet``/``.predict``) or a jet callable.

    A bare callable must map (n, d) points to a ``Jet``.
    """
    if len(colloc.interior) == 0 and len(colloc.data_x) == 0:
        raise ContractError("collocation set is empty")
    mu = problem.task.values
    with np.errstate(all="ignore"):
        ijet = _provider_jet(provider, colloc.interior) if len(colloc.interior) else None
        if len(colloc.data_x):
            if hasattr(provider, "predict") or not callable(provider):
                pred = _provider_values(provider, colloc.data_x)
            else:
                pred = np.asarray(provider(colloc.data_x).value)
        else:
            pred = np.empty(0)
        total, data, physics, res = loss_terms(np, problem.residual, mu, ijet, pred, colloc.data_y)
    total, data, physics = float(total), float(data), float(physics)
    if not (math.isfinite(total) and math.isfinite(data) and math.isfinite(physics)):
        point = None
        if res is not None and not np.all(np.isfinite(res)):
            bad = np.where(np.isfinite(res), 0.0, 1.0)
            point = colloc.interior[int(np.argmax(bad))]
        elif len(pred):
            err = np.nan_to_num(np.abs(pred - colloc.data_y), nan=np.inf)
            point = colloc.data_x[int(np.argmax(err))]
        raise NumericError(f"non-finite PINN loss (data={data}, physics={physics})", point=point)
    return LossTerms(total, data, physics)
