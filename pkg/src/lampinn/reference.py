"""Reference solutions on tensor grids and the grid MSE metric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import binfmt
from .errors import ConfigurationError, ContractError, InvalidTaskError
from .pde import BURGERS, HELMHOLTZ, PdeProblem, helmholtz_exact
from .tasks import TaskConfig

REFERENCE_MAGIC = b"LAMREF\x00\x00"
REFERENCE_VERSION = 1


@dataclass
class ReferenceField:
    """Solution values on a tensor grid; ``values[i, j]`` sits at (axes[0][i], axes[1][j])."""

    axes: tuple
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=np.float64) for a in self.axes)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != tuple(len(a) for a in self.axes):
            raise ContractError(f"values shape {self.values.shape} does not match the axes")
        for a in self.axes:
            if len(a) > 1 and not np.all(np.diff(a) > 0):
                raise ContractError("reference grid axes must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("reference values must be finite")

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interpolate(self, X) -> np.ndarray:
        """Bilinear interpolation at arbitrary in-box points."""
        interp = RegularGridInterpolator(self.axes, self.values, method="linear")
        return interp(np.atleast_2d(X))

    def resample(self, axes) -> "ReferenceField":
        axes = tuple(np.asarray(a, dtype=np.float64) for a in axes)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        vals = self.interpolate(pts).reshape(tuple(len(a) for a in axes))
        prov = dict(self.provenance, resampled_from=[len(a) for a in self.axes])
        return ReferenceField(axes, vals, prov)

    # serialization ----------------------------------------------------------
    def to_bytes(self) -> bytes:
        header = {"shape": [len(a) for a in self.axes], "provenance": self.provenance}
        payload = np.concatenate([*self.axes, self.values.ravel()])
        return binfmt.pack(REFERENCE_MAGIC, REFERENCE_VERSION, header, payload)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ReferenceField":
        header, payload = binfmt.unpack(blob, REFERENCE_MAGIC, REFERENCE_VERSION)
        shape = [int(s) for s in header["shape"]]
        need = sum(shape) + math.prod(shape)
        if payload.size != need:
            raise ContractError(f"reference payload holds {payload.size} values, expected {need}")
        axes, pos = [], 0
        for n in shape:
            axes.append(payload[pos : pos + n])
            pos += n
        return cls(tuple(axes), payload[pos:].reshape(shape), header.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ReferenceField":
        return cls.from_bytes(Path(path).read_bytes())


def helmholtz_reference(problem: PdeProblem, n: int = 100) -> ReferenceField:
    (x0, x1), (y0, y1) = problem.domain
    xs, ys = np.linspace(x0, x1, n), np.linspace(y0, y1, n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vals = helmholtz_exact(problem.task, gx, gy)
    return ReferenceField((xs, ys), vals, {"kind": "analytic", "task": list(problem.task.values)})


def burgers_stability_bound(nu: float, alpha: float, amplitude: float, dx: float) -> float:
    """Largest stable step: min(0.4 dx^2 / nu, 0.4 dx / (2 alpha max|u|))."""
    bound = 0.4 * dx * dx / nu
    adv = 2.0 * abs(alpha) * abs(amplitude)
    if adv > 0:
        bound = min(bound, 0.4 * dx / adv)
    return bound


def burgers_reference_solve(
    task: TaskConfig,
    nx: int = 256,
    nt: int | None = None,
    t_final: float = 1.0,
    n_snapshots: int = 100,
) -> ReferenceField:
    """Method-of-lines solution of u_t + alpha (u^2)_x = nu u_xx on [-1, 1].

    Second-order central differences in x, classical RK4 in t, homogeneous
    Dirichlet walls and u(x, 0) = -A sin(pi x).  ``nx`` counts intervals;
    ``nt=None`` picks the smallest step count that meets the stability
    bound and is a multiple of ``n_snapshots``.
    """
    alpha, nu, amp = task.values
    if nu <= 0:
        raise InvalidTaskError(f"viscosity must be positive, got {nu}")
    if nx < 64:
        raise ConfigurationError(f"nx must be at least 64, got {nx}")
    dx = 2.0 / nx
    bound = burgers_stability_bound(nu, alpha, amp, dx)
    if nt is None:
        nt = math.ceil(t_final / bound / n_snapshots) * n_snapshots
    dt = t_final / nt
    if dt > bound * (1 + 1e-12):
        raise ConfigurationError(
            f"time step {dt:.3e} violates the stability bound "
            f"dt <= min(0.4 dx^2/nu, 0.4 dx/(2 alpha max|u|)) = {bound:.3e}"
        )
    if nt % n_snapshots:
        raise ConfigurationError(f"nt={nt} must be a multiple of n_snapshots={n_snapshots}")
    x = np.linspace(-1.0, 1.0, nx + 1)
    u = -amp * np.sin(np.pi * x)
    u[0] = u[-1] = 0.0
    c_adv = alpha / (2.0 * dx)
    c_dif = nu / (dx * dx)

    def rhs(v):
        out = np.zeros_like(v)
        f = v * v
        out[1:-1] = -c_adv * (f[2:] - f[:-2]) + c_dif * (v[2:] - 2.0 * v[1:-1] + v[:-2])
        return out

    stride = nt // n_snapshots
    snaps = [u.copy()]
    for step in range(1, nt + 1):
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * dt * k1)
        k3 = rhs(u + 0.5 * dt * k2)
        k4 = rhs(u + dt * k3)
        u = u + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if step % stride == 0:
            snaps.append(u.copy())
    ts = np.linspace(0.0, t_final, n_snapshots + 1)
    prov = {
        "kind": "finite-difference",
        "scheme": "central-differences + RK4",
        "nx": nx,
        "nt": nt,
        "dt": dt,
        "task": list(task.values),
    }
    # snapshot k was taken after k*stride steps; place the IC exactly
    vals = np.stack(snaps, axis=1)
    vals[:, 0] = -amp * np.sin(np.pi * x)
    return ReferenceField((x, ts), vals, prov)


def auto_burgers_nx(task: TaskConfig, min_nx: int = 256, max_nx: int = 4096) -> int:
    """Grid size keeping the cell Peclet number 2 alpha A dx / nu near 2."""
    alpha, nu, amp = task.values
    need = 2.0 * abs(alpha) * abs(amp) / nu
    nx = min_nx
    while nx < need and nx < max_nx:
        nx *= 2
    return nx


def mse_on_grid(provider, reference: ReferenceField) -> float:
    """Mean squared difference between a model's prediction and the reference over all grid nodes."""
    if reference.values.size == 0:
        raise ContractError("reference field is empty")
    pts = reference.points()
    if hasattr(provider, "predict"):
        pred = provider.predict(pts)
        pred = pred[:, 0] if pred.ndim == 2 else pred
    else:
        pred = np.asarray(provider(pts)).reshape(-1)
    return float(np.mean((pred - reference.values.ravel()) ** 2))
