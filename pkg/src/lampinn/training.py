"""Compiled PINN objectives and the shared first-order training loop.

Every trainer in the package (baselines, preprocessing sessions, modular
training and transfer) goes through :func:`fit` and the objectives built
here, so all methods share one loss/collocation code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigurationError
from .netcore import (
    Jet,
    OptimizerState,
    adam_init,
    adam_step,
    plateau_schedule,
    propagate,
    seed_jet,
    second_order_pairs,
)
from .pde import (
    BURGERS,
    CollocationSet,
    PdeProblem,
    get_family,
    loss_terms,
    make_problem,
    sample_collocation,
)
from .reference import (
    ReferenceField,
    auto_burgers_nx,
    burgers_reference_solve,
    helmholtz_reference,
)
from .tasks import TaskConfig

# model kinds ---------------------------------------------------------------

_JET_BUILDERS: dict[str, Callable] = {}


def register_model_kind(kind: str, builder: Callable) -> None:
    """``builder(sig, xp, theta, X, pairs)`` returns a Jet, or plain values if pairs is None."""
    _JET_BUILDERS[kind] = builder


def model_jet(sig, xp, theta, X, pairs):
    return _JET_BUILDERS[sig[0]](sig, xp, theta, X, pairs)


def _dense_builder(sig, xp, theta, X, pairs):
    _, layout, activation, activate_output = sig
    layers = layout.layers(theta, "net")
    if pairs is None:
        h, _, _ = propagate(xp, layers, activation, activate_output, X)
        return h[:, 0]
    h, dh, d2 = seed_jet(xp, X, pairs)
    h, dh, d2 = propagate(xp, layers, activation, activate_output, h, dh, d2, pairs)
    return Jet(h[:, 0], xp.moveaxis(dh[:, :, 0], 0, 1), d2[:, :, 0], pairs)


register_model_kind("dense", _dense_builder)


def _loss_fn(sig, family_name):
    residual = get_family(family_name).residual

    def total_and_terms(theta, mu, interior, data_x, data_y):
        pairs = second_order_pairs(interior.shape[1], "diag")
        ijet = model_jet(sig, jnp, theta, interior, pairs) if interior.shape[0] else None
        pred = model_jet(sig, jnp, theta, data_x, None) if data_x.shape[0] else jnp.zeros(0)
        total, data, physics, _ = loss_terms(jnp, residual, mu, ijet, pred, data_y)
        return total, (data, physics)

    return total_and_terms


@lru_cache(maxsize=None)
def compiled_value_and_grad(sig, family_name):
    """jit(value_and_grad) of the composite loss; returns ((total, (data, physics)), grad)."""
    return jax.jit(jax.value_and_grad(_loss_fn(sig, family_name), has_aux=True))


@lru_cache(maxsize=None)
def compiled_loss(sig, family_name):
    return jax.jit(_loss_fn(sig, family_name))


@lru_cache(maxsize=None)
def compiled_predict(sig):
    return jax.jit(lambda theta, X: model_jet(sig, jnp, theta, X, None))


# training loop -------------------------------------------------------------


@dataclass
class FitResult:
    theta: np.ndarray
    losses: list
    mses: list
    snapshots: list
    diverged: bool
    state: OptimizerState | None


def fit(
    value_and_grad: Callable,
    theta: np.ndarray,
    epochs: int,
    state: OptimizerState,
    mask: np.ndarray | None = None,
    post_step: Callable | None = None,
    evaluate: Callable | None = None,
    snapshot: Callable | None = None,
    divergence: float = 1e12,
    schedule: bool = True,
) -> FitResult:
    """Full-batch Adam with reduce-on-plateau.

    Records the loss (and optional MSE / snapshot) at epochs 0..epochs, where
    epoch 0 is the untouched starting point.  ``value_and_grad(theta)``
    returns (loss, grad); ``post_step(theta, grad, state)`` may rewrite the
    parameters after each optimizer step.
    """
    theta = np.array(theta, dtype=np.float64)
    losses, mses, snaps = [], [], []
    diverged = False
    for epoch in range(epochs + 1):
        val, grad = value_and_grad(theta)
        val = float(val)
        losses.append(val)
        if evaluate is not None:
            mses.append(float(evaluate(theta)))
        if snapshot is not None:
            snaps.append(snapshot(theta))
        if not math.isfinite(val) or val > divergence:
            diverged = True
            break
        if epoch == epochs:
            break
        grad = np.asarray(grad)
        new_theta, new_state = adam_step(state, theta, grad, mask)
        if post_step is not None:
            new_theta = post_step(new_theta, grad, state)
        theta, state = new_theta, new_state
        if schedule:
            state = plateau_schedule(state, val)
    return FitResult(theta, losses, mses, snaps, diverged, state)


# context -------------------------------------------------------------------


@dataclass
class PinnContext:
    """Per-family settings shared by all trainers: collocation, references,
    optimizer constants and the evaluation grid."""

    family: str
    domain_scale: float = 1.0
    m_interior: int = 10000
    n_data: int = 400
    eval_points: int = 100
    lr: float = 2e-3
    lr_min: float = 1e-5
    patience: int = 50
    factor: float = 0.5
    divergence: float = 1e12
    burgers_max_nx: int = 4096
    _refs: dict = field(default_factory=dict, repr=False)
    _colloc: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        get_family(self.family)
        if self.m_interior < 0 or self.n_data < 0 or self.eval_points < 2:
            raise ConfigurationError("invalid collocation or evaluation sizes")

    def problem(self, task: TaskConfig) -> PdeProblem:
        return make_problem(task, self.domain_scale)

    def collocation(self, task: TaskConfig, seed: int) -> CollocationSet:
        key = (task.id, seed)
        if key not in self._colloc:
            self._colloc[key] = sample_collocation(self.problem(task), self.m_interior, self.n_data, seed)
        return self._colloc[key]

    def reference(self, task: TaskConfig) -> ReferenceField:
        if task.id not in self._refs:
            problem = self.problem(task)
            if self.family == BURGERS:
                nx = auto_burgers_nx(task, max_nx=self.burgers_max_nx)
                fine = burgers_reference_solve(task, nx=nx)
                (x0, x1), (t0, t1) = problem.domain
                ref = fine.resample(
                    (np.linspace(x0, x1, self.eval_points), np.linspace(t0, t1, self.eval_points))
                )
            else:
                ref = helmholtz_reference(problem, self.eval_points)
            self._refs[task.id] = ref
        return self._refs[task.id]

    def optimizer(self, n_params: int, lr: float | None = None) -> OptimizerState:
        return adam_init(
            n_params,
            self.lr if lr is None else lr,
            lr_min=self.lr_min,
            patience=self.patience,
            factor=self.factor,
        )

    def objective(self, sig, task: TaskConfig, seed: int) -> Callable:
        """theta -> (total loss, gradient) for one task."""
        colloc = self.collocation(task, seed)
        vg = compiled_value_and_grad(sig, self.family)
        args = _colloc_args(task, colloc)

        def value_and_grad(theta):
            (total, _), grad = vg(jnp.asarray(theta), *args)
            return total, grad

        return value_and_grad

    def loss_terms(self, sig, theta, task: TaskConfig, seed: int):
        colloc = self.collocation(task, seed)
        total, (data, physics) = compiled_loss(sig, self.family)(jnp.asarray(theta), *_colloc_args(task, colloc))
        return float(total), float(data), float(physics)

    def evaluator(self, sig, task: TaskConfig) -> Callable:
        """theta -> grid MSE against the task's reference."""
        ref = self.reference(task)
        pts = jnp.asarray(ref.points())
        target = jnp.asarray(ref.values.ravel())
        predict = compiled_predict(sig)

        def mse(theta):
            return float(jnp.mean((predict(jnp.asarray(theta), pts) - target) ** 2))

        return mse


def _colloc_args(task: TaskConfig, colloc: CollocationSet):
    return (
        jnp.asarray(task.as_array()),
        jnp.asarray(colloc.interior),
        jnp.asarray(colloc.data_x),
        jnp.asarray(colloc.data_y),
    )
