"""Comparison trainers: PINN from scratch, fine-tuned transfer and first-order MAML."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .netcore import DenseNet, adam_step, init_dense
from .tasks import TaskConfig
from .training import PinnContext, fit

BASELINE_KINDS = ("scratch", "transfer", "maml")


@dataclass
class TrainedNet:
    net: DenseNet
    losses: list
    mses: list
    diverged: bool

    @property
    def final_mse(self) -> float:
        return self.mses[-1]


def _finetune(net: DenseNet, task, budget, ctx, lr, colloc_seed) -> TrainedNet:
    if budget < 0:
        raise ConfigurationError("budget must be non-negative")
    start = net.copy()
    sig = start.signature()
    res = fit(
        ctx.objective(sig, task, colloc_seed),
        start.vector(),
        budget,
        ctx.optimizer(start.n_params, lr),
        evaluate=ctx.evaluator(sig, task),
        divergence=ctx.divergence,
    )
    return TrainedNet(start.with_vector(res.theta), res.losses, res.mses, res.diverged)


def train_scratch(
    task: TaskConfig,
    arch,
    budget: int,
    seed: int,
    ctx: PinnContext,
    lr: float | None = None,
    colloc_seed: int = 0,
) -> TrainedNet:
    """Random Xavier init, then ``budget`` Adam epochs on the task loss."""
    return _finetune(init_dense(arch, seed), task, budget, ctx, lr, colloc_seed)


def train_transfer(
    pretrained: DenseNet,
    task: TaskConfig,
    budget: int,
    ctx: PinnContext,
    lr: float | None = None,
    colloc_seed: int = 0,
) -> TrainedNet:
    """Fine-tune a copy of the whole pretrained net."""
    return _finetune(pretrained, task, budget, ctx, lr, colloc_seed)


@dataclass
class MamlResult:
    net: DenseNet
    outer_losses: list  # post-adaptation loss per meta-iteration
    task_ids: list
    diverged: bool


def maml_train(
    tasks,
    arch,
    meta_iters: int,
    inner_steps: int,
    seed: int,
    ctx: PinnContext,
    inner_lr: float | None = None,
    outer_lr: float | None = None,
    colloc_seed: int = 0,
    init: DenseNet | None = None,
) -> MamlResult:
    """First-order MAML: per meta-iteration, adapt a copy with plain gradient
    steps on one sampled task and apply the post-adaptation gradient to the
    meta-parameters through Adam."""
    tasks = list(tasks)
    if not tasks:
        raise ConfigurationError("MAML needs at least one task")
    if meta_iters < 0 or inner_steps < 0:
        raise ConfigurationError("meta iterations and inner steps must be non-negative")
    inner_lr = ctx.lr if inner_lr is None else inner_lr
    net = init.copy() if init is not None else init_dense(arch, seed)
    sig = net.signature()
    theta = net.vector()
    state = ctx.optimizer(net.n_params, outer_lr)
    rng = np.random.default_rng([seed, 7])
    order: list = []
    losses, ids = [], []
    diverged = False
    for _ in range(meta_iters):
        if not order:
            order = list(rng.permutation(len(tasks)))
        task = tasks[order.pop(0)]
        objective = ctx.objective(sig, task, colloc_seed)
        phi = theta.copy()
        for _ in range(inner_steps):
            _, g = objective(phi)
            phi = phi - inner_lr * np.asarray(g)
        val, g = objective(phi)
        val = float(val)
        losses.append(val)
        ids.append(task.id)
        if not np.isfinite(val) or val > ctx.divergence:
            diverged = True
            break
        theta, state = adam_step(state, theta, np.asarray(g))
    return MamlResult(net.with_vector(theta), losses, ids, diverged)


def maml_adapt(
    meta_init: DenseNet,
    task: TaskConfig,
    budget: int,
    ctx: PinnContext,
    lr: float | None = None,
    colloc_seed: int = 0,
) -> TrainedNet:
    return _finetune(meta_init, task, budget, ctx, lr, colloc_seed)
