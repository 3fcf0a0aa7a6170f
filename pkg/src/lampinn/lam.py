"""Modular network with routed cluster branches, two-phase training and transfer.

A ModularNet evaluates ``meta(in0(x) + sum_j lambda_j * in_j(x))``.  All input
nets end in an activated layer so that, with every branch switched off, the
composition reproduces the pretrained network it was split from exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .netcore import (
    DenseNet,
    FreezeMask,
    Jet,
    LayoutBuilder,
    ParamLayout,
    _check_points,
    init_dense,
    propagate,
    second_order_pairs,
    seed_jet,
)
from .tasks import TaskConfig
from .training import FitResult, PinnContext, fit, register_model_kind

LAMBDA = "lambda"
PHASE1_SCOPES = ("literal", "restrictive")
LAMBDA_UPDATES = ("adam", "sgd")


def _in_owner(j: int) -> str:
    return f"in{j}"


@dataclass
class ModularNet:
    in0: DenseNet
    in_cluster: list
    meta: DenseNet
    lambdas: np.ndarray
    split_depth: int

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64).reshape(-1)
        for net in self.in_cluster:
            if net.layer_sizes != self.in0.layer_sizes:
                raise ConfigurationError(
                    f"cluster input net sizes {net.layer_sizes} differ from {self.in0.layer_sizes}"
                )
        if self.meta.in_dim != self.in0.out_dim:
            raise ConfigurationError("meta input width must equal the input-net output width")
        if len(self.lambdas) != len(self.in_cluster):
            raise ConfigurationError(f"{len(self.lambdas)} routing weights for {self.K} branches")
        if self.split_depth != self.in0.n_layers:
            raise ConfigurationError("split depth disagrees with the input-net depth")
        acts = {self.in0.activation, self.meta.activation} | {n.activation for n in self.in_cluster}
        if len(acts) != 1:
            raise ConfigurationError("all sub-networks must share one activation")
        if not self.in0.activate_output or not all(n.activate_output for n in self.in_cluster):
            raise ConfigurationError("input nets must activate their output layer")

    @property
    def K(self) -> int:
        return len(self.in_cluster)

    @property
    def activation(self) -> str:
        return self.meta.activation

    @property
    def in_dim(self) -> int:
        return self.in0.in_dim

    @property
    def n_params(self) -> int:
        return self.layout.size

    def subnets(self):
        """(owner, net) pairs in flat-vector order."""
        return [(_in_owner(0), self.in0)] + [
            (_in_owner(j + 1), n) for j, n in enumerate(self.in_cluster)
        ] + [("meta", self.meta)]

    @property
    def layout(self) -> ParamLayout:
        lb = LayoutBuilder()
        for owner, net in self.subnets():
            lb.add_net(owner, net)
        if self.K:
            lb.add(LAMBDA, 0, LAMBDA, (self.K,))
        return lb.build()

    def signature(self):
        return ("modular", self.layout, self.activation, self.K, self.meta.activate_output)

    def vector(self) -> np.ndarray:
        parts = [net.vector() for _, net in self.subnets()]
        parts.append(self.lambdas)
        return np.concatenate(parts)

    def with_vector(self, vec) -> "ModularNet":
        vec = np.asarray(vec, dtype=np.float64)
        layout = self.layout
        if vec.shape != (layout.size,):
            raise ContractError(f"vector of length {vec.shape} for {layout.size} parameters")
        nets = {owner: net.with_vector(np.array(layout.segment(vec, owner))) for owner, net in self.subnets()}
        lambdas = np.array(layout.segment(vec, LAMBDA)) if self.K else np.zeros(0)
        return ModularNet(
            nets[_in_owner(0)],
            [nets[_in_owner(j + 1)] for j in range(self.K)],
            nets["meta"],
            lambdas,
            self.split_depth,
        )

    def copy(self) -> "ModularNet":
        return self.with_vector(self.vector())

    def with_lambdas(self, lambdas) -> "ModularNet":
        out = self.copy()
        lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
        if lam.shape != (self.K,):
            raise ContractError(f"expected {self.K} routing weights, got {lam.shape}")
        out.lambdas = lam.copy()
        return out

    def lambda_slice(self) -> slice:
        if not self.K:
            return slice(self.n_params, self.n_params)
        blk = self.layout.owner_blocks(LAMBDA)[0]
        return slice(blk.offset, blk.offset + blk.size)

    def mask(self, owners) -> np.ndarray:
        owners = set(owners)
        return self.layout.mask(lambda blk: blk.owner in owners)

    def predict(self, X) -> np.ndarray:
        X = _check_points(X, self.in_dim)
        h, _, _ = _modular_propagate(np, self.signature(), self.vector(), X, None)
        return h

    def jet(self, X, hessian: str = "diag", out_index: int = 0) -> Jet:
        X = _check_points(X, self.in_dim)
        pairs = second_order_pairs(X.shape[1], hessian)
        h, dh, d2 = _modular_propagate(np, self.signature(), self.vector(), X, pairs)
        return Jet(h[:, out_index], np.moveaxis(dh[:, :, out_index], 0, 1), d2[:, :, out_index], pairs)


def _modular_propagate(xp, sig, theta, X, pairs):
    """Composite forward (pairs None) or jet propagation through the routed sum."""
    _, layout, activation, K, meta_out = sig

    def branch(owner):
        layers = layout.layers(theta, owner)
        if pairs is None:
            return propagate(xp, layers, activation, True, X)
        h, dh, d2 = seed_jet(xp, X, pairs)
        return propagate(xp, layers, activation, True, h, dh, d2, pairs)

    h, dh, d2 = branch(_in_owner(0))
    if K:
        lam = layout.segment(theta, LAMBDA)
        for j in range(K):
            hj, dhj, d2j = branch(_in_owner(j + 1))
            h = h + lam[j] * hj
            if pairs is not None:
                dh = dh + lam[j] * dhj
                d2 = d2 + lam[j] * d2j
    meta = layout.layers(theta, "meta")
    if pairs is None:
        return propagate(xp, meta, activation, meta_out, h)
    return propagate(xp, meta, activation, meta_out, h, dh, d2, pairs)


def _modular_builder(sig, xp, theta, X, pairs):
    h, dh, d2 = _modular_propagate(xp, sig, theta, X, pairs)
    if pairs is None:
        return h[:, 0]
    return Jet(h[:, 0], xp.moveaxis(dh[:, :, 0], 0, 1), d2[:, :, 0], pairs)


register_model_kind("modular", _modular_builder)


def modular_forward(net: ModularNet, x) -> np.ndarray:
    """Output vector for one input point."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("modular_forward takes a single input vector")
    return net.predict(x[None, :])[0]


def lambda_convention(K: int, main: int, lambda_main: float = 1.0, lambda_other: float = 0.1) -> np.ndarray:
    lam = np.full(K, lambda_other, dtype=np.float64)
    if K:
        lam[main] = lambda_main
    return lam


def split_pretrained(
    pretrained: DenseNet,
    split_depth: int,
    K: int,
    seed: int = 0,
    lambda_main: float = 1.0,
    lambda_other: float = 0.1,
) -> ModularNet:
    """Cut a pretrained net after ``split_depth`` weight layers and add K fresh branches."""
    if not 1 <= split_depth < pretrained.n_layers:
        raise ConfigurationError(
            f"split depth must lie in [1, {pretrained.n_layers - 1}], got {split_depth}"
        )
    if K < 0:
        raise ConfigurationError("cluster count must be non-negative")
    in0 = pretrained.slice_layers(0, split_depth, activate_output=True)
    meta = pretrained.slice_layers(split_depth, pretrained.n_layers, pretrained.activate_output)
    seeds = np.random.SeedSequence([seed, K]).generate_state(max(K, 1))
    branches = [
        init_dense(in0.layer_sizes, int(seeds[j]), in0.activation, activate_output=True)
        for j in range(K)
    ]
    return ModularNet(in0, branches, meta, lambda_convention(K, 0, lambda_main, lambda_other), split_depth)


# training --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingPlan:
    n1: int = 100
    n2: int = 50
    epochs: int | None = None  # None: largest cluster size
    lambda_main: float = 1.0
    lambda_other: float = 0.1
    lr: float = 2e-3
    seed: int = 0
    colloc_seed: int = 0
    phase1_scope: str = "literal"

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 0:
            raise ConfigurationError("phase budgets must be non-negative")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigurationError("epoch count must be non-negative")
        if not 0 < self.lambda_other <= self.lambda_main <= 1:
            raise ConfigurationError("need 0 < lambda_other <= lambda_main <= 1")
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.phase1_scope not in PHASE1_SCOPES:
            raise ConfigurationError(f"phase-1 scope must be one of {PHASE1_SCOPES}")

    def n_epochs(self, clusters) -> int:
        return max(len(c) for c in clusters) if self.epochs is None else self.epochs


class ClusterSampler:
    """Round-robin over each cluster without replacement, reshuffled every pass."""

    def __init__(self, clusters, seed: int, stream: int):
        self.clusters = [list(c) for c in clusters]
        self.seed = seed
        self.stream = stream
        self._queues = [[] for _ in clusters]
        self._passes = [0] * len(clusters)

    def next(self, j: int) -> TaskConfig:
        if not self._queues[j]:
            rng = np.random.default_rng([self.seed, self.stream, j, self._passes[j]])
            self._queues[j] = [self.clusters[j][i] for i in rng.permutation(len(self.clusters[j]))]
            self._passes[j] += 1
        return self._queues[j].pop(0)


@dataclass
class PhaseLog:
    entries: list = field(default_factory=list)
    divergences: list = field(default_factory=list)

    def extend(self, other: "PhaseLog") -> None:
        self.entries.extend(other.entries)
        self.divergences.extend(other.divergences)


def _check_clusters(net: ModularNet, clusters):
    if len(clusters) != net.K:
        raise ConfigurationError(f"{len(clusters)} task clusters for {net.K} branches")
    if any(len(c) == 0 for c in clusters):
        raise ConfigurationError("every cluster needs at least one task")


def phase1_train(
    net: ModularNet,
    clusters,
    plan: TrainingPlan,
    ctx: PinnContext,
    epoch: int = 0,
    sampler: ClusterSampler | None = None,
):
    """One pass over clusters: each branch j gets ``n1`` steps on a task from cluster j.

    The conservative input net and the routing weights never change.
    """
    _check_clusters(net, clusters)
    sampler = sampler or ClusterSampler(clusters, plan.seed, 1)
    sig = net.signature()
    log = PhaseLog()
    theta = net.vector()
    lam_sl = net.lambda_slice()
    for j in range(net.K):
        task = sampler.next(j)
        theta[lam_sl] = lambda_convention(net.K, j, plan.lambda_main, plan.lambda_other)
        if plan.phase1_scope == "literal":
            owners = [_in_owner(i + 1) for i in range(net.K)] + ["meta"]
        else:
            owners = [_in_owner(j + 1), "meta"]
        res = fit(
            ctx.objective(sig, task, plan.colloc_seed),
            theta,
            plan.n1,
            ctx.optimizer(len(theta), plan.lr),
            mask=net.mask(owners),
            divergence=ctx.divergence,
        )
        log.entries.append(
            {"phase": 1, "epoch": epoch, "cluster": j, "task_id": task.id, "losses": res.losses}
        )
        if res.diverged:
            log.divergences.append({"phase": 1, "epoch": epoch, "cluster": j, "task_id": task.id})
            continue
        theta = res.theta
    theta[lam_sl] = net.lambdas
    return net.with_vector(theta), log


def phase2_train(
    net: ModularNet,
    clusters,
    plan: TrainingPlan,
    ctx: PinnContext,
    epoch: int = 0,
    sampler: ClusterSampler | None = None,
):
    """``n2`` meta-net steps on the summed per-cluster losses; all input nets frozen."""
    _check_clusters(net, clusters)
    sampler = sampler or ClusterSampler(clusters, plan.seed, 2)
    sig = net.signature()
    lam_sl = net.lambda_slice()
    conventions = [lambda_convention(net.K, j, plan.lambda_main, plan.lambda_other) for j in range(net.K)]
    log = PhaseLog()

    def summed(theta):
        tasks = [sampler.next(j) for j in range(net.K)]
        return summed_cluster_loss(ctx, sig, theta, tasks, conventions, lam_sl, plan.colloc_seed)

    res = fit(
        summed,
        net.vector(),
        plan.n2,
        ctx.optimizer(net.n_params, plan.lr),
        mask=net.mask(["meta"]),
        divergence=ctx.divergence,
    )
    log.entries.append({"phase": 2, "epoch": epoch, "losses": res.losses})
    if res.diverged:
        log.divergences.append({"phase": 2, "epoch": epoch})
        return net.copy(), log
    return net.with_vector(res.theta), log


def summed_cluster_loss(ctx, sig, theta, tasks, conventions, lam_sl, colloc_seed=0):
    """Sum over clusters of the task loss with that cluster's routing convention.

    Returns (loss, grad); the gradient is the sum of the per-cluster gradients.
    """
    total, grad = 0.0, None
    for task, lam in zip(tasks, conventions):
        th = np.array(theta, dtype=np.float64)
        th[lam_sl] = lam
        val, g = ctx.objective(sig, task, colloc_seed)(th)
        total += float(val)
        g = np.asarray(g)
        grad = g if grad is None else grad + g
    return total, grad


def train_lam(net: ModularNet, clusters, plan: TrainingPlan, ctx: PinnContext):
    """Alternate phase 1 and phase 2 for ``plan.n_epochs`` outer epochs."""
    _check_clusters(net, clusters)
    s1 = ClusterSampler(clusters, plan.seed, 1)
    s2 = ClusterSampler(clusters, plan.seed, 2)
    log = PhaseLog()
    for epoch in range(plan.n_epochs(clusters)):
        net, l1 = phase1_train(net, clusters, plan, ctx, epoch, s1)
        log.extend(l1)
        net, l2 = phase2_train(net, clusters, plan, ctx, epoch, s2)
        log.extend(l2)
    return net, log


# transfer --------------------------------------------------------------------


@dataclass
class TransferSession:
    net: ModularNet
    lambda_init: float
    budget: int
    losses: list
    mses: list
    lambdas: list  # one (K,) array per recorded epoch
    diverged: bool

    @property
    def final_mse(self) -> float:
        return self.mses[-1]


def transfer_adapt(
    net: ModularNet,
    task: TaskConfig,
    budget: int,
    ctx: PinnContext,
    lr: float | None = None,
    lambda_init: float = 0.5,
    learn_lambda: bool = True,
    lambda_update: str = "adam",
    colloc_seed: int = 0,
) -> TransferSession:
    """Adapt every parameter and the clipped routing weights to an unseen task."""
    if budget < 0:
        raise ConfigurationError("transfer budget must be non-negative")
    if lambda_update not in LAMBDA_UPDATES:
        raise ConfigurationError(f"lambda update must be one of {LAMBDA_UPDATES}")
    start = net.with_lambdas(np.full(net.K, lambda_init))
    sig = start.signature()
    lam_sl = start.lambda_slice()
    mask = np.ones(start.n_params, dtype=bool)
    if not learn_lambda or lambda_update == "sgd":
        mask[lam_sl] = False

    def post_step(theta, grad, state):
        if learn_lambda and lambda_update == "sgd":
            theta[lam_sl] = theta[lam_sl] - state.lr * grad[lam_sl]
        theta[lam_sl] = np.clip(theta[lam_sl], 0.0, 1.0)
        return theta

    res: FitResult = fit(
        ctx.objective(sig, task, colloc_seed),
        start.vector(),
        budget,
        ctx.optimizer(start.n_params, lr),
        mask=mask,
        post_step=post_step,
        evaluate=ctx.evaluator(sig, task),
        snapshot=lambda theta: np.array(theta[lam_sl]),
        divergence=ctx.divergence,
    )
    return TransferSession(
        start.with_vector(res.theta), lambda_init, budget, res.losses, res.mses, res.snapshots, res.diverged
    )


def layer_freeze_experiment(
    net: DenseNet,
    mask: FreezeMask,
    task: TaskConfig,
    budget: int,
    ctx: PinnContext,
    lr: float | None = None,
    colloc_seed: int = 0,
) -> np.ndarray:
    """Grid-MSE trajectory of a plain-net transfer with some layers frozen."""
    if not isinstance(net, DenseNet):
        raise ContractError("layer freezing applies to plain dense networks")
    sig = net.signature()
    res = fit(
        ctx.objective(sig, task, colloc_seed),
        net.vector(),
        budget,
        ctx.optimizer(net.n_params, lr),
        mask=mask.trainable(net.layout),
        evaluate=ctx.evaluator(sig, task),
        divergence=ctx.divergence,
    )
    return np.array(res.mses)
