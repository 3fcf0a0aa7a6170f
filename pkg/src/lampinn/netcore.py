"""Dense feed-forward networks with exact input derivatives.

Input derivatives are obtained by pushing a second-order Taylor jet
(value, gradient, selected second derivatives) through every layer.  The
same propagation code runs on numpy (public evaluation API) and on
``jax.numpy`` (inside compiled losses, where reverse mode supplies the
parameter gradient).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    InputShapeError,
    NumericError,
    NumericOverflowError,
)

ACTIVATIONS = ("tanh", "sin", "sigmoid")


def activation_jet(xp, name: str, z):
    """Return f(z), f'(z), f''(z) for a supported activation."""
    if name == "tanh":
        t = xp.tanh(z)
        s = 1.0 - t * t
        return t, s, -2.0 * t * s
    if name == "sin":
        s = xp.sin(z)
        return s, xp.cos(z), -s
    if name == "sigmoid":
        g = 1.0 / (1.0 + xp.exp(-z))
        s = g * (1.0 - g)
        return g, s, s * (1.0 - 2.0 * g)
    raise ConfigurationError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def second_order_pairs(dim: int, hessian: str) -> tuple[tuple[int, int], ...]:
    if hessian == "diag":
        return tuple((i, i) for i in range(dim))
    if hessian == "full":
        return tuple((i, j) for i in range(dim) for j in range(i, dim))
    if hessian == "none":
        return ()
    raise ConfigurationError(f"hessian mode must be 'diag', 'full' or 'none', got {hessian!r}")


class Jet(NamedTuple):
    """Batched jet of a scalar field.

    value: (n,); d_input: (n, d); d2: (P, n) for the index pairs in ``pairs``.
    """

    value: object
    d_input: object
    d2: object
    pairs: tuple

    @property
    def d2_diag(self):
        """(n, d) array of pure second derivatives."""
        d = self.d_input.shape[-1]
        idx = [self.pairs.index((i, i)) for i in range(d)]
        return _stack_last([self.d2[k] for k in idx])


def _stack_last(arrays):
    if isinstance(arrays[0], np.ndarray):
        return np.stack(arrays, axis=-1)
    return jnp.stack(arrays, axis=-1)


def seed_jet(xp, X, pairs):
    """Jet of the identity map at points X (n, d)."""
    n, d = X.shape
    eye = xp.eye(d, dtype=X.dtype)
    dh = xp.broadcast_to(eye[:, None, :], (d, n, d))
    d2 = xp.zeros((len(pairs), n, d), dtype=X.dtype)
    return X, dh, d2


def propagate(xp, layers, activation, activate_output, h, dh=None, d2=None, pairs=()):
    """Push (h, dh, d2) through affine+activation layers.

    h: (n, w); dh: (d, n, w); d2: (P, n, w).  Pass ``dh=None`` for a plain
    forward pass.
    """
    last = len(layers) - 1
    for k, (W, b) in enumerate(layers):
        z = h @ W.T + b
        dz = None if dh is None else dh @ W.T
        d2z = None if d2 is None else d2 @ W.T
        if k < last or activate_output:
            f0, f1, f2 = activation_jet(xp, activation, z)
            h = f0
            if dh is not None:
                if d2 is not None and len(pairs):
                    cross = xp.stack([dz[i] * dz[j] for i, j in pairs])
                    d2 = f2 * cross + f1 * d2z
                else:
                    d2 = d2z
                dh = f1 * dz
        else:
            h, dh, d2 = z, dz, d2z
    return h, dh, d2


@dataclass(frozen=True)
class ParamBlock:
    owner: str
    layer: int
    kind: str  # "W", "b" or "lambda"
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))


@dataclass(frozen=True)
class ParamLayout:
    """Ordered description of the blocks packed into a flat vector."""

    blocks: tuple

    @property
    def size(self) -> int:
        if not self.blocks:
            return 0
        last = self.blocks[-1]
        return last.offset + last.size

    def owners(self) -> list[str]:
        seen = []
        for blk in self.blocks:
            if blk.owner not in seen:
                seen.append(blk.owner)
        return seen

    def owner_blocks(self, owner: str):
        return [blk for blk in self.blocks if blk.owner == owner]

    def n_layers(self, owner: str) -> int:
        return sum(1 for blk in self.blocks if blk.owner == owner and blk.kind == "W")

    def layers(self, vec, owner: str):
        """Slice ``vec`` into [(W, b), ...] for one owner; works for numpy and jax."""
        ws, bs = {}, {}
        for blk in self.owner_blocks(owner):
            piece = vec[blk.offset : blk.offset + blk.size].reshape(blk.shape)
            (ws if blk.kind == "W" else bs)[blk.layer] = piece
        return [(ws[i], bs[i]) for i in sorted(ws)]

    def segment(self, vec, owner: str):
        blocks = self.owner_blocks(owner)
        start = blocks[0].offset
        stop = blocks[-1].offset + blocks[-1].size
        return vec[start:stop]

    def mask(self, trainable: Callable[[ParamBlock], bool]) -> np.ndarray:
        out = np.zeros(self.size, dtype=bool)
        for blk in self.blocks:
            if trainable(blk):
                out[blk.offset : blk.offset + blk.size] = True
        return out


class LayoutBuilder:
    def __init__(self):
        self._blocks = []
        self._offset = 0

    def add(self, owner: str, layer: int, kind: str, shape) -> None:
        blk = ParamBlock(owner, layer, kind, tuple(int(s) for s in shape), self._offset)
        self._blocks.append(blk)
        self._offset += blk.size

    def add_net(self, owner: str, net: "DenseNet") -> None:
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            self.add(owner, i, "W", W.shape)
            self.add(owner, i, "b", b.shape)

    def build(self) -> ParamLayout:
        return ParamLayout(tuple(self._blocks))


@dataclass
class DenseNet:
    """Fully connected network; weights[l] has shape (sizes[l+1], sizes[l])."""

    layer_sizes: tuple
    weights: list
    biases: list
    activation: str = "tanh"
    activate_output: bool = False

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ConfigurationError(f"invalid layer sizes {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        n = len(self.layer_sizes) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ConfigurationError("weights/biases do not match layer_sizes")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[i + 1], self.layer_sizes[i]):
                raise ConfigurationError(f"layer {i}: weight shape {W.shape} mismatches sizes")
            if b.shape != (self.layer_sizes[i + 1],):
                raise ConfigurationError(f"layer {i}: bias shape {b.shape} mismatches sizes")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NumericError(f"layer {i} holds non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def layers(self):
        return list(zip(self.weights, self.biases))

    def copy(self) -> "DenseNet":
        return replace(
            self,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def slice_layers(self, start: int, stop: int, activate_output: bool) -> "DenseNet":
        return DenseNet(
            self.layer_sizes[start : stop + 1],
            [W.copy() for W in self.weights[start:stop]],
            [b.copy() for b in self.biases[start:stop]],
            self.activation,
            activate_output,
        )

    # flat-vector view -------------------------------------------------
    @property
    def layout(self) -> ParamLayout:
        lb = LayoutBuilder()
        lb.add_net("net", self)
        return lb.build()

    def signature(self):
        return ("dense", self.layout, self.activation, self.activate_output)

    def vector(self) -> np.ndarray:
        return flatten(self).values

    def with_vector(self, vec) -> "DenseNet":
        return unflatten(ParamVector(np.asarray(vec, dtype=np.float64), self.layout), self)

    # evaluation -------------------------------------------------------
    def predict(self, X) -> np.ndarray:
        """Batched forward pass; returns (n, out_dim)."""
        X = _check_points(X, self.in_dim)
        h, _, _ = propagate(np, self.layers(), self.activation, self.activate_output, X)
        return h

    def jet(self, X, hessian: str = "diag", out_index: int = 0) -> Jet:
        X = _check_points(X, self.in_dim)
        return dense_jet(
            np, self.layers(), self.activation, self.activate_output, X, hessian, out_index
        )


def dense_jet(xp, layers, activation, activate_output, X, hessian="diag", out_index=0) -> Jet:
    pairs = second_order_pairs(X.shape[1], hessian)
    h, dh, d2 = seed_jet(xp, X, pairs)
    h, dh, d2 = propagate(xp, layers, activation, activate_output, h, dh, d2, pairs)
    value = h[:, out_index]
    grad = xp.moveaxis(dh[:, :, out_index], 0, 1)
    return Jet(value, grad, d2[:, :, out_index], pairs)


def _check_points(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise InputShapeError(f"expected points with {dim} coordinates, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InputShapeError("input contains non-finite entries")
    return X


def init_dense(
    layer_sizes: Sequence[int],
    seed: int,
    activation: str = "tanh",
    activate_output: bool = False,
) -> DenseNet:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(tuple(layer_sizes), weights, biases, activation, activate_output)


def zeros_dense(layer_sizes: Sequence[int], activation="tanh", activate_output=False) -> DenseNet:
    weights = [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])]
    biases = [np.zeros(o) for o in layer_sizes[1:]]
    return DenseNet(tuple(layer_sizes), weights, biases, activation, activate_output)


def forward(net: DenseNet, x) -> np.ndarray:
    """Output vector of ``net`` at a single input vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputShapeError(f"forward expects a single input vector, got shape {x.shape}")
    return net.predict(x)[0]


@dataclass
class EvalJet:
    value: float
    d_input: np.ndarray
    d2_input: np.ndarray

    @property
    def d2_diag(self) -> np.ndarray:
        return np.diag(self.d2_input).copy()


def forward_jet(net: DenseNet, x, out_index: int = 0) -> EvalJet:
    """Value, input gradient and input Hessian of one network output at ``x``."""
    if not 0 <= out_index < net.out_dim:
        raise ContractError(f"out_index {out_index} outside output dimension {net.out_dim}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputShapeError(f"forward_jet expects a single input vector, got {x.shape}")
    with np.errstate(all="ignore"):
        jet = net.jet(x, hessian="full", out_index=out_index)
    d = net.in_dim
    hess = np.empty((d, d))
    for k, (i, j) in enumerate(jet.pairs):
        hess[i, j] = hess[j, i] = jet.d2[k, 0]
    out = EvalJet(float(jet.value[0]), np.array(jet.d_input[0]), hess)
    if not (np.isfinite(out.value) and np.all(np.isfinite(out.d_input)) and np.all(np.isfinite(hess))):
        raise NumericOverflowError("non-finite value in network jet", point=x)
    return out


# parameter vectors ---------------------------------------------------------


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ContractError(
                f"vector length {self.values.shape} does not match layout size {self.layout.size}"
            )


def flatten(net: DenseNet) -> ParamVector:
    parts = []
    for W, b in zip(net.weights, net.biases):
        parts.append(W.ravel())
        parts.append(b.ravel())
    return ParamVector(np.concatenate(parts), net.layout)


def unflatten(pv: ParamVector, like: DenseNet) -> DenseNet:
    layers = pv.layout.layers(np.asarray(pv.values), "net")
    return DenseNet(
        like.layer_sizes,
        [np.array(W) for W, _ in layers],
        [np.array(b) for _, b in layers],
        like.activation,
        like.activate_output,
    )


@dataclass(frozen=True)
class FreezeMask:
    """Per-layer flags; a True flag freezes that layer's weights and bias."""

    flags: tuple

    def trainable(self, layout: ParamLayout, owner: str = "net") -> np.ndarray:
        n = layout.n_layers(owner)
        if len(self.flags) != n:
            raise ConfigurationError(f"freeze mask has {len(self.flags)} flags for {n} layers")
        return layout.mask(
            lambda blk: blk.owner != owner or not self.flags[blk.layer]
        )

    @classmethod
    def none(cls, n_layers: int) -> "FreezeMask":
        return cls(tuple([False] * n_layers))


def param_gradient(loss_fn, theta, mask=None):
    """Exact gradient of a jax-traceable scalar loss of the flat parameters.

    Entries where ``mask`` is False (frozen) are exactly zero.  Returns the
    same kind as ``theta`` (ParamVector or array).
    """
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)
    loss, grad = jax.value_and_grad(loss_fn)(jnp.asarray(values))
    loss = float(loss)
    grad = np.array(grad, dtype=np.float64)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite loss or gradient (loss={loss})", point=values.copy())
    if mask is not None:
        grad = np.where(np.asarray(mask, dtype=bool), grad, 0.0)
    if isinstance(theta, ParamVector):
        return ParamVector(grad, theta.layout)
    return grad


# optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    factor: float = 0.5
    patience: int = 50
    lr_min: float = 1e-5
    rel_tol: float = 1e-4
    best_loss: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.m.shape != self.v.shape:
            raise ContractError("moment accumulators differ in length")


def adam_init(n_params: int, lr: float = 2e-3, **kwargs) -> OptimizerState:
    return OptimizerState(np.zeros(n_params), np.zeros(n_params), lr, **kwargs)


def adam_step(state: OptimizerState, theta, g, mask=None):
    """One bias-corrected Adam update.  Returns (new_theta, new_state).

    Entries outside ``mask`` keep their parameter value and moments exactly.
    """
    is_pv = isinstance(theta, ParamVector)
    x = theta.values if is_pv else np.asarray(theta, dtype=np.float64)
    g = g.values if isinstance(g, ParamVector) else np.asarray(g, dtype=np.float64)
    if x.shape != g.shape or x.shape != state.m.shape:
        raise ContractError(f"shape mismatch: theta {x.shape}, grad {g.shape}, state {state.m.shape}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = x - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if mask is not None:
        keep = ~np.asarray(mask, dtype=bool)
        new = np.where(keep, x, new)
        m = np.where(keep, state.m, m)
        v = np.where(keep, state.v, v)
    new_state = replace(state, m=m, v=v, step=t)
    return (ParamVector(new, theta.layout) if is_pv else new), new_state


def plateau_schedule(state: OptimizerState, loss: float) -> OptimizerState:
    """Reduce-on-plateau: cut lr by ``factor`` after ``patience`` calls without
    a relative improvement of ``rel_tol``."""
    if loss < state.best_loss * (1.0 - state.rel_tol) or state.best_loss == math.inf:
        return replace(state, best_loss=float(loss), bad_epochs=0)
    bad = state.bad_epochs + 1
    if bad >= state.patience:
        return replace(state, lr=max(state.lr * state.factor, state.lr_min), bad_epochs=0)
    return replace(state, bad_epochs=bad)


def layer_group_magnitudes(net: DenseNet) -> np.ndarray:
    """Mean absolute weight (biases excluded) per layer."""
    return np.array([float(np.mean(np.abs(W))) for W in net.weights])
