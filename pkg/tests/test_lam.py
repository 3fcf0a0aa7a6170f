import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lampinn.baselines import train_scratch, train_transfer
from lampinn.errors import ConfigurationError, ContractError
from lampinn.lam import (
    ClusterSampler,
    ModularNet,
    TrainingPlan,
    lambda_convention,
    layer_freeze_experiment,
    modular_forward,
    phase1_train,
    phase2_train,
    split_pretrained,
    summed_cluster_loss,
    train_lam,
    transfer_adapt,
)
from lampinn.netcore import FreezeMask, forward, init_dense, param_gradient, zeros_dense
from lampinn.pde import HELMHOLTZ, get_family, make_problem, pinn_loss, sample_collocation
from lampinn.tasks import full_factorial
from lampinn.training import PinnContext, _loss_fn

from oracles import fd_gradient, rel_err

H = get_family(HELMHOLTZ)
ARCH = [2, 10, 10, 10, 10, 1]


@pytest.fixture(scope="module")
def ctx():
    return PinnContext(HELMHOLTZ, domain_scale=0.25, m_interior=144, n_data=48, eval_points=12)


@pytest.fixture(scope="module")
def pretrained():
    return init_dense(ARCH, seed=0)


@pytest.fixture(scope="module")
def clusters():
    tasks = full_factorial(H.factors((2, 2, 1)), HELMHOLTZ)
    return [tasks[:2], tasks[2:3], tasks[3:]]


def _blocks(net, owner):
    return net.vector()[net.mask([owner])]


# structure -------------------------------------------------------------------


def test_split_shapes():
    net = split_pretrained(init_dense([2, 10, 10, 10, 1], 0), 1, 2)
    assert net.in0.layer_sizes == (2, 10) and net.meta.layer_sizes == (10, 10, 10, 1)
    assert all(b.layer_sizes == (2, 10) for b in net.in_cluster)


def test_split_helmholtz_architecture_sizes(pretrained):
    net = split_pretrained(pretrained, 2, 3)
    assert net.in0.layer_sizes == (2, 10, 10) and net.meta.layer_sizes == (10, 10, 10, 1)
    assert net.n_params == 371 + 3 * 140 + 3


def test_split_out_of_range(pretrained):
    for depth in (0, 5):
        with pytest.raises(ConfigurationError):
            split_pretrained(pretrained, depth, 2)


def test_k0_reassembly_exact(pretrained):
    net = split_pretrained(pretrained, 2, 0)
    X = np.random.default_rng(0).uniform(-7, 7, (50, 2))
    assert np.array_equal(net.predict(X), pretrained.predict(X))


def test_split_deterministic(pretrained):
    a, b = split_pretrained(pretrained, 2, 3, seed=4), split_pretrained(pretrained, 2, 3, seed=4)
    assert np.array_equal(a.vector(), b.vector())
    assert not np.array_equal(a.vector(), split_pretrained(pretrained, 2, 3, seed=5).vector())


def test_zero_lambdas_reduce_to_base(pretrained):
    net = split_pretrained(pretrained, 2, 3).with_lambdas(np.zeros(3))
    x = np.array([0.3, -2.0])
    assert np.array_equal(modular_forward(net, x), forward(pretrained, x))


def test_zero_branches_reduce_to_base(pretrained):
    net = split_pretrained(pretrained, 2, 2)
    zero = zeros_dense(net.in0.layer_sizes, activate_output=True)
    net = ModularNet(net.in0, [zero, zero.copy()], net.meta, np.array([0.7, 0.2]), 2)
    x = np.array([1.1, 0.4])
    assert np.array_equal(modular_forward(net, x), forward(pretrained, x))


def test_single_branch_reduction(pretrained):
    base = split_pretrained(pretrained, 2, 1, seed=2)
    zero0 = zeros_dense(base.in0.layer_sizes, activate_output=True)
    net = ModularNet(zero0, base.in_cluster, base.meta, np.array([1.0]), 2)
    x = np.array([0.5, 0.5])
    h = forward(base.in_cluster[0], x)
    assert np.allclose(modular_forward(net, x), forward(base.meta, h), rtol=0, atol=1e-15)


def test_shape_contracts(pretrained):
    net = split_pretrained(pretrained, 2, 2)
    with pytest.raises(ContractError):
        modular_forward(net, np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        ModularNet(net.in0, [init_dense([2, 5, 10], 0, activate_output=True)], net.meta, np.ones(1), 2)


def test_modular_jet_matches_fd(pretrained):
    net = split_pretrained(pretrained, 2, 2, seed=1).with_lambdas([0.3, 0.8])
    x = np.array([0.4, -0.9])
    f = lambda z: modular_forward(net, z)[0]
    jet = net.jet(x[None, :])
    assert rel_err(jet.d_input[0], fd_gradient(f, x)) < 1e-5


@given(st.integers(0, 1000))
@settings(max_examples=10)
def test_lambda_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    task = H.task(rng.uniform([1, 2, 3], [13, 12, 11]))
    problem = make_problem(task, 0.25)
    colloc = sample_collocation(problem, 16, 8, seed=seed)
    net = split_pretrained(init_dense([2, 6, 6, 1], seed), 1, 3, seed=seed).with_lambdas(rng.uniform(0, 1, 3))
    loss = _loss_fn(net.signature(), HELMHOLTZ)
    args = [jnp.asarray(a) for a in (task.values, colloc.interior, colloc.data_x, colloc.data_y)]
    g = param_gradient(lambda t: loss(t, *args)[0], net.vector())[net.lambda_slice()]
    fd = fd_gradient(lambda lam: pinn_loss(net.with_lambdas(lam), problem, colloc).total, net.lambdas)
    assert rel_err(g, fd) < 1e-5


# training --------------------------------------------------------------------


def test_phase1_freezes_in0_and_lambdas(pretrained, clusters, ctx):
    net = split_pretrained(pretrained, 2, 3)
    plan = TrainingPlan(n1=5, n2=3, seed=0)
    out, log = phase1_train(net, clusters, plan, ctx)
    assert np.array_equal(_blocks(out, "in0"), _blocks(net, "in0"))
    assert np.array_equal(out.lambdas, net.lambdas)
    assert not np.array_equal(_blocks(out, "meta"), _blocks(net, "meta"))
    assert len(log.entries) == 3


def test_phase1_restrictive_scope(pretrained, clusters, ctx):
    net = split_pretrained(pretrained, 2, 3)
    sampler = ClusterSampler(clusters, 0, 1)
    out, _ = phase1_train(net, clusters, TrainingPlan(n1=4, phase1_scope="restrictive"), ctx, sampler=sampler)
    # every branch trained in its own session, in0 never
    assert np.array_equal(_blocks(out, "in0"), _blocks(net, "in0"))
    for j in (1, 2, 3):
        assert not np.array_equal(_blocks(out, f"in{j}"), _blocks(net, f"in{j}"))


def test_phase1_zero_budget(pretrained, clusters, ctx):
    net = split_pretrained(pretrained, 2, 3)
    out, _ = phase1_train(net, clusters, TrainingPlan(n1=0), ctx)
    assert np.array_equal(out.vector(), net.vector())


def test_phase2_freezes_inputs(pretrained, clusters, ctx):
    net, _ = phase1_train(split_pretrained(pretrained, 2, 3), clusters, TrainingPlan(n1=3), ctx)
    out, _ = phase2_train(net, clusters, TrainingPlan(n2=5), ctx)
    for owner in ("in0", "in1", "in2", "in3", "lambda"):
        assert np.array_equal(_blocks(out, owner), _blocks(net, owner))
    assert not np.array_equal(_blocks(out, "meta"), _blocks(net, "meta"))


def test_phase2_zero_budget(pretrained, clusters, ctx):
    net = split_pretrained(pretrained, 2, 3)
    out, _ = phase2_train(net, clusters, TrainingPlan(n2=0), ctx)
    assert np.array_equal(out.vector(), net.vector())


def test_phase2_summed_gradient_linear(pretrained, clusters, ctx):
    net = split_pretrained(pretrained, 2, 3, seed=3)
    sig, sl = net.signature(), net.lambda_slice()
    tasks = [c[0] for c in clusters]
    conv = [lambda_convention(3, j) for j in range(3)]
    theta = net.vector()
    _, g = summed_cluster_loss(ctx, sig, theta, tasks, conv, sl)
    fn = _loss_fn(sig, HELMHOLTZ)

    def joint(t):
        total = 0.0
        for task, lam in zip(tasks, conv):
            c = ctx.collocation(task, 0)
            tt = t.at[sl].set(jnp.asarray(lam))
            total = total + fn(tt, jnp.asarray(task.values), jnp.asarray(c.interior), jnp.asarray(c.data_x), jnp.asarray(c.data_y))[0]
        return total

    # the oracle overwrites the routing weights, so only the network entries are comparable
    keep = np.ones(theta.size, bool)
    keep[sl] = False
    diff = param_gradient(joint, theta)[keep] - g[keep]
    assert np.max(np.abs(diff)) < 1e-10 * max(1.0, np.max(np.abs(g)))


def test_train_lam_deterministic(pretrained, clusters, ctx):
    plan = TrainingPlan(n1=2, n2=2, epochs=2)
    a, _ = train_lam(split_pretrained(pretrained, 2, 3), clusters, plan, ctx)
    b, _ = train_lam(split_pretrained(pretrained, 2, 3), clusters, plan, ctx)
    assert np.array_equal(a.vector(), b.vector())
    assert np.array_equal(_blocks(a, "in0"), _blocks(split_pretrained(pretrained, 2, 3), "in0"))


def test_sampler_round_robin(clusters):
    s = ClusterSampler(clusters, seed=0, stream=1)
    first = {s.next(0).id, s.next(0).id}
    assert first == {t.id for t in clusters[0]}


def test_plan_validation():
    with pytest.raises(ConfigurationError):
        TrainingPlan(lambda_main=0.1, lambda_other=0.5)
    with pytest.raises(ConfigurationError):
        TrainingPlan(phase1_scope="partial")


# transfer --------------------------------------------------------------------


@pytest.mark.parametrize("rule", ["adam", "sgd"])
def test_transfer_lambda_clipped(pretrained, ctx, rule):
    net = split_pretrained(pretrained, 2, 3, seed=1)
    sess = transfer_adapt(net, H.task((12.0, 2.5, 3.5)), 40, ctx, lr=5e-2, lambda_update=rule)
    assert np.array_equal(sess.lambdas[0], np.full(3, 0.5))
    assert len(sess.lambdas) == 41
    for lam in sess.lambdas:
        assert np.all((lam >= 0) & (lam <= 1))
    assert any(not np.array_equal(lam, sess.lambdas[0]) for lam in sess.lambdas)


def test_transfer_fixed_lambda(pretrained, ctx):
    net = split_pretrained(pretrained, 2, 3, seed=1)
    sess = transfer_adapt(net, H.task((4.0, 9.0, 5.0)), 15, ctx, learn_lambda=False)
    assert all(np.array_equal(lam, np.full(3, 0.5)) for lam in sess.lambdas)


def test_transfer_deterministic(pretrained, ctx):
    net = split_pretrained(pretrained, 2, 2, seed=1)
    a = transfer_adapt(net, H.task((4.0, 9.0, 5.0)), 10, ctx)
    b = transfer_adapt(net, H.task((4.0, 9.0, 5.0)), 10, ctx)
    assert a.losses == b.losses and a.mses == b.mses


# layer freezing --------------------------------------------------------------------


def test_freeze_all_constant(pretrained, ctx):
    mses = layer_freeze_experiment(pretrained, FreezeMask((True,) * 5), H.task((3.0, 5.0, 5.0)), 10, ctx)
    assert np.all(mses == mses[0])


def test_freeze_none_equals_plain_transfer(pretrained, ctx):
    task = H.task((3.0, 5.0, 5.0))
    mses = layer_freeze_experiment(pretrained, FreezeMask.none(5), task, 10, ctx)
    assert np.array_equal(mses, train_transfer(pretrained, task, 10, ctx).mses)


def test_freeze_rejects_modular(pretrained, ctx):
    with pytest.raises(ContractError):
        layer_freeze_experiment(split_pretrained(pretrained, 2, 1), FreezeMask.none(5), H.reference_task(), 1, ctx)


def test_freezing_first_layer_does_not_help(ctx):
    target = H.task((8.0, 6.0, 8.0))
    frozen, free = [], []
    for seed in range(5):
        ref = train_scratch(H.reference_task(), ARCH, 1500, seed, ctx).net
        frozen.append(layer_freeze_experiment(ref, FreezeMask((True, False, False, False, False)), target, 400, ctx)[-1])
        free.append(layer_freeze_experiment(ref, FreezeMask.none(5), target, 400, ctx)[-1])
    assert np.median(frozen) >= np.median(free)
