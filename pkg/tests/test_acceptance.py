"""End-to-end acceptance gate.

Each test records one ``PASS``/``FAIL`` line, printed live with ``pytest -s``
and collected in the terminal summary, and then asserts.  Criteria 7-9
train real networks at desk scale and take tens of minutes on one core.
"""

import time

import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lampinn import pipeline as pl
from lampinn.affinity import (
    LossMetrics,
    adjusted_rand_index,
    build_embedding,
    embedding_matrix,
    hungarian_disagreement,
    kmeans,
    silhouette,
    wcss,
)
from lampinn.baselines import train_scratch
from lampinn.config import preset
from lampinn.lam import TrainingPlan, phase1_train, phase2_train, split_pretrained, transfer_adapt
from lampinn.netcore import ACTIVATIONS, forward, forward_jet, init_dense, param_gradient
from lampinn.pde import HELMHOLTZ, get_family, helmholtz_exact_jet, helmholtz_residual, make_problem, pinn_loss, sample_collocation
from lampinn.reference import burgers_reference_solve
from lampinn.stats import PairedSample, bootstrap_reduction_ci, reduction_percent, wilcoxon_signed_rank
from lampinn.tasks import full_factorial
from lampinn.training import _loss_fn

from oracles import brute_force_kmeans, fd_gradient, fd_hessian, rel_err, wilcoxon_enumeration

H = get_family(HELMHOLTZ)
B = get_family("burgers1d")

VERDICTS: dict = {}


def verdict(n, ok, detail=""):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


def desk():
    return preset("helmholtz-desk")


def tiny(**kw):
    base = dict(
        name="tiny", levels=[2, 2, 1], n_unseen=4, ood_scales=[110], n_ood=2, m_interior=36, n_data=16,
        eval_points=6, pretrain_epochs=5, preprocess_epochs=3, k=2, k_range=[2], stability_seeds=2,
        n1=2, n2=2, lam_epochs=1, transfer_budget=3, maml_meta_iters=3, bootstrap_resamples=50, seeds=[0, 1],
    )
    base.update(kw)
    return desk().replace(**base)


# 1 -----------------------------------------------------------------------------


ARCHS = ([2, 8, 1], [2, 12, 12, 1], [2, 16, 16, 1], [2, 10, 10, 10, 10, 1])


def _random_net(rng, i):
    # a small pool of shapes keeps jax's per-shape dispatch cache warm
    sizes = ARCHS[i] if i < len(ARCHS) else ARCHS[int(rng.integers(len(ARCHS)))]
    net = init_dense(sizes, seed=int(rng.integers(1 << 30)), activation=ACTIVATIONS[i % len(ACTIVATIONS)])
    for b in net.biases:
        b[:] = rng.uniform(-0.5, 0.5, b.shape)
    assert net.n_params <= 500
    return net


def test_c01_derivative_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    task = H.reference_task()
    problem = make_problem(task, 0.25)
    colloc = sample_collocation(problem, 4, 4, seed=0)
    args = tuple(jnp.asarray(a) for a in (task.values, colloc.interior, colloc.data_x, colloc.data_y))
    worst = 0.0
    for i in range(100):
        net = _random_net(rng, i)
        x = rng.uniform(-1, 1, 2)
        f = lambda z: forward(net, z)[0]
        jet = forward_jet(net, x)
        worst = max(worst, rel_err(jet.d_input, fd_gradient(f, x)), rel_err(jet.d2_input, fd_hessian(f, x)))
        loss = _loss_fn(net.signature(), HELMHOLTZ)
        g = param_gradient(lambda t: loss(t, *args)[0], net.vector())
        theta = net.vector()
        total = lambda v: pinn_loss(net.with_vector(v), problem, colloc).total
        if i < len(ARCHS):
            fd = fd_gradient(total, theta, 1e-4)
            worst = max(worst, rel_err(g, fd))
        else:
            # directional central differences along random unit vectors
            V = rng.normal(size=(8, theta.size))
            V /= np.linalg.norm(V, axis=1, keepdims=True)
            fd = [fd_gradient(lambda s: total(theta + s[0] * v), np.zeros(1), 1e-4)[0] for v in V]
            worst = max(worst, rel_err(V @ g, fd))
    dt = time.perf_counter() - t0
    verdict(1, worst < 1e-5 and dt < 60, f"max rel err {worst:.2e}, {dt:.1f}s")


# 2 -----------------------------------------------------------------------------


def test_c02_residual_exactness():
    rng = np.random.default_rng(7)
    lo = np.array([f.min for f in H.factors((3, 3, 3))])
    hi = np.array([f.max for f in H.factors((3, 3, 3))])
    worst = 0.0
    for _ in range(10):
        task = H.task(tuple(rng.uniform(lo, hi)))
        domain = np.asarray(make_problem(task, 1.0).domain, dtype=float)
        X = rng.uniform(domain[:, 0], domain[:, 1], (1000, 2))
        worst = max(worst, float(np.abs(helmholtz_residual(helmholtz_exact_jet(task, X), task)).max()))
    verdict(2, worst < 1e-10, f"max |residual| {worst:.2e}")


# 3 -----------------------------------------------------------------------------


def _max_diff(coarse, fine):
    # the fine grid halves the spacing, so every other node is shared
    return float(np.abs(fine.values[::2] - coarse.values).max())


def test_c03_burgers_self_convergence():
    t0 = time.perf_counter()
    ratios = []
    for nu in (0.05, 0.1):
        r = [burgers_reference_solve(B.task((1.0, nu, 5.0)), nx=n) for n in (256, 512, 1024)]
        ratios.append(_max_diff(r[0], r[1]) / _max_diff(r[1], r[2]))
    dt = time.perf_counter() - t0
    ok = all(3 <= q <= 5 for q in ratios) and dt < 300
    verdict(3, ok, f"ratios {np.round(ratios, 3).tolist()}, {dt:.1f}s")


# 4 -----------------------------------------------------------------------------


def test_c04_clustering_oracles():
    X = np.array([[0.0], [1.0], [10.0], [11.0]])
    best, _ = brute_force_kmeans(X, 2)
    cl = kmeans(X, 2, seed=0)
    km_ok = abs(wcss(X, cl.assignments, 2) - best) < 1e-12
    sil = silhouette(X, cl)
    hand = ((1 - 1 / 10.5) + (1 - 1 / 9.5)) / 2  # a=1 everywhere, b is 10.5 or 9.5
    sil_ok = abs(sil - 0.8997) < 1e-3 and abs(sil - hand) < 1e-12
    rng = np.random.default_rng(0)
    perm_ok = True
    for _ in range(20):
        labels = rng.integers(0, 4, 30)
        relabel = rng.permutation(4)[labels]
        perm_ok &= adjusted_rand_index(labels, relabel) == pytest.approx(1.0, abs=1e-12)
        perm_ok &= hungarian_disagreement(labels, relabel) == 0.0
    verdict(4, km_ok and sil_ok and perm_ok, f"wcss {best:.3g}, silhouette {sil:.6f}")


# 5 -----------------------------------------------------------------------------


def _embedding_ok(F):
    mean_ok = np.all(np.abs(F.mean(axis=0)) < 1e-10)
    sd = F.std(axis=0)
    sd_ok = np.all(np.isclose(sd, 1.0, atol=1e-12) | (sd == 0.0))
    return bool(mean_ok and sd_ok)


metric = st.floats(1e-8, 1e8, allow_nan=False)


@settings(max_examples=60)
@given(
    levels=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(2, 3)),
    data=st.data(),
    mode=st.sampled_from(["full", "params", "random"]),
)
def test_c05_embedding_contract(levels, data, mode):
    tasks = full_factorial(H.factors(levels), HELMHOLTZ)
    ms = [LossMetrics(*data.draw(st.tuples(metric, metric, metric))) for _ in tasks]
    F = embedding_matrix(build_embedding(list(zip(tasks, ms)), mode=mode, seed=1))
    ok = _embedding_ok(F)
    if not ok or 5 not in VERDICTS:
        verdict(5, ok, f"{len(tasks)} tasks, mode {mode}")


# 6 -----------------------------------------------------------------------------


def test_c06_freeze_contracts():
    ctx = pl.make_context(desk().replace(m_interior=144, n_data=48, eval_points=12))
    tasks = full_factorial(H.factors((3, 3, 1)), HELMHOLTZ)
    clusters = [tasks[0:3], tasks[3:6], tasks[6:9]]
    net = split_pretrained(init_dense(desk().layer_sizes, seed=0), 2, 3, seed=0)

    def block(n, owners):
        return n.vector()[n.mask(owners)]

    ok = True
    for scope in ("literal", "restrictive"):
        p1, _ = phase1_train(net, clusters, TrainingPlan(n1=10, phase1_scope=scope), ctx)
        ok &= np.array_equal(block(p1, ["in0"]), block(net, ["in0"]))
        p2, _ = phase2_train(p1, clusters, TrainingPlan(n2=10), ctx)
        ok &= np.array_equal(block(p2, ["in0", "in1", "in2", "in3"]), block(p1, ["in0", "in1", "in2", "in3"]))
    moved = False
    for rule in ("adam", "sgd"):
        sess = transfer_adapt(p2, H.task((12.0, 2.5, 3.5)), 60, ctx, lr=5e-2, lambda_update=rule)
        ok &= np.array_equal(sess.lambdas[0], np.full(3, 0.5))
        ok &= all(np.all((l >= 0) & (l <= 1)) for l in sess.lambdas)
        moved |= any(not np.array_equal(l, sess.lambdas[0]) for l in sess.lambdas)
    verdict(6, bool(ok and moved), "phase-1, phase-2 and transfer contracts")


# 7 -----------------------------------------------------------------------------


def test_c07_scratch_sanity():
    t0 = time.perf_counter()
    cfg = desk()
    ctx = pl.make_context(cfg)
    finals = [train_scratch(H.reference_task(), cfg.layer_sizes, 5000, s, ctx).final_mse for s in range(3)]
    dt = time.perf_counter() - t0
    med = float(np.median(finals))
    verdict(7, med < 1e-2 and dt < 600, f"median MSE {med:.3e} ({np.round(finals, 5).tolist()}), {dt:.0f}s")


# 8, 9 --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    result = pl.run_pipeline(desk(), str(out))
    return result, time.perf_counter() - t0


def _per_seed_means(records):
    means = {}
    for r in records:
        if r["kind"] == "unseen":
            means.setdefault((r["method"], r["seed"]), {}).setdefault(r["group"], []).append(r["mses"][-1])
    out = {}
    for (m, s), groups in means.items():
        vals = [v for g in groups.values() for v in g]
        gap = abs(np.mean(groups["A"]) - np.mean(groups["B"]))
        out.setdefault(m, {"mean": [], "gap": []})
        out[m]["mean"].append(np.mean(vals))
        out[m]["gap"].append(gap)
    return {m: {k: float(np.median(v)) for k, v in d.items()} for m, d in out.items()}


def test_c08_lam_beats_baselines(desk_run):
    result, dt = desk_run
    assert desk().n_unseen >= 5
    s = _per_seed_means(result.records)
    lam = s["lam"]
    ok = lam["mean"] < s["scratch"]["mean"] and lam["mean"] < s["transfer"]["mean"]
    ok &= s["scratch"]["gap"] > lam["gap"] and s["transfer"]["gap"] > lam["gap"]
    detail = ", ".join(f"{m} mean {v['mean']:.4g} gap {v['gap']:.4g}" for m, v in sorted(s.items()))
    verdict(8, bool(ok) and dt < 7200, f"{detail}, {dt:.0f}s")


def test_c09_within_cluster_transfer(desk_run):
    result, _ = desk_run
    cfg = desk()
    ctx = pl.make_context(cfg)
    sets = pl.load_task_sets(result.root)
    t0 = time.perf_counter()
    rows = []
    for seed in cfg.seeds:
        sroot = result.root / f"seed-{seed}"
        ref = pl.stage_pretrain(cfg, ctx, seed, sroot)
        metrics = pl.stage_preprocess(cfg, ctx, seed, ref, sets.training, sroot)
        emb, clustering, _ = pl.stage_cluster(cfg, seed, sets.training, metrics, sroot)
        rows += pl.cluster_transfer_experiment(cfg, ctx, seed, sets.training, emb, clustering)
    dt = time.perf_counter() - t0
    within = float(np.median([r["final_mse"] for r in rows if r["within"]]))
    cross = float(np.median([r["final_mse"] for r in rows if not r["within"]]))
    verdict(9, within <= cross and dt < 3600, f"within {within:.4g}, cross {cross:.4g}, {len(rows)} transfers, {dt:.0f}s")


# 10 ----------------------------------------------------------------------------


def test_c10_ablations(tmp_path):
    fixed = pl.run_pipeline(tiny(learn_lambda=False, lambda_init=0.5), str(tmp_path))
    lam_recs = [r for r in fixed.records if r["method"] == "lam"]
    const = all(np.array_equal(l, r["lambdas"][0]) for r in lam_recs for l in r["lambdas"])
    cfg = tiny(embedding_mode="random")
    rnd = pl.run_pipeline(cfg, str(tmp_path))
    sets = pl.load_task_sets(rnd.root)
    ok_emb = True
    ctx = pl.make_context(cfg)
    for seed in cfg.seeds:
        sroot = rnd.root / f"seed-{seed}"
        ref = pl.stage_pretrain(cfg, ctx, seed, sroot)
        metrics = pl.stage_preprocess(cfg, ctx, seed, ref, sets.training, sroot)
        emb, _, _ = pl.stage_cluster(cfg, seed, sets.training, metrics, sroot)
        ok_emb &= _embedding_ok(embedding_matrix(emb))
    ok = const and bool(lam_recs) and ok_emb and bool(rnd.records)
    verdict(10, ok, f"fixed-lambda constant={const}, random-metrics embedding ok={ok_emb}")


# 11 ----------------------------------------------------------------------------


def test_c11_statistics_oracles():
    rng = np.random.default_rng(11)
    worst = 0.0
    for n in range(5, 13):
        for _ in range(3):
            d = rng.normal(size=n)
            if n % 2:
                d[1] = -d[0]  # exercise tied magnitudes
            pairs = PairedSample(list(5.0 + d), [5.0] * n)
            res = wilcoxon_signed_rank(pairs)
            worst = max(worst, abs(res.p_value - wilcoxon_enumeration(d)))
    same = reduction_percent([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    zero = reduction_percent([0.0, 0.0, 0.0], [1.0, 2.0, 3.0])
    pairs = PairedSample(list(rng.uniform(0, 1, 12)), list(rng.uniform(0, 2, 12)))
    a = bootstrap_reduction_ci(pairs, 2000, seed=5)
    b = bootstrap_reduction_ci(pairs, 2000, seed=5)
    ok = worst < 1e-12 and same == 0.0 and zero == 100.0 and a == b
    verdict(11, ok, f"max |p - enumeration| {worst:.1e}, reductions {same}/{zero}")


# 12 ----------------------------------------------------------------------------


def test_c12_reproducible_exports(tmp_path):
    same = True
    for cfg in (tiny(), tiny(parallel=2, seeds=[3])):
        a = pl.run_pipeline(cfg, str(tmp_path / "a"))
        b = pl.run_pipeline(cfg, str(tmp_path / "b"))
        for name in ("results.csv", "plots/convergence_lam.csv", "plots/lambda_trajectory.csv", "plots/ood_sweep.csv"):
            same &= (a.root / name).read_bytes() == (b.root / name).read_bytes()
    verdict(12, same, "two fresh runs per config compared byte for byte")
