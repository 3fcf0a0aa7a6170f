"""End-to-end experiment driver.

Stages: DoE, reference pretraining, short sessions, clustering, modular
training, transfer to unseen tasks, baselines, group split and statistics.
Every stage persists its output under ``<out>/<name>-<config hash>/`` and is
skipped on rerun when that output already exists.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .affinity import (
    Clustering,
    LossMetrics,
    build_embedding,
    clustering_to_dict,
    embedding_matrix,
    kmeans,
    select_k,
    short_transfer_session,
    stability_report,
    within_cluster_order,
)
from .baselines import maml_adapt, maml_train, train_scratch, train_transfer
from .config import ExperimentConfig
from .errors import ConfigurationError, LamPinnError
from .lam import ModularNet, TrainingPlan, split_pretrained, train_lam, transfer_adapt
from .netcore import DenseNet, layer_group_magnitudes
from .pde import get_family
from .stats import (
    PairedSample,
    affinity_score,
    bootstrap_reduction_ci,
    group_split,
    wilcoxon_signed_rank,
)
from .tasks import (
    TaskConfig,
    full_factorial,
    load_tasks,
    random_design,
    sample_ood,
    sample_unseen,
    save_tasks,
)
from .training import PinnContext

log = logging.getLogger(__name__)

OUT_ENV = "LAMPINN_OUT"
METHOD_ORDER = ("lam", "scratch", "transfer", "maml")


class PipelineError(LamPinnError):
    def __init__(self, stage: str, cause: BaseException, partial=None):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial or []


def derive_seed(global_seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{key}".encode()).hexdigest()
    return int(digest[:8], 16)


@dataclass
class ExperimentRecord:
    method: str
    task_id: str
    seed: int
    kind: str  # "unseen" or "ood:<scale>"
    losses: list
    mses: list
    lambdas: list | None
    diverged: bool
    wall_clock: float
    config_hash: str
    seeds: dict = field(default_factory=dict)
    group: str = ""

    @property
    def final_mse(self) -> float:
        return self.mses[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc) -> "ExperimentRecord":
        return cls(**doc)


# persistence helpers -------------------------------------------------------


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _cached_json(path: Path, compute):
    if path.exists():
        return json.loads(path.read_text())
    doc = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(path, json.dumps(doc, indent=1, sort_keys=True).encode())
    return doc


def _cached_model(path: Path, compute, **meta):
    if path.exists():
        return checkpoint.load(path)[0]
    model = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(path, checkpoint.to_bytes(model, **meta))
    return model


def output_root(cfg: ExperimentConfig, out: str | None = None) -> Path:
    base = out or os.environ.get(OUT_ENV) or cfg.out_dir
    return Path(base) / f"{cfg.name}-{cfg.hash()}"


def make_context(cfg: ExperimentConfig) -> PinnContext:
    return PinnContext(
        cfg.family,
        domain_scale=cfg.domain_scale,
        m_interior=cfg.m_interior,
        n_data=cfg.n_data,
        eval_points=cfg.eval_points,
        lr=cfg.lr,
        lr_min=cfg.lr_min,
        patience=cfg.patience,
        factor=cfg.factor,
    )


def training_plan(cfg: ExperimentConfig, seed: int) -> TrainingPlan:
    return TrainingPlan(
        n1=cfg.n1,
        n2=cfg.n2,
        epochs=cfg.lam_epochs,
        lambda_main=cfg.lambda_main,
        lambda_other=cfg.lambda_other,
        lr=cfg.lr,
        seed=derive_seed(seed, "lam-plan"),
        phase1_scope=cfg.phase1_scope,
    )


# stages --------------------------------------------------------------------


@dataclass
class TaskSets:
    training: list
    unseen: list
    ood: dict  # scale -> list


def stage_doe(cfg: ExperimentConfig, root: Path | None = None) -> TaskSets:
    fam = get_family(cfg.family)
    factors = fam.factors(tuple(int(n) for n in cfg.levels))
    if cfg.design == "factorial":
        training = full_factorial(factors, fam.name)
    else:
        training = random_design(factors, cfg.n_random_tasks, cfg.design_seed, fam.name)
    unseen = sample_unseen(factors, cfg.n_unseen, cfg.unseen_seed, exclude=training, family=fam.name)
    ood = {
        int(s): sample_ood(factors, s, cfg.n_ood, derive_seed(cfg.unseen_seed, f"ood{s}"), fam.name)
        for s in cfg.ood_scales
    }
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        save_tasks(training, root / "tasks.jsonl")
        save_tasks(unseen, root / "unseen.jsonl")
        for s, ts in ood.items():
            save_tasks(ts, root / f"ood-{s}.jsonl")
    return TaskSets(training, unseen, ood)


def reference_task(cfg: ExperimentConfig) -> TaskConfig:
    fam = get_family(cfg.family)
    return fam.task(cfg.reference_task) if cfg.reference_task is not None else fam.reference_task()


def stage_pretrain(cfg, ctx, seed: int, root: Path | None = None) -> DenseNet:
    def compute():
        res = train_scratch(
            reference_task(cfg), cfg.layer_sizes, cfg.pretrain_epochs, derive_seed(seed, "pretrain"), ctx
        )
        return res.net

    if root is None:
        return compute()
    return _cached_model(root / "reference.ckpt", compute, family=cfg.family, seeds={"run": seed})


def _session_metrics(cfg, ctx, seed, ref, tasks) -> list[LossMetrics]:
    def one(task):
        return short_transfer_session(ref, task, cfg.preprocess_epochs, ctx, derive_seed(seed, task.id))

    return _map(cfg, one, tasks)


def _map(cfg, fn, items):
    if cfg.parallel > 1 and len(items) > 1:
        with ThreadPoolExecutor(cfg.parallel) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def stage_preprocess(cfg, ctx, seed, ref, tasks, root: Path | None = None) -> list[LossMetrics]:
    def compute():
        ms = _session_metrics(cfg, ctx, seed, ref, tasks)
        return [{"task_id": t.id, **asdict(m)} for t, m in zip(tasks, ms)]

    doc = compute() if root is None else _cached_json(root / "preprocess.json", compute)
    return [LossMetrics(d["l1"], d["l2"], d["l3"], d["diverged"]) for d in doc]


def stage_cluster(cfg, seed, tasks, metrics, root: Path | None = None):
    """Returns (embeddings, clustering, stability report dict or None)."""
    embeddings = build_embedding(
        list(zip(tasks, metrics)), mode=cfg.embedding_mode, seed=derive_seed(seed, "random-metrics")
    )
    X = embedding_matrix(embeddings)

    def compute():
        report = None
        k = cfg.k
        if cfg.k == "auto" or cfg.stability_seeds >= 2:
            ks = [kk for kk in cfg.k_range if kk <= len(tasks)]
            if ks:
                rep = stability_report(X, ks, cfg.stability_seeds, base_seed=cfg.kmeans_seed)
                report = rep.to_dict()
                if cfg.k == "auto":
                    k = select_k(rep)
        cl = kmeans(X, int(k), seed=cfg.kmeans_seed)
        return {"clustering": clustering_to_dict(embeddings, cl), "stability": report}

    doc = compute() if root is None else _cached_json(root / "clustering.json", compute)
    c = doc["clustering"]
    clustering = Clustering(
        c["k"], np.array([t["assignment"] for t in c["tasks"]]), np.array(c["centroids"]), c["objective"], c["seed"]
    )
    return embeddings, clustering, doc["stability"]


def stage_train(cfg, ctx, seed, ref, tasks, clustering, root: Path | None = None) -> ModularNet:
    clusters = [[t for t, a in zip(tasks, clustering.assignments) if a == j] for j in range(clustering.k)]

    def compute():
        net = split_pretrained(
            ref, cfg.split_depth, clustering.k, derive_seed(seed, "branches"), cfg.lambda_main, cfg.lambda_other
        )
        net, _ = train_lam(net, clusters, training_plan(cfg, seed), ctx)
        return net

    if root is None:
        return compute()
    assignments = {t.id: int(a) for t, a in zip(tasks, clustering.assignments)}
    return _cached_model(
        root / "lam.ckpt", compute, family=cfg.family, seeds={"run": seed}, assignments=assignments
    )


def _record(cfg, method, task, seed, kind, t0, losses, mses, diverged, lambdas=None) -> dict:
    return ExperimentRecord(
        method,
        task.id,
        seed,
        kind,
        [float(v) for v in losses],
        [float(v) for v in mses],
        None if lambdas is None else [np.asarray(l).tolist() for l in lambdas],
        bool(diverged),
        time.perf_counter() - t0,
        cfg.hash(),
        {"run": seed, "task": derive_seed(seed, task.id), "unseen": cfg.unseen_seed, "kmeans": cfg.kmeans_seed},
    ).to_dict()


def run_method(cfg, ctx, seed, method, task, models, kind="unseen") -> dict:
    """One transfer session of ``method`` on ``task``; returns a record dict."""
    t0 = time.perf_counter()
    cseed = derive_seed(seed, task.id)
    if method == "lam":
        s = transfer_adapt(
            models["lam"],
            task,
            cfg.transfer_budget,
            ctx,
            lambda_init=cfg.lambda_init,
            learn_lambda=cfg.learn_lambda,
            lambda_update=cfg.lambda_update,
            colloc_seed=cseed,
        )
        return _record(cfg, method, task, seed, kind, t0, s.losses, s.mses, s.diverged, s.lambdas)
    if method == "scratch":
        r = train_scratch(task, cfg.layer_sizes, cfg.transfer_budget, derive_seed(seed, "scratch:" + task.id), ctx, colloc_seed=cseed)
    elif method == "transfer":
        r = train_transfer(models["reference"], task, cfg.transfer_budget, ctx, colloc_seed=cseed)
    elif method == "maml":
        r = maml_adapt(models["maml"], task, cfg.transfer_budget, ctx, colloc_seed=cseed)
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    return _record(cfg, method, task, seed, kind, t0, r.losses, r.mses, r.diverged)


def stage_maml(cfg, ctx, seed, tasks, root: Path | None = None) -> DenseNet:
    def compute():
        return maml_train(
            tasks, cfg.layer_sizes, cfg.maml_meta_iters, cfg.maml_inner_steps, derive_seed(seed, "maml"), ctx
        ).net

    if root is None:
        return compute()
    return _cached_model(root / "maml.ckpt", compute, family=cfg.family, seeds={"run": seed})


def stage_transfers(cfg, ctx, seed, methods, tasks, models, kind, root: Path | None) -> list[dict]:
    jobs = [(m, t) for m in methods for t in tasks]

    def one(job):
        m, t = job
        fn = lambda: run_method(cfg, ctx, seed, m, t, models, kind)  # noqa: E731
        if root is None:
            return fn()
        return _cached_json(root / "records" / f"{kind.replace(':', '-')}__{m}__{t.id}.json", fn)

    return _map(cfg, one, jobs)


def stage_groups(cfg, ctx, seed, ref, unseen, root: Path | None = None) -> dict:
    """Group A/B of the unseen tasks, ranked by their own short-session affinity."""

    def compute():
        metrics = _session_metrics(cfg, ctx, seed, ref, unseen)
        emb = build_embedding(list(zip(unseen, metrics)), mode="full")
        n_par = len(get_family(cfg.family).factor_names)
        scores = [affinity_score(e, cfg.group_score, n_par) for e in emb]
        a, b = group_split([t.id for t in unseen], scores)
        return {"scores": dict(zip([t.id for t in unseen], scores)), "A": a, "B": b}

    return compute() if root is None else _cached_json(root / "groups.json", compute)


def seed_statistics(cfg, seed, records: list[dict]) -> dict:
    by = {}
    for r in records:
        if r["seed"] == seed and r["kind"] == "unseen":
            by.setdefault(r["method"], {})[r["task_id"]] = r["mses"][-1]
    out = {}
    if "lam" not in by:
        return out
    ids = sorted(by["lam"])
    for m in by:
        if m == "lam" or sorted(by[m]) != ids:
            continue
        pairs = PairedSample([by["lam"][i] for i in ids], [by[m][i] for i in ids])
        entry = {}
        try:
            w = wilcoxon_signed_rank(pairs)
            entry["wilcoxon"] = asdict(w)
        except ConfigurationError as exc:
            entry["wilcoxon"] = {"skipped": str(exc)}
        try:
            b = bootstrap_reduction_ci(pairs, cfg.bootstrap_resamples, seed=derive_seed(seed, "bootstrap:" + m))
            entry["bootstrap"] = asdict(b)
        except LamPinnError as exc:
            entry["bootstrap"] = {"skipped": str(exc)}
        out[m] = entry
    return out


# within- vs cross-cluster transfer ---------------------------------------------


def cluster_transfer_experiment(cfg, ctx, seed, tasks, embeddings, clustering, n_targets=None) -> list[dict]:
    """Pretrain on each cluster's most central task, then transfer to the next
    most central members of every cluster.  Returns one row per transfer."""
    n_targets = cfg.cluster_transfer_targets if n_targets is None else n_targets
    X = embedding_matrix(embeddings)
    orders = [within_cluster_order(X, clustering, j) for j in range(clustering.k)]
    reps = {j: tasks[o[0]] for j, o in enumerate(orders) if o}
    targets = [(j, tasks[i]) for j, o in enumerate(orders) for i in o[1 : 1 + n_targets]]
    sources = {
        j: train_scratch(t, cfg.layer_sizes, cfg.pretrain_epochs, derive_seed(seed, "rep:" + t.id), ctx).net
        for j, t in reps.items()
    }
    rows = []
    for js, src in sources.items():
        for jt, task in targets:
            r = train_transfer(src, task, cfg.transfer_budget, ctx, colloc_seed=derive_seed(seed, task.id))
            rows.append(
                {
                    "seed": seed,
                    "source_cluster": js,
                    "target_cluster": jt,
                    "target": task.id,
                    "within": js == jt,
                    "final_mse": r.final_mse,
                }
            )
    return rows


# driver ------------------------------------------------------------------------


@dataclass
class PipelineResult:
    root: Path
    records: list
    summary: dict
    clusterings: dict = field(default_factory=dict)
    layer_magnitudes: dict = field(default_factory=dict)


def run_seed(cfg, ctx, seed, task_sets, root: Path | None, stage_cb=None) -> dict:
    """All per-seed stages; returns {"records", "groups", "clustering", "stats", ...}."""
    sroot = None if root is None else root / f"seed-{seed}"

    def stage(name):
        if stage_cb:
            stage_cb(name)
        log.info("seed %s: %s", seed, name)

    stage("pretrain")
    ref = stage_pretrain(cfg, ctx, seed, sroot)
    stage("preprocess")
    metrics = stage_preprocess(cfg, ctx, seed, ref, task_sets.training, sroot)
    stage("cluster")
    emb, clustering, stability = stage_cluster(cfg, seed, task_sets.training, metrics, sroot)
    stage("train")
    lam = stage_train(cfg, ctx, seed, ref, task_sets.training, clustering, sroot)
    models = {"lam": lam, "reference": ref}
    if "maml" in cfg.baselines:
        stage("maml")
        models["maml"] = stage_maml(cfg, ctx, seed, task_sets.training, sroot)
    methods = ["lam"] + [m for m in METHOD_ORDER if m in cfg.baselines]
    stage("transfer")
    records = stage_transfers(cfg, ctx, seed, methods, task_sets.unseen, models, "unseen", sroot)
    for scale, ts in task_sets.ood.items():
        stage(f"ood-{scale}")
        records += stage_transfers(cfg, ctx, seed, methods, ts, models, f"ood:{scale}", sroot)
    stage("groups")
    groups = stage_groups(cfg, ctx, seed, ref, task_sets.unseen, sroot)
    group_of = {tid: "A" for tid in groups["A"]} | {tid: "B" for tid in groups["B"]}
    for r in records:
        r["group"] = group_of.get(r["task_id"], "")
    stage("stats")
    stats = seed_statistics(cfg, seed, records)
    return {
        "records": records,
        "groups": groups,
        "clustering": {
            "k": clustering.k,
            "assignments": {t.id: int(a) for t, a in zip(task_sets.training, clustering.assignments)},
            "stability": stability,
        },
        "stats": stats,
        "layer_magnitudes": {name: _magnitudes(m) for name, m in models.items() if isinstance(m, DenseNet)},
    }


def _magnitudes(net: DenseNet) -> list:
    return layer_group_magnitudes(net).tolist()


def run_pipeline(cfg: ExperimentConfig, out: str | None = None, persist: bool = True) -> PipelineResult:
    """Run every stage for every seed, then export CSV, JSON summary and plot data."""
    from .export import build_summary, emit_all_plot_data, export_results

    cfg.validate()
    root = output_root(cfg, out)
    current = {"stage": "doe"}
    partial: list = []
    try:
        if persist:
            root.mkdir(parents=True, exist_ok=True)
            cfg.save(root / "config.json")
        task_sets = stage_doe(cfg, root if persist else None)
        ctx = make_context(cfg)
        per_seed = {}
        for seed in cfg.seeds:
            per_seed[seed] = run_seed(
                cfg, ctx, seed, task_sets, root if persist else None, lambda s: current.update(stage=s)
            )
            partial.extend(per_seed[seed]["records"])
        current["stage"] = "report"
        records = [r for s in cfg.seeds for r in per_seed[s]["records"]]
        summary = build_summary(cfg, records, per_seed)
        if persist:
            export_results(records, summary, root)
            emit_all_plot_data(records, per_seed, root / "plots")
        return PipelineResult(
            root,
            records,
            summary,
            {s: per_seed[s]["clustering"] for s in cfg.seeds},
            {str(s): per_seed[s]["layer_magnitudes"] for s in cfg.seeds},
        )
    except Exception as exc:
        if persist:
            root.mkdir(parents=True, exist_ok=True)
            (root / "failure.json").write_text(
                json.dumps({"stage": current["stage"], "error": repr(exc)}, indent=1)
            )
        raise PipelineError(current["stage"], exc, partial) from exc


def load_task_sets(root: Path) -> TaskSets:
    ood = {}
    for p in sorted(root.glob("ood-*.jsonl")):
        ood[int(p.stem.split("-")[1])] = load_tasks(p)
    return TaskSets(load_tasks(root / "tasks.jsonl"), load_tasks(root / "unseen.jsonl"), ood)

