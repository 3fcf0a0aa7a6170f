"""Learning-affinity embeddings, k-means and clustering-quality metrics."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, ContractError, DomainError, UndefinedMetricError
from .netcore import DenseNet
from .tasks import TaskConfig
from .training import PinnContext, fit

EMBEDDING_MODES = ("full", "params", "random")


@dataclass(frozen=True)
class LossMetrics:
    l1: float  # loss before any step
    l2: float  # loss after the last step
    l3: float  # mean over recorded epochs, epoch 0 included
    diverged: bool = False

    def as_tuple(self) -> tuple:
        return (self.l1, self.l2, self.l3)


def metrics_from_losses(losses, diverged: bool = False) -> LossMetrics:
    losses = [float(v) for v in losses]
    return LossMetrics(losses[0], losses[-1], float(np.mean(losses)), diverged)


def short_transfer_session(
    pretrained: DenseNet,
    task: TaskConfig,
    budget_epochs: int,
    ctx: PinnContext,
    colloc_seed: int = 0,
    lr: float | None = None,
) -> LossMetrics:
    """Brief fine-tuning of a copy of the reference net; only loss statistics are kept."""
    if budget_epochs < 0:
        raise ConfigurationError("session budget must be non-negative")
    start = pretrained.copy()
    sig = start.signature()
    res = fit(
        ctx.objective(sig, task, colloc_seed),
        start.vector(),
        budget_epochs,
        ctx.optimizer(start.n_params, lr),
        divergence=ctx.divergence,
    )
    return metrics_from_losses(res.losses, res.diverged)


# embedding -------------------------------------------------------------------


@dataclass
class TaskEmbedding:
    task_id: str
    raw: np.ndarray
    normalized: np.ndarray


def signed_log1p(z):
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.log1p(np.abs(z))


def standardize(F: np.ndarray) -> np.ndarray:
    """Column z-score with population std; constant columns become 0."""
    F = np.asarray(F, dtype=np.float64)
    out = np.zeros_like(F)
    for c in range(F.shape[1]):
        col = F[:, c]
        if np.all(col == col[0]):
            continue
        centred = col - col.mean()
        out[:, c] = centred / np.sqrt(np.mean(centred**2))
    return out


def build_embedding(items, mode: str = "full", seed: int = 0) -> list[TaskEmbedding]:
    """Embed (task, metrics) pairs: log-transform then standardize across the set.

    ``mode`` selects the ablations: "params" drops the loss features and
    "random" replaces them with seeded uniform draws.
    """
    items = list(items)
    if len(items) < 2:
        raise ConfigurationError("embedding needs at least two tasks")
    if mode not in EMBEDDING_MODES:
        raise ConfigurationError(f"embedding mode must be one of {EMBEDDING_MODES}")
    mus = np.array([task.as_array() for task, _ in items], dtype=np.float64)
    if mode == "params":
        losses = np.empty((len(items), 0))
    elif mode == "random":
        losses = np.random.default_rng([seed, 11]).uniform(0.0, 1.0, (len(items), 3))
    else:
        for task, m in items:
            if m.diverged:
                raise DomainError(f"task {task.id} diverged during its short session")
        losses = np.array([m.as_tuple() for _, m in items], dtype=np.float64)
    raw = np.concatenate([mus, losses], axis=1)
    if not np.all(np.isfinite(raw)):
        raise DomainError("embedding inputs must be finite")
    if np.any(losses <= -1.0):
        raise DomainError("log(1 + z) undefined for loss features at or below -1")
    logged = np.concatenate([signed_log1p(mus), np.log1p(losses)], axis=1)
    norm = standardize(logged)
    return [TaskEmbedding(task.id, raw[i], norm[i]) for i, (task, _) in enumerate(items)]


def embedding_matrix(embeddings) -> np.ndarray:
    return np.stack([e.normalized for e in embeddings])


# k-means ---------------------------------------------------------------------


@dataclass
class Clustering:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    seed: int
    history: list = field(default_factory=list)
    n_iter: int = 0

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == j)


def _as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return X


def wcss(X, labels, k: int) -> float:
    X = _as_points(X)
    total = 0.0
    for j in range(k):
        pts = X[labels == j]
        if len(pts):
            total += float(np.sum((pts - pts.mean(axis=0)) ** 2))
    return total


def _sq_dists(X, C):
    return np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=-1)


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(_sq_dists(X, np.array(centers)), axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
    return np.array(centers)


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8) -> Clustering:
    """k-means++ seeding followed by Lloyd iterations."""
    X = _as_points(X)
    n = len(X)
    if not 1 <= k <= n:
        raise ConfigurationError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, C)
        labels = np.argmin(d2, axis=1)
        for j in range(k):
            if np.any(labels == j):
                continue
            # move the point worst served by its current centroid into the empty cluster
            counts = np.bincount(labels, minlength=k)
            own = d2[np.arange(n), labels]
            own = np.where(counts[labels] > 1, own, -1.0)
            p = int(np.argmax(own))
            labels[p] = j
        newC = np.array([X[labels == j].mean(axis=0) for j in range(k)])
        history.append(wcss(X, labels, k))
        shift = float(np.max(np.sqrt(np.sum((newC - C) ** 2, axis=1))))
        C = newC
        if shift < tol:
            break
    return Clustering(k, labels, C, wcss(X, labels, k), seed, history, it)


# quality metrics -------------------------------------------------------------


def _labels_of(clustering_or_labels) -> np.ndarray:
    if isinstance(clustering_or_labels, Clustering):
        return np.asarray(clustering_or_labels.assignments)
    return np.asarray(clustering_or_labels)


def silhouette_samples(X, labels) -> np.ndarray:
    X = _as_points(X)
    labels = _labels_of(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise UndefinedMetricError("silhouette needs at least two clusters")
    D = np.sqrt(_sq_dists(X, X))
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in uniq if c != labels[i])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return s


def silhouette(X, clustering) -> float:
    if isinstance(clustering, Clustering) and clustering.k < 2:
        raise UndefinedMetricError("silhouette needs at least two clusters")
    return float(np.mean(silhouette_samples(X, clustering)))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def adjusted_rand_index(labels_a, labels_b) -> float:
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("labelings must be 1-D and of equal length")
    if len(a) < 2:
        raise ContractError("ARI needs at least two items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    index = _comb2(table).sum()
    rows, cols = _comb2(table.sum(axis=1)).sum(), _comb2(table.sum(axis=0)).sum()
    expected = rows * cols / _comb2(len(a))
    top = 0.5 * (rows + cols)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def hungarian_disagreement(labels_short, labels_full) -> float:
    """Percent of items whose labels differ after the best one-to-one relabelling."""
    a, b = np.asarray(labels_short), np.asarray(labels_full)
    if a.shape != b.shape:
        raise ContractError("labelings must have equal length")
    if len(a) == 0:
        return 0.0
    ua, ai = np.unique(a, return_inverse=True)
    ub, bi = np.unique(b, return_inverse=True)
    conf = np.zeros((len(ua), len(ub)))
    np.add.at(conf, (ai, bi), 1)
    r, c = linear_sum_assignment(conf, maximize=True)
    return float(100.0 * (1.0 - conf[r, c].sum() / len(a)))


# stability and K selection ---------------------------------------------------


@dataclass
class StabilityRow:
    k: int
    silhouette_mean: float
    silhouette_sd: float
    ari_mean: float
    n_pairs: int


@dataclass
class StabilityReport:
    rows: list
    seeds: list

    def as_array(self) -> np.ndarray:
        return np.array([[r.silhouette_mean, r.silhouette_sd, r.ari_mean] for r in self.rows])

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "rows": [r.__dict__ for r in self.rows]}


def stability_report(X, k_range, n_seeds: int = 20, base_seed: int = 0) -> StabilityReport:
    """Silhouette mean/SD and mean pairwise ARI of k-means over seeds, per k."""
    if n_seeds < 2:
        raise ConfigurationError("stability needs at least two seeds")
    X = _as_points(X)
    seeds = [base_seed + s for s in range(n_seeds)]
    rows = []
    for k in k_range:
        runs = [kmeans(X, k, seed) for seed in seeds]
        sils = np.array([silhouette(X, r) for r in runs])
        aris = [adjusted_rand_index(p.assignments, q.assignments) for p, q in itertools.combinations(runs, 2)]
        rows.append(StabilityRow(int(k), float(sils.mean()), float(sils.std()), float(np.mean(aris)), len(aris)))
    return StabilityReport(rows, seeds)


def select_k(report: StabilityReport, ari_threshold: float = 0.95) -> int:
    """Best silhouette among stable k; otherwise the most stable k.  Ties go to smaller k."""
    rows = sorted(report.rows, key=lambda r: r.k)
    if not rows:
        raise ConfigurationError("empty stability report")
    stable = [r for r in rows if r.ari_mean >= ari_threshold]
    if stable:
        best = max(r.silhouette_mean for r in stable)
        return next(r.k for r in stable if r.silhouette_mean == best)
    best = max(r.ari_mean for r in rows)
    return next(r.k for r in rows if r.ari_mean == best)


# persistence -----------------------------------------------------------------


def clustering_to_dict(embeddings, clustering: Clustering) -> dict:
    return {
        "k": clustering.k,
        "seed": clustering.seed,
        "objective": clustering.objective,
        "centroids": clustering.centroids.tolist(),
        "tasks": [
            {
                "task_id": e.task_id,
                "raw": e.raw.tolist(),
                "normalized": e.normalized.tolist(),
                "assignment": int(a),
            }
            for e, a in zip(embeddings, clustering.assignments)
        ],
    }


def save_clustering(path, embeddings, clustering: Clustering) -> None:
    Path(path).write_text(json.dumps(clustering_to_dict(embeddings, clustering), indent=2))


def load_clustering(path):
    doc = json.loads(Path(path).read_text())
    embeddings = [
        TaskEmbedding(t["task_id"], np.array(t["raw"]), np.array(t["normalized"])) for t in doc["tasks"]
    ]
    labels = np.array([t["assignment"] for t in doc["tasks"]])
    clustering = Clustering(doc["k"], labels, np.array(doc["centroids"]), doc["objective"], doc["seed"])
    return embeddings, clustering


def clusters_from_labels(tasks, labels, k: int):
    """Task lists per cluster index, preserving task order."""
    out = [[] for _ in range(k)]
    for task, lab in zip(tasks, labels):
        out[int(lab)].append(task)
    return out


def within_cluster_order(X, clustering: Clustering, j: int) -> list[int]:
    """Members of cluster j sorted by distance to its centroid."""
    X = _as_points(X)
    idx = clustering.members(j)
    d = np.sum((X[idx] - clustering.centroids[j]) ** 2, axis=1)
    return [int(i) for i in idx[np.argsort(d, kind="stable")]]


def nearest_cluster(X_row, clustering: Clustering) -> int:
    d = np.sum((clustering.centroids - np.asarray(X_row)) ** 2, axis=1)
    return int(np.argmin(d))

