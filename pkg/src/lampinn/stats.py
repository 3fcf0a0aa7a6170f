"""Group splits, paired signed-rank tests and bootstrap reduction intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, UndefinedMetricError

SCORE_KINDS = ("L1", "L2", "L3", "norm")
EXACT_MAX_N = 25


@dataclass(frozen=True)
class PairedSample:
    ours: tuple
    base: tuple

    def __post_init__(self):
        ours = tuple(float(v) for v in self.ours)
        base = tuple(float(v) for v in self.base)
        if len(ours) != len(base):
            raise ContractError("paired samples need equal lengths")
        if any(v < 0 or not math.isfinite(v) for v in ours + base):
            raise ContractError("paired values must be finite and non-negative")
        object.__setattr__(self, "ours", ours)
        object.__setattr__(self, "base", base)

    def __len__(self) -> int:
        return len(self.ours)

    def arrays(self):
        return np.array(self.ours), np.array(self.base)


# group split -----------------------------------------------------------------


def affinity_score(embedding, kind: str = "L3", n_params: int = 3) -> float:
    """Scalar used to rank tasks: a standardized loss feature or the embedding norm."""
    if kind not in SCORE_KINDS:
        raise ConfigurationError(f"score must be one of {SCORE_KINDS}")
    vec = np.asarray(embedding.normalized)
    if kind == "norm":
        return float(np.linalg.norm(vec))
    return float(vec[n_params + int(kind[1]) - 1])


def group_split(task_ids, scores):
    """Top half by score is group A; ties are broken by task id."""
    task_ids = list(task_ids)
    scores = [float(s) for s in scores]
    if len(task_ids) != len(scores):
        raise ContractError("one score per task")
    if len(task_ids) < 2 or len(task_ids) % 2:
        raise ConfigurationError("group split needs an even number of tasks (at least 2)")
    order = sorted(range(len(task_ids)), key=lambda i: (-scores[i], task_ids[i]))
    half = len(order) // 2
    return [task_ids[i] for i in order[:half]], [task_ids[i] for i in order[half:]]


# Wilcoxon --------------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    w_plus: float
    w_minus: float
    p_value: float
    n: int  # non-zero differences used
    exact: bool
    degenerate: bool


def _midranks(values) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = np.asarray(values)[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_two_sided(doubled_ranks, w2_plus: int) -> float:
    """P(|W+ - E| >= |observed - E|) over all 2^n sign patterns, via a subset-sum count."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    dev = abs(2 * w2_plus - total)
    hits = sum(int(counts[s]) for s in range(total + 1) if abs(2 * s - total) >= dev)
    return hits / 2 ** len(doubled_ranks)


def wilcoxon_signed_rank(pairs: PairedSample, min_n: int = 5) -> WilcoxonResult:
    """Two-sided paired signed-rank test on ours - base.

    Zero differences are dropped and tied magnitudes get mid-ranks.  Exact
    null distribution for up to 25 differences, otherwise the normal
    approximation with continuity and tie corrections.
    """
    ours, base = pairs.arrays()
    d = ours - base
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 0.0, 0.0, 1.0, 0, True, True)
    if n < min_n:
        raise ConfigurationError(f"need at least {min_n} non-zero differences, got {n}")
    ranks = _midranks(np.abs(d))
    doubled = np.rint(2 * ranks).astype(int)
    w2_plus = int(doubled[d > 0].sum())
    w_plus = w2_plus / 2.0
    w_minus = float(n * (n + 1) / 2.0 - w_plus)
    if n <= EXACT_MAX_N:
        p = _exact_two_sided(doubled, w2_plus)
        exact = True
    else:
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        z = max(abs(w_plus - n * (n + 1) / 4.0) - 0.5, 0.0) / math.sqrt(var)
        p = math.erfc(z / math.sqrt(2.0))
        exact = False
    return WilcoxonResult(min(w_plus, w_minus), w_plus, w_minus, min(1.0, p), n, exact, False)


# bootstrap -------------------------------------------------------------------


def reduction_percent(ours, base) -> float:
    mb = float(np.mean(base))
    if mb <= 0:
        raise UndefinedMetricError("reduction undefined for zero baseline mean")
    return 100.0 * (1.0 - float(np.mean(ours)) / mb)


@dataclass(frozen=True)
class BootstrapResult:
    reduction: float
    ci_low: float
    ci_high: float
    n_resamples: int
    seed: int


def bootstrap_reduction_ci(
    pairs: PairedSample, n_resamples: int = 10000, seed: int = 0, level: float = 0.95
) -> BootstrapResult:
    """Percentile CI of the mean-MSE reduction over paired task resamples."""
    ours, base = pairs.arrays()
    n = len(ours)
    if n < 2:
        raise ConfigurationError("bootstrap needs at least two pairs")
    if n_resamples < 1:
        raise ConfigurationError("need at least one resample")
    point = reduction_percent(ours, base)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_resamples, n))
    mo, mb = ours[idx].mean(axis=1), base[idx].mean(axis=1)
    ok = mb > 0
    stats = 100.0 * (1.0 - mo[ok] / mb[ok])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapResult(point, float(lo), float(hi), n_resamples, seed)
