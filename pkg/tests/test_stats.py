import numpy as np
import pytest
import scipy.stats
from hypothesis import given, strategies as st

from lampinn.affinity import TaskEmbedding
from lampinn.errors import ConfigurationError, ContractError, UndefinedMetricError
from lampinn.stats import (
    PairedSample,
    affinity_score,
    bootstrap_reduction_ci,
    group_split,
    reduction_percent,
    wilcoxon_signed_rank,
)

from oracles import wilcoxon_enumeration


def test_group_split_examples():
    a, b = group_split(["t1", "t2", "t3", "t4"], [1, 2, 3, 4])
    assert a == ["t4", "t3"] and b == ["t2", "t1"]
    a, b = group_split(["d", "b", "c", "a"], [0, 0, 0, 0])
    assert a == ["a", "b"] and b == ["c", "d"]
    a, b = group_split([f"t{i}" for i in range(10)], range(10))
    assert len(a) == len(b) == 5


def test_group_split_odd():
    with pytest.raises(ConfigurationError):
        group_split(["a", "b", "c"], [1, 2, 3])


def test_affinity_score_selects_feature():
    e = TaskEmbedding("x", np.zeros(6), np.array([0, 0, 0, 1.0, 2.0, 3.0]))
    assert affinity_score(e, "L1") == 1.0 and affinity_score(e, "L3") == 3.0
    assert affinity_score(e, "norm") == pytest.approx(np.sqrt(14))


def test_wilcoxon_identical_degenerate():
    r = wilcoxon_signed_rank(PairedSample([1, 2, 3], [1, 2, 3]))
    assert r.degenerate and r.p_value == 1.0


def test_wilcoxon_all_positive_five():
    r = wilcoxon_signed_rank(PairedSample([2, 4, 6, 8, 10], [1, 2, 3, 4, 5]))
    assert r.statistic == 0 and r.p_value == pytest.approx(2 / 32) and r.exact


def test_wilcoxon_too_few():
    with pytest.raises(ConfigurationError):
        wilcoxon_signed_rank(PairedSample([1, 2], [2, 3]))


@given(st.integers(5, 12), st.integers(0, 10_000), st.booleans())
def test_wilcoxon_matches_enumeration(n, seed, ties):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 5, n)
    d = rng.integers(-3, 4, n).astype(float) if ties else rng.normal(size=n)
    d[d == 0] = 0.5
    ours = np.abs(base + d)
    r = wilcoxon_signed_rank(PairedSample(ours, base))
    assert r.p_value == pytest.approx(wilcoxon_enumeration(ours - base), abs=1e-12)


@given(st.integers(0, 10_000))
def test_wilcoxon_swap_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, 8), rng.uniform(0, 1, 8)
    r1 = wilcoxon_signed_rank(PairedSample(a, b))
    r2 = wilcoxon_signed_rank(PairedSample(b, a))
    assert r1.w_plus == r2.w_minus and r1.p_value == r2.p_value


def test_wilcoxon_exact_matches_scipy_without_ties():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(0, 1, 11), rng.uniform(0, 1, 11)
    ref = scipy.stats.wilcoxon(a, b, method="exact")
    r = wilcoxon_signed_rank(PairedSample(a, b))
    assert r.statistic == ref.statistic and r.p_value == pytest.approx(ref.pvalue)


def test_wilcoxon_normal_approximation_matches_scipy():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, 40)
    b = np.round(a + rng.normal(0.1, 0.3, 40), 1).clip(0)
    ref = scipy.stats.wilcoxon(a, b, method="approx", correction=True)
    r = wilcoxon_signed_rank(PairedSample(a, b))
    assert not r.exact and r.p_value == pytest.approx(ref.pvalue, rel=1e-10)


def test_paired_sample_contract():
    with pytest.raises(ContractError):
        PairedSample([1, 2], [1])
    with pytest.raises(ContractError):
        PairedSample([-1, 2], [1, 1])


def test_reduction_examples():
    assert reduction_percent([1, 2], [1, 2]) == 0.0
    assert reduction_percent([0, 0], [1, 3]) == 100.0
    with pytest.raises(UndefinedMetricError):
        reduction_percent([1, 1], [0, 0])


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=8), st.floats(0.01, 100))
def test_reduction_scale_invariant(vals, c):
    ours = np.array(vals)
    base = ours[::-1] + 1
    assert reduction_percent(c * ours, c * base) == pytest.approx(reduction_percent(ours, base), abs=1e-9)


def test_bootstrap_identical_pairs():
    r = bootstrap_reduction_ci(PairedSample([1, 2, 3, 4], [1, 2, 3, 4]), 500)
    assert r.reduction == 0 and r.ci_low <= 0 <= r.ci_high


def test_bootstrap_zero_numerator():
    r = bootstrap_reduction_ci(PairedSample([0] * 5, [1, 2, 3, 4, 5]), 500)
    assert r.reduction == r.ci_low == r.ci_high == 100.0


def test_bootstrap_constant_pairs():
    r = bootstrap_reduction_ci(PairedSample([1] * 10, [2] * 10), 500)
    assert r.reduction == pytest.approx(50) and r.ci_low == pytest.approx(50) and r.ci_high == pytest.approx(50)


@given(st.integers(0, 1000))
def test_bootstrap_deterministic_and_brackets(seed):
    rng = np.random.default_rng(seed)
    p = PairedSample(rng.uniform(0, 1, 10), rng.uniform(0.5, 2, 10))
    a = bootstrap_reduction_ci(p, 300, seed=seed)
    assert a == bootstrap_reduction_ci(p, 300, seed=seed)
    assert a.ci_low <= a.reduction <= a.ci_high
