import itertools
from fractions import Fraction

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from fcdd.stats import (
    ScoreTable, ScoreTableError, boxplot_stats, cd_diagram, holm_adjust, rank_per_dataset, wilcoxon_signed_rank,
)


def brute_wilcoxon_p(x, y):
    """Two-sided p by enumerating every sign assignment of the non-zero |d| ranks."""
    d = [a - b for a, b in zip(x, y) if a != b]
    n = len(d)
    if n == 0:
        return 1.0
    ranks = scipy.stats.rankdata(np.abs(d))
    w_plus = sum(r for r, v in zip(ranks, d) if v > 0)
    obs = min(w_plus, ranks.sum() - w_plus)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        wp = sum(r for r, s in zip(ranks, signs) if s)
        hits += min(wp, ranks.sum() - wp) <= obs + 1e-9
    return hits / 2 ** n


def test_rank_bottle_example():
    t = ScoreTable(["GDR", "AE-SS", "FCDD (SS)", "FCDD (U)", "P-NET"], ["bottle"],
                   [[92.0], [93.0], [96.7], [97.0], [99.0]])
    assert rank_per_dataset(t).ranks[:, 0].tolist() == [5, 4, 3, 2, 1]


def test_rank_ties_and_single_dataset():
    t = ScoreTable(["a", "b", "c"], ["d"], [[90.0], [90.0], [80.0]])
    r = rank_per_dataset(t)
    assert r.ranks[:, 0].tolist() == [1.5, 1.5, 3]
    assert r.avg_rank == {"a": 1.5, "b": 1.5, "c": 3.0}


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_rank_sums_and_monotone_invariance(m, k, seed):
    rng = np.random.default_rng(seed)
    vals = rng.integers(50, 60, (m, k)).astype(float)
    t = ScoreTable([f"m{i}" for i in range(m)], [f"d{j}" for j in range(k)], vals)
    r = rank_per_dataset(t).ranks
    np.testing.assert_allclose(r.sum(axis=0), m * (m + 1) / 2)
    t2 = ScoreTable(t.methods, t.datasets, np.sqrt(vals) * 10)
    np.testing.assert_array_equal(rank_per_dataset(t2).ranks, r)


def test_wilcoxon_examples():
    assert wilcoxon_signed_rank([1, 2, 3], [1, 2, 3]).pvalue == 1.0
    assert wilcoxon_signed_rank([1, 2, 3], [1, 2, 3]).no_signal
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0] * 5)
    assert res.statistic == 0 and res.pvalue == 0.0625 and res.exact


def test_wilcoxon_n15_matches_full_enumeration():
    rng = np.random.default_rng(7)
    x = rng.integers(80, 100, 15).astype(float)
    y = rng.integers(80, 100, 15).astype(float)
    assert wilcoxon_signed_rank(x, y).pvalue == brute_wilcoxon_p(x, y)


def test_wilcoxon_matches_scipy_without_ties():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=12), rng.normal(size=12) + 0.3
    ours = wilcoxon_signed_rank(x, y)
    ref = scipy.stats.wilcoxon(x, y, method="exact")
    assert ours.statistic == ref.statistic
    assert ours.pvalue == pytest.approx(ref.pvalue, rel=1e-12)


def test_wilcoxon_normal_approximation_large_n():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=40), rng.normal(size=40) + 0.2
    ours = wilcoxon_signed_rank(x, y)
    ref = scipy.stats.wilcoxon(x, y, method="approx", correction=False)
    assert not ours.exact
    assert ours.pvalue == pytest.approx(ref.pvalue, rel=1e-9)


def test_wilcoxon_pratt_variant_keeps_zero_ranks():
    x, y = [1.0, 2.0, 3.0, 4.0], [1.0, 1.0, 1.0, 1.0]
    assert wilcoxon_signed_rank(x, y, zero_method="pratt").statistic == 0
    assert wilcoxon_signed_rank(x, y, zero_method="pratt").n == 3
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1], [1, 2])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=10))
def test_wilcoxon_swap_symmetry_and_oracle(pairs):
    x = [float(a) for a, _ in pairs]
    y = [float(b) for _, b in pairs]
    p = wilcoxon_signed_rank(x, y).pvalue
    assert p == wilcoxon_signed_rank(y, x).pvalue
    assert p == brute_wilcoxon_p(x, y)


def test_holm_examples():
    assert holm_adjust([0.01, 0.02, 0.04], 0.05) == [True, True, True]
    assert holm_adjust([1.0, 1.0], 0.05) == [False, False]
    assert holm_adjust([0.04], 0.05) == [True]
    # order restored; stops at first failure
    assert holm_adjust([0.04, 0.001, 0.03], 0.05) == [False, True, False]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(0.001, 0.2))
def test_holm_subset_of_unadjusted(p, alpha):
    for rej, pv in zip(holm_adjust(p, alpha), p):
        if rej:
            assert pv <= alpha


def test_score_table_csv_parsing():
    t = ScoreTable.from_csv("method,a,b\nx,90,80\ny,85,95\n")
    assert t.methods == ["x", "y"] and t.datasets == ["a", "b"]
    assert ScoreTable.from_csv(t.to_csv()).values.tolist() == t.values.tolist()
    with pytest.raises(ScoreTableError, match="line 3"):
        ScoreTable.from_csv("method,a,b\nx,90,80\ny,85\n")
    with pytest.raises(ScoreTableError, match="line 2, column 'b'"):
        ScoreTable.from_csv("method,a,b\nx,90,eighty\n")
    with pytest.raises(ScoreTableError, match="outside"):
        ScoreTable.from_csv("method,a\nx,101\n")


def test_cd_identical_columns_single_bar(tmp_path):
    t = ScoreTable(["a", "b"], ["d1", "d2"], [[90, 80], [90, 80]])
    res = cd_diagram(t, plot=tmp_path / "cd.svg")
    assert res.groups == [["a", "b"]]
    assert (tmp_path / "cd.svg").is_file() and (tmp_path / "cd.json").is_file()


def brute_groups(table, alpha):
    """Independent pipeline: enumerated p-values, Holm by hand, cliques by subset search."""
    m = len(table.methods)
    pairs = list(itertools.combinations(range(m), 2))
    ps = [brute_wilcoxon_p(table.values[i], table.values[j]) for i, j in pairs]
    order = sorted(range(len(ps)), key=lambda k: ps[k])
    reject = set()
    for rank, k in enumerate(order):
        if ps[k] <= alpha / (len(ps) - rank):
            reject.add(pairs[k])
        else:
            break
    ok = {p for p in pairs if p not in reject}
    cliques = [set(c) for size in range(2, m + 1) for c in itertools.combinations(range(m), size)
               if all(p in ok for p in itertools.combinations(c, 2))]
    maximal = [c for c in cliques if not any(c < o for o in cliques)]
    return sorted(sorted(table.methods[i] for i in c) for c in maximal)


def test_cd_separated_pair_against_brute_force():
    rng = np.random.default_rng(0)
    base = rng.uniform(60, 80, 12)
    a = base + 15
    b = base
    c = base + 7.5 + rng.uniform(-6, 6, 12)
    t = ScoreTable(["A", "B", "C"], [f"d{i}" for i in range(12)], np.vstack([a, b, c]))
    res = cd_diagram(t)
    assert not any({"A", "B"} <= set(g) for g in res.groups)
    assert sorted(sorted(g) for g in res.groups) == brute_groups(t, 0.05)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_cd_groups_are_maximal_non_significant_cliques(seed):
    rng = np.random.default_rng(seed)
    m, k = rng.integers(3, 6), rng.integers(4, 9)
    vals = rng.integers(70, 85, (m, k)) + rng.integers(0, 8, (m, 1)) * 2
    t = ScoreTable([f"m{i}" for i in range(m)], [f"d{j}" for j in range(k)], vals.astype(float))
    res = cd_diagram(t)
    sig = {frozenset((a, b)) for a, b, _, rej in res.pairs if rej}
    for g in res.groups:
        assert all(frozenset(p) not in sig for p in itertools.combinations(g, 2))
        assert not any(set(g) < set(o) for o in res.groups)
    assert sorted(sorted(g) for g in res.groups) == brute_groups(t, 0.05)
    assert np.array_equal(res.pvalues, res.pvalues.T) and all(len(e) == 2 for e in res.graph.edges)


def test_cd_needs_two_by_two():
    with pytest.raises(ValueError):
        cd_diagram(ScoreTable(["a", "b"], ["d"], [[1], [2]]))


def test_cd_sidecar_byte_identical(tmp_path):
    t = ScoreTable(["a", "b", "c"], ["d1", "d2", "d3"], [[90, 80, 70], [85, 82, 60], [70, 70, 71]])
    cd_diagram(t, plot=tmp_path / "one.svg")
    cd_diagram(t, plot=tmp_path / "two.svg")
    assert (tmp_path / "one.json").read_bytes() == (tmp_path / "two.json").read_bytes()


def test_boxplot_examples():
    b = boxplot_stats([1, 2, 3, 4, 5])
    assert (b.median, b.q1, b.q3) == (3, 2, 4)
    assert (b.whisker_lo, b.whisker_hi, b.outliers) == (1, 5, ())
    s = boxplot_stats([7.5])
    assert s.median == s.q1 == s.q3 == s.whisker_lo == s.whisker_hi == 7.5
    e = boxplot_stats([2.0] * 4)
    assert e.q1 == e.q3 and e.outliers == ()


def test_boxplot_outliers_and_raw_samples():
    b = boxplot_stats([1, 2, 3, 4, 100])
    assert b.outliers == (100,) and b.whisker_hi == 4 and b.samples == (1, 2, 3, 4, 100)
    with pytest.raises(ValueError):
        boxplot_stats([])
