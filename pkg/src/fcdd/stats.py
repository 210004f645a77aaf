"""Comparison of methods across datasets.

Fractional ranks per dataset, exact Wilcoxon signed-rank tests, Holm's step-down
correction, critical-difference diagrams and box-plot summaries.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 25


LITERATURE_CSV = Path(__file__).with_name("resources") / "mvtec_pixel_auc.csv"


class ScoreTableError(ValueError):
    pass


@dataclass
class ScoreTable:
    methods: list[str]
    datasets: list[str]
    values: np.ndarray  # (methods, datasets), ROC-AUC in percent

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.methods), len(self.datasets)):
            raise ScoreTableError(f"values shape {self.values.shape} does not match "
                                  f"{len(self.methods)} methods x {len(self.datasets)} datasets")
        if not np.isfinite(self.values).all():
            raise ScoreTableError("missing or non-finite scores")
        if ((self.values < 0) | (self.values > 100)).any():
            raise ScoreTableError("scores must lie in [0, 100]")
        if len(set(self.methods)) != len(self.methods):
            raise ScoreTableError("duplicate method names")

    @classmethod
    def from_csv(cls, path_or_text: str | Path) -> "ScoreTable":
        """Parse ``method,<dataset>,...`` CSV text or file; errors cite the line number."""
        if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text
                                              and Path(path_or_text).exists()):
            text = Path(path_or_text).read_text(encoding="utf-8")
        else:
            text = str(path_or_text)
        rows = list(csv.reader(io.StringIO(text)))
        rows = [(i + 1, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
        if not rows:
            raise ScoreTableError("empty score table")
        _, header = rows[0]
        header = [h.strip() for h in header]
        if header[0].lower() != "method" or len(header) < 2:
            raise ScoreTableError("line 1: header must start with 'method' followed by dataset names")
        methods, values = [], []
        for lineno, row in rows[1:]:
            if len(row) != len(header):
                raise ScoreTableError(f"line {lineno}: expected {len(header)} cells, found {len(row)}")
            parsed = []
            for col, cell in zip(header[1:], row[1:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise ScoreTableError(f"line {lineno}, column {col!r}: non-numeric value {cell!r}") from None
                if not 0 <= v <= 100:
                    raise ScoreTableError(f"line {lineno}, column {col!r}: value {v} outside [0, 100]")
                parsed.append(v)
            methods.append(row[0].strip())
            values.append(parsed)
        if not methods:
            raise ScoreTableError("score table has no method rows")
        return cls(methods, header[1:], np.array(values))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["method"] + self.datasets)
        for m, row in zip(self.methods, self.values):
            w.writerow([m] + [f"{v:g}" for v in row])
        return out.getvalue()


def literature_table() -> ScoreTable:
    """Bundled MVTec-AD pixel-wise ROC-AUC table (percent) of published methods."""
    return ScoreTable.from_csv(LITERATURE_CSV)


@dataclass
class RankTable:
    methods: list[str]
    datasets: list[str]
    ranks: np.ndarray  # (methods, datasets); 1 = best

    @property
    def avg_rank(self) -> dict[str, float]:
        return dict(zip(self.methods, self.ranks.mean(axis=1).tolist()))


def rank_per_dataset(table: ScoreTable) -> RankTable:
    if table.values.size == 0:
        raise ScoreTableError("empty score table")
    ranks = np.column_stack([rankdata(-col, method="average") for col in table.values.T])
    return RankTable(list(table.methods), list(table.datasets), ranks)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    exact: bool
    no_signal: bool = False


def _signed_ranks(x, y, zero_method: str) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    if zero_method == "wilcox":
        d = d[d != 0]
        r = rankdata(np.abs(d))
    elif zero_method == "pratt":
        r = rankdata(np.abs(d))
        keep = d != 0
        d, r = d[keep], r[keep]
    else:
        raise ValueError(f"unknown zero_method {zero_method!r}")
    return d, r


def signed_rank_null_counts(ranks: np.ndarray) -> dict[int, int]:
    """Number of sign assignments giving each value of 2*W+ (doubled to stay integral)."""
    counts = {0: 1}
    for r in np.rint(2 * np.asarray(ranks)).astype(int):
        nxt: dict[int, int] = {}
        for s, c in counts.items():
            nxt[s] = nxt.get(s, 0) + c
            nxt[s + r] = nxt.get(s + r, 0) + c
        counts = nxt
    return counts


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float], zero_method: str = "wilcox",
                         exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test.

    The statistic is ``min(W+, W-)``. Up to ``exact_max_n`` non-zero differences the
    p-value is the exact fraction of the 2**n sign assignments whose statistic is at
    most the observed one (tied ranks kept as they are); above that, a normal
    approximation with tie-corrected variance is used.
    """
    if len(x) != len(y) or len(x) < 1:
        raise ValueError("x and y must be paired samples of equal, non-zero length")
    d, r = _signed_ranks(x, y, zero_method)
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, True, no_signal=True)
    w_plus = float(r[d > 0].sum())
    w_minus = float(r[d < 0].sum())
    stat = min(w_plus, w_minus)
    total2 = int(round(2 * r.sum()))
    if n <= exact_max_n:
        obs2 = int(round(2 * stat))
        hits = sum(c for s, c in signed_rank_null_counts(r).items() if min(s, total2 - s) <= obs2)
        return WilcoxonResult(stat, min(1.0, hits / 2 ** n), n, True)
    mean = r.sum() / 2
    var = (r ** 2).sum() / 4  # equals n(n+1)(2n+1)/24 - sum(t^3 - t)/48 for the wilcox ranks
    z = (stat - mean) / math.sqrt(var)
    return WilcoxonResult(stat, float(min(1.0, 2 * norm.cdf(z))), n, False)


def holm_adjust(pvalues: Sequence[float], alpha: float = 0.05) -> list[bool]:
    """Holm step-down: reject sorted p(i) while p(i) <= alpha / (m - i + 1)."""
    p = np.asarray(pvalues, dtype=np.float64)
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    m = p.size
    reject = [False] * m
    for i, idx in enumerate(np.argsort(p, kind="stable")):
        if p[idx] <= alpha / (m - i):
            reject[idx] = True
        else:
            break
    return reject


@dataclass
class SignificanceGraph:
    nodes: list[str]
    edges: set[frozenset]  # pairs NOT significantly different
    alpha: float

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(tuple(e) for e in self.edges)
        return g

    def groups(self) -> list[list[str]]:
        """Maximal cliques with at least two members, each sorted by node order."""
        order = {m: i for i, m in enumerate(self.nodes)}
        cliques = [sorted(c, key=order.get) for c in nx.find_cliques(self.to_networkx()) if len(c) > 1]
        return sorted(cliques, key=lambda c: [order[m] for m in c])


@dataclass
class CDResult:
    ranks: RankTable
    graph: SignificanceGraph
    groups: list[list[str]]
    pvalues: np.ndarray  # (methods, methods), 1 on the diagonal
    pairs: list[tuple[str, str, float, bool]]  # (a, b, p, rejected)

    def sidecar(self) -> dict:
        return {
            "alpha": self.graph.alpha,
            "methods": self.ranks.methods,
            "datasets": self.ranks.datasets,
            "avg_rank": self.ranks.avg_rank,
            "pvalues": self.pvalues.tolist(),
            "holm": [{"a": a, "b": b, "p": p, "reject": rej} for a, b, p, rej in self.pairs],
            "groups": self.groups,
        }


def cd_diagram(table: ScoreTable, alpha: float = 0.05, plot: str | Path | None = None) -> CDResult:
    """Ranks, pairwise Wilcoxon-Holm decisions and the non-significance groups.

    When ``plot`` is given, an SVG diagram is written there and the JSON sidecar
    next to it (``.json``).
    """
    m, k = table.values.shape
    if m < 2 or k < 2:
        raise ValueError("a critical-difference diagram needs at least 2 methods and 2 datasets")
    ranks = rank_per_dataset(table)
    pairs = list(itertools.combinations(range(m), 2))
    pv = [wilcoxon_signed_rank(table.values[i], table.values[j]).pvalue for i, j in pairs]
    reject = holm_adjust(pv, alpha)
    pmat = np.ones((m, m))
    edges = set()
    out_pairs = []
    for (i, j), p, rej in zip(pairs, pv, reject):
        pmat[i, j] = pmat[j, i] = p
        a, b = table.methods[i], table.methods[j]
        out_pairs.append((a, b, p, rej))
        if not rej:
            edges.add(frozenset((a, b)))
    graph = SignificanceGraph(list(table.methods), edges, alpha)
    result = CDResult(ranks, graph, graph.groups(), pmat, out_pairs)
    if plot is not None:
        plot = Path(plot)
        plot_cd_diagram(result, plot)
        plot.with_suffix(".json").write_text(json.dumps(result.sidecar(), indent=2, sort_keys=True) + "\n")
    return result


def plot_cd_diagram(result: CDResult, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    avg = result.ranks.avg_rank
    order = sorted(avg, key=lambda name: (avg[name], name))
    m = len(order)
    half = (m + 1) // 2
    fig, ax = plt.subplots(figsize=(8, 1.2 + 0.35 * (half + len(result.groups))))
    lo, hi = 1, max(m, 2)
    ax.set_xlim(lo - 0.3, hi + 0.3)
    ax.set_ylim(-(half + 1.5), 1.2 + 0.25 * len(result.groups))
    ax.hlines(0, lo, hi, color="black", lw=1)
    for t in range(lo, hi + 1):
        ax.vlines(t, 0, 0.12, color="black", lw=1)
        ax.text(t, 0.2, str(t), ha="center", va="bottom", fontsize=8)
    for idx, name in enumerate(order):
        x = avg[name]
        left = idx < half
        level = idx if left else m - 1 - idx
        y = -(level + 1) * 0.9
        xt = lo - 0.2 if left else hi + 0.2
        ax.plot([x, x, xt], [0, y, y], color="black", lw=0.8)
        ax.text(xt, y, f"{name} ({x:.2f})", ha="right" if left else "left", va="center", fontsize=8)
    for g, group in enumerate(result.groups):
        xs = [avg[n] for n in group]
        y = 0.55 + 0.25 * g
        ax.hlines(y, min(xs) - 0.03, max(xs) + 0.03, color="red", lw=3)
    ax.axis("off")
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: tuple[float, ...]
    samples: tuple[float, ...]


def boxplot_stats(samples: Sequence[float]) -> BoxStats:
    """Quartiles by linear interpolation, whiskers at the extreme samples within 1.5 IQR."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("need at least one sample")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    inside = x[(x >= q1 - 1.5 * iqr) & (x <= q3 + 1.5 * iqr)]
    outliers = x[(x < q1 - 1.5 * iqr) | (x > q3 + 1.5 * iqr)]
    return BoxStats(float(med), float(q1), float(q3), float(inside.min()), float(inside.max()),
                    tuple(sorted(outliers.tolist())), tuple(x.tolist()))
