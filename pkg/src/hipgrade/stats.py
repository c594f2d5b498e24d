"""Significance tests and pairwise comparison grids.

Paired comparisons use Student's t on the differences, with the
two-sided p-value evaluated through a hand-rolled regularized incomplete
beta (continued fraction, 1e-10 tolerance).  Unpaired comparisons use
the Mann-Whitney U test: exact enumeration of group assignments when the
smaller group has fewer than 8 values, otherwise the tie-corrected
normal approximation with continuity correction.  Multiple comparisons
are Bonferroni-corrected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .utils import atomic_write_text

__all__ = [
    "TTestResult",
    "MannWhitneyResult",
    "ComparisonGrid",
    "paired_t_test",
    "mann_whitney_u",
    "bonferroni",
    "significance_grid",
    "grid_to_csv",
    "render_grid",
    "student_t_two_sided",
]

_BETA_TOL = 1e-10
_MAX_ITER = 500
_EXACT_LIMIT = 500_000  # enumeration cap on C(n+m, min(n, m))


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_TOL:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def _betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, dof: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t."""
    if dof <= 0:
        raise ValueError("degrees of freedom must be positive")
    if not math.isfinite(t):
        return 0.0
    x = dof / (dof + t * t)
    return _betainc(dof / 2.0, 0.5, x)


@dataclass
class TTestResult:
    p_value: float
    statistic: float
    dof: int
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired Student's t-test.

    Zero-variance differences (including a == b elementwise) are
    degenerate: p = 1 is reported with the flag set instead of failing.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length vectors")
    n = a.size
    if n < 2:
        raise ValueError("need at least 2 pairs")
    diff = a - b
    sd = diff.std(ddof=1)
    if sd == 0.0:
        return TTestResult(p_value=1.0, statistic=0.0, dof=n - 1, degenerate=True)
    t = diff.mean() / (sd / math.sqrt(n))
    return TTestResult(p_value=student_t_two_sided(t, n - 1), statistic=float(t), dof=n - 1)


@dataclass
class MannWhitneyResult:
    p_value: float
    u_statistic: float
    method: str  # "exact" or "normal"


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """U for group a: wins over b, ties counting half."""
    wins = (a[:, None] > b[None, :]).sum()
    ties = (a[:, None] == b[None, :]).sum()
    return float(wins) + 0.5 * float(ties)


def _mann_whitney_exact(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    n, total = a.size, a.size + b.size
    u_obs = _u_statistic(a, b)
    le = ge = count = 0
    index_set = range(total)
    for picks in combinations(index_set, n):
        mask = np.zeros(total, dtype=bool)
        mask[list(picks)] = True
        u = _u_statistic(pooled[mask], pooled[~mask])
        count += 1
        if u <= u_obs + 1e-12:
            le += 1
        if u >= u_obs - 1e-12:
            ge += 1
    return min(1.0, 2.0 * min(le, ge) / count)


def _mann_whitney_normal(a: np.ndarray, b: np.ndarray) -> float:
    n, m = a.size, b.size
    total = n + m
    u = _u_statistic(a, b)
    mu = n * m / 2.0
    _, tie_counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float(((tie_counts ** 3) - tie_counts).sum())
    var = n * m / 12.0 * ((total + 1) - tie_term / (total * (total - 1)))
    if var <= 0:
        return 1.0
    z = (abs(u - mu) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return min(1.0, 2.0 * (1.0 - 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))))


def mann_whitney_u(a, b, method: str = "auto") -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test.

    method "auto" enumerates assignments exactly when the smaller group
    has < 8 values and the enumeration stays affordable; otherwise the
    tie-corrected normal approximation with continuity correction.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        small = min(a.size, b.size)
        affordable = math.comb(a.size + b.size, small) <= _EXACT_LIMIT
        method = "exact" if small < 8 and affordable else "normal"
    u = _u_statistic(a, b)
    if method == "exact":
        p = _mann_whitney_exact(a, b)
    else:
        p = _mann_whitney_normal(a, b)
    return MannWhitneyResult(p_value=p, u_statistic=u, method=method)


def bonferroni(pvals, m: int):
    """Multiply each p-value by the comparison count, clamped to 1."""
    if m < 1:
        raise ValueError("comparison count must be >= 1")
    arr = np.asarray(pvals, dtype=float)
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("p-values must lie in [0, 1]")
    corrected = np.minimum(1.0, arr * m)
    return float(corrected) if corrected.ndim == 0 else corrected


@dataclass
class ComparisonGrid:
    """All-pairs corrected p-values between named settings.

    ``pvals`` holds Bonferroni-corrected values (diagonal fixed at 1);
    ``direction[i][j]`` is "greater"/"less" for setting i versus setting
    j when significant at the base level, else "n.s.".  ``alpha`` is the
    equivalent per-comparison threshold base_alpha / m.
    """

    labels: list[str]
    pvals: np.ndarray
    direction: list[list[str]]
    alpha: float
    paired: bool
    degenerate_pairs: list[tuple[str, str]]


def significance_grid(results: dict[str, "np.ndarray"], paired: bool = True,
                      base_alpha: float = 0.05) -> ComparisonGrid:
    """Pairwise tests between every pair of settings, Bonferroni-corrected.

    ``results`` maps setting name to its vector of repeated scores.
    Paired mode runs the paired t-test and requires equal lengths
    (repeats are paired by index); unpaired mode runs Mann-Whitney.
    """
    labels = list(results)
    k = len(labels)
    if k < 2:
        raise ValueError("need at least two settings to compare")
    vectors = {name: np.asarray(v, dtype=float).ravel() for name, v in results.items()}
    if paired:
        lengths = {v.size for v in vectors.values()}
        if len(lengths) != 1:
            raise ValueError(f"paired grids need equal-length vectors, got sizes {sorted(lengths)}")
    m = k * (k - 1) // 2
    pvals = np.ones((k, k))
    direction = [["n.s."] * k for _ in range(k)]
    degenerate = []
    for i, j in combinations(range(k), 2):
        va, vb = vectors[labels[i]], vectors[labels[j]]
        if paired:
            res = paired_t_test(va, vb)
            raw_p = res.p_value
            if res.degenerate:
                degenerate.append((labels[i], labels[j]))
        else:
            raw_p = mann_whitney_u(va, vb).p_value
        corrected = float(bonferroni(raw_p, m))
        pvals[i, j] = pvals[j, i] = corrected
        if corrected < base_alpha:
            hi = va.mean() > vb.mean()
            direction[i][j] = "greater" if hi else "less"
            direction[j][i] = "less" if hi else "greater"
    return ComparisonGrid(labels=labels, pvals=pvals, direction=direction,
                          alpha=base_alpha / m, paired=paired,
                          degenerate_pairs=degenerate)


def grid_to_csv(grid: ComparisonGrid, path) -> None:
    lines = [",".join(["setting"] + grid.labels)]
    for i, name in enumerate(grid.labels):
        row = [name] + [f"{grid.pvals[i, j]:.6g}" for j in range(len(grid.labels))]
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def render_grid(grid: ComparisonGrid) -> str:
    """Human-readable table: > / < for significant directions, n.s. otherwise."""
    marks = {"greater": ">", "less": "<", "n.s.": "n.s."}
    width = max(len(name) for name in grid.labels) + 2
    header = " " * width + "".join(name.rjust(width) for name in grid.labels)
    lines = [header]
    for i, name in enumerate(grid.labels):
        cells = []
        for j in range(len(grid.labels)):
            cells.append(("-" if i == j else marks[grid.direction[i][j]]).rjust(width))
        lines.append(name.ljust(width) + "".join(cells))
    lines.append(f"paired={grid.paired}  per-comparison alpha={grid.alpha:.3g}")
    return "\n".join(lines)
