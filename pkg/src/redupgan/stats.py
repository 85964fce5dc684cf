"""Exact categorical statistics: Fisher's exact test and the exact binomial test.

Both tests follow the classical "sum all outcomes at most as probable as the
observed one" convention for two-sided p-values, and the Fisher odds ratio is
the conditional maximum-likelihood estimate (the root of the conditional
expectation equation for the noncentral hypergeometric distribution), not the
sample cross-product ratio.  All point probabilities are computed through
log-space factorials so large counts do not overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Relative slack when comparing point probabilities against the observed one,
# so ties are not lost to rounding.
_REL_TIE_EPS = 1e-7


class StatsError(ValueError):
    """Invalid input to a statistical routine."""


@dataclass(frozen=True)
class ContingencyTable:
    """2x2 table of counts; rows are conditions, columns (absent, present)."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for name in ("a", "b", "c", "d"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise StatsError(f"cell {name} must be a nonnegative integer, got {v!r}")
        if self.a + self.b + self.c + self.d == 0:
            raise StatsError("contingency table is all zero")

    @property
    def cells(self) -> tuple[int, int, int, int]:
        return (self.a, self.b, self.c, self.d)


@dataclass(frozen=True)
class ContingencyResult:
    p_two_sided: float
    odds_ratio_cmle: float
    sample_or: float


@dataclass(frozen=True)
class BinomResult:
    p_two_sided: float
    estimate: float
    ci_low: float
    ci_high: float


def _log_choose(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _hypergeom_support(table: ContingencyTable) -> tuple[int, int]:
    r1 = table.a + table.b
    r2 = table.c + table.d
    c1 = table.a + table.c
    return max(0, c1 - r2), min(c1, r1)


def _hypergeom_log_pmf(table: ContingencyTable) -> tuple[list[int], list[float]]:
    """Log point probabilities over the fixed-margin support at odds ratio 1."""
    r1 = table.a + table.b
    r2 = table.c + table.d
    c1 = table.a + table.c
    n = r1 + r2
    lo, hi = _hypergeom_support(table)
    denom = _log_choose(n, c1)
    xs = list(range(lo, hi + 1))
    logp = [_log_choose(r1, x) + _log_choose(r2, c1 - x) - denom for x in xs]
    return xs, logp


def _conditional_mean(xs: list[int], logp0: list[float], log_psi: float) -> float:
    """E[X] under the noncentral hypergeometric with log odds ratio log_psi."""
    logw = [lp + x * log_psi for x, lp in zip(xs, logp0)]
    m = max(logw)
    w = [math.exp(lw - m) for lw in logw]
    total = sum(w)
    return sum(x * wx for x, wx in zip(xs, w)) / total


def _odds_ratio_cmle(table: ContingencyTable, tol: float = 1e-10) -> float:
    xs, logp0 = _hypergeom_log_pmf(table)
    lo, hi = xs[0], xs[-1]
    a = table.a
    if lo == hi:
        # Degenerate support: the conditional likelihood does not identify psi.
        return 1.0
    if a == hi:
        return math.inf
    if a == lo:
        return 0.0
    # E[X] is strictly increasing in log psi; bracket then bisect.
    left, right = -1.0, 1.0
    while _conditional_mean(xs, logp0, left) > a:
        left *= 2.0
        if left < -500.0:
            return 0.0
    while _conditional_mean(xs, logp0, right) < a:
        right *= 2.0
        if right > 500.0:
            return math.inf
    for _ in range(200):
        mid = 0.5 * (left + right)
        resid = _conditional_mean(xs, logp0, mid) - a
        if abs(resid) < tol:
            return math.exp(mid)
        if resid < 0:
            left = mid
        else:
            right = mid
    return math.exp(0.5 * (left + right))


def fisher_exact(table: ContingencyTable | tuple | list) -> ContingencyResult:
    """Two-sided Fisher exact test with conditional-MLE odds ratio.

    The p-value sums the hypergeometric point probabilities (at odds ratio 1)
    of every table with the observed margins whose probability does not exceed
    the observed table's.
    """
    t = _as_table(table)
    xs, logp = _hypergeom_log_pmf(t)
    obs = logp[xs.index(t.a)]
    cutoff = obs + math.log1p(_REL_TIE_EPS)
    p = sum(math.exp(lp) for lp in logp if lp <= cutoff)
    p = min(1.0, p)
    if t.b == 0 or t.c == 0:
        sample = math.inf if t.a * t.d > 0 else (0.0 if t.a == 0 or t.d == 0 else math.nan)
    else:
        sample = (t.a * t.d) / (t.b * t.c)
    return ContingencyResult(p_two_sided=p, odds_ratio_cmle=_odds_ratio_cmle(t), sample_or=sample)


def _as_table(table) -> ContingencyTable:
    if isinstance(table, ContingencyTable):
        return table
    rows = list(table)
    if len(rows) == 2 and all(hasattr(r, "__len__") and len(r) == 2 for r in rows):
        return ContingencyTable(rows[0][0], rows[0][1], rows[1][0], rows[1][1])
    if len(rows) == 4:
        return ContingencyTable(*rows)
    raise StatsError(f"expected a 2x2 table, got {table!r}")


def _binom_log_pmf(n: int, p0: float) -> list[float]:
    logp = math.log(p0)
    logq = math.log1p(-p0)
    return [_log_choose(n, k) + k * logp + (n - k) * logq for k in range(n + 1)]


def _binom_upper_tail(k: int, n: int, p: float) -> float:
    """P(X >= k) for X ~ Binomial(n, p)."""
    if k <= 0:
        return 1.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    pmf = _binom_log_pmf(n, p)
    return min(1.0, sum(math.exp(lp) for lp in pmf[k:]))


def _binom_lower_tail(k: int, n: int, p: float) -> float:
    """P(X <= k) for X ~ Binomial(n, p)."""
    if k >= n:
        return 1.0
    if p <= 0.0:
        return 1.0
    if p >= 1.0:
        return 0.0
    pmf = _binom_log_pmf(n, p)
    return min(1.0, sum(math.exp(lp) for lp in pmf[: k + 1]))


def _bisect_tail(tail, target: float, increasing: bool) -> float:
    lo, hi = 0.0, 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        v = tail(mid)
        if abs(v - target) < 1e-12:
            return mid
        if (v < target) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def clopper_pearson(successes: int, trials: int, conf: float = 0.95) -> tuple[float, float]:
    """Exact binomial confidence interval via tail-probability bisection."""
    if trials <= 0:
        raise StatsError("trials must be positive")
    if not 0 <= successes <= trials:
        raise StatsError("successes must lie in [0, trials]")
    alpha = 1.0 - conf
    if successes == 0:
        low = 0.0
    else:
        # P(X >= k | p) is increasing in p; the lower bound solves it = alpha/2.
        low = _bisect_tail(lambda p: _binom_upper_tail(successes, trials, p), alpha / 2, True)
    if successes == trials:
        high = 1.0
    else:
        high = _bisect_tail(lambda p: _binom_lower_tail(successes, trials, p), alpha / 2, False)
    return low, high


def binom_exact(successes: int, trials: int, p0: float) -> BinomResult:
    """Two-sided exact binomial test of rate p0, with Clopper-Pearson 95% CI."""
    if trials <= 0:
        raise StatsError("trials must be positive")
    if not 0 <= successes <= trials:
        raise StatsError("successes must lie in [0, trials]")
    if not 0.0 <= p0 <= 1.0:
        raise StatsError("p0 must lie in [0, 1]")
    est = successes / trials
    low, high = clopper_pearson(successes, trials)
    if p0 == 0.0:
        p = 1.0 if successes == 0 else 0.0
    elif p0 == 1.0:
        p = 1.0 if successes == trials else 0.0
    else:
        pmf = _binom_log_pmf(trials, p0)
        cutoff = pmf[successes] + math.log1p(_REL_TIE_EPS)
        p = min(1.0, sum(math.exp(lp) for lp in pmf if lp <= cutoff))
    return BinomResult(p_two_sided=p, estimate=est, ci_low=low, ci_high=high)


def table_from_annotations(condition_a, condition_b, field: str) -> ContingencyTable:
    """Assemble a 2x2 table from two batches of annotations.

    Rows are the two conditions, columns count (field absent, field present).
    """
    counts = []
    for name, batch in (("condition_a", condition_a), ("condition_b", condition_b)):
        batch = list(batch)
        if not batch:
            raise StatsError(f"{name} is empty")
        present = 0
        for ann in batch:
            if not hasattr(ann, field):
                raise StatsError(f"unknown annotation field {field!r}")
            present += bool(getattr(ann, field))
        counts.append((len(batch) - present, present))
    (a, b), (c, d) = counts
    return ContingencyTable(a, b, c, d)
