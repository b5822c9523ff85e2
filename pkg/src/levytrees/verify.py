"""Statistical plumbing shared by the checks: reports, tests and RNG streams.

Every check returns a :class:`StatReport`.  Reports serialise to CSV rows
with the fixed header :data:`CSV_HEADER`; floats are written with ``repr`` so
identical inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError

ALPHA = 1e-3
CSV_HEADER = ["check-name", "statistic", "estimate", "ci_low", "ci_high", "target", "p_value", "verdict"]


@dataclass(frozen=True)
class StatReport:
    """Outcome of one statistical check."""

    name: str
    statistic: str
    n: int
    estimate: float
    std_error: float = math.nan
    target: float | None = None
    p_value: float | None = None
    verdict: str = "pass"
    ci_low: float | None = None
    ci_high: float | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def row(self) -> list[str]:
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, float):
                return repr(x)
            return str(x)

        return [
            self.name,
            self.statistic,
            fmt(float(self.estimate)),
            fmt(None if self.ci_low is None else float(self.ci_low)),
            fmt(None if self.ci_high is None else float(self.ci_high)),
            fmt(None if self.target is None else float(self.target)),
            fmt(None if self.p_value is None else float(self.p_value)),
            self.verdict,
        ]


def reports_to_csv(reports: Iterable[StatReport]) -> str:
    """Render reports as RFC-4180 CSV text (CRLF line endings, header first)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(CSV_HEADER)
    for rep in reports:
        writer.writerow(rep.row())
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text, newline="")))


def _verdict(p_value, alpha=ALPHA):
    return "pass" if p_value > alpha else "fail"


# ---------------------------------------------------------------------------
# Tests
# ---------------------------------------------------------------------------


def ks_two_sample(xs: Sequence[float], ys: Sequence[float], name: str = "ks", alpha: float = ALPHA) -> StatReport:
    """Two-sample Kolmogorov-Smirnov test with the asymptotic p-value."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 30 or len(ys) < 30:
        raise DomainError("ks_two_sample needs at least 30 observations per sample")
    res = stats.ks_2samp(xs, ys, method="asymp")
    p = float(res.pvalue)
    return StatReport(name, "ks2", len(xs) + len(ys), float(res.statistic), p_value=p, verdict=_verdict(p, alpha))


def ks_one_sample(xs: Sequence[float], cdf: Callable, name: str = "ks", alpha: float = ALPHA) -> StatReport:
    """One-sample Kolmogorov-Smirnov test against a continuous CDF."""
    xs = np.asarray(xs, dtype=float)
    if len(xs) < 30:
        raise DomainError("ks_one_sample needs at least 30 observations")
    res = stats.kstest(xs, cdf, method="asymp")
    p = float(res.pvalue)
    return StatReport(name, "ks1", len(xs), float(res.statistic), p_value=p, verdict=_verdict(p, alpha))


def pool_bins(counts: Sequence[float], expected: Sequence[float], minimum: float = 5.0):
    """Merge adjacent bins from both ends until every expected count reaches ``minimum``.

    Bins are merged left to right: a bin whose running expected count is
    below the minimum is merged into its right neighbour; a short last bin is
    merged into the previous one.
    """
    counts = list(map(float, counts))
    expected = list(map(float, expected))
    out_c, out_e = [], []
    acc_c = acc_e = 0.0
    for c, e in zip(counts, expected):
        acc_c += c
        acc_e += e
        if acc_e >= minimum:
            out_c.append(acc_c)
            out_e.append(acc_e)
            acc_c = acc_e = 0.0
    if acc_e > 0 or acc_c > 0:
        if out_c:
            out_c[-1] += acc_c
            out_e[-1] += acc_e
        else:
            out_c.append(acc_c)
            out_e.append(acc_e)
    return np.array(out_c), np.array(out_e)


def chi_square_gof(
    counts: Sequence[float], probs: Sequence[float], name: str = "chi2", alpha: float = ALPHA, min_expected: float = 5.0
) -> StatReport:
    """Pearson chi-square goodness of fit after pooling sparse bins.

    ``probs`` may sum to less than one when the support is truncated; the
    missing mass is appended as an overflow bin with zero observed count
    unless ``counts`` already has one more entry than ``probs``.
    """
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    n = counts.sum()
    if len(counts) == len(probs) + 1:
        probs = np.append(probs, max(0.0, 1.0 - probs.sum()))
    elif len(counts) != len(probs):
        raise DomainError("counts and probs must have matching lengths")
    probs = probs / probs.sum()
    pc, pe = pool_bins(counts, probs * n, min_expected)
    if len(pc) < 2:
        raise DomainError("fewer than two bins remain after pooling")
    if np.any(pe < min_expected):
        raise DomainError("expected counts below the minimum after pooling")
    res = stats.chisquare(pc, pe)
    p = float(res.pvalue)
    return StatReport(name, "chi2", int(n), float(res.statistic), p_value=p, verdict=_verdict(p, alpha))


def poisson_dispersion(counts: Sequence[int], mean_target: float, name: str = "poisson", alpha: float = ALPHA) -> StatReport:
    """Index-of-dispersion test combined with a z-test of the mean.

    The dispersion statistic ``sum (x - xbar)^2 / xbar`` is referred to a
    chi-square law with ``n - 1`` degrees of freedom (two-sided), the mean to
    a normal law with variance ``mean_target / n``.  The reported p-value is
    the Bonferroni combination ``min(1, 2 min(p_disp, p_mean))``.
    """
    x = np.asarray(counts, dtype=float)
    n = len(x)
    if n < 2:
        raise DomainError("poisson_dispersion needs at least two counts")
    xbar = x.mean()
    if xbar > 0:
        disp = float(((x - xbar) ** 2).sum() / xbar)
        cdf = stats.chi2.cdf(disp, n - 1)
        p_disp = float(2 * min(cdf, 1 - cdf))
    else:
        p_disp = 1.0 if mean_target == 0 else 0.0
    se = math.sqrt(mean_target / n) if mean_target > 0 else 0.0
    if se > 0:
        z = (xbar - mean_target) / se
        p_mean = float(2 * stats.norm.sf(abs(z)))
    else:
        p_mean = 1.0 if xbar == mean_target else 0.0
    p = min(1.0, 2 * min(p_disp, p_mean))
    return StatReport(
        name,
        "poisson-dispersion",
        n,
        float(xbar),
        std_error=se,
        target=float(mean_target),
        p_value=p,
        verdict=_verdict(p, alpha),
        ci_low=float(xbar - 3 * se),
        ci_high=float(xbar + 3 * se),
    )


def z_check(
    estimate: float, std_error: float, target: float, name: str, n: int, bias_bound: float = 0.0, statistic: str = "mean-3sigma"
) -> StatReport:
    """Pass iff ``|estimate - target| <= 3 std_error + bias_bound``.

    The p-value reported is the two-sided normal p-value of the excess over
    the bias bound (1 when the estimate lies inside the bias bracket).
    """
    gap = max(0.0, abs(estimate - target) - bias_bound)
    p = float(2 * stats.norm.sf(gap / std_error)) if std_error > 0 else (1.0 if gap == 0 else 0.0)
    ok = abs(estimate - target) <= 3 * std_error + bias_bound
    return StatReport(
        name,
        statistic,
        n,
        float(estimate),
        std_error=float(std_error),
        target=float(target),
        p_value=p,
        verdict="pass" if ok else "fail",
        ci_low=float(estimate - 3 * std_error),
        ci_high=float(estimate + 3 * std_error),
    )


def mean_check(samples: Sequence[float], target: float, name: str, bias_bound: float = 0.0) -> StatReport:
    x = np.asarray(samples, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.inf
    return z_check(float(x.mean()), se, target, name, len(x), bias_bound)


def proportion_check(successes: int, n: int, target: float, name: str, bias_bound: float = 0.0) -> StatReport:
    """3-sigma binomial check using the target variance ``target (1 - target) / n``."""
    est = successes / n
    se = math.sqrt(max(target * (1 - target), 1e-300) / n)
    return z_check(est, se, target, name, n, bias_bound, statistic="proportion-3sigma")


def exact_check(value: float, target: float, name: str, tol: float, statistic: str = "exact") -> StatReport:
    ok = abs(value - target) <= tol
    return StatReport(
        name, statistic, 1, float(value), std_error=0.0, target=float(target), verdict="pass" if ok else "fail"
    )


def boolean_check(ok: bool, name: str, estimate: float = math.nan, statistic: str = "structural") -> StatReport:
    return StatReport(name, statistic, 1, float(estimate), verdict="pass" if ok else "fail")


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for replicate ``key`` derived from ``master_seed``.

    The stream is a pure function of ``(master_seed, key)``: it is built from
    a :class:`numpy.random.SeedSequence` whose spawn key is ``key``, so it
    does not depend on how many other streams were created before.
    """
    if master_seed is None:
        raise DomainError("a master seed is mandatory")
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def run_replicates(fn: Callable[[int, np.random.Generator], object], n: int, master_seed: int, key=(), workers: int = 1):
    """Evaluate ``fn(k, stream(master_seed, *key, k))`` for ``k < n`` in order.

    With ``workers > 1`` the calls run on a thread pool; results are
    collected in replicate order so the output does not depend on scheduling.
    """
    key = tuple(key)
    if workers <= 1:
        return [fn(k, stream(master_seed, *key, k)) for k in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda k: fn(k, stream(master_seed, *key, k)), range(n)))
