"""Named verification suites shared by the command line and the acceptance tests.

A suite is a list of criteria; a criterion is a function of a
:class:`SuiteConfig` returning :class:`StatReport` rows.  Every random draw
comes from ``stream(seed, criterion id, chunk)`` with a chunk size that does
not depend on the worker count, so a suite's CSV is a pure function of its
configuration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from .discrete import brute_force_identity, sample_all_red
from .errors import DomainError
from .growth import (
    LevyFamilyParams,
    black_forest,
    graft_with_events,
    grow,
    levy_forest_approx,
    sample_forest_batch,
    sample_gw_real_forests,
    sample_planted_trees,
    xi_lambda,
)
from .measures import batch_component_heights, batch_lineage_counts, forest_summary, theta_tail_check
from .realtree import TreePoint, embed_l1, four_point_check, graft, length_measure_sample, segment
from .verify import (
    StatReport,
    boolean_check,
    chi_square_gof,
    exact_check,
    ks_one_sample,
    ks_two_sample,
    poisson_dispersion,
    proportion_check,
    reports_to_csv,
    run_replicates,
    stream,
    z_check,
)

__all__ = ["SuiteConfig", "CRITERIA", "SUITES", "run_suite", "run_criterion"]

CHUNK = 250


@dataclass
class SuiteConfig:
    """Parameters of a suite run.

    ``mu`` and ``lam`` are the pair of levels used by the finite-level
    criteria, ``lambda_max`` the level standing in for the limit.
    """

    params: LevyFamilyParams
    seed: int
    reps: int = 10_000
    workers: int = 1
    mu: float = 1.0
    lam: float = 4.0
    lambda_max: float = 1000.0
    radius: float = 2.0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.seed is None:
            raise DomainError("a master seed is mandatory")
        if self.reps < 100:
            raise DomainError("suites need at least 100 replicates")
        if not (0 < self.mu < self.lam):
            raise DomainError("need 0 < mu < lambda")


def _chunked(cfg: SuiteConfig, key: int, n: int, fn) -> list:
    """``fn(rng, m)`` over chunks of at most ``CHUNK`` replicates, results in chunk order."""
    sizes = [min(CHUNK, n - s) for s in range(0, n, CHUNK)]
    return run_replicates(lambda k, rng: fn(rng, sizes[k]), len(sizes), cfg.seed, (key,), cfg.workers)


def _require_grey(cfg: SuiteConfig):
    if not cfg.params.mech.grey:
        raise DomainError("Grey's condition fails: the limiting forest does not exist")


def _histogram(draws: np.ndarray, kmax: int) -> np.ndarray:
    counts = np.bincount(np.minimum(draws, kmax + 1), minlength=kmax + 2)
    return counts[: kmax + 2]


# -- 1: offspring laws --------------------------------------------------------------------------


def offspring_laws(cfg: SuiteConfig) -> list[StatReport]:
    """Offspring draws of ``xi_lam`` and ``xi_{mu,lam}`` against their masses (chi-square)."""
    p = cfg.params
    n = 10 * cfg.reps
    out = []
    xi = p.xi_law(cfg.lam)
    kmax = 40
    probs = [xi_lambda(p, cfg.lam, k) for k in range(kmax + 1)]
    draws = xi.sample(stream(cfg.seed, 1, 0), n)
    out.append(chi_square_gof(_histogram(draws, kmax), probs, name=f"offspring xi_lambda lam={cfg.lam:g}"))
    red = p.red_law(cfg.mu, cfg.lam)
    draws = red.sample(stream(cfg.seed, 1, 1), n)
    probs = [red.pmf(k) for k in range(kmax + 1)]
    out.append(chi_square_gof(_histogram(draws, kmax), probs, name=f"offspring xi_mu_lambda mu={cfg.mu:g}"))
    # the pointwise masses and the generating function agree at s = 1/2
    half = sum(xi_lambda(p, cfg.lam, k) * 0.5**k for k in range(200))
    out.append(exact_check(half, float(p.phi_lambda(cfg.lam, 0.5)), "offspring pgf(1/2) closed form", 1e-9))
    return out


# -- 2: colouring consistency ---------------------------------------------------------------------


def colouring(cfg: SuiteConfig) -> list[StatReport]:
    """Black part of a coloured ``F_lam`` against a direct ``F_mu``."""
    p, mu, lam = cfg.params, cfg.mu, cfg.lam
    q_mu = p.q(mu)
    # edges starting below radius/2 are censored with probability at most 1e-4
    radius = min(2 * math.log(1e4) / q_mu, cfg.options.get("max_radius", 16.0))

    def summaries(forests):
        roots, heights, edges = [], [], []
        for t in forests:
            roots.append(int(t.n_children[0]))
            heights.append(float(t.height))
            pd = t.depth[t.parent[1:]]
            edges.append(t.length[1:][pd < radius / 2])
        return roots, heights, np.concatenate(edges) if edges else np.zeros(0)

    def coloured(rng, m):
        return summaries(black_forest(p, t, mu, lam, rng) for t in sample_gw_real_forests(p, lam, m, rng, radius))

    def direct(rng, m):
        return summaries(sample_gw_real_forests(p, mu, m, rng, radius))

    def merge(parts):
        return (
            sum((x[0] for x in parts), []),
            sum((x[1] for x in parts), []),
            np.concatenate([x[2] for x in parts]),
        )

    b = merge(_chunked(cfg, 2, cfg.reps, coloured))
    d = merge(_chunked(cfg, 3, cfg.reps, direct))
    target = p.a_lambda(mu)
    cdf = stats.expon(scale=1.0 / q_mu).cdf
    return [
        poisson_dispersion(b[0], target, "colouring root count (black)"),
        poisson_dispersion(d[0], target, "colouring root count (direct)"),
        ks_one_sample(b[2], cdf, "colouring edge length (black) vs Exp"),
        ks_one_sample(d[2], cdf, "colouring edge length (direct) vs Exp"),
        ks_two_sample(b[1], d[1], "colouring height black vs direct"),
    ]


# -- 3: all-red probability -----------------------------------------------------------------------


def all_red(cfg: SuiteConfig) -> list[StatReport]:
    """Fraction of GW(``xi_lam``) trees whose leaves all come out red."""
    p, mu, lam = cfg.params, cfg.mu, cfg.lam
    xi = p.xi_law(lam)
    p_red = 1 - mu / lam

    def chunk(rng, m):
        return sum(sample_all_red(xi, p_red, rng) for _ in range(m))

    hits = sum(_chunked(cfg, 4, cfg.reps, chunk))
    target = 1 - p.u(mu) / p.u(lam)
    return [proportion_check(hits, cfg.reps, target, f"all-red probability mu={mu:g} lam={lam:g}")]


# -- 4: finite-level height law -------------------------------------------------------------------


def finite_height(cfg: SuiteConfig) -> list[StatReport]:
    """``P(h <= t)`` of one GW(``xi_{mu,lam}``) real tree against ``exp(-v_{mu,lam}(t))``."""
    p, mu, lam = cfg.params, cfg.mu, cfg.lam
    ts = cfg.options.get("height_grid", (0.25, 0.5, 1.0))
    law, rate = p.red_law(mu, lam), p.q(lam)

    def chunk(rng, m):
        batch = sample_planted_trees(law, rate, np.zeros(m), rng, 1.01 * max(ts))
        h = np.zeros(m)
        np.maximum.at(h, batch.tree, batch.depth)
        return h

    h = np.concatenate(_chunked(cfg, 5, cfg.reps, chunk))
    out = []
    for t in ts:
        target = math.exp(-p.mech.finite_level_v(mu, lam, t))
        out.append(proportion_check(int(np.count_nonzero(h <= t)), len(h), target, f"finite height t={t:g}"))
    return out


# -- 5: height of the limiting forest --------------------------------------------------------------


def levy_height(cfg: SuiteConfig) -> list[StatReport]:
    """``P(h(F) <= x)`` at ``lambda_max`` against ``exp(-a v(x))`` with the exact finite-level bias."""
    _require_grey(cfg)
    p, lam = cfg.params, cfg.lambda_max
    xs = cfg.options.get("x_grid", (0.5, 1.0, 2.0))

    def chunk(rng, m):
        batch, owner = sample_forest_batch(p, lam, m, rng, 1.01 * max(xs))
        h = np.zeros(m)
        if batch is not None and batch.n:
            np.maximum.at(h, owner[batch.tree], batch.depth)
        return h

    h = np.concatenate(_chunked(cfg, 6, cfg.reps, chunk))
    out = []
    for x in xs:
        limit = math.exp(-p.a * p.mech.grey_v(x))
        finite = math.exp(-p.a * p.mech.csbp_exponent(x, p.u(lam)))
        hits = int(np.count_nonzero(h <= x))
        out.append(proportion_check(hits, len(h), finite, f"forest height x={x:g} (finite level)"))
        out.append(proportion_check(hits, len(h), limit, f"forest height x={x:g} (limit)", bias_bound=abs(finite - limit)))
    return out


# -- 6: CSBP marginal -----------------------------------------------------------------------------


def csbp_marginal(cfg: SuiteConfig) -> list[StatReport]:
    """Laplace transform of the rescaled lineage count ``Z_t / psi^{-1}(lam)``."""
    _require_grey(cfg)
    p, lam = cfg.params, cfg.lambda_max
    pairs = cfg.options.get("csbp_pairs", ((1.0, 1.0), (2.0, 0.5)))
    ts = sorted({t for t, _ in pairs})
    u = p.u(lam)

    def chunk(rng, m):
        batch, owner = sample_forest_batch(p, lam, m, rng, 1.01 * max(ts))
        return np.stack([batch_lineage_counts(batch, owner, m, t) for t in ts], axis=1)

    z = np.concatenate(_chunked(cfg, 7, cfg.reps, chunk))
    out = []
    for t, theta in pairs:
        y = np.exp(-theta * z[:, ts.index(t)] / u)
        est, se = float(y.mean()), float(y.std(ddof=1) / math.sqrt(len(y)))
        limit = math.exp(-p.a * p.mech.csbp_exponent(t, theta))
        finite = math.exp(-p.a * p.mech.csbp_exponent(t, u * -math.expm1(-theta / u)))
        out.append(z_check(est, se, finite, f"csbp t={t:g} theta={theta:g} (finite level)", len(y)))
        out.append(z_check(est, se, limit, f"csbp t={t:g} theta={theta:g} (limit)", len(y), bias_bound=abs(finite - limit)))
    return out


# -- 7: the two grafting samplers ------------------------------------------------------------------


def reference_tree():
    """Fixed three-leaf tree with a branch point off the root edge."""
    y = graft(segment(1.0), [(TreePoint(1, 0.6), segment(0.7)), (TreePoint(1, 0.3), segment(0.5))])
    return graft(y, [(TreePoint(0, 0.0), segment(0.8))])


def dual_sampler(cfg: SuiteConfig) -> list[StatReport]:
    """Grafting through Poisson skeleton points versus through local masses."""
    p, mu, lam = cfg.params, cfg.mu, cfg.lam
    base = reference_tree()
    skeleton = float(base.total_length)
    point_classes = {False: ("point",), True: ("S1", "S2")}

    def run(dual):
        def chunk(rng, m):
            res = {"points": [], "per_point": [], "heights": [], "root": [], "branch2": []}
            for _ in range(m):
                _, ev = graft_with_events(p, base, mu, lam, rng, dual=dual)
                cls = np.asarray(ev.site_class)
                at_point = np.isin(cls, point_classes[dual])
                res["points"].append(int(at_point.sum()))
                res["per_point"].extend(np.asarray(ev.n_trees)[at_point].tolist())
                res["heights"].extend(np.asarray(ev.tree_height).tolist())
                res["root"].append(int(np.asarray(ev.n_trees)[cls == "root"].sum()))
                two = (cls == "branch") & (np.asarray(ev.site_l) == 2)
                res["branch2"].extend(np.asarray(ev.n_trees)[two].tolist())
            return res

        parts = _chunked(cfg, 8 + int(dual), cfg.reps, chunk)
        return {k: sum((x[k] for x in parts), []) for k in parts[0]}

    out = []
    rate = (p.q(lam) - p.q(mu)) * skeleton
    nu1, nu2 = p.nu_law(mu, lam, 1), p.nu_law(mu, lam, 2)
    kmax = 30
    runs = {"graft": run(False), "dual": run(True)}
    for name, res in runs.items():
        out.append(poisson_dispersion(res["points"], rate, f"dual: skeleton points ({name})"))
        counts = np.bincount(np.minimum(res["per_point"], kmax + 1), minlength=kmax + 2)[1:]
        probs = [nu1.pmf(k) for k in range(1, kmax + 1)]
        out.append(chi_square_gof(counts, probs, name=f"dual: trees per point vs nu_1 ({name})"))
        out.append(poisson_dispersion(res["root"], p.a * p.delta(mu, lam), f"dual: trees at the root ({name})"))
        counts = np.bincount(np.minimum(res["branch2"], kmax + 1), minlength=kmax + 2)
        probs = [nu2.pmf(k) for k in range(kmax + 1)]
        out.append(chi_square_gof(counts, probs, name=f"dual: trees at the branch point vs nu_2 ({name})"))
    out.append(ks_two_sample(runs["graft"]["heights"], runs["dual"]["heights"], "dual: grafted heights"))
    return out


# -- 8: semigroup ---------------------------------------------------------------------------------


def semigroup(cfg: SuiteConfig) -> list[StatReport]:
    """Growing through an intermediate level changes nothing in law."""
    p, mu, lam, r = cfg.params, cfg.mu, cfg.lam, cfg.radius

    def run(levels, key):
        def chunk(rng, m):
            return [forest_summary(grow(p, None, levels, rng, r).tree, r) for _ in range(m)]

        return sum(_chunked(cfg, key, cfg.reps, chunk), [])

    two = run([0.0, mu, lam], 10)
    one = run([0.0, lam], 11)
    return [
        ks_two_sample([s[k] for s in two], [s[k] for s in one], f"semigroup {k}")
        for k in ("root_count", "leaf_count", "total_length", "height")
    ]


# -- 9: excursions at the root ---------------------------------------------------------------------


def excursions(cfg: SuiteConfig) -> list[StatReport]:
    """Root components higher than ``x`` are Poisson(``a v(x)``); the root mass is recoverable."""
    _require_grey(cfg)
    xs = cfg.options.get("x_grid", (0.5, 1.0, 2.0))
    eps = cfg.options.get("eps", 0.05)
    return theta_tail_check(cfg.params, cfg.lambda_max, xs, cfg.reps, stream(cfg.seed, 12), eps=eps)


# -- 10: metric invariants --------------------------------------------------------------------------


def metric(cfg: SuiteConfig) -> list[StatReport]:
    """l1 embedding, four-point condition and the dyadic Hausdorff ladder."""
    _require_grey(cfg)
    p = cfg.params
    rng = stream(cfg.seed, 13, 0)
    tree = max(sample_gw_real_forests(p, 100.0, 20, rng, 1.0), key=lambda t: t.n)
    emb = embed_l1(tree)
    e1, o1 = length_measure_sample(tree, rng, 1000)
    e2, o2 = length_measure_sample(tree, rng, 1000)
    d_tree = tree.point_distances(e1, o1, e2, o2)
    d_emb = np.array([emb.l1(emb(TreePoint(a, b)), emb(TreePoint(c, d))) for a, b, c, d in zip(e1, o1, e2, o2)])
    out = [
        exact_check(float(np.max(np.abs(d_tree - d_emb))), 0.0, "l1 embedding isometry residual", 1e-12),
        boolean_check(four_point_check(tree, 10_000, rng), "four-point condition on 10^4 quadruples"),
    ]
    lo, hi = cfg.options.get("ladder", (32.0, 2048.0))
    n_ladder = cfg.options.get("ladder_reps", 200)
    r = cfg.options.get("ladder_radius", 1.0)

    def chunk(rng, m):
        rows = []
        for _ in range(m):
            _, diag = levy_forest_approx(p, hi, r, rng)
            rows.append([xi for mu, _, xi in diag["hausdorff_ladder"] if mu >= lo])
        return rows

    ladder = np.array(sum(_chunked(cfg, 14, n_ladder, chunk), []))
    med = np.median(ladder, axis=0)
    ok = bool(np.all(np.diff(med) < 0))
    out.append(boolean_check(ok, f"Hausdorff ladder medians decrease from mu={lo:g}", float(med[-1]), "median-monotone"))
    return out


# -- 11: exhaustive small trees ------------------------------------------------------------------------


BRUTE_FORCE_CASES = (
    ((Fraction(1, 2), 0, Fraction(1, 2)), Fraction(3, 4), Fraction(1, 2)),
    ((Fraction(1, 3), 0, Fraction(2, 3)), Fraction(5, 8), Fraction(1, 4)),
)


def brute_force(cfg: SuiteConfig) -> list[StatReport]:
    """Colouring and reconstruction laws on every tree with at most six nodes, in exact arithmetic."""
    out = []
    for probs, pr, g in BRUTE_FORCE_CASES:
        rows = brute_force_identity(list(probs), pr, g, max_nodes=6)
        bad = sum(lhs != rhs for _, lhs, rhs in rows)
        name = f"brute force xi={'/'.join(str(x) for x in probs)} p={pr}"
        out.append(StatReport(name, "exact-rational", len(rows), float(bad), target=0.0, verdict="pass" if rows and not bad else "fail"))
    return out


# -- 12: determinism ------------------------------------------------------------------------------------


def determinism(cfg: SuiteConfig) -> list[StatReport]:
    """Two runs of the law checks with the same seed give the same CSV bytes."""
    small = SuiteConfig(cfg.params, cfg.seed, max(100, cfg.reps // 10), cfg.workers, cfg.mu, cfg.lam)
    first = reports_to_csv(run_suite("laws", small))
    second = reports_to_csv(run_suite("laws", small))
    return [boolean_check(first == second, "determinism: identical CSV bytes", float(len(first)))]


CRITERIA = {
    1: offspring_laws,
    2: colouring,
    3: all_red,
    4: finite_height,
    5: levy_height,
    6: csbp_marginal,
    7: dual_sampler,
    8: semigroup,
    9: excursions,
    10: metric,
    11: brute_force,
    12: determinism,
}

SUITES = {
    "laws": (1, 3, 4, 11),
    "colouring": (2,),
    "levy": (5, 6, 9),
    "dual": (7,),
    "semigroup": (8,),
    "metric": (10,),
    "determinism": (12,),
    "all": tuple(range(1, 13)),
}


def run_criterion(number: int, cfg: SuiteConfig) -> list[StatReport]:
    return CRITERIA[number](cfg)


def run_suite(name: str, cfg: SuiteConfig) -> list[StatReport]:
    """Reports of every criterion in the named suite, in criterion order."""
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; known: {', '.join(SUITES)}")
    out = []
    for number in SUITES[name]:
        out.extend(CRITERIA[number](cfg))
    return out
