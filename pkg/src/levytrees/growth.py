"""The psi-consistent family of Galton-Watson real forests and its growth process.

For a branching mechanism ``psi`` and a level ``lam > 0`` write
``u = psi^{-1}(lam)`` and ``q = psi'(u)``.  The forest ``F_lam`` is a
Poisson(``a u``) number of Galton-Watson trees with offspring law ``xi_lam``
and i.i.d. Exp(``q``) edge lengths, pasted at a common root.  Raising the
level from ``mu`` to ``lam`` is done by grafting: Poisson points on the
skeleton, extra trees at branch points and at the root, every grafted tree
being Galton-Watson with the subcritical "red" law ``xi_{mu,lam}``.

All offspring laws are built from the Taylor coefficients of ``psi`` at
``u``.  The Levy-measure part of each coefficient is provided by
``LevyMeasure.taylor_terms`` together with an exact sampler for the part of
the law beyond the tabulated head, so heavy-tailed (stable) laws are sampled
without truncation.

Sampling is lazy by depth: everything beyond ``radius`` is cut and the cut
points are flagged as frontier nodes.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .discrete import OffspringDistribution
from .errors import BudgetExceeded, DomainError
from .mechanism import BranchingMechanism, format_mechanism, parse_mechanism
from .realtree import (
    RealTree,
    append_nodes,
    length_measure_sample,
    nested_hausdorff,
    point_tree,
    spanned_subtree,
    subdivide,
)

__all__ = [
    "LevyFamilyParams",
    "EtaLaw",
    "GraftEvents",
    "GrowthState",
    "xi_lambda",
    "xi_mu_lambda",
    "nu_law",
    "sample_gw_real_forest",
    "sample_forest_batch",
    "black_forest",
    "sample_gw_real_forests",
    "sample_planted_trees",
    "graft_q",
    "graft_q_dual",
    "graft_with_events",
    "grow",
    "levy_forest_approx",
]

HEAD_SIZES = (32, 256, 4096)
TAIL_TARGET = 1e-12


class LevyFamilyParams:
    """Mechanism plus root mass ``a``; derives and caches the offspring laws."""

    def __init__(self, mech: BranchingMechanism, a: float = 1.0):
        if not (a >= 0 and math.isfinite(a)):
            raise DomainError("a must be a finite non-negative number")
        self.mech = mech
        self.a = float(a)
        self._u = {}
        self._laws = {}

    def __repr__(self):
        return f"LevyFamilyParams({format_mechanism(self.mech)!r}, a={self.a})"

    # -- scalar parameters -------------------------------------------------

    def u(self, lam: float) -> float:
        """``psi^{-1}(lam)``."""
        lam = float(lam)
        if lam not in self._u:
            self._u[lam] = self.mech.inverse(lam)
        return self._u[lam]

    def q(self, lam: float) -> float:
        """Edge-length rate ``c_lam = psi'(psi^{-1}(lam))``."""
        return float(self.mech.derivative(self.u(lam), 1))

    def a_lambda(self, lam: float) -> float:
        return self.a * self.u(lam)

    def delta(self, mu: float, lam: float) -> float:
        return self.u(lam) - self.u(mu)

    def red_mean(self, mu: float, lam: float) -> float:
        """Mean of ``xi_{mu,lam}``; below one whenever ``mu < lam``."""
        return 1.0 - self.q(mu) / self.q(lam)

    def _check_pair(self, mu, lam):
        if not (0 <= mu < lam):
            raise DomainError("need 0 <= mu < lambda")

    def _check_level(self, lam):
        if lam < 0:
            raise DomainError("levels are non-negative")
        if self.u(lam) == 0:
            raise DomainError("at lambda = 0 with gamma = 0 the forest is the point tree; no offspring law")

    # -- generating functions ------------------------------------------------

    def phi_lambda(self, lam: float, s):
        """Closed-form generating function ``s + psi((1-s)u) / (u q)``."""
        self._check_level(lam)
        u, q = self.u(lam), self.q(lam)
        s = np.asarray(s, dtype=float)
        return s + self.mech.psi((1 - s) * u) / (u * q)

    def phi_red(self, mu: float, lam: float, s):
        """Generating function of ``xi_{mu,lam}`` through the shifted mechanism."""
        self._check_pair(mu, lam)
        d, q = self.delta(mu, lam), self.q(lam)
        s = np.asarray(s, dtype=float)
        return s + self.mech.psi_shift(self.u(mu), (1 - s) * d) / (d * q)

    # -- laws ----------------------------------------------------------------

    def _taylor_law(self, c, h, l, k_lo, extra, log_norm, name, pgf=None):
        """Law ``k -> (T_k(c, h, l) + extra[k]) / e^log_norm`` for ``k >= k_lo``.

        ``T_k`` are the Levy-measure Taylor terms; ``extra`` carries the atoms
        and quadratic contributions at small ``k``.  The normaliser is passed
        as a logarithm because ``|psi^(l)|`` overflows for large ``l``.
        """
        levy = self.mech.levy
        K = HEAD_SIZES[-1]
        if not levy.is_zero:
            for K in HEAD_SIZES:
                if levy.taylor_tail(c, h, l, K, log_norm) <= TAIL_TARGET:
                    break
            head = levy.taylor_terms(c, h, l, k_lo, K, log_norm)
            tail = levy.taylor_tail(c, h, l, K, log_norm)
        else:
            K = max(extra) if extra else 0
            head = np.zeros(max(K - k_lo + 1, 0))
            tail = 0.0
        probs = np.zeros(max(K, max(extra, default=0)) + 1)
        probs[k_lo: k_lo + len(head)] = head
        for k, v in extra.items():
            if v > 0:
                probs[k] += math.exp(math.log(v) - log_norm)
        sampler = None
        if tail > 0:
            sampler = lambda rng, K=K: levy.sample_taylor_tail(c, h, l, K, rng)  # noqa: E731
        return OffspringDistribution(probs, tail, sampler, pgf=pgf, name=name, tol=1e-9)

    def xi_law(self, lam: float) -> OffspringDistribution:
        """``xi_lam`` as a sampleable law."""
        key = ("xi", float(lam))
        if key not in self._laws:
            self._check_level(lam)
            u, q = self.u(lam), self.q(lam)
            extra = {0: float(lam), 2: self.mech.beta * u * u}
            self._laws[key] = self._taylor_law(
                u, u, 0, 2, extra, math.log(u * q), f"xi[{lam:g}]", pgf=lambda s: self.phi_lambda(lam, s)
            )
        return self._laws[key]

    def red_law(self, mu: float, lam: float) -> OffspringDistribution:
        """``xi_{mu,lam}``, the offspring law of every grafted tree."""
        key = ("red", float(mu), float(lam))
        if key not in self._laws:
            self._check_pair(mu, lam)
            d, q = self.delta(mu, lam), self.q(lam)
            extra = {0: float(lam - mu), 2: self.mech.beta * d * d}
            self._laws[key] = self._taylor_law(
                self.u(lam), d, 0, 2, extra, math.log(d * q), f"red[{mu:g},{lam:g}]", pgf=lambda s: self.phi_red(mu, lam, s)
            )
        return self._laws[key]

    def nu_law(self, mu: float, lam: float, l: int) -> OffspringDistribution:
        """Number of trees grafted at a point with ``l`` children (``l = 1``: skeleton points)."""
        key = ("nu", float(mu), float(lam), int(l))
        if key not in self._laws:
            self._check_pair(mu, lam)
            if l < 1:
                raise DomainError("nu_l needs l >= 1")
            d, ul = self.delta(mu, lam), self.u(lam)
            beta = self.mech.beta
            if l == 1:
                norm = self.q(lam) - self.q(mu)
                log_norm = math.log(norm) if norm > 0 else -math.inf
                extra = {1: 2 * beta * d}
                k_lo = 1
            else:
                log_norm = self.mech.log_abs_derivative(self.u(mu), l)
                extra = {0: 2 * beta} if l == 2 else {}
                k_lo = 0
            if not math.isfinite(log_norm):
                raise DomainError(f"nu_{l} is undefined: its normaliser vanishes")
            self._laws[key] = self._taylor_law(ul, d, l, k_lo, extra, log_norm, f"nu{l}[{mu:g},{lam:g}]")
        return self._laws[key]

    def eta_law(self, mu: float, l: int) -> "EtaLaw":
        key = ("eta", float(mu), int(l))
        if key not in self._laws:
            self._laws[key] = EtaLaw(self.mech, self.u(mu), l)
        return self._laws[key]


# -- pointwise formulas ------------------------------------------------------------


def _log_abs_derivative(mech, c, k):
    if hasattr(mech, "log_abs_derivative"):
        return mech.log_abs_derivative(c, k)
    d = abs(mech.derivative(c, k))
    return math.log(d) if d > 0 else -math.inf


def xi_lambda(params: LevyFamilyParams, lam: float, k: int) -> float:
    """``xi_lam(k)`` straight from the derivatives of ``psi``.

    ``params.mech`` only needs ``inverse`` and ``derivative``, so a shifted
    mechanism can be passed to compare both sides of the shift identity.
    """
    mech = params.mech
    u = mech.inverse(lam)
    if u == 0:
        raise DomainError("xi_0 is degenerate when gamma = 0 (the forest is the point tree)")
    q = mech.derivative(u, 1)
    if k == 0:
        return lam / (u * q)
    if k == 1:
        return 0.0
    lg = (k - 1) * math.log(u) + _log_abs_derivative(mech, u, k) - math.lgamma(k + 1) - math.log(q)
    return math.exp(lg)


def xi_mu_lambda(params: LevyFamilyParams, mu: float, lam: float, k: int) -> float:
    """``xi_{mu,lam}(k)`` from the derivatives of ``psi`` at ``psi^{-1}(lam)``."""
    if not (0 <= mu < lam):
        raise DomainError("need 0 <= mu < lambda")
    mech = params.mech
    ul = mech.inverse(lam)
    d = ul - mech.inverse(mu)
    q = mech.derivative(ul, 1)
    if k == 0:
        return (lam - mu) / (d * q)
    if k == 1:
        return 0.0
    return math.exp((k - 1) * math.log(d) + _log_abs_derivative(mech, ul, k) - math.lgamma(k + 1) - math.log(q))


def nu_law(params: LevyFamilyParams, mu: float, lam: float, l: int) -> OffspringDistribution:
    return params.nu_law(mu, lam, l)


def nu_pointwise(params: LevyFamilyParams, mu: float, lam: float, l: int, k: int) -> float:
    """``nu_l(k)`` from the derivatives of ``psi``."""
    mech = params.mech
    ul, um = mech.inverse(lam), mech.inverse(mu)
    d = ul - um
    if l == 1:
        if k == 0:
            return 0.0
        norm = mech.derivative(ul, 1) - mech.derivative(um, 1)
        return math.exp(k * math.log(d) + _log_abs_derivative(mech, ul, k + 1) - math.lgamma(k + 1)) / norm
    lg = k * math.log(d) + _log_abs_derivative(mech, ul, l + k) - math.lgamma(k + 1) - _log_abs_derivative(mech, um, l)
    return math.exp(lg)


class EtaLaw:
    """Mass ``a_sigma`` of a branch point with ``l`` children.

    An atom at 0 of weight ``2 beta / psi''(c)`` when ``l = 2`` and the
    probability law proportional to ``x**l e^{-c x} Pi(dx)`` otherwise.
    """

    def __init__(self, mech: BranchingMechanism, c: float, l: int):
        if l < 2:
            raise DomainError("eta is defined for branch points (l >= 2)")
        self.mech, self.c, self.l = mech, float(c), int(l)
        log_norm = mech.log_abs_derivative(c, l)
        if not math.isfinite(log_norm):
            raise DomainError("eta_l is undefined: |psi^(l)| vanishes")
        self.log_norm = log_norm
        self.atom = math.exp(math.log(2 * mech.beta) - log_norm) if l == 2 and mech.beta > 0 else 0.0
        self.continuous = self.moment(0)
        if abs(self.atom + self.continuous - 1.0) > 1e-9:
            raise DomainError(f"eta_l has total mass {self.atom + self.continuous!r}")

    def moment(self, j: int) -> float:
        """``E[a_sigma**j]`` restricted to the continuous part (all of it for ``j >= 1``)."""
        if self.mech.levy.is_zero:
            return 0.0
        return math.exp(self.mech.levy.log_moment(self.l + j, self.c) - self.log_norm)

    @property
    def mean(self) -> float:
        return self.moment(1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        out = np.zeros(size)
        cont = rng.random(size) >= self.atom
        m = int(cont.sum())
        if m:
            out[cont] = self.mech.levy.sample_tilted(self.l, self.c, rng, m)
        return out


# -- Galton-Watson real trees ------------------------------------------------------------


@dataclass
class PlantedBatch:
    """Flat node table of a batch of planted trees.

    ``parent[i] < 0`` marks the root edge of tree ``-parent[i] - 1``; otherwise
    it is the index of the parent inside the batch.  Nodes are stored in
    generation order, so parents precede children.
    """

    parent: np.ndarray
    length: np.ndarray
    frontier: np.ndarray
    tree: np.ndarray
    depth: np.ndarray

    @property
    def n(self) -> int:
        return len(self.parent)


def sample_planted_trees(
    law: OffspringDistribution,
    rate: float,
    base_depth,
    rng: np.random.Generator,
    radius: float = math.inf,
    budget: int = 10**6,
) -> PlantedBatch:
    """Independent GW(law) real trees with Exp(rate) edges, planted at the given depths.

    Edges crossing ``radius`` are cut there and their lower end is a
    frontier node.  Raises ``BudgetExceeded`` when more than ``budget``
    nodes would be created.
    """
    base_depth = np.asarray(base_depth, dtype=float).ravel()
    n0 = len(base_depth)
    parents, lengths, fronts, trees, depths = [], [], [], [], []
    act_ids = np.arange(n0)
    act_tree = np.arange(n0)
    par = -1 - act_ids
    pd = base_depth
    total = 0
    while len(par):
        m = len(par)
        if total + m > budget:
            open_lineages = m + int(sum(int(f.sum()) for f in fronts))
            raise BudgetExceeded(f"more than {budget} nodes", partial=total, frontier=open_lineages)
        ln = rng.exponential(1.0 / rate, m)
        d = pd + ln
        cut = d > radius
        if cut.any():
            ln = np.where(cut, radius - pd, ln)
            d = np.where(cut, radius, d)
        ids = total + np.arange(m)
        parents.append(par)
        lengths.append(ln)
        fronts.append(cut)
        trees.append(act_tree)
        depths.append(d)
        total += m
        live = ~cut
        k = law.sample(rng, int(live.sum()))
        par = np.repeat(ids[live], k)
        pd = np.repeat(d[live], k)
        act_tree = np.repeat(act_tree[live], k)
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)  # noqa: E731
    return PlantedBatch(
        cat(parents, np.int64), cat(lengths, float), cat(fronts, bool), cat(trees, np.int64), cat(depths, float)
    )


def _forest_law(params: LevyFamilyParams, lam: float):
    """Offspring law and edge rate of ``F_lam``, or ``None`` for the point forest."""
    if lam < 0:
        raise DomainError("levels are non-negative")
    if params.a == 0 or params.u(lam) == 0:
        return None
    return params.xi_law(lam), params.q(lam)


def sample_forest_batch(
    params: LevyFamilyParams,
    lam: float,
    n: int,
    rng: np.random.Generator,
    radius: float = math.inf,
    budget: int = 10**6,
):
    """``n`` copies of ``F_lam`` as one flat batch of planted trees.

    Returns ``(batch, owner)`` where ``owner[j]`` is the forest holding planted
    tree ``j``; ``batch`` is ``None`` when every forest is the point tree.
    Statistics that only need depths (heights, lineage counts) can be read
    off the batch without building trees.
    """
    law = _forest_law(params, lam)
    if law is None:
        return None, np.zeros(0, dtype=np.int64)
    if params.mech.gamma > 0 and lam == 0 and not math.isfinite(radius):
        raise DomainError("the backbone forest is infinite; give a finite radius")
    xi, rate = law
    roots = rng.poisson(params.a_lambda(lam), n)
    batch = sample_planted_trees(xi, rate, np.zeros(int(roots.sum())), rng, radius, n * budget)
    return batch, np.repeat(np.arange(n), roots)


def sample_gw_real_forests(
    params: LevyFamilyParams,
    lam: float,
    n: int,
    rng: np.random.Generator,
    radius: float = math.inf,
    budget: int = 10**6,
) -> list:
    """``n`` independent copies of ``F_lam`` cut at ``radius``, sampled in one batch.

    ``budget`` is a per-forest allowance: the batch may use ``n * budget`` nodes.
    """
    batch, owner = sample_forest_batch(params, lam, n, rng, radius, budget)
    if batch is None:
        return [point_tree() for _ in range(n)]
    rep = owner[batch.tree]
    order = np.argsort(rep, kind="stable")
    bounds = np.searchsorted(rep[order], np.arange(n + 1))
    local = np.empty(batch.n, dtype=np.int64)
    out = []
    for r in range(n):
        ids = order[bounds[r]: bounds[r + 1]]
        if len(ids) == 0:
            out.append(point_tree())
            continue
        local[ids] = np.arange(1, len(ids) + 1)
        p = batch.parent[ids]
        parent = np.concatenate([[-1], np.where(p < 0, 0, local[np.maximum(p, 0)])])
        out.append(
            RealTree(
                parent,
                np.concatenate([[0.0], batch.length[ids]]),
                None,
                np.concatenate([[False], batch.frontier[ids]]),
                check=False,
            )
        )
    return out


def sample_gw_real_forest(
    params: LevyFamilyParams,
    lam: float,
    rng: np.random.Generator,
    radius: float = math.inf,
    budget: int = 10**6,
) -> RealTree:
    """One copy of ``F_lam``: Poisson(``a psi^{-1}(lam)``) planted GW(``xi_lam``) trees.

    At ``lam = 0`` a supercritical mechanism gives the leafless backbone,
    which needs a finite ``radius``; a critical or subcritical one gives the
    point tree.
    """
    return sample_gw_real_forests(params, lam, 1, rng, radius, budget)[0]


# -- grafting ------------------------------------------------------------------------------


@dataclass
class GraftEvents:
    """What one grafting step did.

    ``site_node`` are node ids in the output tree and ``site_class`` one of
    ``root``, ``branch``, ``point`` (grafting sampler) or ``root``, ``branch``,
    ``S1``, ``S2`` (dual sampler).  ``site_mass`` is the local mass driving the
    Poisson number of trees (``a`` at the root, the Levy jump at ``S1`` sites,
    ``a_sigma`` at branch points under the dual sampler; NaN otherwise).
    """

    mu: float
    lam: float
    skeleton_length: float
    n_points: int = 0
    site_node: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    site_class: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="<U6"))
    site_l: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    site_mass: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_trees: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tree_site: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tree_height: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tree_truncated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    first_new_node: int = 0

    def counts_by_class(self) -> dict:
        return {c: int(self.n_trees[self.site_class == c].sum()) for c in np.unique(self.site_class)}


def _poisson_at_least_one(mean: np.ndarray, rng) -> np.ndarray:
    p0 = np.exp(-mean)
    u = p0 + rng.random(len(mean)) * (1.0 - p0)
    out = stats.poisson.ppf(u, mean)
    return np.maximum(np.nan_to_num(out, nan=1.0, posinf=1.0), 1).astype(np.int64)


def graft_with_events(
    params: LevyFamilyParams,
    tree: RealTree,
    mu: float,
    lam: float,
    rng: np.random.Generator,
    radius: float = math.inf,
    budget: int = 10**6,
    dual: bool = False,
):
    """Apply the grafting operator once and report the sites used.

    Returns ``(new tree, GraftEvents)``.  Node ids and labels of ``tree`` are
    unchanged in the output; new nodes are appended.
    """
    if lam == mu:
        return tree, GraftEvents(mu, lam, tree.total_length, first_new_node=tree.n)
    params._check_pair(mu, lam)
    d = params.delta(mu, lam)
    L = float(tree.total_length)
    nch = tree.n_children
    branch = np.nonzero((nch >= 2) & ~tree.frontier)[0]
    branch = branch[branch != 0]
    l_branch = nch[branch]

    # skeleton points: (edge, offset, class, mass, count)
    pt_class, pt_mass, pt_count = [], [], []
    pts_e, pts_o = [], []
    if dual:
        beta = params.mech.beta
        n2 = rng.poisson(2 * beta * d * L) if L > 0 else 0
        levy = params.mech.levy
        r1 = 0.0 if levy.is_zero else levy.p1_rate(params.u(mu), d)
        n1 = rng.poisson(r1 * L) if L > 0 else 0
        if n1:
            x = levy.sample_p1(params.u(mu), d, rng, n1)
            pt_class += ["S1"] * n1
            pt_mass.append(x)
            pt_count.append(_poisson_at_least_one(d * x, rng))
        if n2:
            pt_class += ["S2"] * n2
            pt_mass.append(np.full(n2, np.nan))
            pt_count.append(np.ones(n2, dtype=np.int64))
        n_pts = n1 + n2
    else:
        rate = params.q(lam) - params.q(mu)
        n_pts = rng.poisson(rate * L) if L > 0 else 0
        if n_pts:
            pt_class += ["point"] * n_pts
            pt_mass.append(np.full(n_pts, np.nan))
            pt_count.append(params.nu_law(mu, lam, 1).sample(rng, n_pts))
    if n_pts:
        pts_e, pts_o = length_measure_sample(tree, rng, size=n_pts)

    # branch points
    br_count = np.zeros(len(branch), dtype=np.int64)
    br_mass = np.full(len(branch), np.nan)
    for l in np.unique(l_branch):
        sel = l_branch == l
        if dual:
            amass = params.eta_law(mu, int(l)).sample(rng, int(sel.sum()))
            br_mass[sel] = amass
            br_count[sel] = rng.poisson(d * amass)
        else:
            br_count[sel] = params.nu_law(mu, lam, int(l)).sample(rng, int(sel.sum()))

    root_count = rng.poisson(params.a * d)

    out, pt_nodes = subdivide(tree, pts_e, pts_o)
    site_node = np.concatenate([[0], branch, pt_nodes]).astype(np.int64)
    site_class = np.array(["root"] + ["branch"] * len(branch) + pt_class, dtype="<U6")
    site_l = np.concatenate([[0], l_branch, np.ones(n_pts, dtype=np.int64)]).astype(np.int64)
    site_mass = np.concatenate([[params.a], br_mass] + pt_mass)
    n_trees = np.concatenate([[root_count], br_count] + pt_count).astype(np.int64)

    tree_site = np.repeat(np.arange(len(site_node)), n_trees)
    base = out.depth[site_node[tree_site]]
    batch = sample_planted_trees(params.red_law(mu, lam), params.q(lam), base, rng, radius, budget)
    n_old = out.n
    parent = np.where(batch.parent < 0, site_node[tree_site[-1 - np.minimum(batch.parent, -1)]], batch.parent + n_old)
    out = append_nodes(out, parent, batch.length, batch.frontier)

    top = np.full(len(tree_site), -np.inf)
    np.maximum.at(top, batch.tree, batch.depth)
    trunc = np.zeros(len(tree_site), dtype=bool)
    np.logical_or.at(trunc, batch.tree, batch.frontier)
    ev = GraftEvents(
        mu,
        lam,
        L,
        int(n_pts),
        site_node,
        site_class,
        site_l,
        site_mass,
        n_trees,
        tree_site,
        top - base,
        trunc,
        first_new_node=tree.n,
    )
    return out, ev


def graft_q(params, tree, mu, lam, rng, radius=math.inf, budget=10**6) -> RealTree:
    """Grow ``tree`` from level ``mu`` to level ``lam``.

    Poisson points on the skeleton at rate ``psi'(psi^{-1}(lam)) -
    psi'(psi^{-1}(mu))`` each receive ``nu_1`` trees, every branch point
    with ``l`` children receives ``nu_l`` trees and the root receives
    Poisson(``a (psi^{-1}(lam) - psi^{-1}(mu))``) trees.  Each grafted tree is
    an independent GW(``xi_{mu,lam}``) real tree with Exp(``psi'(psi^{-1}(lam))``)
    edges.
    """
    return graft_with_events(params, tree, mu, lam, rng, radius, budget)[0]


def graft_q_dual(params, tree, mu, lam, rng, radius=math.inf, budget=10**6) -> RealTree:
    """Same law as ``graft_q``, sampled through local masses.

    Skeleton sites come from two Poisson processes.  Levy jumps ``x`` arrive
    with intensity ``x e^{-c x} Pi(dx)``; only those receiving at least one
    of their Poisson(``Delta x``) trees are generated.  Quadratic sites arrive
    at rate ``2 beta Delta`` with one tree each.  A branch point with ``l``
    children gets a mass from ``eta_{mu,l}`` and Poisson(``Delta`` mass) trees.
    """
    return graft_with_events(params, tree, mu, lam, rng, radius, budget, dual=True)[0]


def black_forest(params: LevyFamilyParams, tree: RealTree, mu: float, lam: float, rng: np.random.Generator) -> RealTree:
    """Colour the leaves of a copy of ``F_lam`` black with probability ``mu / lam`` and keep the black part.

    A frontier node stands for a fresh GW(``xi_lam``) tree cut off at the
    radius; it is black (holds some black leaf) with probability
    ``psi^{-1}(mu) / psi^{-1}(lam)``.  The result is spanned by the root and
    the black nodes, unary nodes merged; it has the law of ``F_mu`` cut at
    the same radius.
    """
    if not (0 <= mu <= lam) or lam <= 0:
        raise DomainError("need 0 <= mu <= lambda and lambda > 0")
    leaf = (tree.n_children == 0) & ~tree.frontier
    leaf[0] = False
    p_front = params.u(mu) / params.u(lam) if params.u(lam) > 0 else 0.0
    x = rng.random(tree.n)
    black = (leaf & (x < mu / lam)) | (tree.frontier & (x < p_front))
    return spanned_subtree(tree, black)


# -- growth process -------------------------------------------------------------------------


def _frontier_thinning_mark(params, mu, lam, u):
    """Level fraction at which a cut-off red subtree gains its first retained leaf.

    A GW(``xi_{mu,lam}``) tree keeps no leaf under thinning with retention
    ``theta`` with probability ``1 - psi_mu^{-1}(theta (lam - mu)) / Delta``,
    so the smallest retention level is ``psi_mu(U Delta) / (lam - mu)``.
    """
    d = params.delta(mu, lam)
    return params.mech.psi_shift(params.u(mu), u * d) / (lam - mu)


@dataclass
class GrowthState:
    """Nested forests on one node table.

    ``birth[v]`` is the index of the first level at which node ``v`` exists;
    ``mark[v]`` is the thinning mark of new leaves and frontier nodes (NaN
    elsewhere).  ``tree`` is the forest at the last level.
    """

    params: LevyFamilyParams
    levels: list
    tree: RealTree
    birth: np.ndarray
    mark: np.ndarray
    radius: float = math.inf
    seed: int | None = None
    budget: int = 10**6
    events: list = field(default_factory=list)

    def level_index(self, lam: float) -> int:
        for i, x in enumerate(self.levels):
            if math.isclose(x, lam, rel_tol=1e-12, abs_tol=1e-15):
                return i
        raise DomainError(f"level {lam} is not stored")

    def tree_at(self, i: int) -> RealTree:
        """Forest at stored level index ``i`` (labels shared with ``self.tree``)."""
        if i == len(self.levels) - 1:
            return self.tree
        keep = self.birth <= i
        return spanned_subtree(self.tree, keep, protect=keep)

    def forest(self, lam: float) -> RealTree:
        """Forest at any level between the first and last stored ones.

        Between stored levels ``l_i < lam < l_{i+1}`` the forest is spanned by
        the level-``l_i`` forest and the new leaves or cut points whose mark is
        at most ``(lam - l_i) / (l_{i+1} - l_i)``.
        """
        lv = self.levels
        if not (lv[0] <= lam <= lv[-1]):
            raise DomainError("level outside the stored range")
        for i, x in enumerate(lv):
            if math.isclose(x, lam, rel_tol=1e-12, abs_tol=1e-15):
                return self.tree_at(i)
        i = int(np.searchsorted(lv, lam)) - 1
        theta = (lam - lv[i]) / (lv[i + 1] - lv[i])
        old = self.birth <= i
        keep = old | ((self.birth == i + 1) & (self.mark <= theta))
        return spanned_subtree(self.tree, keep, protect=old)

    def frontier_count(self, i: int) -> int:
        return int(self.tree_at(i).frontier.sum())

    # -- persistence ---------------------------------------------------------

    def save(self, directory: str) -> None:
        """Write per-level dumps, a node table with births and marks, and a manifest."""
        os.makedirs(directory, exist_ok=True)
        manifest = {
            "mechanism": format_mechanism(self.params.mech),
            "a": self.params.a,
            "levels": [float(x) for x in self.levels],
            "radius": None if not math.isfinite(self.radius) else self.radius,
            "budget": self.budget,
            "seed": self.seed,
            "nodes": int(self.tree.n),
        }
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for i in range(len(self.levels)):
            with open(os.path.join(directory, f"level_{i:03d}.txt"), "w") as fh:
                fh.write(self.tree_at(i).to_dump())
        with open(os.path.join(directory, "marks.tsv"), "w") as fh:
            fh.write("label\tbirth\tmark\n")
            for lab, b, m in zip(self.tree.label, self.birth, self.mark):
                fh.write(f"{int(lab)}\t{int(b)}\t{'' if np.isnan(m) else repr(float(m))}\n")

    @classmethod
    def load(cls, directory: str) -> "GrowthState":
        with open(os.path.join(directory, "manifest.json")) as fh:
            man = json.load(fh)
        params = LevyFamilyParams(parse_mechanism(man["mechanism"]), man["a"])
        last = len(man["levels"]) - 1
        with open(os.path.join(directory, f"level_{last:03d}.txt")) as fh:
            tree = RealTree.from_dump(fh.read())
        birth = np.zeros(tree.n, dtype=np.int64)
        mark = np.full(tree.n, np.nan)
        with open(os.path.join(directory, "marks.tsv")) as fh:
            next(fh)
            for line in fh:
                lab, b, m = line.rstrip("\n").split("\t")
                v = tree.index_of(int(lab))
                birth[v] = int(b)
                mark[v] = float(m) if m else np.nan
        radius = man["radius"] if man["radius"] is not None else math.inf
        return cls(params, man["levels"], tree, birth, mark, radius, man["seed"], man["budget"])


def grow(
    params: LevyFamilyParams,
    T0: RealTree | None,
    levels,
    rng: np.random.Generator,
    radius: float = math.inf,
    budget: int = 10**6,
    seed: int | None = None,
    dual: bool = False,
) -> GrowthState:
    """Iterate the grafting operator along ``levels``.

    ``T0`` is the forest at ``levels[0]``; ``None`` samples it.  New leaves
    receive i.i.d. uniform marks and new cut points the mark of the first
    retained leaf of their cut-off subtree, which is what intermediate levels
    are read from.  ``budget`` bounds the final node count.
    """
    levels = [float(x) for x in levels]
    if not levels or levels[0] < 0 or any(b <= a for a, b in zip(levels, levels[1:])):
        raise DomainError("levels must be strictly increasing and non-negative")
    tree = sample_gw_real_forest(params, levels[0], rng, radius, budget) if T0 is None else T0
    birth = np.zeros(tree.n, dtype=np.int64)
    mark = np.full(tree.n, np.nan)
    state = GrowthState(params, levels, tree, birth, mark, radius, seed, budget)
    for i in range(1, len(levels)):
        mu, lam = levels[i - 1], levels[i]
        try:
            new, ev = graft_with_events(params, state.tree, mu, lam, rng, radius, budget - state.tree.n, dual)
        except BudgetExceeded as exc:
            frontier = int(state.tree.frontier.sum()) + (exc.frontier or 0)
            raise BudgetExceeded(f"budget exhausted growing to level {lam}", partial=state, frontier=frontier) from exc
        n0 = state.tree.n
        fresh = np.arange(n0, new.n)
        nb = np.full(len(fresh), i, dtype=np.int64)
        nm = np.full(len(fresh), np.nan)
        is_leaf = (new.n_children[fresh] == 0) & ~new.frontier[fresh]
        is_cut = new.frontier[fresh]
        nm[is_leaf] = rng.random(int(is_leaf.sum()))
        if is_cut.any():
            nm[is_cut] = _frontier_thinning_mark(params, mu, lam, rng.random(int(is_cut.sum())))
        state.tree = new
        state.birth = np.concatenate([state.birth, nb])
        state.mark = np.concatenate([state.mark, nm])
        state.events.append(ev)
    return state


def levy_forest_approx(
    params: LevyFamilyParams,
    lambda_max: float,
    r: float,
    rng: np.random.Generator,
    budget: int = 10**6,
):
    """``F_{lambda_max}`` in the ball of radius ``r``, grown along dyadic levels.

    Starts from ``F_0`` (the point tree, or the backbone when ``gamma > 0``)
    and grows through ``1, 2, 4, ...`` up to ``lambda_max``.  The diagnostics
    record, for consecutive dyadic levels, the nested Hausdorff distance
    between the two forests in the ball.
    """
    if not params.mech.grey:
        raise DomainError("Grey's condition fails: the limiting tree is not locally compact")
    if not (lambda_max >= 1 and math.isfinite(r) and r > 0):
        raise DomainError("need lambda_max >= 1 and a finite radius r > 0")
    levels = [0.0]
    x = 1.0
    while x < lambda_max:
        levels.append(x)
        x *= 2.0
    levels.append(float(lambda_max))
    state = grow(params, None, levels, rng, r, budget)
    ladder = []
    for i in range(1, len(levels) - 1):
        if levels[i + 1] == 2 * levels[i]:
            xi = nested_hausdorff(state.tree_at(i), state.tree_at(i + 1), r)
            ladder.append((levels[i], levels[i + 1], xi))
    diagnostics = {
        "levels": levels,
        "hausdorff_ladder": ladder,
        "frontier": int(state.tree.frontier.sum()),
        "state": state,
    }
    return state.tree, diagnostics
