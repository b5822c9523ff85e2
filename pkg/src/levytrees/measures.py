"""Leaf measures, excursions at the root and the decomposition along a lower level.

Every function works on finished trees or growth states and only reads them.
Quantities that would be biased by the radius cut (leaf counts, heights
beyond the cut) are restricted to the certified region inside the cut.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .growth import GrowthState, LevyFamilyParams, PlantedBatch, grow, sample_forest_batch, sample_gw_real_forests
from .realtree import RealTree
from .verify import (
    StatReport,
    boolean_check,
    ks_two_sample,
    poisson_dispersion,
    stream,
    z_check,
)

__all__ = [
    "LeafMeasure",
    "ExcursionComponent",
    "DecompositionReport",
    "forest_summary",
    "leaf_measure",
    "poisson_resample_check",
    "excursion_components",
    "component_heights",
    "theta_tail_check",
    "decompose_at_level",
    "finite_tail_mass",
    "batch_component_heights",
    "batch_lineage_counts",
    "forest_tail_counts",
]


# -- summaries --------------------------------------------------------------------


def forest_summary(tree: RealTree, r: float = math.inf) -> dict:
    """Root degree, leaf count, total length and height of the forest inside ``B(rho, r)``.

    Leaves are non-frontier nodes without children at depth at most ``r``.
    """
    d = tree.depth
    par = tree.parent[1:]
    dp = d[par]
    seg = np.clip(np.minimum(d[1:], r) - dp, 0.0, None)
    leaves = (tree.n_children == 0) & ~tree.frontier & (d <= r)
    leaves[0] = False
    return {
        "root_count": int(tree.n_children[0]),
        "leaf_count": int(leaves.sum()),
        "total_length": float(seg.sum()),
        "height": float(min(tree.height, r)),
    }


# -- leaf measure --------------------------------------------------------------------


@dataclass
class LeafMeasure:
    """Atoms of weight ``1/lam`` at the leaves born after the first level."""

    lam: float
    radius: float
    nodes: np.ndarray
    labels: np.ndarray
    depth: np.ndarray

    @property
    def weight(self) -> float:
        return 1.0 / self.lam

    @property
    def n_atoms(self) -> int:
        return len(self.nodes)

    @property
    def total_mass(self) -> float:
        return self.n_atoms / self.lam

    def mass_in_ball(self, r: float) -> float:
        if r > self.radius:
            raise DomainError("the measure was restricted to a smaller ball")
        return int(np.count_nonzero(self.depth <= r)) / self.lam


def leaf_measure(state: GrowthState, lam: float, r: float) -> LeafMeasure:
    """``m_lam / lam`` restricted to ``B(rho, r)``.

    Only leaves absent from the first stored level count.  ``r`` may not
    exceed the cut radius of the state: beyond it leaves are unknown.
    """
    if r > state.radius:
        raise DomainError("ball reaches beyond the certified region (frontier contamination)")
    if lam <= 0:
        raise DomainError("the leaf measure needs lambda > 0")
    tree = state.forest(lam)
    idx = np.array([state.tree.index_of(int(l)) for l in tree.label], dtype=np.int64)
    born_late = state.birth[idx] > 0
    leaf = (tree.n_children == 0) & ~tree.frontier & born_late & (tree.depth <= r)
    leaf[0] = False
    nodes = np.nonzero(leaf)[0]
    return LeafMeasure(float(lam), float(r), nodes, tree.label[nodes], tree.depth[nodes])


def poisson_resample_check(
    params: LevyFamilyParams,
    lambda_big: float,
    lambda_small: float,
    n_rep: int,
    seed: int,
    radius: float = 1.0,
) -> list[StatReport]:
    """Thinning the leaves of ``F_Lambda`` with retention ``lam / Lambda`` gives ``F_lam``.

    The thinned forest is read from a growth state over ``[0, Lambda]``;
    the comparison sample is drawn directly at ``lam``.  Reports: root count
    against Poisson(``a psi^{-1}(lam)``) for both samples, then KS tests on
    leaf count, height and total length in the ball.
    """
    if lambda_small > lambda_big:
        raise DomainError("need lambda_small <= lambda_big")
    thinned = []
    for k in range(n_rep):
        rng = stream(seed, 1, k)
        state = grow(params, None, [0.0, lambda_big], rng, radius)
        thinned.append(forest_summary(state.forest(lambda_small), radius))
    direct = [forest_summary(t, radius) for t in sample_gw_real_forests(params, lambda_small, n_rep, stream(seed, 2), radius)]
    target = params.a_lambda(lambda_small)
    reps = [
        poisson_dispersion([s["root_count"] for s in thinned], target, "resample root count (thinned)"),
        poisson_dispersion([s["root_count"] for s in direct], target, "resample root count (direct)"),
    ]
    for key in ("leaf_count", "height", "total_length"):
        reps.append(ks_two_sample([s[key] for s in thinned], [s[key] for s in direct], f"resample {key}"))
    return reps


# -- excursions at the root ------------------------------------------------------------


@dataclass
class ExcursionComponent:
    """One subtree hanging off the root, re-rooted at the root."""

    attach: int
    tree: RealTree
    height: float
    truncated: bool


def _top_ancestor(tree: RealTree) -> np.ndarray:
    """For every non-root node the child of the root above it (``-1`` at the root)."""
    top = np.full(tree.n, -1, dtype=np.int64)
    order = tree.order
    hops = tree.hops[order]
    bounds = np.searchsorted(hops, np.arange(hops[-1] + 2))
    for g in range(1, int(hops[-1]) + 1):
        nodes = order[bounds[g]: bounds[g + 1]]
        top[nodes] = nodes if g == 1 else top[tree.parent[nodes]]
    return top


def component_heights(tree: RealTree) -> tuple[np.ndarray, np.ndarray]:
    """Heights of the root components and whether each one reaches the cut."""
    kids = np.nonzero(tree.parent == 0)[0]
    if len(kids) == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    top = _top_ancestor(tree)
    trunc = np.zeros(tree.n, dtype=bool)
    np.logical_or.at(trunc, top[1:], tree.frontier[1:])
    return tree.subtree_max_depth[kids], trunc[kids]


def excursion_components(tree: RealTree) -> list[ExcursionComponent]:
    """Connected components of the forest minus its root, each with the root put back."""
    kids = np.nonzero(tree.parent == 0)[0]
    if len(kids) == 0:
        return []
    top = _top_ancestor(tree)
    out = []
    for c in kids:
        ids = np.concatenate([[0], np.nonzero(top == c)[0]])
        index = np.full(tree.n, -1, dtype=np.int64)
        index[ids] = np.arange(len(ids))
        parent = np.concatenate([[-1], index[tree.parent[ids[1:]]]])
        sub = RealTree(parent, tree.length[ids], tree.label[ids], tree.frontier[ids], check=False)
        out.append(ExcursionComponent(0, sub, float(sub.height), bool(sub.frontier.any())))
    return out


def finite_tail_mass(params: LevyFamilyParams, lam: float, x: float) -> float:
    """Mean number of components of ``F_lam`` higher than ``x``: ``a u(x, psi^{-1}(lam))``."""
    return params.a * params.mech.csbp_exponent(x, params.u(lam))


def batch_component_heights(batch: PlantedBatch) -> np.ndarray:
    """Height of every planted tree of a batch (cut at the batch radius)."""
    n_trees = int(batch.tree.max()) + 1 if batch.n else 0
    h = np.zeros(n_trees)
    np.maximum.at(h, batch.tree, batch.depth)
    return h


def batch_lineage_counts(batch: PlantedBatch, owner: np.ndarray, n: int, t: float) -> np.ndarray:
    """``Z_t`` per forest: the number of edges crossing depth ``t``."""
    if batch is None or batch.n == 0:
        return np.zeros(n, dtype=np.int64)
    pd = batch.depth - batch.length
    cross = (pd < t) & (batch.depth >= t)
    return np.bincount(owner[batch.tree[cross]], minlength=n)


def forest_tail_counts(params, lam, x_grid, n_rep, rng, radius, chunk=100) -> np.ndarray:
    """Counts of root components of ``F_lam`` higher than each ``x``; shape ``(n_rep, len(x_grid))``.

    Forests are drawn in chunks of ``chunk`` so memory stays bounded at high levels.
    """
    xs = np.asarray(x_grid, dtype=float)
    if radius <= xs.max():
        raise DomainError("the cut radius must exceed every height threshold")
    out = np.zeros((n_rep, len(xs)), dtype=np.int64)
    for start in range(0, n_rep, chunk):
        m = min(chunk, n_rep - start)
        batch, owner = sample_forest_batch(params, lam, m, rng, radius)
        if batch is None or batch.n == 0:
            continue
        h = batch_component_heights(batch)
        for j, x in enumerate(xs):
            out[start: start + m, j] = np.bincount(owner[h > x], minlength=m)
    return out


def theta_tail_check(
    params: LevyFamilyParams,
    lambda_max: float,
    x_grid,
    n_rep: int,
    rng: np.random.Generator,
    eps: float | None = None,
) -> list[StatReport]:
    """Counts of root components higher than ``x`` against Poisson(``a v(x)``).

    For every ``x``: a dispersion test against the exact finite-level mean and
    a mean check against ``a v(x)`` whose bias allowance is the exact gap
    between the finite level and the limit.  With ``eps`` the root mass is
    also recovered as the count above ``eps`` divided by its exact
    finite-level mean per unit mass.
    """
    mech = params.mech
    if not mech.grey:
        raise DomainError("Grey's condition fails: component heights have no finite tail")
    xs = [float(x) for x in x_grid] + ([float(eps)] if eps is not None else [])
    counts_all = forest_tail_counts(params, lambda_max, xs, n_rep, rng, 1.01 * max(xs))
    reports = []
    for j, x in enumerate(x_grid):
        counts = counts_all[:, j]
        finite = finite_tail_mass(params, lambda_max, x)
        limit = params.a * mech.grey_v(x)
        reports.append(poisson_dispersion(counts, finite, f"theta tail dispersion x={x:g}"))
        reports.append(
            z_check(
                counts.mean(),
                counts.std(ddof=1) / math.sqrt(n_rep),
                limit,
                f"theta tail mean x={x:g}",
                n_rep,
                bias_bound=abs(finite - limit),
            )
        )
    if eps is not None and params.a > 0:
        per_mass = mech.csbp_exponent(eps, params.u(lambda_max))
        est = counts_all[:, -1] / per_mass
        reports.append(z_check(est.mean(), est.std(ddof=1) / math.sqrt(n_rep), params.a, f"root mass recovery eps={eps:g}", n_rep))
    return reports


# -- decomposition along a lower level --------------------------------------------------------


@dataclass
class DecompositionReport:
    """Grafting sites of ``F_lam`` outside ``F_mu0`` grouped by class.

    ``sites[cls]`` lists, per site, ``(node label, number of components,
    number above eps, estimated local mass, children in F_mu0)``.  The root
    and every branch point appear even without components; skeleton points
    exist only where something was grafted.  ``per_mass`` is the exact
    finite-level mean number of components above ``eps`` per unit of local
    mass; ``warnings`` names classes whose expected counts are too small for
    a meaningful estimate.
    """

    mu0: float
    lam: float
    eps: float
    per_mass: float
    skeleton_length: float
    sites: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def count_above(self, cls: str) -> int:
        return int(sum(s[2] for s in self.sites.get(cls, [])))

    def n_sites(self, cls: str) -> int:
        return len(self.sites.get(cls, []))

    def root_mass(self) -> float:
        return self.count_above("root") / self.per_mass

    def reports(self, params: LevyFamilyParams) -> list[StatReport]:
        """Structural checks available from a single decomposition."""
        out = []
        out.append(boolean_check(self.n_sites("root") == 1, "decomposition: exactly one root site"))
        if params.mech.levy.is_zero:
            out.append(boolean_check(self.n_sites("S1") == 0, "decomposition: no jump sites without Levy measure"))
        if self.n_sites("S2"):
            ok = all(s[1] == 1 for s in self.sites["S2"])
            out.append(boolean_check(ok, "decomposition: one component per quadratic site"))
        return out


def _classify_sites(state: GrowthState) -> dict:
    """Final-tree node id -> (class, local mass) for every site used while growing."""
    out = {}
    for ev in state.events:
        for node, cls, mass in zip(ev.site_node, ev.site_class, ev.site_mass):
            if int(node) != 0 and str(cls) in ("point", "S1", "S2"):
                out[int(node)] = (str(cls), float(mass))
    return out


def decompose_at_level(state: GrowthState, mu0: float, lam: float, eps: float) -> DecompositionReport:
    """Sites of ``F_lam`` on ``F_mu0`` and the components hanging from them.

    Classes: ``root``; ``branch`` for branch points of ``F_mu0``; skeleton
    points take the class recorded by the sampler that created them (``S1``
    Levy jump, ``S2`` quadratic for the dual sampler, ``point`` otherwise).
    The local mass of a site is estimated as its number of components higher
    than ``eps`` divided by ``per_mass``, the exact finite-level mean of that
    count per unit of mass.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    i0, i1 = state.level_index(mu0), state.level_index(lam)
    if i0 >= i1:
        raise DomainError("need mu0 < lambda among the stored levels")
    params = state.params
    if eps >= state.radius:
        raise DomainError("eps must stay inside the certified radius")
    full = state.tree
    tree = state.tree_at(i1)
    ids = np.array([full.index_of(int(l)) for l in tree.label], dtype=np.int64)
    old = state.birth[ids] <= i0
    on_old = old.copy()
    order, hops = tree.order, tree.hops[tree.order]
    bounds = np.searchsorted(hops, np.arange(hops[-1] + 2))
    for g in range(int(hops[-1]), 0, -1):
        nodes = order[bounds[g]: bounds[g + 1]]
        on_old[tree.parent[nodes[on_old[nodes]]]] = True
    roots = np.nonzero(~on_old)[0]
    roots = roots[on_old[tree.parent[roots]]]
    site_of = tree.parent[roots]
    height = tree.subtree_max_depth[roots] - tree.depth[site_of]
    # a component cut by the radius is higher than eps when the cut lies above eps
    classes = _classify_sites(state)
    d = params.delta(mu0, lam)
    per_mass = d * -math.expm1(-params.mech.finite_level_v(mu0, lam, eps))
    old_tree = state.tree_at(i0)
    skeleton = float(old_tree.total_length)
    sites = {}
    for s in np.unique(site_of):
        sel = site_of == s
        n_above = int(np.count_nonzero(height[sel] > eps))
        if s == 0:
            cls = "root"
        elif old[s]:
            cls = "branch"
        else:
            cls = classes.get(int(ids[s]), ("point", math.nan))[0]
        lab = int(tree.label[s])
        l = int(old_tree.n_children[old_tree.index_of(lab)]) if old[s] else 1
        sites.setdefault(cls, []).append((lab, int(sel.sum()), n_above, n_above / per_mass, l))
    # branch points and the root receive no components with positive probability;
    # list them anyway so sums over sites are unbiased
    seen = {x[0] for v in sites.values() for x in v}
    kids = old_tree.n_children
    for j in range(old_tree.n):
        lab = int(old_tree.label[j])
        if lab in seen:
            continue
        if j == 0:
            sites.setdefault("root", []).append((lab, 0, 0, 0.0, int(kids[0])))
        elif kids[j] >= 2 and not old_tree.frontier[j]:
            sites.setdefault("branch", []).append((lab, 0, 0, 0.0, int(kids[j])))
    rep = DecompositionReport(mu0, lam, eps, per_mass, skeleton, sites)
    if params.a * per_mass < 5:
        rep.warnings.append("root")
    if 2 * params.mech.beta * per_mass * skeleton < 5:
        rep.warnings.append("S2")
    return rep
