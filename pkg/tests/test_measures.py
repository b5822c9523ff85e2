import math

import numpy as np
import pytest

from levytrees.errors import DomainError
from levytrees.growth import LevyFamilyParams, grow, sample_forest_batch, sample_gw_real_forests
from levytrees.mechanism import parse_mechanism
from levytrees.measures import (
    batch_component_heights,
    batch_lineage_counts,
    forest_tail_counts,
    component_heights,
    decompose_at_level,
    excursion_components,
    finite_tail_mass,
    forest_summary,
    leaf_measure,
    poisson_resample_check,
    theta_tail_check,
)
from levytrees.realtree import TreePoint, graft, point_tree, segment
from levytrees.verify import poisson_dispersion, stream, z_check

BROWNIAN = "kind=quadratic beta=0.5"
MIXED = "kind=stable index=1.5 beta=0.3 alpha=0.2"
SUPER = "kind=quadratic alpha=-1 beta=1"


def family(spec, a=1.0):
    return LevyFamilyParams(parse_mechanism(spec), a)


def three_components():
    y = graft(segment(2.0), [(TreePoint(1, 1.0), segment(1.5))])
    return graft(y, [(TreePoint(0, 0.0), segment(0.5)), (TreePoint(0, 0.0), segment(3.0))])


def test_forest_summary_example():
    t = three_components()
    s = forest_summary(t)
    assert s == {"root_count": 3, "leaf_count": 4, "total_length": 7.0, "height": 3.0}
    s = forest_summary(t, r=1.2)
    assert s["leaf_count"] == 1 and s["total_length"] == pytest.approx(1.2 + 0.2 + 0.5 + 1.2)
    assert s["height"] == 1.2


def test_excursion_components_examples():
    assert excursion_components(point_tree()) == []
    comps = excursion_components(three_components())
    assert sorted(c.height for c in comps) == [0.5, 2.5, 3.0]
    assert all(c.tree.n_children[0] == 1 for c in comps)
    h, trunc = component_heights(three_components())
    assert sorted(h) == [0.5, 2.5, 3.0] and not trunc.any()


def test_component_count_is_poisson():
    f = family(BROWNIAN)
    forests = sample_gw_real_forests(f, 9.0, 5000, stream(1), radius=0.5)
    counts = [len(component_heights(t)[0]) for t in forests]
    assert poisson_dispersion(counts, f.a_lambda(9.0)).passed


def test_component_heights_uncorrelated():
    f = family(BROWNIAN)
    pairs = []
    for t in sample_gw_real_forests(f, 16.0, 4000, stream(2), radius=4.0):
        h, _ = component_heights(t)
        if len(h) >= 2:
            pairs.append(h[:2])
    pairs = np.array(pairs)
    rho = np.corrcoef(pairs[:, 0], pairs[:, 1])[0, 1]
    assert abs(rho) < 3 / math.sqrt(len(pairs))


def test_leaf_measure_trivial_and_mass():
    f = family(BROWNIAN)
    s = grow(f, point_tree(), [1.0], stream(3), radius=1.0)
    m = leaf_measure(s, 1.0, 1.0)
    assert m.n_atoms == 0 and m.total_mass == 0.0
    s = grow(f, None, [0.0, 50.0], stream(4), radius=1.0)
    m = leaf_measure(s, 50.0, 1.0)
    assert m.total_mass == m.n_atoms / 50.0
    assert m.mass_in_ball(0.5) <= m.total_mass
    with pytest.raises(DomainError):
        leaf_measure(s, 50.0, 2.0)


def test_leaf_measure_stabilises():
    f = family(BROWNIAN)
    levels = [0.0, 100.0, 1000.0, 10000.0]
    r = 0.25
    masses = []
    for k in range(200):
        s = grow(f, None, levels, stream(5, k), radius=r)
        masses.append([leaf_measure(s, lam, r).total_mass for lam in levels[1:]])
    masses = np.array(masses)
    diffs = np.abs(np.diff(masses, axis=1)).mean(axis=0)
    assert diffs[1] < diffs[0]
    # a backward martingale has constant mean across levels
    d = masses[:, 2] - masses[:, 0]
    assert z_check(d.mean(), d.std(ddof=1) / math.sqrt(len(d)), 0.0, "martingale mean", len(d)).passed


def test_poisson_resample_identity_ratio():
    f = family(BROWNIAN)
    s = grow(f, None, [0.0, 30.0], stream(6), radius=1.0)
    assert s.forest(30.0) is s.tree


def test_poisson_resample_check():
    reps = poisson_resample_check(family(BROWNIAN), 1000.0, 10.0, 1000, seed=7, radius=0.5)
    assert len(reps) == 5
    assert all(r.passed for r in reps), [r.row() for r in reps]


def test_theta_tail_check_brownian():
    f = family(BROWNIAN)
    reps = theta_tail_check(f, 200.0, [0.5, 1.0, 2.0], 2000, stream(8), eps=0.05)
    assert all(r.passed for r in reps), [r.row() for r in reps]
    assert reps[3].target == pytest.approx(2.0)


def test_theta_tail_limits():
    f = family(BROWNIAN)
    assert finite_tail_mass(f, 1e8, 1.0) == pytest.approx(2.0, rel=1e-3)
    sup = family(SUPER, 2.0)
    # surviving components: a gamma of them, gamma = 1
    assert finite_tail_mass(sup, 50.0, 60.0) == pytest.approx(2.0, rel=1e-6)


def test_per_mass_tail_increases_to_grey_v():
    mech = family(MIXED).mech
    for t in (0.3, 1.0, 3.0):
        lams = (1.0, 10.0, 100.0, 1000.0)
        vals = [mech.inverse(l) * -math.expm1(-mech.finite_level_v(0.0, l, t)) for l in lams]
        assert all(a < b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < mech.grey_v(t)


def test_decomposition_brownian():
    f = family(BROWNIAN)
    eps = 0.3
    roots, branch = [], 0
    for k in range(1500):
        s = grow(f, None, [1.0, 4.0], stream(9, k), radius=2.0, dual=True)
        rep = decompose_at_level(s, 1.0, 4.0, eps)
        assert rep.n_sites("S1") == 0
        assert all(x[1] == 1 for x in rep.sites.get("S2", []))
        assert all(r.passed for r in rep.reports(f))
        roots.append(rep.count_above("root"))
        branch += rep.count_above("branch")
    # Brownian branch points carry no mass
    assert branch == 0
    assert poisson_dispersion(roots, f.a * rep.per_mass).passed


def test_decomposition_branch_masses_follow_eta():
    f = family(MIXED)
    eps = 0.2
    observed, expected, var = 0, 0.0, 0.0
    for k in range(600):
        s = grow(f, None, [2.0, 6.0], stream(10, k), radius=2.0, dual=True)
        rep = decompose_at_level(s, 2.0, 6.0, eps)
        pm = rep.per_mass
        for site in rep.sites.get("branch", []):
            l = site[4]
            if l > 4:
                continue
            eta = f.eta_law(2.0, l)
            second = eta.moment(2)
            observed += site[2]
            expected += pm * eta.mean
            # mixed Poisson: Poisson noise plus the spread of the mass
            var += pm * eta.mean + pm**2 * (second - eta.mean**2)
    assert abs(observed - expected) < 4 * math.sqrt(var)


def test_decomposition_on_supercritical_backbone():
    f = family(SUPER)
    s = grow(f, None, [0.0, 2.0], stream(11), radius=1.5, dual=True)
    f0 = s.tree_at(0)
    inner = ~f0.frontier
    inner[0] = False
    assert np.all(f0.n_children[inner] >= 2)
    rep = decompose_at_level(s, 0.0, 2.0, 0.2)
    assert set(rep.sites) <= {"root", "branch", "S2"}
    with pytest.raises(DomainError):
        decompose_at_level(s, 2.0, 0.0, 0.2)


def test_lineage_count_generating_function():
    # E[s^Z_t] = exp(-a u(t, psi^{-1}(lam)(1 - s))) with the Brownian flow u(t, x) = x / (1 + x t / 2)
    f = family(BROWNIAN)
    lam, t, s = 9.0, 1.0, 0.5
    z = []
    rng = stream(12)
    for _ in range(4):
        batch, owner = sample_forest_batch(f, lam, 2500, rng, radius=1.5)
        z.append(batch_lineage_counts(batch, owner, 2500, t))
    y = s ** np.concatenate(z)
    x = math.sqrt(2 * lam) * (1 - s)
    target = math.exp(-x / (1 + x * t / 2))
    assert z_check(y.mean(), y.std(ddof=1) / math.sqrt(len(y)), target, "gf", len(y)).passed


def test_batch_heights_match_tree_components():
    f = family(MIXED)
    batch, owner = sample_forest_batch(f, 9.0, 40, stream(13), radius=1.0)
    trees = sample_gw_real_forests(f, 9.0, 40, stream(13), radius=1.0)
    h = batch_component_heights(batch)
    for r, t in enumerate(trees):
        assert np.allclose(np.sort(h[owner == r]), np.sort(component_heights(t)[0]))
    counts = forest_tail_counts(f, 9.0, [0.5], 40, stream(13), radius=1.0, chunk=40)
    assert np.array_equal(counts[:, 0], [np.count_nonzero(h[owner == r] > 0.5) for r in range(40)])
