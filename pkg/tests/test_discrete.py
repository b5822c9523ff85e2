import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
import sympy as sp
from scipy import stats

from levytrees.discrete import (
    ColouringLaws,
    DiscreteTree,
    OffspringDistribution,
    TwoColourTree,
    black_subtree,
    black_tree,
    brute_force_identity,
    colour_leaves,
    derive_black_red_laws,
    enumerate_colourings,
    enumerate_trees,
    coloured_tree_probability,
    g_of_p,
    kappa_check,
    kappa_target,
    reconstruct,
    reconstruction_probability,
    red_tree_count,
    sample_all_red,
    sample_gw_tree,
)
from levytrees.errors import BudgetExceeded, DomainError
from levytrees.verify import chi_square_gof, ks_two_sample, stream

BINARY = OffspringDistribution([0.5, 0.0, 0.5])
SUB = OffspringDistribution([0.75, 0.0, 0.25])
TERNARY = OffspringDistribution([0.6, 0.0, 0.25, 0.15])  # mean 0.95


# -- trees -------------------------------------------------------------------


def test_words_and_structure():
    t = DiscreteTree.from_words([(), (1,), (2,), (1, 1), (1, 2)])
    assert t.key() == (2, 2, 0, 0, 0)
    assert t.words == [(), (1,), (2,), (1, 1), (1, 2)]
    assert list(t.parent) == [-1, 0, 0, 1, 1]
    assert list(t.depth) == [0, 1, 1, 2, 2]
    assert t.height == 2 and t.n_leaves == 3


@pytest.mark.parametrize(
    "words",
    [[(1,)], [(), (2,)], [(), (1, 1)], [(), (0,)]],
)
def test_from_words_rejects_invalid(words):
    with pytest.raises(DomainError):
        DiscreteTree.from_words(words)


def test_invalid_child_counts():
    with pytest.raises(DomainError):
        DiscreteTree([0, 1])
    with pytest.raises(DomainError):
        DiscreteTree([2, 0])


def test_text_round_trip_and_order():
    t = DiscreteTree([3, 0, 2, 0, 0, 0])
    text = t.to_text()
    lines = text.splitlines()
    assert lines[0] == "\t3"
    assert lines[1:4] == ["1\t0", "2\t2", "2.1\t0"]
    back, colours = DiscreteTree.from_text(text)
    assert back == t and colours is None
    tc = TwoColourTree(t, [1, 1, 1, 0, 1, 0])
    back, colours = DiscreteTree.from_text(tc.to_text())
    assert back == t and list(colours) == [1, 1, 1, 0, 1, 0]


def test_sampled_trees_are_valid_neveu_sets():
    rng = stream(1)
    for _ in range(200):
        t = sample_gw_tree(TERNARY, rng, 10**4)
        ws = set(t.words)
        for w in ws:
            if w:
                assert w[:-1] in ws
                assert w[-1] == 1 or w[:-1] + (w[-1] - 1,) in ws
        assert DiscreteTree.from_words(ws) == t


# -- sampling ----------------------------------------------------------------


def test_delta_zero_gives_single_node():
    t = sample_gw_tree(OffspringDistribution([1.0]), stream(2))
    assert t.n == 1 and t.height == 0


def test_mean_total_progeny_subcritical():
    rng = stream(3)
    sizes = np.array([sample_gw_tree(SUB, rng).n for _ in range(100_000)])
    # total progeny of a GW tree with mean m < 1 has mean 1 / (1 - m) = 2
    se = sizes.std(ddof=1) / math.sqrt(len(sizes))
    assert abs(sizes.mean() - 2.0) <= 3 * se


def test_binary_tree_overflows():
    with pytest.raises(BudgetExceeded):
        sample_gw_tree(OffspringDistribution([0.0, 0.0, 1.0]), stream(4), 1000)


def test_offspring_sampling_matches_law():
    rng = stream(5)
    x = TERNARY.sample(rng, 100_000)
    assert chi_square_gof(np.bincount(x, minlength=4), TERNARY.probs).passed


def test_offspring_law_must_sum_to_one():
    with pytest.raises(DomainError):
        OffspringDistribution([0.5, 0.4])
    with pytest.raises(DomainError):
        OffspringDistribution([0.5, 0.0], tail_mass=0.5)


# -- colouring -----------------------------------------------------------------


def test_colour_extremes():
    rng = stream(6)
    t = sample_gw_tree(TERNARY, rng)
    assert np.all(colour_leaves(t, 0.0, rng).colour == 1)
    assert np.all(colour_leaves(t, 1.0, rng).colour == 0)


def test_colour_closure_node_by_node():
    rng = stream(7)
    for _ in range(100):
        t = sample_gw_tree(TERNARY, rng)
        tc = colour_leaves(t, 0.6, rng)
        for v in range(t.n):
            leaves = [u for u in range(t.n) if t.is_leaf[u] and t.words[u][: len(t.words[v])] == t.words[v]]
            assert tc.colour[v] == max(tc.colour[u] for u in leaves)


def test_colour_closure_is_enforced():
    t = DiscreteTree([2, 0, 0])
    with pytest.raises(DomainError):
        TwoColourTree(t, [0, 1, 0])


def test_leaf_colour_patterns_are_exchangeable():
    # a fixed tree with three leaves: all 8 leaf patterns follow the product law
    t = DiscreteTree([2, 0, 2, 0, 0])
    rng = stream(8)
    leaves = np.nonzero(t.is_leaf)[0]
    p = 0.3
    pats = Counter()
    for _ in range(40_000):
        c = colour_leaves(t, p, rng).colour[leaves]
        pats[int(c @ (1 << np.arange(3)))] += 1
    probs = [p ** (3 - bin(b).count("1")) * (1 - p) ** bin(b).count("1") for b in range(8)]
    assert chi_square_gof([pats[b] for b in range(8)], probs).passed


def test_all_red_probability_binary():
    rng = stream(9)
    n = 100_000
    red = overflow = 0
    for _ in range(n):
        try:
            red += not colour_leaves(sample_gw_tree(BINARY, rng, 10**4), 0.75, rng).root_black
        except BudgetExceeded:
            overflow += 1
    # overflowing trees have unknown colour: bracket their contribution
    se = math.sqrt(0.25 / n)
    est = (red + overflow / 2) / n
    assert abs(est - 0.5) <= 3 * se + overflow / (2 * n)


def test_lazy_all_red_sampler():
    rng = stream(91)
    assert sample_all_red(SUB, 1.0, rng)
    assert not any(sample_all_red(SUB, 0.0, rng) for _ in range(50))
    # g = 3p/4 + g^2/4 for the subcritical binary law
    p = 0.6
    target = 2 * (1 - math.sqrt(1 - 0.75 * p))
    n = 20_000
    hits = sum(sample_all_red(SUB, p, rng) for _ in range(n))
    assert abs(hits / n - target) <= 3 * math.sqrt(target * (1 - target) / n)


def test_black_subtree_examples():
    t = DiscreteTree([2, 0, 0])
    tc = TwoColourTree(t, [1, 1, 1])
    assert black_subtree(tc) == t
    # root -> 1 -> {11 black leaf, 12 red subtree}
    t = DiscreteTree.from_words([(), (1,), (1, 1), (1, 2), (1, 2, 1), (1, 2, 2)])
    colour = [1 if w in [(), (1,), (1, 1)] else 0 for w in t.words]
    sub = black_subtree(TwoColourTree(t, colour))
    assert sub.words == [(), (1,), (1, 1)]
    with pytest.raises(DomainError):
        black_subtree(TwoColourTree(DiscreteTree([2, 0, 0]), [0, 0, 0]))


def test_black_tree_examples():
    t = DiscreteTree([2, 2, 0, 0, 0])
    assert black_tree(TwoColourTree(t, [1] * 5)) == t
    chain = DiscreteTree([1, 1, 0])
    assert black_tree(TwoColourTree(chain, [1, 1, 1])) == DiscreteTree([1, 0])
    assert black_tree(TwoColourTree(chain, [1, 1, 1]), contract_root=True) == DiscreteTree([0])
    # unary vertex in the middle of a branch is contracted
    t = DiscreteTree.from_words([(), (1,), (2,), (1, 1), (1, 2), (1, 1, 1), (1, 1, 2)])
    colour = [1 if w in [(), (1,), (2,), (1, 1), (1, 1, 1), (1, 1, 2)] else 0 for w in t.words]
    assert black_tree(TwoColourTree(t, colour)) == DiscreteTree([2, 2, 0, 0, 0])


def _unary_runs(tc):
    """Geometric counts of Step 1: unary black vertices directly above each black-tree vertex."""
    sub = black_subtree(tc)
    runs = []
    for v in np.nonzero(sub.nchild != 1)[0]:
        n, u = 0, int(v)
        while u > 0 and sub.nchild[sub.parent[u]] == 1:
            n += 1
            u = int(sub.parent[u])
        runs.append(n)
    return runs


def test_unary_counts_are_geometric():
    rng = stream(10)
    p = 0.4
    _, _, _, q = derive_black_red_laws(TERNARY, p)
    runs = []
    while len(runs) < 30_000:
        tc = colour_leaves(sample_gw_tree(TERNARY, rng, 10**5), p, rng)
        if tc.root_black:
            runs.extend(_unary_runs(tc))
    K = 8
    counts = np.bincount(np.minimum(runs, K + 1), minlength=K + 2)
    probs = [(1 - q) * q**k for k in range(K + 1)]
    assert chi_square_gof(counts, probs).passed


def test_black_trees_are_gw_black_law():
    rng = stream(11)
    p = 0.4
    xb, _, _, _ = derive_black_red_laws(TERNARY, p)
    ks = []
    while len(ks) < 50_000:
        tc = colour_leaves(sample_gw_tree(TERNARY, rng, 10**5), p, rng)
        if tc.root_black:
            ks.extend(black_tree(tc, contract_root=True).nchild.tolist())
    counts = np.bincount(ks, minlength=len(xb.probs))
    assert counts[1] == 0
    assert chi_square_gof(counts, xb.probs).passed


# -- laws ----------------------------------------------------------------------


def test_g_of_p_examples():
    assert g_of_p(BINARY, 0.75) == pytest.approx(0.5, abs=1e-14)
    for p in (0.1, 0.5, 0.9):
        assert g_of_p(BINARY, p) == pytest.approx(1 - math.sqrt(1 - p), abs=1e-13)
    assert g_of_p(TERNARY, 1.0) == 1.0
    assert g_of_p(TERNARY, 0.0) == 0.0
    with pytest.raises(DomainError):
        g_of_p(OffspringDistribution([0.0, 0.0, 1.0]), 0.5)


def test_g_of_p_ternary_root_oracle():
    p = 0.3
    g = g_of_p(TERNARY, p)
    s = sp.symbols("s")
    phi = sp.Rational(3, 5) + sp.Rational(1, 4) * s**2 + sp.Rational(3, 20) * s**3
    roots = [complex(r) for r in sp.Poly(phi - sp.Rational(3, 5) * (1 - sp.Rational(3, 10)) - s, s).all_roots()]
    real = sorted(r.real for r in roots if abs(r.imag) < 1e-12 and -1e-12 <= r.real <= 1)
    assert g == pytest.approx(real[0], abs=1e-13)


def test_binary_black_red_laws():
    for p in (0.2, 0.75):
        xb, xr, nu, q = derive_black_red_laws(BINARY, p)
        assert xb.pmf(0) == pytest.approx(0.5) and xb.pmf(2) == pytest.approx(0.5) and xb.pmf(1) == 0
    xb, xr, nu, q = derive_black_red_laws(BINARY, 0.75)
    assert q == pytest.approx(0.5)
    assert list(nu(2).probs) == [1.0]


def test_black_law_symbolic_expansion():
    p = 0.35
    laws = ColouringLaws(list(TERNARY.probs), p)
    s = sp.symbols("s")
    g, d = sp.Float(laws.g, 30), sp.Float(laws.dphi_g, 30)
    phi = lambda x: sum(sp.Float(c, 30) * x**k for k, c in enumerate(TERNARY.probs))  # noqa: E731
    phib = sp.expand(s + (phi(g + s * (1 - g)) - g - s * (1 - g)) / ((1 - g) * (1 - d)))
    coeffs = [float(phib.coeff(s, k)) for k in range(4)]
    assert np.allclose(coeffs, laws.xi_black(), atol=1e-12)


def test_generating_function_identities():
    for xi, p in ((TERNARY, 0.35), (BINARY, 0.6), (OffspringDistribution([0.5, 0, 0.2, 0.2, 0.1]), 0.45)):
        laws = ColouringLaws(list(xi.probs), p)
        xb, xr, _, _ = derive_black_red_laws(xi, p)
        assert xb.probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert xr.probs.sum() == pytest.approx(1.0, abs=1e-12)
        for s in np.linspace(0, 1, 20):
            assert xr.pgf(s) == pytest.approx(laws.phi_red(s), abs=1e-12)
            assert xb.pgf(s) == pytest.approx(laws.phi_black(s), abs=1e-12)


def test_nu_laws_are_distributions():
    laws = ColouringLaws([0.5, 0, 0.2, 0.2, 0.1], 0.45)
    assert laws.nu(1)[0] == 0.0
    for l in (1, 2, 3, 4):
        assert sum(laws.nu(l)) == pytest.approx(1.0, abs=1e-12)


def test_improper_law_rejected():
    with pytest.raises(DomainError):
        ColouringLaws([0.5, 0.2, 0.3], 0.5)


# -- reconstruction --------------------------------------------------------------


def test_reconstruct_near_zero_p_is_identity():
    rng = stream(12)
    t = DiscreteTree([2, 3, 0, 0, 0, 2, 0, 0])
    out = reconstruct(t, TERNARY, 1e-12, rng)
    assert np.all(out.colour == 1)
    # only negligible unary insertions and red grafts remain at p ~ 0
    assert black_tree(out, contract_root=True) == t


def test_reconstruct_returns_valid_coloured_tree():
    rng = stream(13)
    xb, _, _, _ = derive_black_red_laws(TERNARY, 0.5)
    for _ in range(200):
        tb = sample_gw_tree(xb, rng)
        out = reconstruct(tb, TERNARY, 0.5, rng)
        TwoColourTree(out.tree, out.colour)  # closure check
        assert black_tree(out, contract_root=True) == tb


def test_reconstruct_matches_direct_colouring_in_law():
    rng = stream(14)
    p = 0.5
    xb, _, _, _ = derive_black_red_laws(TERNARY, p)
    direct, rebuilt = [], []
    while len(direct) < 10_000:
        tc = colour_leaves(sample_gw_tree(TERNARY, rng, 10**5), p, rng)
        if tc.root_black:
            direct.append((tc.tree.n, tc.tree.n_leaves, tc.tree.height))
    for _ in range(10_000):
        tc = reconstruct(sample_gw_tree(xb, rng), TERNARY, p, rng)
        rebuilt.append((tc.tree.n, tc.tree.n_leaves, tc.tree.height))
    direct, rebuilt = np.array(direct), np.array(rebuilt)
    for j in range(3):
        assert ks_two_sample(direct[:, j], rebuilt[:, j]).passed


def test_reconstruct_sampler_matches_exact_probabilities():
    # frequencies of small coloured outputs against the exact reconstruction law
    probs = [Fraction(1, 3), 0, Fraction(2, 3)]
    laws = ColouringLaws(probs, Fraction(5, 8), Fraction(1, 4), exact=True)
    xi = OffspringDistribution([1 / 3, 0, 2 / 3])
    tb = DiscreteTree([2, 0, 0])
    rng = stream(15)
    n = 20_000
    seen = Counter(reconstruct(tb, xi, 5 / 8, rng).key() for _ in range(n))
    cands = []
    for t in enumerate_trees(9, [0, 2]):
        for tc in enumerate_colourings(t):
            if tc.root_black and black_tree(tc, contract_root=True) == tb:
                cands.append((tc.key(), float(reconstruction_probability(tc, laws))))
    cands.sort(key=lambda c: -c[1])
    head = cands[:8]
    counts = [seen[k] for k, _ in head] + [n - sum(seen[k] for k, _ in head)]
    assert chi_square_gof(counts, [pr for _, pr in head]).passed


@pytest.mark.parametrize(
    "probs,p,g",
    [
        ([Fraction(1, 2), 0, Fraction(1, 2)], Fraction(3, 4), Fraction(1, 2)),
        ([Fraction(1, 3), 0, Fraction(2, 3)], Fraction(5, 8), Fraction(1, 4)),
    ],
)
def test_brute_force_identity_exact(probs, p, g):
    rows = brute_force_identity(probs, p, g, max_nodes=9)
    assert len(rows) > 100
    for tc, lhs, rhs in rows:
        assert isinstance(lhs, Fraction) and lhs == rhs


def test_exact_laws_need_true_fixed_point():
    with pytest.raises(DomainError):
        ColouringLaws([Fraction(1, 2), 0, Fraction(1, 2)], Fraction(3, 4), Fraction(1, 3), exact=True)


# -- number of red trees ---------------------------------------------------------


def test_red_tree_count():
    t = DiscreteTree([2, 2, 0, 0, 0])
    assert red_tree_count(TwoColourTree(t, [0] * 5)) == 1
    assert red_tree_count(TwoColourTree(t, [1, 1, 0, 1, 0])) == 2


def test_kappa_endpoints():
    assert kappa_target(BINARY, 0.5, 1.0) == 1.0
    for xi, p in ((BINARY, 0.5), (TERNARY, 0.3)):
        assert kappa_target(xi, p, 0.0) == pytest.approx(g_of_p(xi, 1 - p), abs=1e-12)


def test_kappa_zero_brute_force():
    # P(N = 0) = P(no red leaf); partial sums over small trees approach it from below
    xi = [Fraction(1, 3), 0, Fraction(2, 3)]
    p = Fraction(5, 8)
    total = Fraction(0)
    for t in enumerate_trees(11, [0, 2]):
        for tc in enumerate_colourings(t):
            if tc.root_black and red_tree_count(tc) == 0:
                total += coloured_tree_probability(tc, xi, p)
    target = kappa_target(OffspringDistribution([1 / 3, 0, 2 / 3]), 0.625, 0.0)
    assert float(total) <= target + 1e-15
    assert target - float(total) < 0.02


def test_kappa_monte_carlo_binary():
    reports = kappa_check(BINARY, 0.5, 20_000, stream(16), s_grid=(0.5,), node_budget=10**4)
    assert all(r.passed for r in reports)
    assert reports[0].target == pytest.approx(kappa_target(BINARY, 0.5, 0.5))
