import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from levytrees.errors import DomainError, NumericError
from levytrees.mechanism import (
    AtomicMeasure,
    BranchingMechanism,
    NumericDensity,
    ShiftedMechanism,
    StablePower,
    csbp_exponent,
    finite_level_v,
    format_mechanism,
    gamma_root,
    grey_condition,
    grey_v,
    parse_mechanism,
    psi,
    psi_derivative,
    psi_inverse,
)

BROWNIAN = BranchingMechanism(0.0, 0.5)
STABLE = BranchingMechanism(0.0, 0.0, StablePower(1.5, 1.0))
SUPER = BranchingMechanism(-1.0, 1.0)
SUB = BranchingMechanism(1.0, 1.0)
ATOMIC = BranchingMechanism(0.4, 0.1, AtomicMeasure([(0.5, 1.0), (2.0, 0.3)]))
MIXED = BranchingMechanism(-0.3, 0.2, StablePower(1.3, 0.7))

ALL = [BROWNIAN, STABLE, SUPER, SUB, ATOMIC, MIXED]


def test_psi_examples():
    assert psi(BROWNIAN, 2.0) == pytest.approx(2.0)
    assert psi(STABLE, 4.0) == pytest.approx(8.0)
    assert psi(SUPER, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_derivative_examples_against_symbolic():
    c = sp.symbols("c", positive=True)
    expr = c ** sp.Rational(3, 2)
    assert psi_derivative(BROWNIAN, 3.0, 2) == pytest.approx(1.0)
    assert psi_derivative(STABLE, 4.0, 1) == pytest.approx(float(sp.diff(expr, c).subs(c, 4)))
    assert psi_derivative(STABLE, 1.0, 3) == pytest.approx(float(sp.diff(expr, c, 3).subs(c, 1)))
    assert psi_derivative(STABLE, 1.0, 3) == pytest.approx(-3 / 8)


def test_derivative_order_zero_is_psi():
    assert psi_derivative(ATOMIC, 1.3, 0) == psi(ATOMIC, 1.3)


def test_inverse_examples():
    assert psi_inverse(BROWNIAN, 4.0) == pytest.approx(2 * math.sqrt(2), abs=1e-12)
    assert psi_inverse(SUPER, 0.0) == pytest.approx(1.0)
    assert psi_inverse(STABLE, 8.0) == pytest.approx(4.0)


def test_gamma_examples():
    assert gamma_root(BROWNIAN) == 0.0
    assert gamma_root(SUPER) == pytest.approx(1.0)
    assert gamma_root(BranchingMechanism(1.0, 1.0)) == 0.0


def test_gamma_generic_root_finding():
    # same quadratic written through an atomic measure far away is not quadratic
    mech = BranchingMechanism(-1.0, 1.0, AtomicMeasure([(0.3, 0.5)]))
    g = gamma_root(mech)
    assert g > 0
    assert abs(psi(mech, g)) < 1e-12
    assert mech.derivative(g, 1) > 0


def test_grey_examples():
    assert grey_condition(BROWNIAN) is True
    assert grey_condition(BranchingMechanism(1.0, 0.0)) is False
    assert grey_condition(STABLE) is True
    assert grey_condition(BranchingMechanism(1.0, 0.0, AtomicMeasure([(0.5, 2.0)]))) is False


def test_grey_stable_against_direct_integral():
    from scipy import integrate

    val, _ = integrate.quad(lambda c: c**-1.5, 1.0, np.inf)
    assert math.isfinite(val) and grey_condition(STABLE)


def test_csbp_examples():
    assert csbp_exponent(BROWNIAN, 2.0, 1.0) == pytest.approx(0.5)
    assert BROWNIAN.csbp_exponent(2.0, 1.0, numeric=True) == pytest.approx(0.5, abs=1e-10)
    for mech in ALL:
        assert csbp_exponent(mech, 0.0, 5.0) == 5.0
    g = gamma_root(SUPER)
    assert csbp_exponent(SUPER, 3.0, g) == g


@pytest.mark.parametrize("t,lam", [(0.3, 2.0), (2.0, 0.5), (5.0, 10.0)])
def test_csbp_numeric_matches_closed_forms(t, lam):
    for mech in (BROWNIAN, STABLE, SUPER, SUB):
        assert mech.csbp_exponent(t, lam, numeric=True) == pytest.approx(
            mech.csbp_exponent(t, lam), rel=1e-9
        )


def test_csbp_below_gamma_increases_towards_gamma():
    g = gamma_root(SUPER)
    u1 = SUPER.csbp_exponent(1.0, 0.2)
    u2 = SUPER.csbp_exponent(3.0, 0.2)
    assert 0.2 < u1 < u2 < g


def test_grey_v_examples():
    assert grey_v(BROWNIAN, 1.0) == pytest.approx(2.0)
    assert grey_v(BROWNIAN, 4.0) == pytest.approx(0.5)
    assert grey_v(STABLE, 2.0) == pytest.approx(1.0)
    for x in (1.0, 4.0):
        assert BROWNIAN.grey_v(x, numeric=True) == pytest.approx(2.0 / x, rel=1e-9)
    assert STABLE.grey_v(2.0, numeric=True) == pytest.approx(1.0, rel=1e-9)


def test_grey_v_refuses_without_grey():
    with pytest.raises(DomainError):
        grey_v(BranchingMechanism(1.0, 0.0), 1.0)


def test_grey_v_tends_to_gamma():
    assert SUPER.grey_v(40.0, numeric=True) == pytest.approx(1.0, abs=1e-9)
    assert MIXED.grey_v(0.5) > MIXED.grey_v(1.0) > MIXED.grey_v(30.0) > MIXED.gamma


def test_finite_level_v_converges_to_grey_v():
    # the forest exponent Delta (1 - e^{-v_{0,lam}}) increases to v(t)
    vals = []
    for lam in (10.0, 100.0, 1e3, 1e4, 1e6):
        delta = BROWNIAN.inverse(lam)
        vals.append(delta * -math.expm1(-finite_level_v(BROWNIAN, 0.0, lam, 1.0)))
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(grey_v(BROWNIAN, 1.0), rel=3e-3)


def test_finite_level_v_limits():
    assert BROWNIAN.finite_level_v(0.0, 4.0, math.inf) == 0.0
    assert BROWNIAN.finite_level_v(0.0, 4.0, 1e6) < 1e-6
    assert BROWNIAN.finite_level_v(1.0, 4.0, 1e-8) > 10


def test_finite_level_v_brownian_against_harris():
    # xi_{1,4} = 3/4 delta_0 + 1/4 delta_2 with lifetimes Exp(2 sqrt 2):
    # int_0^{e^{-v}} 4 dr / ((r - 1)(r - 3)) = 2 sqrt(2) t has a closed form
    t = 1.0
    c = 2 * math.sqrt(2)
    # 4/((r-1)(r-3)) = 2/(r-3) - 2/(r-1); integral = 2 log((3 - s)(1)/(3 (1 - s)))
    k = math.exp(c * t / 2)
    s = 3 * (k - 1) / (3 * k - 1)
    assert math.exp(-BROWNIAN.finite_level_v(1.0, 4.0, t)) == pytest.approx(s, rel=1e-10)
    assert math.exp(-BROWNIAN.finite_level_v(1.0, 4.0, t, numeric=True)) == pytest.approx(s, rel=1e-9)


def test_finite_level_v_domain():
    with pytest.raises(DomainError):
        BROWNIAN.finite_level_v(2.0, 2.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(range(len(ALL))), st.lists(st.floats(1e-3, 20.0), min_size=3, max_size=3, unique=True))
def test_convexity(idx, cs):
    mech = ALL[idx]
    c1, c2, c3 = sorted(cs)
    w = (c3 - c2) / (c3 - c1)
    interp = w * mech.psi(c1) + (1 - w) * mech.psi(c3)
    assert mech.psi(c2) <= interp + 1e-10 * (1 + abs(interp))


def test_convexity_bulk():
    rng = np.random.default_rng(1)
    for mech in ALL:
        cs = np.sort(rng.uniform(1e-3, 30, size=(1000, 3)), axis=1)
        w = (cs[:, 2] - cs[:, 1]) / (cs[:, 2] - cs[:, 0])
        interp = w * mech.psi(cs[:, 0]) + (1 - w) * mech.psi(cs[:, 2])
        assert np.all(mech.psi(cs[:, 1]) <= interp + 1e-10 * (1 + np.abs(interp)))


@pytest.mark.parametrize("mech", ALL, ids=lambda m: repr(m)[:40])
def test_inverse_round_trip(mech):
    for lam in np.logspace(-6, 6, 40):
        c = mech.inverse(lam)
        assert c >= mech.gamma
        assert abs(mech.psi(c) - lam) <= 1e-9 * (1 + lam)


@pytest.mark.parametrize("mech", ALL, ids=lambda m: repr(m)[:40])
def test_derivatives_against_finite_differences(mech):
    for c in (0.3, 1.0, 4.0):
        for k in range(1, 5):
            h = 1e-4 * c
            fd = (mech.derivative(c + h, k - 1) - mech.derivative(c - h, k - 1)) / (2 * h)
            exact = mech.derivative(c, k)
            assert fd == pytest.approx(exact, rel=1e-5, abs=1e-9)


@pytest.mark.parametrize("mech", ALL, ids=lambda m: repr(m)[:40])
def test_flow_property(mech):
    for lam in (0.2, 1.0, 7.0):
        for s, t in ((0.1, 0.7), (1.0, 2.0)):
            direct = mech.csbp_exponent(s + t, lam, numeric=True)
            composed = mech.csbp_exponent(t, mech.csbp_exponent(s, lam, numeric=True), numeric=True)
            assert direct == pytest.approx(composed, abs=1e-8)


@pytest.mark.parametrize("mech", [STABLE, ATOMIC, MIXED], ids=["stable", "atomic", "mixed"])
def test_sign_alternation(mech):
    for c in np.logspace(-2, 2, 25):
        for k in range(2, 9):
            assert (-1) ** k * mech.derivative(c, k) >= 0


def test_stable_measure_matches_numeric_integral():
    from scipy import integrate

    lev = StablePower(1.5, 1.0)
    C = math.exp(lev.log_C)
    val, _ = integrate.quad(lambda x: x**2 * math.exp(-2.0 * x) * C * x**-2.5, 0, np.inf)
    assert val == pytest.approx(STABLE.derivative(2.0, 2), rel=1e-8)


def test_atomic_psi_direct_sum():
    c = 1.7
    expected = 0.4 * c + 0.1 * c**2
    expected += 1.0 * (math.exp(-c * 0.5) - 1 + c * 0.5) + 0.3 * (math.exp(-c * 2.0) - 1)
    assert psi(ATOMIC, c) == pytest.approx(expected, rel=1e-14)
    assert ATOMIC.m == pytest.approx(0.4 - 0.3 * 2.0)


def test_psi_shift_has_no_cancellation():
    for mech in ALL:
        c = mech.inverse(3.0)
        for x in (1e-9, 1e-3, 0.5):
            direct = mech.psi(c + x) - mech.psi(c)
            assert mech.psi_shift(c, x) == pytest.approx(direct, rel=1e-5)
        assert mech.psi_shift(c, 1e-12) == pytest.approx(mech.derivative(c, 1) * 1e-12, rel=1e-6)


def test_shifted_mechanism_root_and_slope():
    sh = ShiftedMechanism(BROWNIAN, 1.0)
    assert sh.psi(0.0) == 0.0
    assert sh.m == pytest.approx(math.sqrt(2))
    assert sh.inverse(3.0) == pytest.approx(2 * math.sqrt(2) - math.sqrt(2))


def test_numeric_density_matches_integral():
    dens = lambda x: 0.7 * math.exp(-x) / x**1.2  # noqa: E731
    lev = NumericDensity(dens, 0.05, 20.0, nodes=48)
    from scipy import integrate

    c = 1.3
    val, _ = integrate.quad(lambda x: (math.exp(-c * x) - 1 + c * x * (x < 1)) * dens(x), 0.05, 20.0, points=[1.0], limit=200)
    assert lev.psi_part(c) == pytest.approx(val, rel=1e-7)
    mech = BranchingMechanism(0.5, 0.2, lev)
    assert mech.grey is True


def test_numeric_density_reports_non_convergence():
    wiggle = lambda x: 1.0 + 0.99 * math.sin(400 * x)  # noqa: E731
    with pytest.raises(NumericError) as info:
        NumericDensity(wiggle, 0.1, 10.0, nodes=8)
    assert info.value.achieved > 0


def test_invalid_mechanisms():
    with pytest.raises(DomainError):
        BranchingMechanism(0.0, -1.0)
    with pytest.raises(DomainError):
        StablePower(2.0)
    with pytest.raises(DomainError):
        StablePower(0.9)
    with pytest.raises(DomainError):
        AtomicMeasure([(1.0, 1.0), (1.0, 2.0)])
    with pytest.raises(DomainError):
        AtomicMeasure([(-1.0, 1.0)])
    with pytest.raises(DomainError):
        BranchingMechanism(-1.0, 0.0)  # psi does not tend to infinity
    with pytest.raises(DomainError):
        psi(BROWNIAN, -1.0)
    with pytest.raises(DomainError):
        psi_inverse(BROWNIAN, -1.0)


def test_stable_higher_derivatives_refused_at_zero():
    with pytest.raises(DomainError):
        STABLE.derivative(0.0, 2)


@pytest.mark.parametrize(
    "text",
    [
        "kind=stable index=1.5 scale=1.0",
        "kind=quadratic alpha=0 beta=0.5",
        "kind=atomic atoms=0.5:1.0,2.0:0.3",
        "kind=quadratic alpha=-1 beta=1",
        "kind=stable index=1.3 scale=0.7 alpha=0.2 beta=0.1",
    ],
)
def test_spec_round_trip(text):
    mech = parse_mechanism(text)
    again = parse_mechanism(format_mechanism(mech))
    assert again == mech
    assert again.psi(1.7) == mech.psi(1.7)


def test_spec_parse_values():
    mech = parse_mechanism("# a comment\nkind=quadratic alpha=0 beta=0.5\n")
    assert mech == BROWNIAN
    assert parse_mechanism("kind=stable index=1.5 scale=1.0") == STABLE


@pytest.mark.parametrize(
    "text",
    ["", "kind=weird", "kind=stable", "kind=stable index=abc", "kind=quadratic beta=1 extra=2", "beta"],
)
def test_spec_parse_errors(text):
    with pytest.raises(DomainError):
        parse_mechanism(text)
