"""Branching mechanisms and the analytic quantities derived from them.

A branching mechanism is the convex function

    psi(c) = alpha*c + beta*c**2 + int (exp(-c x) - 1 + c x 1{x<1}) Pi(dx)

with ``beta >= 0`` and a Levy measure ``Pi`` on ``(0, inf)``.  Three families
of Levy measure are supported exactly (zero, finitely many atoms, a stable
power law) and a fourth one (a density with a cut support) is reduced to the
atomic case through a fixed quadrature rule.

Everything downstream (offspring laws, heights, grafting rates) only needs
``psi``, its derivatives, its inverse on the increasing branch, and a few
"Taylor coefficient" sums of the form ``int x**l (h x)**k / k! e^{-c x} Pi(dx)``
which every measure family provides together with an exact sampler for their
tails.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, optimize, special, stats

from .errors import DomainError, NumericError

__all__ = [
    "LevyMeasure",
    "ZeroMeasure",
    "AtomicMeasure",
    "StablePower",
    "NumericDensity",
    "BranchingMechanism",
    "ShiftedMechanism",
    "parse_mechanism",
    "format_mechanism",
    "psi",
    "psi_derivative",
    "psi_inverse",
    "gamma_root",
    "grey_condition",
    "csbp_exponent",
    "grey_v",
    "finite_level_v",
]

ROOT_XTOL = 1e-12
QUAD_EPSREL = 1e-10
QUAD_EPSABS = 1e-13


# ---------------------------------------------------------------------------
# Levy measures
# ---------------------------------------------------------------------------


class LevyMeasure:
    """Interface shared by the Levy measure families."""

    kind = "abstract"

    @property
    def is_zero(self) -> bool:
        return False

    @property
    def infinite_activity(self) -> bool:
        return False

    def psi_part(self, c):
        """``int (e^{-cx} - 1 + cx 1{x<1}) Pi(dx)`` (vectorised in ``c``)."""
        raise NotImplementedError

    def psi_increment(self, c, x):
        """``psi_part(c + x) - psi_part(c)`` computed without cancellation."""
        raise NotImplementedError

    def d1(self, c):
        """``int x (1{x<1} - e^{-cx}) Pi(dx)``, the measure part of ``psi'``."""
        raise NotImplementedError

    def d1_at_zero(self) -> float:
        """Limit of :meth:`d1` as ``c -> 0+`` (may be ``-inf``)."""
        raise NotImplementedError

    def d1_at_infinity(self) -> float:
        """Limit of :meth:`d1` as ``c -> inf`` (may be ``+inf``)."""
        raise NotImplementedError

    def moment(self, k: int, c: float) -> float:
        """``int x**k e^{-cx} Pi(dx)`` for ``k >= 2``."""
        raise NotImplementedError

    def log_moment(self, k: int, c: float) -> float:
        """Logarithm of :meth:`moment`, finite where the moment itself overflows."""
        m = self.moment(k, c)
        return math.log(m) if m > 0 else -math.inf

    def taylor_terms(self, c: float, h: float, l: int, k_lo: int, k_hi: int, log_scale: float = 0.0) -> np.ndarray:
        """Terms ``int x**l (h x)**k / k! e^{-cx} Pi(dx)`` for ``k_lo <= k <= k_hi``, times ``e^{-log_scale}``.

        Only combinations with ``l + k >= 2`` are meaningful.  The scale lets
        callers divide by a huge normaliser before exponentiating.
        """
        raise NotImplementedError

    def taylor_tail(self, c: float, h: float, l: int, K: int, log_scale: float = 0.0) -> float:
        """Sum of :meth:`taylor_terms` over ``k > K`` (same scaling)."""
        raise NotImplementedError

    def sample_taylor_tail(self, c: float, h: float, l: int, K: int, rng) -> int:
        """Draw ``k > K`` with probability proportional to the Taylor term ``k``."""
        raise NotImplementedError

    def sample_tilted(self, l: int, c: float, rng, size: int) -> np.ndarray:
        """Draw from the probability measure proportional to ``x**l e^{-cx} Pi(dx)``."""
        raise NotImplementedError

    def p1_rate(self, c: float, delta: float) -> float:
        """``int x e^{-cx} (1 - e^{-delta x}) Pi(dx)``."""
        return float(self.d1(c + delta) - self.d1(c))

    def sample_p1(self, c: float, delta: float, rng, size: int) -> np.ndarray:
        """Draw from the law proportional to ``x e^{-cx}(1 - e^{-delta x}) Pi(dx)``."""
        raise NotImplementedError

    def spec_items(self) -> dict:
        raise NotImplementedError


class ZeroMeasure(LevyMeasure):
    """The null Levy measure."""

    kind = "zero"

    @property
    def is_zero(self) -> bool:
        return True

    def psi_part(self, c):
        return np.zeros_like(np.asarray(c, dtype=float)) if np.ndim(c) else 0.0

    def psi_increment(self, c, x):
        return self.psi_part(x)

    def d1(self, c):
        return self.psi_part(c)

    def d1_at_zero(self):
        return 0.0

    def d1_at_infinity(self):
        return 0.0

    def moment(self, k, c):
        return 0.0

    def taylor_terms(self, c, h, l, k_lo, k_hi, log_scale=0.0):
        return np.zeros(k_hi - k_lo + 1)

    def taylor_tail(self, c, h, l, K, log_scale=0.0):
        return 0.0

    def sample_taylor_tail(self, c, h, l, K, rng):
        raise DomainError("the zero measure has no tail to sample")

    def sample_tilted(self, l, c, rng, size):
        raise DomainError("the zero measure cannot be normalised")

    def p1_rate(self, c, delta):
        return 0.0

    def sample_p1(self, c, delta, rng, size):
        raise DomainError("the zero measure cannot be normalised")

    def spec_items(self):
        return {}

    def __eq__(self, other):
        return isinstance(other, ZeroMeasure)

    def __hash__(self):
        return hash("zero")

    def __repr__(self):
        return "ZeroMeasure()"


class AtomicMeasure(LevyMeasure):
    """Finite sum of point masses ``sum_i w_i delta_{x_i}``."""

    kind = "atomic"

    def __init__(self, atoms):
        pairs = [(float(x), float(w)) for x, w in atoms]
        if not pairs:
            raise DomainError("an atomic measure needs at least one atom")
        xs = np.array([p[0] for p in pairs])
        ws = np.array([p[1] for p in pairs])
        if np.any(xs <= 0) or not np.all(np.isfinite(xs)):
            raise DomainError("atom locations must be positive and finite")
        if np.any(ws <= 0) or not np.all(np.isfinite(ws)):
            raise DomainError("atom masses must be positive and finite")
        if len(np.unique(xs)) != len(xs):
            raise DomainError("atom locations must be distinct")
        order = np.argsort(xs)
        self.x = xs[order]
        self.w = ws[order]
        self._small = self.x < 1.0

    @property
    def atoms(self):
        return list(zip(self.x.tolist(), self.w.tolist()))

    def psi_part(self, c):
        c = np.asarray(c, dtype=float)
        cx = np.multiply.outer(c, self.x)
        val = np.expm1(-cx) + cx * self._small
        out = val @ self.w
        return float(out) if out.ndim == 0 else out

    def psi_increment(self, c, x):
        c = np.asarray(c, dtype=float)
        x = np.asarray(x, dtype=float)
        # e^{-(c+x)y} - e^{-cy} + x y 1{y<1}
        cy = np.multiply.outer(c, self.x)
        xy = np.multiply.outer(x, self.x)
        val = np.exp(-cy) * np.expm1(-xy) + xy * self._small
        out = val @ self.w
        return float(out) if out.ndim == 0 else out

    def d1(self, c):
        c = np.asarray(c, dtype=float)
        val = self.x * (self._small - np.exp(-np.multiply.outer(c, self.x)))
        out = val @ self.w
        return float(out) if out.ndim == 0 else out

    def d1_at_zero(self):
        return float(-np.sum(self.w * self.x * ~self._small))

    def d1_at_infinity(self):
        return float(np.sum(self.w * self.x * self._small))

    def moment(self, k, c):
        return float(np.sum(self.w * self.x**k * np.exp(-c * self.x)))

    def log_moment(self, k, c):
        return float(special.logsumexp(self._weights(c, 0.0, k)))

    def _weights(self, c, h, l):
        # log of w_i x_i^l e^{(h-c) x_i}; the Poisson(h x_i) pmf supplies the rest
        return np.log(self.w) + l * np.log(self.x) + (h - c) * self.x

    def taylor_terms(self, c, h, l, k_lo, k_hi, log_scale=0.0):
        ks = np.arange(k_lo, k_hi + 1)
        logw = self._weights(c, h, l) - log_scale
        if h == 0:
            out = np.zeros(len(ks))
            if k_lo == 0:
                out[0] = float(np.sum(np.exp(logw)))
            return out
        logpmf = stats.poisson.logpmf(ks[:, None], h * self.x[None, :])
        return np.exp(logpmf + logw[None, :]).sum(axis=1)

    def taylor_tail(self, c, h, l, K, log_scale=0.0):
        if h == 0:
            return 0.0
        logsf = stats.poisson.logsf(K, h * self.x)
        return float(np.sum(np.exp(logsf + self._weights(c, h, l) - log_scale)))

    def sample_taylor_tail(self, c, h, l, K, rng):
        mu = h * self.x
        logp = stats.poisson.logsf(K, mu) + self._weights(c, h, l)
        p = np.exp(logp - logp.max())
        i = rng.choice(len(p), p=p / p.sum())
        # inverse transform restricted to {k > K}
        target = rng.random() * stats.poisson.sf(K, mu[i])
        k = int(stats.poisson.isf(target, mu[i])) if target > 0 else K + 1
        return max(k, K + 1)

    def sample_tilted(self, l, c, rng, size):
        logp = self._weights(c, 0.0, l)
        p = np.exp(logp - logp.max())
        return self.x[rng.choice(len(p), size=size, p=p / p.sum())]

    def sample_p1(self, c, delta, rng, size):
        p = self.w * self.x * np.exp(-c * self.x) * (-np.expm1(-delta * self.x))
        return self.x[rng.choice(len(p), size=size, p=p / p.sum())]

    def spec_items(self):
        return {"atoms": ",".join(f"{x!r}:{w!r}" for x, w in self.atoms)}

    def __eq__(self, other):
        return (
            isinstance(other, AtomicMeasure)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.w, other.w)
        )

    def __hash__(self):
        return hash(("atomic", tuple(self.x), tuple(self.w)))

    def __repr__(self):
        return f"AtomicMeasure({self.atoms!r})"


class StablePower(LevyMeasure):
    """Stable power law contributing ``scale * c**index`` to ``psi``.

    The measure is ``Pi(dx) = C x**(-1-index) dx`` with
    ``C = scale*index*(index-1)/Gamma(2-index)``, and it is compensated over the
    whole half line, so its contribution to ``psi'(0+)`` is zero.  All
    quantities are evaluated in closed form; the measure is never integrated
    numerically.
    """

    kind = "stable"

    def __init__(self, index: float, scale: float = 1.0):
        index = float(index)
        scale = float(scale)
        if not (1.0 < index < 2.0):
            raise DomainError("stable index must lie strictly inside (1, 2); use beta for index 2")
        if not scale > 0:
            raise DomainError("stable scale must be positive")
        self.index = index
        self.scale = scale
        self.log_C = (
            math.log(scale) + math.log(index) + math.log(index - 1.0) - special.gammaln(2.0 - index)
        )

    @property
    def infinite_activity(self) -> bool:
        return True

    def psi_part(self, c):
        c = np.asarray(c, dtype=float)
        out = self.scale * c**self.index
        return float(out) if out.ndim == 0 else out

    def psi_increment(self, c, x):
        c = np.asarray(c, dtype=float)
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(c > 0, np.expm1(self.index * np.log1p(x / np.where(c > 0, c, 1.0))), 0.0)
            out = np.where(c > 0, self.scale * c**self.index * rel, self.scale * x**self.index)
        return float(out) if out.ndim == 0 else out

    def d1(self, c):
        c = np.asarray(c, dtype=float)
        out = self.scale * self.index * c ** (self.index - 1.0)
        return float(out) if out.ndim == 0 else out

    def d1_at_zero(self):
        return 0.0

    def d1_at_infinity(self):
        return math.inf

    def moment(self, k, c):
        if c <= 0:
            return math.inf
        return math.exp(self.log_moment(k, c))

    def log_moment(self, k, c):
        if c <= 0:
            return math.inf
        return float(self.log_C + special.gammaln(k - self.index) + (self.index - k) * math.log(c))

    def _log_terms(self, c, h, l, ks):
        a = self.index
        base = self.log_C + (a - l) * math.log(c)
        ks = np.asarray(ks, dtype=float)
        if h == 0:
            return np.where(ks == 0, base + special.gammaln(l - a), -np.inf)
        return base + ks * math.log(h / c) + special.gammaln(l + ks - a) - special.gammaln(ks + 1)

    def taylor_terms(self, c, h, l, k_lo, k_hi, log_scale=0.0):
        if l + k_lo < 2:
            raise DomainError("Taylor terms of the stable measure need l + k >= 2")
        return np.exp(self._log_terms(c, h, l, np.arange(k_lo, k_hi + 1)) - log_scale)

    def _ratio_is_one(self, c, h):
        return abs(h - c) <= 1e-14 * c

    def _log_survival(self, c, l, k):
        # exact sum over j > k of the h = c terms, via the telescoping identity
        # Gamma(l+j-a)/j! = (E(j) - E(j-1)) / (l - a) with E(j) = Gamma(l+j+1-a)/j!
        a = self.index
        return (
            self.log_C
            + (a - l) * math.log(c)
            + special.gammaln(l + k + 1 - a)
            - special.gammaln(k + 1)
            - math.log(a - l)
        )

    def taylor_tail(self, c, h, l, K, log_scale=0.0):
        if h == 0:
            return 0.0
        if h > c * (1 + 1e-14):
            return math.inf
        if self._ratio_is_one(c, h):
            if l >= self.index:
                return math.inf
            return math.exp(self._log_survival(c, l, K) - log_scale)
        total = 0.0
        k = K + 1
        while True:
            block = self.taylor_terms(c, h, l, k, k + 255, log_scale)
            total += block.sum()
            if block[-1] <= 1e-18 * total or block[-1] == 0.0:
                return float(total)
            k += 256

    def sample_taylor_tail(self, c, h, l, K, rng):
        if self._ratio_is_one(c, h):
            if l >= self.index:
                raise DomainError("stable tail is not summable for l >= index at h = c")
            # smallest k > K with S(k) <= U * S(K): exponential search then bisection
            thresh = math.log(rng.random()) + self._log_survival(c, l, K)
            lo, hi = K, K + 1
            while self._log_survival(c, l, hi) > thresh:
                lo, hi = hi, 2 * hi + 1
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if self._log_survival(c, l, mid) > thresh:
                    lo = mid
                else:
                    hi = mid
            return hi
        # work relative to the first tail term so that nothing overflows
        shift = float(self._log_terms(c, h, l, [K + 1])[0])
        tail = self.taylor_tail(c, h, l, K, shift)
        u = rng.random() * tail
        k = K + 1
        while True:
            block = self.taylor_terms(c, h, l, k, k + 255, shift)
            cum = np.cumsum(block)
            idx = int(np.searchsorted(cum, u, side="right"))
            if idx < len(block):
                return k + idx
            u -= cum[-1]
            if block[-1] == 0.0:
                return k + len(block) - 1
            k += 256

    def sample_tilted(self, l, c, rng, size):
        if l <= self.index or c <= 0:
            raise DomainError("x**l e^{-cx} Pi(dx) is not finite for these parameters")
        return rng.gamma(l - self.index, 1.0 / c, size=size)

    def p1_rate(self, c, delta):
        a = self.index
        return self.scale * a * ((c + delta) ** (a - 1) - c ** (a - 1))

    def sample_p1(self, c, delta, rng, size):
        # (1 - e^{-delta x}) = x int_0^delta e^{-yx} dy, so draw y with density
        # proportional to (c + y)^{a-2} on [0, delta], then x ~ Gamma(2 - a, c + y)
        a = self.index
        lo = c ** (a - 1)
        hi = (c + delta) ** (a - 1)
        u = rng.random(size)
        y = (lo + u * (hi - lo)) ** (1.0 / (a - 1)) - c
        return rng.gamma(2.0 - a, 1.0, size=size) / (c + y)

    def spec_items(self):
        return {"index": repr(self.index), "scale": repr(self.scale)}

    def __eq__(self, other):
        return isinstance(other, StablePower) and (self.index, self.scale) == (other.index, other.scale)

    def __hash__(self):
        return hash(("stable", self.index, self.scale))

    def __repr__(self):
        return f"StablePower(index={self.index!r}, scale={self.scale!r})"


class NumericDensity(AtomicMeasure):
    """Levy measure with a density on a cut support ``[x_min, x_max]``.

    The density is replaced by a Gauss-Legendre rule in ``y = log x`` with
    ``nodes`` points.  The rule is accepted only if doubling the node count
    changes ``psi`` and its first four derivatives by less than ``rtol`` on a
    grid of ``c`` values; otherwise :class:`NumericError` reports the achieved
    tolerance.  After discretisation the measure behaves exactly like an
    :class:`AtomicMeasure` with the quadrature nodes as atoms.
    """

    kind = "numeric"

    def __init__(self, density, x_min: float, x_max: float, nodes: int = 64, rtol: float = 1e-8):
        if not (0 < x_min < x_max < math.inf):
            raise DomainError("NumericDensity needs 0 < x_min < x_max < inf")
        self.density = density
        self.x_min = float(x_min)
        self.x_max = float(x_max)
        self.nodes = int(nodes)
        xs, ws = self._rule(self.nodes)
        xs2, ws2 = self._rule(2 * self.nodes)
        if np.any(ws <= 0):
            raise DomainError("density must be positive on its support")
        coarse = AtomicMeasure(zip(xs, ws))
        fine = AtomicMeasure(zip(xs2, ws2))
        worst = 0.0
        for c in (0.1, 1.0, 10.0):
            pairs = [(coarse.psi_part(c), fine.psi_part(c)), (coarse.d1(c), fine.d1(c))]
            pairs += [(coarse.moment(k, c), fine.moment(k, c)) for k in (2, 3, 4)]
            for a, b in pairs:
                worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
        if worst > rtol:
            raise NumericError(
                f"quadrature of the Levy density did not converge (relative change {worst:.3g})",
                achieved=worst,
            )
        self.achieved_rtol = worst
        super().__init__(zip(xs2, ws2))

    def _rule(self, n):
        # separate panels on each side of x = 1, where the compensator jumps
        cuts = [self.x_min, self.x_max]
        if self.x_min < 1.0 < self.x_max:
            cuts = [self.x_min, 1.0, self.x_max]
        t, w = np.polynomial.legendre.leggauss(n)
        xs, ws = [], []
        for lo, hi in zip(cuts, cuts[1:]):
            a, b = math.log(lo), math.log(hi)
            x = np.exp(0.5 * (b - a) * t + 0.5 * (b + a))
            dens = np.array([float(self.density(v)) for v in x])
            xs.append(x)
            ws.append(0.5 * (b - a) * w * x * dens)
        return np.concatenate(xs), np.concatenate(ws)

    def spec_items(self):
        raise DomainError("a numeric density has no text representation")

    def __repr__(self):
        return f"NumericDensity(x_min={self.x_min!r}, x_max={self.x_max!r}, nodes={self.nodes})"


# ---------------------------------------------------------------------------
# Mechanisms
# ---------------------------------------------------------------------------


def _check_quad(val, err):
    if not math.isfinite(val) or err > 1e-6 * max(1.0, abs(val)):
        raise NumericError("quadrature of 1/psi did not converge", achieved=err)
    return val


def _integral_above(psi_up, ea, eb):
    """``int dc / psi(c)`` over ``c = gamma + e`` for ``e`` in ``[ea, eb]``.

    ``psi_up(e)`` must return ``psi(gamma + e)`` accurately even when ``e`` is
    tiny compared with ``gamma``.  The substitution ``e = exp(y)`` removes the
    logarithmic singularity at ``gamma``.
    """
    if ea == eb:
        return 0.0
    if eb == math.inf:
        split = max(ea, 1.0)
        tail, err = integrate.quad(
            lambda e: 1.0 / psi_up(e), split, math.inf, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=200
        )
        return _check_quad(tail, err) + _integral_above(psi_up, ea, split)

    def f(y):
        e = math.exp(y)
        return e / psi_up(e)

    val, err = integrate.quad(f, math.log(ea), math.log(eb), epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=200)
    return _check_quad(val, err)


def _solve_decreasing(fun, target, y_hi, step=1.0):
    """Find ``y <= y_hi`` with ``fun(y) = target`` for ``fun`` decreasing to 0 at ``y_hi``."""
    y_lo = y_hi - step
    while fun(y_lo) < target:
        step *= 2.0
        y_lo = y_hi - step
        if step > 1e4:
            raise NumericError("could not bracket the flow equation")
    return optimize.brentq(lambda y: fun(y) - target, y_lo, y_hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)


def _flow(psi_up, psi_down, gamma, t, lam):
    """Solve ``int_u^lam dc/psi(c) = t`` for ``u`` by root finding over ``log|u - gamma|``.

    ``psi_up(e) = psi(gamma + e)`` and ``psi_down(e) = -psi(gamma - e)`` are
    both positive on their domains.
    """
    if t == 0 or lam == gamma:
        return float(lam)
    if lam > gamma:
        e_lam = lam - gamma
        y = _solve_decreasing(lambda y: _integral_above(psi_up, math.exp(y), e_lam), t, math.log(e_lam))
        return gamma + math.exp(y)
    if lam <= 0.0:
        return 0.0
    # below gamma the flow increases from lam towards gamma
    e_lam = gamma - lam
    y = _solve_decreasing(lambda y: _integral_above(psi_down, math.exp(y), e_lam), t, math.log(e_lam))
    return gamma - math.exp(y)


@dataclass(frozen=True)
class BranchingMechanism:
    """``psi(c) = alpha c + beta c^2 + int (e^{-cx} - 1 + cx 1{x<1}) Pi(dx)``.

    Construction checks ``beta >= 0``, that ``m = psi'(0+)`` is finite and
    that ``psi`` tends to infinity, so ``psi_inverse`` is defined everywhere
    on ``[0, inf)``.
    """

    alpha: float = 0.0
    beta: float = 0.0
    levy: LevyMeasure = field(default_factory=ZeroMeasure)

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise DomainError("alpha and beta must be finite")
        if self.beta < 0:
            raise DomainError("beta must be non-negative")
        if not math.isfinite(self.levy.d1_at_zero()):
            raise DomainError("psi'(0+) must be finite")
        if self.beta == 0 and self.alpha + self.levy.d1_at_infinity() <= 0:
            raise DomainError("psi must tend to +infinity")

    # -- basic evaluations -------------------------------------------------

    @property
    def m(self) -> float:
        """``psi'(0+)``."""
        return self.alpha + self.levy.d1_at_zero()

    @property
    def is_quadratic(self) -> bool:
        return self.levy.is_zero

    @property
    def is_pure_stable(self) -> bool:
        return isinstance(self.levy, StablePower) and self.alpha == 0 and self.beta == 0

    def psi(self, c):
        c_arr = np.asarray(c, dtype=float)
        if np.any(c_arr < 0):
            raise DomainError("psi is evaluated on [0, inf) only")
        out = self.alpha * c_arr + self.beta * c_arr**2 + self.levy.psi_part(c_arr)
        return float(out) if np.ndim(out) == 0 else out

    def psi_shift(self, c, x):
        """``psi(c + x) - psi(c)`` evaluated without cancellation."""
        c = np.asarray(c, dtype=float)
        x = np.asarray(x, dtype=float)
        out = self.alpha * x + self.beta * x * (2 * c + x) + self.levy.psi_increment(c, x)
        return float(out) if np.ndim(out) == 0 else out

    def derivative(self, c, k: int = 1):
        if k == 0:
            return self.psi(c)
        if k < 0:
            raise DomainError("derivative order must be non-negative")
        if c <= 0 and (k >= 2 and self.levy.infinite_activity):
            raise DomainError("higher derivatives of psi blow up at 0 for infinite activity")
        if c < 0:
            raise DomainError("psi is evaluated on [0, inf) only")
        if k == 1:
            if c == 0:
                return self.m
            return float(self.alpha + 2 * self.beta * c + self.levy.d1(c))
        mom = self.levy.moment(k, c) if k == 2 else None
        if k == 2:
            if not math.isfinite(mom):
                raise NumericError("non-finite moment of the Levy measure")
            return 2 * self.beta + mom
        lm = self.levy.log_moment(k, c)
        if lm > 709.0:
            raise NumericError(f"psi^({k}) overflows; use log_abs_derivative")
        if lm == math.inf:
            raise NumericError("non-finite moment of the Levy measure")
        return (-1) ** k * math.exp(lm)

    def log_abs_derivative(self, c, k: int) -> float:
        """``log |psi^(k)(c)|``, finite for orders whose value overflows a float."""
        if k >= 3:
            if c <= 0 and self.levy.infinite_activity:
                raise DomainError("higher derivatives of psi blow up at 0 for infinite activity")
            if c < 0:
                raise DomainError("psi is evaluated on [0, inf) only")
            return self.levy.log_moment(k, c)
        d = abs(self.derivative(c, k))
        return math.log(d) if d > 0 else -math.inf

    # -- roots and inverse ---------------------------------------------------

    @cached_property
    def gamma(self) -> float:
        """Largest root of ``psi``."""
        if self.m >= 0:
            return 0.0
        if self.is_quadratic:
            return -self.alpha / self.beta
        hi = 1.0
        while self.psi(hi) <= 0:
            hi *= 2.0
        tiny = 1e-300
        c_star = optimize.brentq(lambda c: self.derivative(c, 1), tiny, hi, xtol=1e-15)
        return optimize.brentq(self.psi, c_star, hi, xtol=ROOT_XTOL, rtol=4 * np.finfo(float).eps)

    def inverse(self, lam: float) -> float:
        """Inverse of ``psi`` on its increasing branch ``[gamma, inf)``."""
        lam = float(lam)
        if lam < 0:
            raise DomainError("psi_inverse needs lambda >= 0")
        if lam == 0:
            return self.gamma
        if self.is_quadratic:
            if self.beta == 0:
                return lam / self.alpha
            a, b = self.alpha, self.beta
            disc = a * a + 4 * b * lam
            # numerically stable root of b c^2 + a c - lam = 0
            if a >= 0:
                return 2 * lam / (a + math.sqrt(disc))
            return (-a + math.sqrt(disc)) / (2 * b)
        if self.is_pure_stable:
            return (lam / self.levy.scale) ** (1.0 / self.levy.index)
        lo = self.gamma
        hi = max(lo, 1.0)
        while self.psi(hi) < lam:
            lo, hi = hi, 2.0 * hi
        root = optimize.brentq(lambda c: self.psi(c) - lam, lo, hi, xtol=ROOT_XTOL, rtol=4 * np.finfo(float).eps)
        # one Newton polish step on the convex branch
        d = self.derivative(root, 1)
        if d > 0:
            cand = root - (self.psi(root) - lam) / d
            if cand >= self.gamma and abs(self.psi(cand) - lam) < abs(self.psi(root) - lam):
                root = cand
        return root

    # -- Grey's condition and the integral equations -------------------------

    def _psi_up(self, e):
        return self.psi_shift(self.gamma, e) if self.gamma > 0 else self.psi(e)

    def _psi_down(self, e):
        return self.psi_shift(self.gamma - e, e)

    @property
    def grey(self) -> bool:
        """Whether ``int^inf dc/psi(c)`` converges.

        Decided analytically: with ``beta = 0`` and a finite-activity measure
        ``psi`` grows at most linearly, otherwise it grows at least like
        ``c**index`` with ``index > 1``.
        """
        return self.beta > 0 or isinstance(self.levy, StablePower)

    def csbp_exponent(self, t: float, lam: float, numeric: bool = False) -> float:
        if t < 0 or lam < 0:
            raise DomainError("csbp_exponent needs t, lambda >= 0")
        if t == 0:
            return float(lam)
        if lam == self.gamma:
            return float(lam)
        if not numeric and self.is_quadratic and self.beta > 0:
            a, b = self.alpha, self.beta
            if a == 0:
                return lam / (1 + b * lam * t)
            e = math.exp(-a * t)
            return lam * e / (1 + (b / a) * lam * -math.expm1(-a * t))
        if not numeric and self.is_pure_stable:
            s, a = self.levy.scale, self.levy.index
            return (lam ** (1 - a) + s * (a - 1) * t) ** (1 / (1 - a))
        return _flow(self._psi_up, self._psi_down, self.gamma, t, lam)

    def grey_v(self, x: float, numeric: bool = False) -> float:
        if not self.grey:
            raise DomainError("Grey's condition fails: int^inf dc/psi(c) diverges")
        if x <= 0:
            raise DomainError("grey_v needs x > 0")
        if not numeric and self.is_quadratic:
            a, b = self.alpha, self.beta
            if a == 0:
                return 1.0 / (b * x)
            return a / (b * math.expm1(a * x))
        if not numeric and self.is_pure_stable:
            s, a = self.levy.scale, self.levy.index
            return (s * (a - 1) * x) ** (-1.0 / (a - 1))
        g = self.gamma
        fun = lambda y: _integral_above(self._psi_up, math.exp(y), math.inf)  # noqa: E731
        hi = 0.0
        while fun(hi) > x:
            hi += 2.0
            if hi > 600:
                raise NumericError("could not bracket grey_v")
        lo = hi
        while fun(lo) < x:
            lo -= 2.0
            if lo < -600:
                raise NumericError("could not bracket grey_v")
        y = optimize.brentq(lambda y: fun(y) - x, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
        return g + math.exp(y)

    def finite_level_v(self, mu: float, lam: float, t: float, numeric: bool = False) -> float:
        """Height exponent of one GW(xi_{mu,lam}, psi'(psi^{-1}(lam))) real tree.

        Returns ``v`` with ``P(h <= t) = exp(-v)``.  The defining integral
        equation is, after the substitution ``w = Delta (1 - e^{-v})``, the
        flow of the shifted mechanism ``x -> psi(psi^{-1}(mu) + x) - mu``
        started from ``Delta = psi^{-1}(lam) - psi^{-1}(mu)``.
        """
        if not (0 <= mu < lam):
            raise DomainError("finite_level_v needs 0 <= mu < lambda")
        if t < 0:
            raise DomainError("finite_level_v needs t >= 0")
        if t == 0:
            return math.inf
        if t == math.inf:
            return 0.0
        shifted = ShiftedMechanism(self, mu)
        delta = self.inverse(lam) - shifted.c_mu
        w = shifted.csbp_exponent(t, delta, numeric=numeric)
        if w <= 0:
            return 0.0
        return -math.log1p(-w / delta)


class ShiftedMechanism:
    """``psi_mu(x) = psi(psi^{-1}(mu) + x) - mu`` viewed as a mechanism.

    The shifted function is again convex with ``psi_mu(0) = 0`` and
    ``psi_mu'(0) = psi'(psi^{-1}(mu)) >= 0``, so its largest root is 0.
    """

    def __init__(self, base: BranchingMechanism, mu: float):
        self.base = base
        self.mu = float(mu)
        self.c_mu = base.inverse(mu)
        self.gamma = 0.0

    @property
    def m(self):
        return self.base.derivative(self.c_mu, 1) if self.c_mu > 0 else self.base.m

    @property
    def grey(self):
        return self.base.grey

    def psi(self, x):
        return self.base.psi_shift(self.c_mu, x)

    def derivative(self, x, k=1):
        if k == 0:
            return self.psi(x)
        return self.base.derivative(self.c_mu + x, k)

    def log_abs_derivative(self, x, k: int) -> float:
        return self.base.log_abs_derivative(self.c_mu + x, k)

    def inverse(self, lam):
        return self.base.inverse(lam + self.mu) - self.c_mu

    def csbp_exponent(self, t, lam, numeric=False):
        if t == 0 or lam == 0:
            return float(lam)
        b = self.base
        if not numeric and b.is_quadratic and b.beta > 0:
            # psi_mu is again quadratic with drift psi'(c_mu)
            a, beta = b.alpha + 2 * b.beta * self.c_mu, b.beta
            if a == 0:
                return lam / (1 + beta * lam * t)
            return lam * math.exp(-a * t) / (1 + (beta / a) * lam * -math.expm1(-a * t))
        return _flow(self.psi, None, 0.0, t, lam)


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------


def parse_mechanism(text: str) -> BranchingMechanism:
    """Parse ``kind=stable index=1.5 scale=1.0`` style specifications.

    Recognised kinds are ``quadratic``, ``stable`` and ``atomic``.  Every kind
    accepts optional ``alpha`` and ``beta``; ``stable`` takes ``index`` and
    ``scale``; ``atomic`` takes ``atoms=x1:w1,x2:w2``.  Lines starting with
    ``#`` are ignored so a spec can live in a small commented file.
    """
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    fields = {}
    for tok in tokens:
        if "=" not in tok:
            raise DomainError(f"malformed mechanism token {tok!r}")
        key, value = tok.split("=", 1)
        if key in fields:
            raise DomainError(f"duplicate key {key!r}")
        fields[key] = value
    kind = fields.pop("kind", None)
    if kind is None:
        raise DomainError("mechanism spec needs a kind")
    try:
        alpha = float(fields.pop("alpha", 0.0))
        beta = float(fields.pop("beta", 0.0))
        if kind == "quadratic":
            levy = ZeroMeasure()
        elif kind == "stable":
            levy = StablePower(float(fields.pop("index")), float(fields.pop("scale", 1.0)))
        elif kind == "atomic":
            raw = fields.pop("atoms")
            atoms = []
            for item in raw.split(","):
                x, w = item.split(":")
                atoms.append((float(x), float(w)))
            levy = AtomicMeasure(atoms)
        else:
            raise DomainError(f"unknown mechanism kind {kind!r}")
    except KeyError as exc:
        raise DomainError(f"mechanism spec is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, DomainError):
            raise
        raise DomainError(f"bad number in mechanism spec: {exc}") from None
    if fields:
        raise DomainError(f"unknown mechanism keys {sorted(fields)}")
    return BranchingMechanism(alpha, beta, levy)


def format_mechanism(mech: BranchingMechanism) -> str:
    """Inverse of :func:`parse_mechanism` (round-trips exactly)."""
    kind = {"zero": "quadratic", "stable": "stable", "atomic": "atomic"}.get(mech.levy.kind)
    if kind is None:
        raise DomainError("this mechanism has no text representation")
    parts = [f"kind={kind}", f"alpha={mech.alpha!r}", f"beta={mech.beta!r}"]
    parts += [f"{k}={v}" for k, v in mech.levy.spec_items().items()]
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Functional interface
# ---------------------------------------------------------------------------


def psi(mech: BranchingMechanism, c: float) -> float:
    return mech.psi(c)


def psi_derivative(mech: BranchingMechanism, c: float, k: int) -> float:
    return mech.derivative(c, k)


def psi_inverse(mech: BranchingMechanism, lam: float) -> float:
    return mech.inverse(lam)


def gamma_root(mech: BranchingMechanism) -> float:
    return mech.gamma


def grey_condition(mech: BranchingMechanism) -> bool:
    return mech.grey


def csbp_exponent(mech: BranchingMechanism, t: float, lam: float) -> float:
    return mech.csbp_exponent(t, lam)


def grey_v(mech: BranchingMechanism, x: float) -> float:
    return mech.grey_v(x)


def finite_level_v(mech: BranchingMechanism, mu: float, lam: float, t: float) -> float:
    return mech.finite_level_v(mu, lam, t)
