"""Ordered discrete trees, Galton-Watson sampling and Bernoulli leaf colouring.

Trees are stored in level order (breadth first, children of a vertex
contiguous and in birth order).  In that order the sequence of child counts
``k_u`` determines the tree completely, so a :class:`DiscreteTree` is just an
integer array; Neveu words are derived on demand.

The colouring section implements the two-type description of a
Bernoulli-coloured Galton-Watson tree: the all-red probability ``g(p)``, the
red and black offspring laws, the geometric number of unary vertices and the
laws ``nu_l`` of red vertices grafted on a black vertex with ``l`` children,
together with the exact reconstruction of a coloured tree from its black tree.
"""
from __future__ import annotations

import math
from fractions import Fraction
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import optimize

from .errors import BudgetExceeded, DomainError
from .verify import StatReport, z_check

__all__ = [
    "OffspringDistribution",
    "DiscreteTree",
    "TwoColourTree",
    "ColouringLaws",
    "sample_gw_tree",
    "sample_all_red",
    "sample_gw_forest",
    "colour_leaves",
    "black_subtree",
    "black_tree",
    "g_of_p",
    "derive_black_red_laws",
    "reconstruct",
    "kappa_check",
    "kappa_target",
    "red_tree_count",
    "enumerate_trees",
    "enumerate_colourings",
    "coloured_tree_probability",
    "tree_probability",
    "reconstruction_probability",
    "brute_force_identity",
]


# ---------------------------------------------------------------------------
# Offspring distributions
# ---------------------------------------------------------------------------


class OffspringDistribution:
    """Law on the non-negative integers with an explicit head and an exact tail.

    ``probs[k]`` holds ``xi(k)`` for ``k <= K``.  Any remaining mass
    ``tail_mass`` lives on ``{k > K}`` and is sampled by ``tail_sampler(rng)``,
    which must return a single integer ``> K`` with the correct conditional
    law.  ``pgf`` may supply a closed form generating function; otherwise the
    head polynomial is used (the tail contributes at most ``tail_mass s^(K+1)``).
    """

    def __init__(
        self,
        probs: Sequence[float],
        tail_mass: float = 0.0,
        tail_sampler: Callable | None = None,
        pgf: Callable | None = None,
        name: str = "",
        tol: float = 1e-10,
    ):
        p = np.asarray(probs, dtype=float)
        if p.ndim != 1 or len(p) == 0:
            raise DomainError("probs must be a non-empty vector")
        if np.any(p < -1e-15):
            raise DomainError("probabilities must be non-negative")
        p = np.clip(p, 0.0, None)
        # drop trailing zeros so K is the largest support point of the head
        nz = np.nonzero(p)[0]
        p = p[: (nz[-1] + 1 if len(nz) else 1)]
        total = p.sum() + tail_mass
        if abs(total - 1.0) > tol:
            raise DomainError(f"offspring law sums to {total!r}, not 1")
        if tail_mass > 0 and tail_sampler is None:
            raise DomainError("a positive tail mass needs a tail sampler")
        self.probs = p
        self.tail_mass = float(tail_mass)
        self.tail_sampler = tail_sampler
        self._pgf = pgf
        self.name = name
        self._cum = np.cumsum(p)
        self._total = float(self._cum[-1] + self.tail_mass)

    @classmethod
    def from_mapping(cls, masses: Mapping[int, float], **kw) -> "OffspringDistribution":
        if not masses:
            raise DomainError("empty offspring law")
        kmax = max(masses)
        probs = np.zeros(kmax + 1)
        for k, v in masses.items():
            if k < 0:
                raise DomainError("offspring counts are non-negative")
            probs[k] = float(v)
        return cls(probs, **kw)

    @property
    def K(self) -> int:
        return len(self.probs) - 1

    @property
    def proper(self) -> bool:
        return len(self.probs) < 2 or self.probs[1] == 0.0

    @property
    def has_leaves(self) -> bool:
        return self.probs[0] > 0

    @property
    def finite(self) -> bool:
        return self.tail_mass == 0.0

    def pmf(self, k: int) -> float:
        return float(self.probs[k]) if 0 <= k <= self.K else 0.0

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in enumerate(self.probs) if v > 0}

    @cached_property
    def mean(self) -> float:
        """Mean of the head (exact for finite laws)."""
        return float(np.arange(len(self.probs)) @ self.probs)

    def pgf(self, s):
        if self._pgf is not None:
            return self._pgf(s)
        return np.polynomial.polynomial.polyval(s, self.probs)

    def pgf_derivative(self, s, order: int = 1):
        """Derivative of the head polynomial (closed forms are not differentiated)."""
        coef = np.polynomial.polynomial.polyder(self.probs, order) if order <= self.K else np.zeros(1)
        return np.polynomial.polynomial.polyval(s, coef)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size) * self._total
        out = np.searchsorted(self._cum, u, side="right")
        over = out > self.K
        if np.any(over):
            if self.tail_mass > 0:
                idx = np.nonzero(over)[0]
                # draws in the rounding gap of the head go to the largest atom
                for i in idx:
                    if u[i] < self._cum[-1]:
                        out[i] = self.K
                    else:
                        out[i] = self.tail_sampler(rng)
            else:
                out[over] = self.K
        return out.astype(np.int64)

    def __repr__(self):
        head = ", ".join(f"{k}: {v:.6g}" for k, v in list(self.as_dict().items())[:6])
        more = ", ..." if self.K > 5 or self.tail_mass else ""
        return f"OffspringDistribution({{{head}{more}}}{', ' + self.name if self.name else ''})"


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


def _format_word(word) -> str:
    return ".".join(str(i) for i in word)


def _parse_word(text: str) -> tuple:
    text = text.strip()
    if text == "":
        return ()
    return tuple(int(part) for part in text.split("."))


class DiscreteTree:
    """Ordered rooted tree stored as level-order child counts.

    Node ``0`` is the root (the empty word).  The children of node ``i`` are
    the consecutive nodes ``first_child[i], ..., first_child[i] + k_i - 1``.
    """

    __slots__ = ("nchild", "__dict__")

    def __init__(self, nchild: Sequence[int]):
        k = np.asarray(nchild, dtype=np.int64)
        if k.ndim != 1 or len(k) == 0:
            raise DomainError("a tree has at least its root")
        if np.any(k < 0):
            raise DomainError("child counts must be non-negative")
        # level order is valid iff the BFS queue never runs dry before the end
        reach = 1 + np.cumsum(k)
        if reach[-1] != len(k) or np.any(reach[:-1] <= np.arange(1, len(k))):
            raise DomainError("child counts do not describe a level-order tree")
        k.setflags(write=False)
        self.nchild = k

    # -- structure -----------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.nchild)

    def __len__(self):
        return self.n

    @cached_property
    def first_child(self) -> np.ndarray:
        return 1 + np.cumsum(self.nchild) - self.nchild

    @cached_property
    def parent(self) -> np.ndarray:
        par = np.empty(self.n, dtype=np.int64)
        par[0] = -1
        par[1:] = np.repeat(np.arange(self.n), self.nchild)
        return par

    @cached_property
    def level_bounds(self) -> list:
        """``[(start, end), ...]`` index ranges of each generation."""
        bounds = []
        start, end = 0, 1
        while start < self.n:
            bounds.append((start, end))
            nxt = end + int(self.nchild[start:end].sum())
            start, end = end, nxt
        return bounds

    @cached_property
    def depth(self) -> np.ndarray:
        d = np.empty(self.n, dtype=np.int64)
        for g, (s, e) in enumerate(self.level_bounds):
            d[s:e] = g
        return d

    @property
    def height(self) -> int:
        return len(self.level_bounds) - 1

    @property
    def is_leaf(self) -> np.ndarray:
        return self.nchild == 0

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.nchild == 0))

    def children(self, i: int) -> range:
        f = int(self.first_child[i])
        return range(f, f + int(self.nchild[i]))

    @cached_property
    def words(self) -> list:
        words = [()] * self.n
        fc = self.first_child
        par = self.parent
        for i in range(1, self.n):
            p = par[i]
            words[i] = words[p] + (int(i - fc[p] + 1),)
        return words

    @property
    def proper(self) -> bool:
        return not np.any(self.nchild == 1)

    def key(self) -> tuple:
        return tuple(int(v) for v in self.nchild)

    def __eq__(self, other):
        return isinstance(other, DiscreteTree) and np.array_equal(self.nchild, other.nchild)

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"DiscreteTree(n={self.n}, height={self.height})"

    # -- conversions ---------------------------------------------------------

    @classmethod
    def from_words(cls, words) -> "DiscreteTree":
        """Build from a set of Neveu words; checks parent closure and gaps."""
        ws = {tuple(w) for w in words}
        if () not in ws:
            raise DomainError("the root (empty word) is missing")
        for w in ws:
            if w:
                if any(i < 1 for i in w):
                    raise DomainError("words use positive integers")
                if w[:-1] not in ws:
                    raise DomainError(f"word {w} has no parent")
                if w[-1] > 1 and w[:-1] + (w[-1] - 1,) not in ws:
                    raise DomainError(f"gap before word {w}")
        order = sorted(ws, key=lambda w: (len(w), w))
        count = {w: 0 for w in order}
        for w in order[1:]:
            count[w[:-1]] += 1
        return cls([count[w] for w in order])

    @classmethod
    def from_children(cls, children: Mapping[int, Sequence[int]], root: int):
        """Build from an adjacency map ``node -> ordered children``.

        Returns the tree and the list of original labels in level order.
        """
        order = [root]
        counts = []
        i = 0
        while i < len(order):
            ch = children.get(order[i], ())
            counts.append(len(ch))
            order.extend(ch)
            i += 1
        return cls(counts), order

    def children_map(self) -> dict:
        return {i: list(self.children(i)) for i in range(self.n)}

    def to_text(self, colour=None) -> str:
        """``word<TAB>k`` lines sorted lexicographically (``<TAB>c`` appended if coloured)."""
        rows = []
        for i, w in enumerate(self.words):
            row = [_format_word(w), str(int(self.nchild[i]))]
            if colour is not None:
                row.append(str(int(colour[i])))
            rows.append((w, "\t".join(row)))
        rows.sort(key=lambda r: r[0])
        return "".join(r[1] + "\n" for r in rows)

    @classmethod
    def from_text(cls, text: str):
        """Parse :meth:`to_text` output; returns ``(tree, colours or None)``."""
        entries = {}
        colours = {}
        for line in text.splitlines():
            if not line.strip("\n"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise DomainError(f"malformed tree line {line!r}")
            w = _parse_word(parts[0])
            entries[w] = int(parts[1])
            if len(parts) == 3:
                colours[w] = int(parts[2])
        tree = cls.from_words(entries)
        for w, i in zip(tree.words, range(tree.n)):
            if entries[w] != tree.nchild[i]:
                raise DomainError(f"child count of word {w} does not match the word set")
        if colours:
            if len(colours) != len(entries):
                raise DomainError("either every line or no line carries a colour")
            return tree, np.array([colours[w] for w in tree.words], dtype=np.int8)
        return tree, None


class TwoColourTree:
    """A discrete tree with colours ``1`` (black) and ``0`` (red) on its vertices."""

    def __init__(self, tree: DiscreteTree, colour: Sequence[int], check: bool = True):
        c = np.asarray(colour, dtype=np.int8)
        if c.shape != (tree.n,):
            raise DomainError("one colour per vertex is required")
        self.tree = tree
        self.colour = c
        if check and not np.array_equal(c, _close_colours(tree, np.where(tree.is_leaf, c, 0))):
            raise DomainError("colours are not the ancestral closure of the leaf colours")

    @property
    def root_black(self) -> bool:
        return bool(self.colour[0])

    def to_text(self) -> str:
        return self.tree.to_text(self.colour)

    def key(self) -> tuple:
        return self.tree.key(), tuple(int(v) for v in self.colour)

    def __eq__(self, other):
        return isinstance(other, TwoColourTree) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


def _close_colours(tree: DiscreteTree, leaf_colour: np.ndarray) -> np.ndarray:
    c = np.where(tree.is_leaf, leaf_colour, 0).astype(np.int8)
    par = tree.parent
    for s, e in reversed(tree.level_bounds[1:]):
        np.maximum.at(c, par[s:e], c[s:e])
    return c


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_gw_tree(xi: OffspringDistribution, rng: np.random.Generator, node_budget: int = 10**6) -> DiscreteTree:
    """Galton-Watson tree generated generation by generation.

    Raises :class:`BudgetExceeded` as soon as the tree would exceed
    ``node_budget`` vertices, so accepted trees follow the GW law restricted
    to ``{#nodes <= budget}``.
    """
    if node_budget < 1:
        raise DomainError("node_budget must be positive")
    counts = []
    gen = 1
    total = 1
    while gen > 0:
        ks = xi.sample(rng, gen)
        counts.append(ks)
        gen = int(ks.sum())
        total += gen
        if total > node_budget:
            raise BudgetExceeded(f"GW tree exceeded the budget of {node_budget} nodes")
    return DiscreteTree(np.concatenate(counts))


def sample_gw_forest(xi: OffspringDistribution, n_trees: int, rng, node_budget: int = 10**6) -> list:
    return [sample_gw_tree(xi, rng, node_budget) for _ in range(n_trees)]


def sample_all_red(xi: OffspringDistribution, p: float, rng: np.random.Generator, node_budget: int = 10**7) -> bool:
    """Whether a GW(xi) tree with leaves red w.p. ``p`` comes out all red.

    Generations are drawn one at a time and their leaves coloured at once;
    the first black leaf ends the draw, so only all-red trees are explored
    completely.
    """
    if not (0.0 <= p <= 1.0):
        raise DomainError("p must lie in [0, 1]")
    gen, total = 1, 1
    while gen > 0:
        ks = xi.sample(rng, gen)
        leaves = int(np.count_nonzero(ks == 0))
        if leaves and np.any(rng.random(leaves) >= p):
            return False
        gen = int(ks.sum())
        total += gen
        if total > node_budget:
            raise BudgetExceeded(f"all-red tree exceeded the budget of {node_budget} nodes")
    return True


def colour_leaves(tree: DiscreteTree, p: float, rng: np.random.Generator) -> TwoColourTree:
    """Colour leaves red with probability ``p`` independently; close black upwards."""
    if not (0.0 <= p <= 1.0):
        raise DomainError("p must lie in [0, 1]")
    leaves = tree.is_leaf
    if not np.any(leaves):
        raise DomainError("a leafless tree cannot be coloured")
    leaf_colour = np.zeros(tree.n, dtype=np.int8)
    leaf_colour[leaves] = rng.random(int(leaves.sum())) >= p
    return TwoColourTree(tree, _close_colours(tree, leaf_colour), check=False)


def black_subtree(tc: TwoColourTree, return_map: bool = False):
    """Tree induced on the black vertices, relabelled in level order."""
    if not tc.root_black:
        raise DomainError("the root is red: the black subtree is empty")
    tree = tc.tree
    black = tc.colour == 1
    counts = np.bincount(tree.parent[1:][black[1:]], minlength=tree.n)
    sub = DiscreteTree(counts[black])
    if return_map:
        return sub, np.nonzero(black)[0]
    return sub


def black_tree(tc: TwoColourTree, contract_root: bool = False) -> DiscreteTree:
    """Contract the unary chains of the black subtree.

    The retained vertices are the root together with the vertices whose
    number of black children differs from one.  When ``contract_root`` is set
    a unary root chain is contracted as well, so the result is rooted at the
    first retained vertex strictly above the root.
    """
    sub = black_subtree(tc)
    keep = sub.nchild != 1
    keep[0] = True
    par = sub.parent
    top = np.arange(sub.n)  # child of the retained ancestor on the path
    anc = np.full(sub.n, -1)
    for i in range(1, sub.n):
        p = par[i]
        if keep[p]:
            anc[i] = p
            top[i] = i
        else:
            anc[i] = anc[p]
            top[i] = top[p]
    children = {}
    for i in np.nonzero(keep)[0][1:]:
        children.setdefault(int(anc[i]), []).append((int(top[i]), int(i)))
    ordered = {v: [i for _, i in sorted(lst)] for v, lst in children.items()}
    root = 0
    if contract_root and sub.nchild[0] == 1:
        root = ordered[0][0]
    tree, _ = DiscreteTree.from_children(ordered, root)
    return tree


# ---------------------------------------------------------------------------
# Colouring laws
# ---------------------------------------------------------------------------


def _smallest_fixed_point(f: Callable[[float], float], tol: float = 1e-15, max_iter: int = 100000) -> float:
    """Smallest fixed point in ``[0, 1]`` of an increasing convex map with ``f(0) >= 0``."""
    x = 0.0
    for _ in range(max_iter):
        nx = f(x)
        if abs(nx - x) <= tol:
            x = nx
            break
        if nx - x < 1e-7:
            # slow (near-critical) convergence: switch to bracketing
            for j in range(1, 60):
                y = x + (1 - x) * (1 - 2.0**-j)
                if f(y) - y < 0:
                    return optimize.brentq(lambda z: f(z) - z, x, y, xtol=1e-16, rtol=1e-15)
            return 1.0
        x = nx
    return min(x, 1.0)


def g_of_p(xi: OffspringDistribution, p: float) -> float:
    """``g(p) = E[p^{#leaves}]``, the smallest solution of ``g = phi(g) - xi(0)(1-p)``."""
    if not xi.has_leaves:
        raise DomainError("g(p) needs xi(0) > 0")
    if not (0.0 <= p <= 1.0):
        raise DomainError("p must lie in [0, 1]")
    if p == 1.0:
        return 1.0
    x0 = xi.pmf(0)
    return _smallest_fixed_point(lambda s: float(xi.pgf(s)) - x0 * (1 - p))


def _falling_coeffs(probs: Sequence, g, one):
    """``phi^(l)(g) / l!`` for every ``l`` (works with floats or Fractions)."""
    K = len(probs) - 1
    out = []
    for l in range(K + 1):
        acc = 0 * one
        for k in range(l, K + 1):
            if probs[k]:
                acc += probs[k] * math.comb(k, l) * g ** (k - l)
        out.append(acc)
    return out


class ColouringLaws:
    """Black/red decomposition of a GW(xi) tree under p-Bernoulli leaf colouring.

    Works for finite offspring laws with either float or :class:`Fraction`
    masses (``exact=True`` keeps everything rational, which requires a
    rational ``g``).
    """

    def __init__(self, probs: Sequence, p, g=None, exact: bool = False):
        one = Fraction(1) if exact else 1.0
        probs = [one * v for v in probs]
        if len(probs) > 1 and probs[1] != 0:
            raise DomainError("colouring laws need a proper offspring law (xi(1) = 0)")
        if not probs[0] > 0:
            raise DomainError("colouring laws need xi(0) > 0")
        if not (0 < p < 1):
            raise DomainError("p must lie strictly inside (0, 1)")
        self.exact = exact
        self.one = one
        self.xi = probs
        self.p = one * p
        if g is None:
            if exact:
                raise DomainError("exact laws need g supplied as a rational")
            g = g_of_p(OffspringDistribution(probs), float(p))
        self.g = one * g
        self.taylor = _falling_coeffs(probs, self.g, one)  # phi^(l)(g)/l!
        self.phi_g = self.taylor[0]
        self.dphi_g = self.taylor[1] if len(self.taylor) > 1 else 0 * one
        if exact:
            resid = self.phi_g - self.xi[0] * (1 - self.p) - self.g
            if resid != 0:
                raise DomainError("supplied g does not solve the fixed point equation")

    @property
    def geom_param(self):
        """``phi'(g(p))``, the success parameter of the unary-vertex counts."""
        return self.dphi_g

    def xi_red(self) -> list:
        g, xi = self.g, self.xi
        rest = [xi[l] * g ** (l - 1) for l in range(1, len(xi))]
        if self.exact:
            return [xi[0] * self.p / g] + rest
        # xi(0) p / g equals the complement below; the complement stays accurate for tiny g
        return [max(0.0, 1.0 - sum(rest))] + rest

    def xi_black(self) -> list:
        """Coefficients of the black generating function (includes the ``1/l!``)."""
        g = self.g
        denom = (1 - g) * (1 - self.dphi_g)
        out = [self.xi[0] * (1 - self.p) / denom, 0 * self.one]
        out += [self.taylor[l] * (1 - g) ** l / denom for l in range(2, len(self.xi))]
        return out

    def nu(self, l: int) -> list:
        """Law of the number of red vertices grafted on a vertex with ``l`` black children."""
        K = len(self.xi) - 1
        if l < 1 or l > K or self.taylor[l] == 0:
            raise DomainError(f"nu_{l} is undefined for this offspring law")
        g = self.g
        return [self.xi[l + k] * math.comb(l + k, k) * g**k / self.taylor[l] for k in range(K - l + 1)]

    def geometric(self, kmax: int) -> list:
        q = self.dphi_g
        return [(1 - q) * q**k for k in range(kmax + 1)]

    def phi(self, s):
        return sum(c * s**k for k, c in enumerate(self.xi))

    def phi_red(self, s):
        g = self.g
        return 1 - (self.phi_g - self.phi(g * s)) / g

    def phi_black(self, s):
        g = self.g
        return s + (self.phi(g + s * (1 - g)) - g - s * (1 - g)) / ((1 - g) * (1 - self.dphi_g))

    def distributions(self):
        """Float :class:`OffspringDistribution` objects ``(xi_b, xi_r, geom_param)``."""
        xb = OffspringDistribution([float(v) for v in self.xi_black()], name="black")
        xr = OffspringDistribution([float(v) for v in self.xi_red()], name="red")
        return xb, xr, float(self.geom_param)


def derive_black_red_laws(xi: OffspringDistribution, p: float):
    """Return ``(xi_b, xi_r, nu, geom_param)`` for a finite proper law ``xi``.

    ``nu`` maps ``l`` to the :class:`OffspringDistribution` ``nu_l``.
    """
    if not xi.finite:
        raise DomainError("derive_black_red_laws needs a finite offspring law")
    laws = ColouringLaws(list(xi.probs), p)
    xb, xr, q = laws.distributions()
    cache = {}

    def nu(l):
        if l not in cache:
            cache[l] = OffspringDistribution(laws.nu(l), name=f"nu_{l}")
        return cache[l]

    return xb, xr, nu, q


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------


def reconstruct(
    black: DiscreteTree, xi: OffspringDistribution, p: float, rng: np.random.Generator, node_budget: int = 10**6
) -> TwoColourTree:
    """Rebuild a coloured GW(xi) tree (conditioned on a black root) from its black tree.

    Step 1 inserts a Geometric(phi'(g)) number of unary vertices on every edge
    and below the root.  Step 2 grafts on each vertex with ``l`` children a
    ``nu_l`` number of red vertices, interleaved uniformly with the black
    children, each one the root of an independent GW(xi_r) tree.
    """
    if not black.proper:
        raise DomainError("the black tree must be proper")
    xb, xr, nu, q = derive_black_red_laws(xi, p)
    children = {}
    colour = {}
    next_id = [0]

    def new(c):
        i = next_id[0]
        next_id[0] += 1
        colour[i] = c
        children[i] = []
        if next_id[0] > node_budget:
            raise BudgetExceeded(f"reconstruction exceeded the budget of {node_budget} nodes")
        return i

    geo = lambda: int(rng.geometric(1 - q)) - 1 if q > 0 else 0  # noqa: E731

    # Step 1: a line of N_root edges below the root of the black tree
    root = new(1)
    cur = root
    for _ in range(geo()):
        nxt = new(1)
        children[cur].append(nxt)
        cur = nxt
    ids = {0: cur}
    for i in range(1, black.n):
        par = ids[int(black.parent[i])]
        for _ in range(geo()):
            nxt = new(1)
            children[par].append(nxt)
            par = nxt
        node = new(1)
        children[par].append(node)
        ids[i] = node

    # Step 2: red vertices interleaved among black children, each carrying a red tree
    black_nodes = list(children)
    for u in black_nodes:
        l = len(children[u])
        if l == 0:
            continue
        k = int(nu(l).sample(rng, 1)[0])
        if k == 0:
            continue
        slots = np.zeros(l + k, dtype=bool)
        slots[rng.choice(l + k, size=k, replace=False)] = True
        blacks = iter(children[u])
        merged = []
        for is_red in slots:
            if is_red:
                rt = sample_gw_tree(xr, rng, node_budget)
                base = next_id[0]
                for j in range(rt.n):
                    new(0)
                for j in range(rt.n):
                    children[base + j] = [base + int(c) for c in rt.children(j)]
                merged.append(base)
            else:
                merged.append(next(blacks))
        children[u] = merged

    tree, order = DiscreteTree.from_children(children, root)
    return TwoColourTree(tree, [colour[i] for i in order], check=False)


# ---------------------------------------------------------------------------
# Number of red trees grafted on the black subtree
# ---------------------------------------------------------------------------


def red_tree_count(tc: TwoColourTree) -> int:
    """Red trees hanging from the black subtree (1 when the whole tree is red)."""
    if not tc.root_black:
        return 1
    c = tc.colour
    par = tc.tree.parent
    return int(np.count_nonzero((c[1:] == 0) & (c[par[1:]] == 1)))


def kappa_target(xi: OffspringDistribution, p: float, s: float) -> float:
    """Solution ``kappa(s)`` of ``phi(k) - k = phi(sg) - sg - (phi(g) - g)``."""
    g = g_of_p(xi, p)
    phi = lambda x: float(xi.pgf(x))  # noqa: E731
    rhs = phi(s * g) - s * g - (phi(g) - g)
    if rhs <= 0:
        return 1.0 if abs(rhs) < 1e-15 else math.nan
    q = _smallest_fixed_point(phi)
    return optimize.brentq(lambda x: phi(x) - x - rhs, 0.0, q, xtol=1e-15, rtol=1e-15)


def kappa_check(
    xi: OffspringDistribution, p: float, n_samples: int, rng: np.random.Generator, s_grid=(0.25, 0.5, 0.75), node_budget=10**5
) -> list:
    """Monte-Carlo estimates of ``E[s^N]`` against the fixed point equation for ``kappa``.

    Trees that overflow ``node_budget`` are counted but not coloured.  Since
    ``s^N`` lies in ``[0, 1]`` their unknown contribution is bracketed: the
    estimate uses the midpoint and the half-width enters as a bias bound.
    """
    if not (0 < p < 1):
        raise DomainError("p must lie strictly inside (0, 1)")
    counts = []
    overflow = 0
    for _ in range(n_samples):
        try:
            tree = sample_gw_tree(xi, rng, node_budget)
        except BudgetExceeded:
            overflow += 1
            continue
        counts.append(red_tree_count(colour_leaves(tree, p, rng)))
    counts = np.asarray(counts, dtype=np.int64)
    half = 0.5 * overflow / n_samples
    reports = []
    for s in s_grid:
        vals = float(s) ** counts
        est = float(vals.sum()) / n_samples + half
        se = float(vals.std(ddof=1) / math.sqrt(n_samples)) if len(vals) > 1 else 1.0
        target = kappa_target(xi, p, s)
        reports.append(z_check(est, max(se, 1e-12), target, f"kappa(s={s})", n_samples, bias_bound=half))
    return reports


# ---------------------------------------------------------------------------
# Exact small-instance laws (rational arithmetic)
# ---------------------------------------------------------------------------


def enumerate_trees(max_nodes: int, support: Sequence[int]):
    """Yield every ordered tree with at most ``max_nodes`` vertices whose child counts lie in ``support``."""
    support = sorted(set(int(k) for k in support))

    def extend(counts, pending):
        if pending == 0:
            yield DiscreteTree(counts)
            return
        for k in support:
            if len(counts) + pending + k <= max_nodes:
                yield from extend(counts + [k], pending - 1 + k)

    yield from extend([], 1)


def enumerate_colourings(tree: DiscreteTree):
    """Yield every :class:`TwoColourTree` over ``tree`` (one per leaf colouring)."""
    leaves = np.nonzero(tree.is_leaf)[0]
    for bits in range(2 ** len(leaves)):
        lc = np.zeros(tree.n, dtype=np.int8)
        for j, leaf in enumerate(leaves):
            lc[leaf] = (bits >> j) & 1
        yield TwoColourTree(tree, _close_colours(tree, lc), check=False)


def coloured_tree_probability(tc: TwoColourTree, probs: Sequence, p):
    """``P(tau = t, colours = c)`` for a GW tree with leaves red with probability ``p``."""
    out = 1
    for k in tc.tree.nchild:
        k = int(k)
        out *= probs[k] if k < len(probs) else 0
    leaves = tc.tree.is_leaf
    red = int(np.count_nonzero(leaves & (tc.colour == 0)))
    black = int(np.count_nonzero(leaves & (tc.colour == 1)))
    return out * p**red * (1 - p) ** black


def tree_probability(tree: DiscreteTree, probs: Sequence):
    out = 1
    for k in tree.nchild:
        k = int(k)
        out *= probs[k] if k < len(probs) else 0
    return out


def reconstruction_probability(tc: TwoColourTree, laws: ColouringLaws):
    """Probability that Steps 1 and 2 applied to ``black_tree(tc, contract_root=True)`` output ``tc``.

    The decomposition is deterministic: the unary black vertices give the
    geometric counts, the red children of each black vertex give the ``nu``
    counts and an interleaving pattern, and each red child roots a red tree.
    """
    if not tc.root_black:
        raise DomainError("the root is red")
    tree, colour = tc.tree, tc.colour
    q = laws.geom_param
    xr = laws.xi_red()
    one = laws.one
    prob = one
    # Step 1: one geometric count per black-tree vertex (its incoming edge or
    # the root line), each unary black vertex being one step of such a count.
    nblack_children = np.zeros(tree.n, dtype=np.int64)
    par = tree.parent
    for i in range(1, tree.n):
        if colour[i] == 1:
            nblack_children[par[i]] += 1
    black = np.nonzero(colour == 1)[0]
    unary = int(np.count_nonzero(nblack_children[black] == 1))
    counts = int(np.count_nonzero(nblack_children[black] != 1))  # vertices of the black tree
    prob *= q**unary * (1 - q) ** counts
    # Step 2: red children of each black vertex with l black children
    for u in black:
        l = int(nblack_children[u])
        ch = list(tree.children(int(u)))
        reds = [c for c in ch if colour[c] == 0]
        if l == 0:
            continue
        k = len(reds)
        nu = laws.nu(l)
        prob *= (nu[k] if k < len(nu) else 0) / math.comb(l + k, k)
        for r in reds:
            prob *= _subtree_probability(tree, int(r), xr)
    return prob


def _subtree_probability(tree: DiscreteTree, root: int, probs: Sequence):
    out = 1
    stack = [root]
    while stack:
        v = stack.pop()
        k = int(tree.nchild[v])
        out *= probs[k] if k < len(probs) else 0
        stack.extend(tree.children(v))
    return out


def brute_force_identity(probs: Sequence[Fraction], p: Fraction, g: Fraction, max_nodes: int = 6) -> list:
    """Compare both sides of the discrete reconstruction identity on every small coloured tree.

    Returns a list of ``(coloured tree, lhs, rhs)`` with
    ``lhs = P(coloured tree) / (1 - g)`` (law conditioned on a black root) and
    ``rhs = P_{xi_b}(black tree) * P(reconstruction gives the coloured tree)``.
    """
    laws = ColouringLaws(probs, p, g, exact=True)
    xb = laws.xi_black()
    support = [k for k, v in enumerate(probs) if v]
    rows = []
    for tree in enumerate_trees(max_nodes, support):
        for tc in enumerate_colourings(tree):
            if not tc.root_black:
                continue
            lhs = coloured_tree_probability(tc, laws.xi, laws.p) / (1 - laws.g)
            tb = black_tree(tc, contract_root=True)
            rhs = tree_probability(tb, xb) * reconstruction_probability(tc, laws)
            rows.append((tc, lhs, rhs))
    return rows
