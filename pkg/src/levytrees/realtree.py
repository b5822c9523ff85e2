"""Rooted real trees with finitely many edges.

A :class:`RealTree` is a node table: node ``0`` is the root, every other node
has a parent and a positive edge length.  A point of the tree is addressed by
``(edge, offset)`` where ``edge`` is the id of the child node at the upper
end of the edge and ``offset`` is measured from the parent end; the root is
``(0, 0.0)``.

Every node also carries an integer ``label``.  Labels survive grafting and
ball truncation, which is how nested trees (a forest and its grown versions)
are matched against each other.
"""
from __future__ import annotations

import math
import re
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DomainError

__all__ = [
    "TreePoint",
    "RealTree",
    "L1Embedding",
    "from_marked_tree",
    "graft",
    "subdivide",
    "spanned_subtree",
    "append_nodes",
    "ball",
    "nested_hausdorff",
    "gh_distance_bounds",
    "four_point_check",
    "four_point_metric_check",
    "embed_l1",
    "length_measure_sample",
    "total_length",
    "point_tree",
    "segment",
]

_EPS = 1e-12


class TreePoint(NamedTuple):
    """Point at distance ``offset`` above the parent end of the edge leading to node ``edge``."""

    edge: int
    offset: float


class RealTree:
    """Immutable rooted metric tree stored as parent links and edge lengths."""

    def __init__(self, parent, length, label=None, frontier=None, check: bool = True):
        parent = np.asarray(parent, dtype=np.int64)
        length = np.asarray(length, dtype=float)
        n = len(parent)
        if n == 0 or parent[0] != -1:
            raise DomainError("node 0 must be the root")
        if length.shape != (n,):
            raise DomainError("one edge length per node is required")
        label = np.arange(n, dtype=np.int64) if label is None else np.asarray(label, dtype=np.int64)
        frontier = np.zeros(n, dtype=bool) if frontier is None else np.asarray(frontier, dtype=bool)
        if check:
            if np.any(parent[1:] < 0) or np.any(parent[1:] >= n):
                raise DomainError("parent ids out of range")
            if np.any(~(length[1:] > 0)) or np.any(~np.isfinite(length)):
                raise DomainError("edge lengths must be positive and finite")
            if len(np.unique(label)) != n:
                raise DomainError("labels must be distinct")
        length = length.copy()
        length[0] = 0.0
        for arr in (parent, length, label, frontier):
            arr.setflags(write=False)
        self.parent = parent
        self.length = length
        self.label = label
        self.frontier = frontier
        if check:
            _ = self._jump  # raises on cycles or unreachable nodes

    # -- structure -----------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.parent)

    def __len__(self):
        return self.n

    @cached_property
    def children(self) -> list:
        ch = [[] for _ in range(self.n)]
        for v in range(1, self.n):
            ch[self.parent[v]].append(v)
        return ch

    @cached_property
    def _jump(self):
        """Depths and hop counts by pointer doubling; detects cycles."""
        n = self.n
        dist = self.length.copy()
        hops = np.ones(n, dtype=np.int64)
        hops[0] = 0
        anc = self.parent.copy()
        for _ in range(max(1, int(np.ceil(np.log2(max(n, 2)))) + 1)):
            live = anc >= 0
            if not live.any():
                break
            a = anc[live]
            dist[live] += dist[a]
            hops[live] += hops[a]
            anc[live] = anc[a]
        if np.any(anc >= 0):
            raise DomainError("parent links contain a cycle or unreachable nodes")
        return dist, hops

    @cached_property
    def order(self) -> np.ndarray:
        """Nodes sorted by generation (parents before children)."""
        return np.argsort(self.hops, kind="stable")

    @cached_property
    def depth(self) -> np.ndarray:
        """Distance from the root to each node."""
        return self._jump[0]

    @cached_property
    def hops(self) -> np.ndarray:
        return self._jump[1]

    @cached_property
    def subtree_max_depth(self) -> np.ndarray:
        m = self.depth.copy()
        order = self.order
        h = self.hops[order]
        bounds = np.searchsorted(h, np.arange(h[-1] + 2))
        for g in range(int(h[-1]), 0, -1):
            nodes = order[bounds[g]: bounds[g + 1]]
            np.maximum.at(m, self.parent[nodes], m[nodes])
        return m

    @property
    def height(self) -> float:
        return float(self.depth.max())

    @property
    def n_children(self) -> np.ndarray:
        return np.bincount(self.parent[1:], minlength=self.n)

    @property
    def leaves(self) -> np.ndarray:
        """Nodes without children, the root excluded unless it is the whole tree."""
        k = self.n_children
        leaf = k == 0
        if self.n > 1:
            leaf[0] = False
        return np.nonzero(leaf)[0]

    def degree(self, v: int) -> int:
        """Number of connected components of the tree minus the node (the root counts no parent)."""
        return int(self.n_children[v]) + (0 if v == 0 else 1)

    @property
    def total_length(self) -> float:
        return float(self.length.sum())

    def index_of(self, label: int) -> int:
        idx = self._label_index.get(int(label))
        if idx is None:
            raise DomainError(f"no node with label {label}")
        return idx

    @cached_property
    def _label_index(self) -> dict:
        return {int(l): i for i, l in enumerate(self.label)}

    def __repr__(self):
        return f"RealTree(n={self.n}, height={self.height:.6g}, length={self.total_length:.6g})"

    # -- ancestry and distances ----------------------------------------------

    @cached_property
    def _lift(self) -> list:
        up = [np.where(self.parent < 0, 0, self.parent)]
        maxh = int(self.hops.max()) if self.n else 0
        while (1 << len(up)) <= maxh:
            up.append(up[-1][up[-1]])
        return up

    def lca(self, u, v) -> np.ndarray:
        """Lowest common ancestors of node arrays ``u`` and ``v`` (binary lifting)."""
        u = np.atleast_1d(np.asarray(u, dtype=np.int64)).copy()
        v = np.atleast_1d(np.asarray(v, dtype=np.int64)).copy()
        h = self.hops
        swap = h[u] < h[v]
        u[swap], v[swap] = v[swap], u[swap].copy()
        diff = h[u] - h[v]
        for k, up in enumerate(self._lift):
            sel = (diff >> k) & 1 == 1
            u[sel] = up[u[sel]]
        for up in reversed(self._lift):
            sel = up[u] != up[v]
            u[sel] = up[u[sel]]
            v[sel] = up[v[sel]]
        same = u == v
        out = np.where(same, u, self._lift[0][u])
        return out

    def is_ancestor(self, a, v) -> np.ndarray:
        """``a`` is an ancestor of ``v`` or equal to it."""
        return self.lca(a, v) == np.atleast_1d(a)

    def node_distance(self, u, v) -> np.ndarray:
        d = self.depth
        a = self.lca(u, v)
        return d[np.atleast_1d(u)] + d[np.atleast_1d(v)] - 2 * d[a]

    def point_depth(self, edges, offsets) -> np.ndarray:
        edges = np.atleast_1d(np.asarray(edges, dtype=np.int64))
        offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
        base = np.where(edges == 0, 0.0, self.depth[self.parent[np.maximum(edges, 0)]] if self.n > 1 else 0.0)
        return np.where(edges == 0, 0.0, base + offsets)

    def distance(self, p: TreePoint, q: TreePoint) -> float:
        return float(self.point_distances([p[0]], [p[1]], [q[0]], [q[1]])[0])

    def point_distances(self, e1, o1, e2, o2) -> np.ndarray:
        """Distances between points ``(e1, o1)`` and ``(e2, o2)`` (arrays)."""
        e1 = np.atleast_1d(np.asarray(e1, dtype=np.int64))
        e2 = np.atleast_1d(np.asarray(e2, dtype=np.int64))
        o1 = np.atleast_1d(np.asarray(o1, dtype=float))
        o2 = np.atleast_1d(np.asarray(o2, dtype=float))
        d1 = self.point_depth(e1, o1)
        d2 = self.point_depth(e2, o2)
        a = self.lca(e1, e2)
        out = d1 + d2 - 2 * self.depth[a]
        # a point on the edge into an ancestor of the other anchor: distances add along one path
        anc1 = a == e1
        anc2 = a == e2
        out = np.where(anc1 | anc2, np.abs(d1 - d2), out)
        return out

    def check_point(self, p: TreePoint) -> TreePoint:
        e, o = int(p[0]), float(p[1])
        if not 0 <= e < self.n:
            raise DomainError(f"edge {e} does not exist")
        if e == 0:
            if abs(o) > _EPS:
                raise DomainError("the root is addressed as (0, 0)")
            return TreePoint(0, 0.0)
        if o < -_EPS or o > self.length[e] + _EPS:
            raise DomainError(f"offset {o} outside edge {e} of length {self.length[e]}")
        o = min(max(o, 0.0), float(self.length[e]))
        if o <= 0.0:
            return self.node_point(int(self.parent[e]))
        return TreePoint(e, o)

    def node_point(self, v: int) -> TreePoint:
        return TreePoint(int(v), float(self.length[v]))

    # -- conversions -----------------------------------------------------------

    def relabel(self, label) -> "RealTree":
        return RealTree(self.parent, self.length, label, self.frontier)

    def to_dump(self) -> str:
        """Lossless line format: a header then ``id parent length`` per node (ids are labels).

        Frontier nodes carry a fourth column ``F``.
        """
        lines = [f"# root {int(self.label[0])} nodes {self.n}"]
        for v in range(self.n):
            par = "-" if v == 0 else str(int(self.label[self.parent[v]]))
            flag = " F" if self.frontier[v] else ""
            lines.append(f"{int(self.label[v])} {par} {float(self.length[v])!r}{flag}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dump(cls, text: str) -> "RealTree":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        m = re.match(r"#\s*root\s+(-?\d+)\s+nodes\s+(\d+)\s*$", lines[0]) if lines else None
        if not m:
            raise DomainError("missing dump header")
        root, n = int(m.group(1)), int(m.group(2))
        rows = [ln.split() for ln in lines[1:]]
        if len(rows) != n or any(len(r) not in (3, 4) or (len(r) == 4 and r[3] != "F") for r in rows):
            raise DomainError("dump body does not match its header")
        labels = [int(r[0]) for r in rows]
        if labels[0] != root or rows[0][1] != "-":
            raise DomainError("the first dumped node must be the root")
        index = {l: i for i, l in enumerate(labels)}
        try:
            parent = [-1] + [index[int(r[1])] for r in rows[1:]]
        except (KeyError, ValueError) as exc:
            raise DomainError(f"unknown parent in dump: {exc}") from None
        length = [0.0] + [float(r[2]) for r in rows[1:]]
        frontier = [len(r) == 4 for r in rows]
        return cls(parent, length, labels, frontier)

    def to_newick(self, names: bool = True) -> str:
        """Newick string with branch lengths; node names are labels when ``names`` is set."""

        def rec(v):
            ch = self.children[v]
            s = ""
            if ch:
                s = "(" + ",".join(rec(c) for c in ch) + ")"
            if names:
                s += str(int(self.label[v]))
            if v != 0:
                s += ":" + repr(float(self.length[v]))
            return s

        import sys

        limit = sys.getrecursionlimit()
        if int(self.hops.max()) + 100 > limit:
            sys.setrecursionlimit(int(self.hops.max()) + 1000)
        try:
            return rec(0) + ";"
        finally:
            sys.setrecursionlimit(limit)

    @classmethod
    def from_newick(cls, text: str) -> "RealTree":
        """Parse a Newick string with branch lengths (integer names become labels)."""
        tokens = re.findall(r"\(|\)|,|:|;|[^(),:;\s]+", text.strip())
        if not tokens or tokens[-1] != ";":
            raise DomainError("a Newick string ends with ';'")
        parent, length, names = [-1], [0.0], [None]
        stack = [0]  # open nodes; the top receives names and lengths
        expect_len = False
        for tok in tokens[:-1]:
            if tok in "(,":
                if tok == "," and len(stack) < 2:
                    raise DomainError("',' outside parentheses")
                if tok == ",":
                    stack.pop()
                parent.append(stack[-1])
                length.append(math.nan)
                names.append(None)
                stack.append(len(parent) - 1)
            elif tok == ")":
                if len(stack) < 2:
                    raise DomainError("unbalanced parentheses in Newick string")
                stack.pop()
            elif tok == ":":
                expect_len = True
            else:
                cur = stack[-1]
                if expect_len:
                    try:
                        length[cur] = float(tok)
                    except ValueError:
                        raise DomainError(f"bad branch length {tok!r}") from None
                    expect_len = False
                else:
                    names[cur] = tok
        if len(stack) != 1:
            raise DomainError("unbalanced parentheses in Newick string")
        length[0] = 0.0
        if any(math.isnan(x) for x in length[1:]):
            raise DomainError("every non-root node needs a branch length")
        label = None
        if all(nm is not None and re.fullmatch(r"-?\d+", nm) for nm in names):
            label = [int(nm) for nm in names]
        return cls(parent, length, label)


def point_tree() -> RealTree:
    return RealTree([-1], [0.0])


def segment(length: float) -> RealTree:
    return RealTree([-1, 0], [0.0, length])


# ---------------------------------------------------------------------------
# Construction from discrete trees
# ---------------------------------------------------------------------------


def from_marked_tree(t, marks=None, return_map: bool = False):
    """Real tree of a discrete tree whose vertex ``u`` carries an edge of length ``m_u``.

    ``marks`` is either a full array (one positive mark per vertex, level
    order) or a mapping from vertex index or Neveu word to mark.  A vertex
    without a mark gets length zero and is merged with its parent, so the
    unmarked root is the root of the real tree itself.  Explicit marks must
    be positive and finite.
    """
    n = t.n
    m = np.zeros(n)
    if marks is None:
        pass
    elif isinstance(marks, dict):
        index = {w: i for i, w in enumerate(t.words)}
        for key, val in marks.items():
            i = index[tuple(key)] if isinstance(key, tuple) else int(key)
            m[i] = _positive_mark(val)
    else:
        arr = np.asarray(marks, dtype=float)
        if arr.shape != (n,):
            raise DomainError("one mark per vertex is required")
        for i, val in enumerate(arr):
            m[i] = _positive_mark(val)
    par = t.parent
    node_of = np.empty(n, dtype=np.int64)
    parent, length = [-1], [0.0]
    for v in range(n):  # level order: parents first
        above = 0 if v == 0 else node_of[par[v]]
        if m[v] > 0:
            parent.append(int(above))
            length.append(float(m[v]))
            node_of[v] = len(parent) - 1
        else:
            node_of[v] = above
    tree = RealTree(parent, length)
    return (tree, node_of) if return_map else tree


def _positive_mark(val):
    val = float(val)
    if not (val > 0) or not math.isfinite(val):
        raise DomainError(f"marks must be positive and finite, got {val!r}")
    return val


# ---------------------------------------------------------------------------
# Grafting and balls
# ---------------------------------------------------------------------------


def subdivide(tree: RealTree, edges, offsets):
    """Insert nodes at the given points; returns ``(new tree, node id of each point)``.

    Points at a node map to that node and points at the root map to ``0``;
    interior points create new nodes (fresh labels) appended after the
    existing ones, so existing ids and labels are unchanged.
    """
    edges = np.asarray(edges, dtype=np.int64).ravel()
    offsets = np.asarray(offsets, dtype=float).ravel()
    ids = np.empty(len(edges), dtype=np.int64)
    parent = list(tree.parent)
    length = list(tree.length)
    nxt = int(tree.label.max()) + 1
    labels = []
    by_edge = {}
    for i, (e, o) in enumerate(zip(edges, offsets)):
        p = tree.check_point(TreePoint(int(e), float(o)))
        if p.edge == 0:
            ids[i] = 0
        elif p.offset >= tree.length[p.edge]:
            ids[i] = p.edge
        else:
            by_edge.setdefault(p.edge, {}).setdefault(p.offset, []).append(i)
    for e, offs in by_edge.items():
        prev, prev_off = int(tree.parent[e]), 0.0
        for o in sorted(offs):
            parent.append(prev)
            length.append(o - prev_off)
            labels.append(nxt)
            nxt += 1
            prev, prev_off = len(parent) - 1, o
            ids[offs[o]] = prev
        parent[e] = prev
        length[e] = float(tree.length[e]) - prev_off
    if not labels:
        return tree, ids
    k = len(labels)
    out = RealTree(
        parent,
        length,
        np.concatenate([tree.label, labels]),
        np.concatenate([tree.frontier, np.zeros(k, dtype=bool)]),
        check=False,
    )
    return out, ids


def append_nodes(tree: RealTree, parent, length, frontier=None) -> RealTree:
    """Append nodes whose ``parent`` entries refer to ids of the combined table."""
    parent = np.asarray(parent, dtype=np.int64)
    k = len(parent)
    if k == 0:
        return tree
    nxt = int(tree.label.max()) + 1
    frontier = np.zeros(k, dtype=bool) if frontier is None else np.asarray(frontier, dtype=bool)
    return RealTree(
        np.concatenate([tree.parent, parent]),
        np.concatenate([tree.length, np.asarray(length, dtype=float)]),
        np.concatenate([tree.label, np.arange(nxt, nxt + k)]),
        np.concatenate([tree.frontier, frontier]),
        check=False,
    )


def graft(base: RealTree, attachments: Sequence, return_maps: bool = False):
    """Glue the root of each attached tree at the given point of ``base``.

    Base nodes keep their ids and labels.  Interior attachment points
    subdivide their edge (new nodes appended after the base nodes), then
    every attached tree is appended with fresh labels; its root is identified
    with the attachment point.  With ``return_maps`` the function also
    returns, for every attachment, the array mapping attached node ids to ids
    in the result.
    """
    if not attachments:
        return (base, []) if return_maps else base
    pts = [base.check_point(p) for p, _ in attachments]
    tree, sites = subdivide(base, [p.edge for p in pts], [p.offset for p in pts])
    parent, length, frontier, maps = [], [], [], []
    n = tree.n
    for site, (_, sub) in zip(sites, attachments):
        order = sub.order[1:]
        ids = np.empty(sub.n, dtype=np.int64)
        ids[0] = site
        ids[order] = n + np.arange(len(order))
        n += len(order)
        parent.append(ids[sub.parent[order]])
        length.append(sub.length[order])
        frontier.append(sub.frontier[order])
        maps.append(ids)
    out = append_nodes(tree, np.concatenate(parent), np.concatenate(length), np.concatenate(frontier))
    return (out, maps) if return_maps else out


def spanned_subtree(tree: RealTree, keep, protect=None) -> RealTree:
    """Subtree spanned by the root and the nodes flagged in ``keep``.

    Ancestors of kept nodes are kept too.  Kept nodes left with exactly one
    kept child are merged into their edge unless flagged in ``protect``.
    Labels and frontier flags of surviving nodes are preserved.
    """
    keep = np.array(keep, dtype=bool)
    protect = np.zeros(tree.n, dtype=bool) if protect is None else np.asarray(protect, dtype=bool)
    keep[0] = True
    order, hops = tree.order, tree.hops[tree.order]
    bounds = np.searchsorted(hops, np.arange(hops[-1] + 2))
    levels = [order[bounds[g]: bounds[g + 1]] for g in range(int(hops[-1]) + 1)]
    for nodes in reversed(levels[1:]):
        keep[tree.parent[nodes[keep[nodes]]]] = True
    nkept = np.bincount(tree.parent[1:][keep[1:]], minlength=tree.n)
    keep &= ~((nkept == 1) & ~protect) | (np.arange(tree.n) == 0)
    # nearest kept strict ancestor of every node, generation by generation
    anc = np.zeros(tree.n, dtype=np.int64)
    for nodes in levels[1:]:
        par = tree.parent[nodes]
        anc[nodes] = np.where(keep[par], par, anc[par])
    ids = np.nonzero(keep)[0]
    new_index = np.full(tree.n, -1, dtype=np.int64)
    new_index[ids] = np.arange(len(ids))
    parent = np.where(ids == 0, -1, new_index[anc[ids]])
    length = np.where(ids == 0, 0.0, tree.depth[ids] - tree.depth[anc[ids]])
    return RealTree(parent, length, tree.label[ids], tree.frontier[ids], check=False)


def ball(tree: RealTree, r: float) -> RealTree:
    """Closed ball of radius ``r`` around the root.

    Edges crossing the sphere are cut; the cut point keeps the label of the
    node above it and is flagged in ``frontier``.  Node ids are compacted in
    increasing order.
    """
    if r < 0:
        raise DomainError("radius must be non-negative")
    d = tree.depth
    par = tree.parent
    keep = np.zeros(tree.n, dtype=bool)
    keep[0] = True
    pd = np.where(par >= 0, d[np.maximum(par, 0)], -1.0)
    keep[1:] = pd[1:] < r
    if keep.all() and not np.any(d > r):
        return tree
    idx = np.nonzero(keep)[0]
    new_id = np.full(tree.n, -1, dtype=np.int64)
    new_id[idx] = np.arange(len(idx))
    length = tree.length[idx].copy()
    cut = d[idx] > r
    length[cut] = r - pd[idx][cut]
    frontier = tree.frontier[idx] | cut
    parent = np.where(idx == 0, -1, new_id[np.maximum(par[idx], 0)])
    return RealTree(parent, length, tree.label[idx], frontier, check=False)


def _map_sub_points(sub: RealTree, sup: RealTree, tol: float):
    """Locate each node of ``sub`` inside ``sup`` as (target node, depth); checks nesting."""
    targets = np.empty(sub.n, dtype=np.int64)
    for v in range(sub.n):
        lab = int(sub.label[v])
        if lab not in sup._label_index:
            raise DomainError(f"node label {lab} of the subtree is missing from the larger tree")
        targets[v] = sup._label_index[lab]
    dsub = sub.depth
    dsup = sup.depth
    exact = ~sub.frontier
    if np.any(np.abs(dsup[targets][exact] - dsub[exact]) > tol * (1 + dsub[exact])):
        raise DomainError("node depths differ: not a nested subtree")
    if np.any(dsup[targets] < dsub - tol * (1 + dsub)):
        raise DomainError("a truncated node lies beyond its counterpart: not a nested subtree")
    if sub.n > 1:
        ch = np.arange(1, sub.n)
        pt = targets[sub.parent[ch]]
        if not np.all(sup.is_ancestor(pt, targets[ch])):
            raise DomainError("ancestry differs: not a nested subtree")
    return targets, dsub


def nested_hausdorff(sub: RealTree, sup: RealTree, r: float = math.inf, tol: float = 1e-9) -> float:
    """Hausdorff distance between the ``r``-balls of nested trees sharing labels.

    Every connected component of ``sup`` minus ``sub`` hangs from a single
    point of ``sub``; its contribution is its height above that point, cut
    at the sphere of radius ``r``.
    """
    targets, dsub = _map_sub_points(sub, sup, tol)
    dsup = sup.depth
    par = sup.parent
    # deepest covered depth within the subtree of each node of sup
    cov = np.full(sup.n, -np.inf)
    np.maximum.at(cov, targets, dsub)
    for v in sup.order[::-1][:-1]:
        p = par[v]
        if cov[v] > cov[p]:
            cov[p] = cov[v]
    cov[0] = max(cov[0], 0.0)
    smax = sup.subtree_max_depth
    best = 0.0
    for v in sup.order[1:]:
        dp = dsup[par[v]]
        if cov[v] > dp + tol:
            if cov[v] < dsup[v] - tol:
                att, h = cov[v], smax[v] - cov[v]
            else:
                continue
        elif cov[par[v]] >= dp - tol:
            att, h = dp, smax[v] - dp
        else:
            continue
        if att <= r:
            best = max(best, min(h, r - att))
    return float(best)


# ---------------------------------------------------------------------------
# Gromov-Hausdorff bounds
# ---------------------------------------------------------------------------


def _branch_nodes(tree: RealTree) -> RealTree:
    """Remove non-root nodes with exactly one child (they are interior points of edges)."""
    k = tree.n_children
    keep = (k != 1) | (np.arange(tree.n) == 0)
    if keep.all():
        return tree
    new_id = np.full(tree.n, -1, dtype=np.int64)
    idx = np.nonzero(keep)[0]
    new_id[idx] = np.arange(len(idx))
    parent = [-1]
    length = [0.0]
    d = tree.depth
    for v in idx[1:]:
        u = tree.parent[v]
        while not keep[u]:
            u = tree.parent[u]
        parent.append(int(new_id[u]))
        length.append(float(d[v] - d[u]))
    return RealTree(parent, length, tree.label[idx], check=False)


def _canonical(tree: RealTree, digits: int = 9) -> str:
    ch = tree.children

    def rec(v):
        parts = sorted(rec(c) + ":" + format(round(float(tree.length[c]), digits), ".9g") for c in ch[v])
        return "(" + ",".join(parts) + ")"

    return rec(0)


def _refine(tree: RealTree, max_nodes: int) -> RealTree:
    """Split the longest edges at midpoints while the node count stays within ``max_nodes``."""
    t = tree
    while t.n < max_nodes and t.n > 1:
        e = int(np.argmax(t.length))
        t = graft(t, [(TreePoint(e, t.length[e] / 2), point_tree())])
    return t


def _rooted_distortion(D1: np.ndarray, D2: np.ndarray, exhaustive_limit: int = 12):
    """Smallest distortion of a correspondence containing the root pair (index 0 in both).

    Exhaustive search over correspondences (decision problem on sorted
    candidate thresholds) when both spaces are small; otherwise the
    distortion of a greedy correspondence, an upper bound.
    Returns ``(value, exact)``.
    """
    n1, n2 = len(D1), len(D2)
    if n1 <= exhaustive_limit and n2 <= exhaustive_limit:
        cand = np.unique(np.abs(D1[:, :, None, None] - D2[None, None, :, :]).ravel())
        lo, hi = 0, len(cand) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if _correspondence_exists(D1, D2, cand[mid] + 1e-12):
                hi = mid
            else:
                lo = mid + 1
        return float(cand[lo]), True
    # greedy: each point to the point of the other space with the closest root distance
    f = np.abs(D1[0][:, None] - D2[0][None, :]).argmin(axis=1)
    g = np.abs(D2[0][:, None] - D1[0][None, :]).argmin(axis=1)
    pairs = [(0, 0)] + [(i, int(f[i])) for i in range(n1)] + [(int(g[j]), j) for j in range(n2)]
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    return float(np.abs(D1[np.ix_(a, a)] - D2[np.ix_(b, b)]).max()), False


def _correspondence_exists(D1, D2, t) -> bool:
    n1, n2 = len(D1), len(D2)
    pairs = [(i, j) for i in range(n1) for j in range(n2)]
    # compat[p][q]: pairs p and q can coexist in a correspondence of distortion <= t
    comp = {}
    for p in pairs:
        comp[p] = {q for q in pairs if abs(D1[p[0], q[0]] - D2[p[1], q[1]]) <= t}
    root = (0, 0)
    if abs(D1[0, 0] - D2[0, 0]) > t:
        return False

    def search(chosen, allowed, cov1, cov2):
        if len(cov1) == n1 and len(cov2) == n2:
            return True
        # pick the uncovered element with the fewest options
        best = None
        for i in range(n1):
            if i not in cov1:
                opts = [p for p in allowed if p[0] == i]
                if best is None or len(opts) < len(best):
                    best = opts
        for j in range(n2):
            if j not in cov2:
                opts = [p for p in allowed if p[1] == j]
                if best is None or len(opts) < len(best):
                    best = opts
        for p in best:
            if search(chosen + [p], allowed & comp[p], cov1 | {p[0]}, cov2 | {p[1]}):
                return True
        return False

    allowed = comp[root] & {p for p in pairs if root in comp[p]}
    return search([root], allowed, {0}, {0})


def _distance_matrix(tree: RealTree) -> np.ndarray:
    idx = np.arange(tree.n)
    a, b = np.meshgrid(idx, idx, indexing="ij")
    return tree.node_distance(a.ravel(), b.ravel()).reshape(tree.n, tree.n)


def _cpct_bounds(t1: RealTree, t2: RealTree, refine_to: int = 8):
    """Bracket the pointed compact GH distance between two finite real trees."""
    b1, b2 = _branch_nodes(t1), _branch_nodes(t2)
    h1, h2 = b1.height, b2.height
    if _canonical(b1) == _canonical(b2):
        return 0.0, 0.0, True
    lower = abs(h1 - h2)
    upper = max(h1, h2)  # wedge both trees at a common root
    if b1.n <= 8 and b2.n <= 8:
        r1, r2 = _refine(b1, refine_to), _refine(b2, refine_to)
    else:
        r1, r2 = b1, b2
    m, exact = _rooted_distortion(_distance_matrix(r1), _distance_matrix(r2))
    # every point of a refined tree lies within half its longest edge of a vertex
    slack = 0.5 * (float(r1.length.max()) + float(r2.length.max()))
    upper = min(upper, m + slack)
    if exact:
        lower = max(lower, 0.5 * m - slack)
    return float(lower), float(upper), exact


def gh_distance_bounds(t1: RealTree, t2: RealTree, k_max: int = 8):
    """Certified ``(lower, upper)`` bounds on the pointed GH distance of two finite trees.

    The distance is the series over integer radii ``k >= 1`` of ``2^-k``
    times the compact distance between the ``k``-balls.  Each ball term is
    bracketed by

    * lower: the height difference, and half the optimal rooted distortion
      on the vertex sets minus the discretisation allowance (exhaustive
      search only, both balls small);
    * upper: the wedge bound ``max`` of heights, and the distortion of the
      best correspondence found plus the discretisation allowance.

    Identical trees up to isometry (canonical forms agree) give ``(0, 0)``.
    Terms beyond ``k_max`` are bounded by ``2^-k_max`` times the larger height.
    """
    if k_max < 1:
        raise DomainError("k_max must be at least 1")
    lo = hi = 0.0
    H = max(t1.height, t2.height)
    full = None
    for k in range(1, k_max + 1):
        if k >= H and full is not None:
            l, u = full
        else:
            l, u, _ = _cpct_bounds(ball(t1, k), ball(t2, k))
            if k >= H:
                full = (l, u)
        lo += 2.0**-k * l
        hi += 2.0**-k * u
    tail = 2.0**-k_max
    if k_max >= H and full is not None:
        lo += tail * full[0]
        hi += tail * full[1]
    else:
        hi += tail * H
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Four-point condition, embedding and length measure
# ---------------------------------------------------------------------------


def four_point_metric_check(D: np.ndarray, n_quadruples: int, rng: np.random.Generator, tol: float = 1e-9) -> bool:
    """Four-point condition on random quadruples of a raw distance matrix."""
    D = np.asarray(D, dtype=float)
    n = len(D)
    if n < 4:
        return True
    q = rng.integers(0, n, size=(n_quadruples, 4))
    return _four_point_ok(D[q[:, 0], q[:, 1]], D[q[:, 2], q[:, 3]], D[q[:, 0], q[:, 2]], D[q[:, 1], q[:, 3]],
                          D[q[:, 0], q[:, 3]], D[q[:, 1], q[:, 2]], tol)


def _four_point_ok(d12, d34, d13, d24, d14, d23, tol):
    s = np.sort(np.stack([d12 + d34, d13 + d24, d14 + d23]), axis=0)
    # the two largest of the three pairings coincide
    return bool(np.all(s[2] - s[1] <= tol * (1 + s[2])))


def four_point_check(tree: RealTree, n_quadruples: int, rng: np.random.Generator, tol: float = 1e-9) -> bool:
    """Check the four-point condition on quadruples of length-uniform random points."""
    if tree.total_length <= 0:
        return True
    e, o = length_measure_sample(tree, rng, size=(n_quadruples, 4))
    d = lambda i, j: tree.point_distances(e[:, i], o[:, i], e[:, j], o[:, j])  # noqa: E731
    return _four_point_ok(d(0, 1), d(2, 3), d(0, 2), d(1, 3), d(0, 3), d(1, 2), tol)


class L1Embedding:
    """Isometric embedding of a finite real tree into summable sequences.

    Edges get coordinates in breadth-first order; a point at offset ``s`` on
    edge ``v`` maps to the image of the parent node plus ``s`` times the unit
    vector of ``v``.
    """

    def __init__(self, tree: RealTree):
        self.tree = tree
        coord = np.full(tree.n, -1, dtype=np.int64)
        coord[tree.order[1:]] = np.arange(tree.n - 1)
        self.coord = coord

    @property
    def dimension(self) -> int:
        return self.tree.n - 1

    def node_vector(self, v: int) -> dict:
        out = {}
        t = self.tree
        while v > 0:
            out[int(self.coord[v])] = float(t.length[v])
            v = int(t.parent[v])
        return out

    def __call__(self, p: TreePoint) -> dict:
        e, o = int(p[0]), float(p[1])
        if e == 0:
            return {}
        out = self.node_vector(int(self.tree.parent[e]))
        if o > 0:
            out[int(self.coord[e])] = o
        return out

    def dense(self, p: TreePoint) -> np.ndarray:
        x = np.zeros(self.dimension)
        for k, v in self(p).items():
            x[k] = v
        return x

    @staticmethod
    def l1(a: dict, b: dict) -> float:
        keys = set(a) | set(b)
        return float(sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys))


def embed_l1(tree: RealTree) -> L1Embedding:
    return L1Embedding(tree)


def length_measure_sample(tree: RealTree, rng: np.random.Generator, size=None):
    """Point(s) distributed as the normalised length measure.

    With ``size=None`` returns one :class:`TreePoint`; otherwise arrays
    ``(edges, offsets)`` of the given shape.
    """
    L = tree.total_length
    if not L > 0:
        raise DomainError("the point tree has no length measure to sample")
    cum = np.cumsum(tree.length)
    shape = () if size is None else size
    u = rng.random(shape) * L
    e = np.minimum(np.searchsorted(cum, u, side="right"), tree.n - 1)
    start = cum[e] - tree.length[e]
    o = np.clip(u - start, 0.0, tree.length[e])
    if size is None:
        return TreePoint(int(e), float(o))
    return e, o


def total_length(tree: RealTree) -> float:
    return tree.total_length
