"""Exact maximization of a tree ensemble over a box of categorical values.

A box assigns every feature a set of allowed categories; features whose set
is a singleton are fixed.  :func:`maximize` runs a best-first branch and
bound whose nodes are sub-boxes.  A box is *resolved* once every tree routes
all of its points to the same leaf, at which point the ensemble is constant
on it and its lexicographically smallest point is a candidate.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .gbt import Leaf, TreeEnsemble, leaf_value_matrix, predict

ENUMERATION_CAP = 10 ** 6
# largest lookup table built when merging trees that share the same free variables
FACTOR_TABLE_CAP = 1 << 16


@dataclass(frozen=True)
class VariableDomain:
    """Allowed categories per feature, stored as sorted tuples."""

    allowed: tuple
    domain_sizes: tuple

    def __post_init__(self):
        if len(self.allowed) != len(self.domain_sizes):
            raise InvalidInputError("one allowed set is required per feature")
        clean = []
        for j, (cats, k) in enumerate(zip(self.allowed, self.domain_sizes)):
            cats = tuple(sorted({int(c) for c in cats}))
            if not cats:
                raise InvalidInputError(f"allowed set of feature {j} is empty")
            if cats[0] < 0 or cats[-1] >= k:
                raise InvalidInputError(f"allowed set of feature {j} leaves the domain [0, {k})")
            clean.append(cats)
        object.__setattr__(self, "allowed", tuple(clean))
        object.__setattr__(self, "domain_sizes", tuple(int(k) for k in self.domain_sizes))

    @classmethod
    def full(cls, domain_sizes: Sequence[int]) -> "VariableDomain":
        return cls(tuple(range(k) for k in domain_sizes), tuple(domain_sizes))

    @classmethod
    def from_anchor(cls, anchor: Sequence[int], free: Sequence[int],
                    domain_sizes: Sequence[int]) -> "VariableDomain":
        """Free features range over their whole domain; the rest copy ``anchor``."""
        free = set(int(j) for j in free)
        if any(j < 0 or j >= len(domain_sizes) for j in free):
            raise InvalidInputError("free variable index out of range")
        allowed = [range(k) if j in free else (int(anchor[j]),)
                   for j, k in enumerate(domain_sizes)]
        return cls(tuple(allowed), tuple(domain_sizes))

    @property
    def free_indices(self) -> tuple:
        return tuple(j for j, cats in enumerate(self.allowed) if len(cats) > 1)

    def is_fixed(self, j: int) -> bool:
        return len(self.allowed[j]) == 1

    @property
    def size(self) -> int:
        return math.prod(len(c) for c in self.allowed)

    def lexmin(self) -> tuple:
        return tuple(c[0] for c in self.allowed)

    def contains(self, x) -> bool:
        return len(x) == len(self.allowed) and all(
            int(v) in set(cats) for v, cats in zip(x, self.allowed))


def _pack(mask: np.ndarray) -> np.ndarray:
    """Pack the last (category) axis of a boolean mask into 64-bit words."""
    packed = np.packbits(mask, axis=-1, bitorder="little")
    pad = (-packed.shape[-1]) % 8
    if pad:
        packed = np.concatenate(
            [packed, np.zeros(packed.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1)
    return np.ascontiguousarray(packed).view(np.uint64)


def _check(model: TreeEnsemble, dom: VariableDomain) -> None:
    if tuple(dom.domain_sizes) != tuple(model.domain_sizes):
        raise InvalidInputError("domain does not match the ensemble's feature domains")


# ---------------------------------------------------------------------------
# leaves and bounds


def leaf_paths(tree, allowed) -> list:
    """Reachable leaves of ``tree`` with the categories each path admits.

    Returns ``(leaf_position, leaf, path_sets)`` triples in pre-order, where
    ``path_sets`` maps every feature tested on the path to the admitted
    subset of ``allowed[feature]``.  ``leaf_position`` is the pre-order index
    among all leaves of the tree, reachable or not.
    """
    out = []
    counter = itertools.count()

    def walk(node, sets):
        if isinstance(node, Leaf):
            pos = next(counter)
            if sets is not None:
                out.append((pos, node, dict(sets)))
            return
        f = node.feature_index
        cur = None if sets is None else sets.get(f, frozenset(allowed[f]))
        for branch, side in ((node.left, True), (node.right, False)):
            if cur is None:
                walk(branch, None)
                continue
            sub = frozenset(c for c in cur if (c in node.left_categories) == side)
            if sub:
                nxt = dict(sets)
                nxt[f] = sub
                walk(branch, nxt)
            else:
                walk(branch, None)

    walk(tree, {})
    return out


def reachable_leaves(tree, dom: VariableDomain) -> list:
    """Leaves of ``tree`` whose path admits at least one point of ``dom``."""
    return [leaf for _, leaf, _ in leaf_paths(tree, dom.allowed)]


def upper_bound(model: TreeEnsemble, dom: VariableDomain) -> float:
    """Base score plus, per tree, the largest reachable leaf value."""
    _check(model, dom)
    terms = [model.base_score]
    for tree in model.trees:
        terms.append(max(leaf.value for leaf in reachable_leaves(tree, dom)))
    return math.fsum(terms)


# ---------------------------------------------------------------------------
# branch and bound


class _Search:
    """Ensemble reduced to the free variables of one domain."""

    def __init__(self, model: TreeEnsemble, dom: VariableDomain):
        self.model = model
        self.dom = dom
        self.free = dom.free_indices
        p = len(self.free)
        kmax = max(model.domain_sizes) if model.domain_sizes else 1
        self.kmax = kmax
        col = {j: i for i, j in enumerate(self.free)}
        root = np.zeros((p, kmax), dtype=bool)
        for i, j in enumerate(self.free):
            root[i, list(dom.allowed[j])] = True
        self.root = root

        constants = [model.base_score]
        scale = abs(model.base_score)
        tree_of, values, masks = [], [], []
        groups: dict = {}
        n_local = 0
        for t, tree in enumerate(model.trees):
            paths = leaf_paths(tree, dom.allowed)
            vals = [leaf.value for _, leaf, _ in paths]
            scale += max(abs(v) for v in vals)
            if len(paths) == 1:
                constants.append(vals[0])
                continue
            scope = set()
            for _, leaf, sets in paths:
                m = root.copy()
                for f, cats in sets.items():
                    if f in col and len(cats) < len(dom.allowed[f]):
                        i = col[f]
                        m[i] = False
                        m[i, list(cats)] = True
                        scope.add(i)
                tree_of.append(n_local)
                values.append(leaf.value)
                masks.append(m)
            groups.setdefault(tuple(sorted(scope)), []).append(n_local)
            n_local += 1
        self.constants = constants
        self.leaf_tree = np.asarray(tree_of, dtype=np.int64)
        self.leaf_value = np.asarray(values, dtype=np.float64)
        self.leaf_mask = (np.asarray(masks, dtype=bool) if masks
                          else np.zeros((0, p, kmax), dtype=bool))
        # leaves are contiguous per tree; local tree index -> first leaf
        _, self.tree_start = np.unique(self.leaf_tree, return_index=True)
        # each term of the bound is off by at most a few ulps of this scale
        self.slack = 16 * np.finfo(float).eps * max(scale, 1.0)

        # trees over one or two free variables are summed into lookup tables;
        # wider trees keep the plain per-tree bound
        kk = kmax
        self.unary = np.zeros((p, kk))
        pairs: dict = {}
        self.loose_trees = np.zeros(n_local, dtype=bool)
        for scope, local_trees in groups.items():
            if len(scope) == 1:
                self.unary[scope[0]] += self._table(scope, local_trees)
            elif len(scope) == 2 and kk * kk <= FACTOR_TABLE_CAP:
                pairs[scope] = self._table(scope, local_trees)
            else:
                self.loose_trees[local_trees] = True
        keys = sorted(pairs)
        self.pair_lo = np.array([i for i, _ in keys], dtype=np.int64)
        self.pair_hi = np.array([k for _, k in keys], dtype=np.int64)
        self.pair_table = (np.stack([pairs[key] for key in keys]) if keys
                           else np.zeros((0, kk, kk)))
        self.words = _pack(self.leaf_mask)

    def _table(self, scope, local_trees):
        shape = (self.kmax,) * len(scope)
        table = np.zeros(shape)
        for lt in local_trees:
            lo = self.tree_start[lt]
            hi = self.tree_start[lt + 1] if lt + 1 < self.tree_start.size else self.leaf_tree.size
            part = np.zeros(shape)
            for leaf in range(lo, hi):
                sel = np.ix_(*[np.flatnonzero(self.leaf_mask[leaf, i]) for i in scope])
                part[sel] = self.leaf_value[leaf]
            table += part
        return table

    def evaluate(self, box: np.ndarray):
        """Bound and per-leaf ambiguity for a box given as a (p, K) mask.

        The bound eliminates each free variable jointly with the pairwise
        tables it leads: for variable ``i`` it maximizes over ``x_i`` the
        unary table plus, for every pair ``(i, k)``, the best entry over
        ``x_k``.  This never exceeds the sum of independent table maxima.
        """
        bw = _pack(box)
        inter = self.words & bw[None]
        hit = np.any(inter != 0, axis=2)
        reach = np.all(hit, axis=1)
        partial = np.any(inter != bw[None], axis=2)
        ambiguous = reach[:, None] & partial
        acc = self.unary.copy()
        if self.pair_table.shape[0]:
            inner = np.where(box[self.pair_hi][:, None, :], self.pair_table, -np.inf).max(axis=2)
            np.add.at(acc, self.pair_lo, inner)
        terms = list(self.constants)
        terms.extend(np.where(box, acc, -np.inf).max(axis=1).tolist())
        if self.loose_trees.any():
            vals = np.where(reach, self.leaf_value, -np.inf)
            per_tree = np.maximum.reduceat(vals, self.tree_start)
            terms.extend(per_tree[self.loose_trees].tolist())
        return math.fsum(terms), ambiguous

    def point(self, box: np.ndarray) -> tuple:
        x = list(self.dom.lexmin())
        for i, j in enumerate(self.free):
            x[j] = int(np.argmax(box[i]))
        return tuple(x)

    def branch(self, box: np.ndarray, ambiguous: np.ndarray):
        size = box.sum(axis=1)
        cols = np.flatnonzero(ambiguous.any(axis=0))
        i = int(cols[np.argmax(size[cols])])
        leaves = np.flatnonzero(ambiguous[:, i])
        leaf = int(leaves[np.argmax(self.leaf_value[leaves])])
        inside = box[i] & self.leaf_mask[leaf, i]
        a = box.copy()
        a[i] = inside
        b = box.copy()
        b[i] = box[i] & ~inside
        return a, b


@dataclass
class SearchStats:
    nodes: int = 0
    resolved: int = 0


def maximize(model: TreeEnsemble, dom: VariableDomain, stats: SearchStats | None = None):
    """Global maximum of ``predict(model, .)`` over ``dom``.

    Returns ``(assignment, value)`` where ``assignment`` is a tuple holding
    one category per feature.  Among maximizers the lexicographically
    smallest assignment is returned.

    Trees that depend on the same free variables are merged into one lookup
    table before the search, which tightens the bound without changing the
    optimum; the bound is still admissible.
    """
    _check(model, dom)
    stats = stats if stats is not None else SearchStats()
    if not dom.free_indices:
        x = dom.lexmin()
        return x, predict(model, x)

    search = _Search(model, dom)
    best_x = None
    best_v = -math.inf
    heap = []
    seq = itertools.count()

    def consider(box, bound, ambiguous):
        nonlocal best_x, best_v
        stats.nodes += 1
        if ambiguous.any():
            heapq.heappush(heap, (-bound, next(seq), box, ambiguous))
            return
        stats.resolved += 1
        x = search.point(box)
        v = predict(model, x)
        if v > best_v or (v == best_v and x < best_x):
            best_x, best_v = x, v

    consider(search.root, *search.evaluate(search.root))
    while heap:
        neg, _, box, ambiguous = heap[0]
        if -neg + search.slack < best_v:
            break
        heapq.heappop(heap)
        for child in search.branch(box, ambiguous):
            bound, amb = search.evaluate(child)
            if bound + search.slack >= best_v:
                consider(child, bound, amb)
    return best_x, best_v


def brute_force_maximize(model: TreeEnsemble, dom: VariableDomain, cap: int = ENUMERATION_CAP):
    """Enumerate ``dom`` in lexicographic order; first maximizer wins.

    Candidates are screened with a vectorized float sum, then every point
    within rounding distance of the screened maximum is re-evaluated with
    :func:`predict`.
    """
    _check(model, dom)
    if dom.size > cap:
        raise InvalidInputError(f"domain has {dom.size} points, enumeration cap is {cap}")
    grids = np.meshgrid(*[np.asarray(c) for c in dom.allowed], indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
    rough = leaf_value_matrix(model, points).sum(axis=1) + model.base_score
    scale = abs(model.base_score) + sum(
        max(abs(leaf.value) for leaf in _all_leaves(t)) for t in model.trees)
    tol = 64 * np.finfo(float).eps * max(scale, 1.0)
    best_x, best_v = None, -math.inf
    for idx in np.flatnonzero(rough >= rough.max() - tol):
        x = tuple(int(v) for v in points[idx])
        v = predict(model, x)
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v


def _all_leaves(node):
    if isinstance(node, Leaf):
        return [node]
    return _all_leaves(node.left) + _all_leaves(node.right)
