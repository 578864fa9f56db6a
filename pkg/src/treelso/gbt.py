"""Gradient-boosted regression trees over categorical feature vectors.

Every feature takes values in ``range(domain_size)``.  Splits route a row
left iff its category is in ``left_categories``; everything else, including
categories never seen at the node during training, goes right.

Split search uses the exact ordering trick for squared error: categories
present at a node are sorted by mean residual and every prefix of that order
is tried as the left set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np
from numba import njit

from .errors import FormatError, InvalidInputError

MAGIC = "TREELSO-GBT v1"


@dataclass(frozen=True)
class Leaf:
    value: float
    sample_count: int


@dataclass(frozen=True)
class SplitNode:
    feature_index: int
    left_categories: frozenset
    left: "Node"
    right: "Node"
    gain: float = 0.0

    def goes_left(self, category: int) -> bool:
        return category in self.left_categories


Node = Union[SplitNode, Leaf]


@dataclass(frozen=True)
class GbtConfig:
    n_trees: int = 800
    interaction_depth: int = 2
    min_samples_leaf: int = 20
    max_leaves: int = 5
    shrinkage: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidInputError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_leaves < 2:
            raise InvalidInputError(f"max_leaves must be >= 2, got {self.max_leaves}")
        if not 0.0 < self.shrinkage <= 1.0:
            raise InvalidInputError(f"shrinkage must be in (0, 1], got {self.shrinkage}")
        if self.interaction_depth < 1:
            raise InvalidInputError("interaction_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise InvalidInputError("min_samples_leaf must be >= 1")


@dataclass(frozen=True)
class CategoricalDataset:
    """Integer feature matrix paired with real targets."""

    features: np.ndarray
    targets: np.ndarray
    domain_sizes: tuple

    def __post_init__(self):
        X = np.asarray(self.features)
        y = np.asarray(self.targets, dtype=np.float64)
        if X.ndim != 2:
            raise InvalidInputError(f"features must be 2-D, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise InvalidInputError("targets must have one entry per row")
        if len(self.domain_sizes) != X.shape[1]:
            raise InvalidInputError("domain_sizes must have one entry per feature")
        if X.size and not np.issubdtype(X.dtype, np.integer):
            if not np.array_equal(X, np.round(X)):
                raise InvalidInputError("feature values must be integers")
        X = X.astype(np.int64)
        sizes = np.asarray(self.domain_sizes, dtype=np.int64)
        if np.any(sizes < 1):
            raise InvalidInputError("domain sizes must be positive")
        if X.size and (np.any(X < 0) or np.any(X >= sizes[None, :])):
            raise InvalidInputError("feature value out of domain")
        if not np.all(np.isfinite(y)):
            raise InvalidInputError("targets must be finite")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "domain_sizes", tuple(int(k) for k in sizes))

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class TreeEnsemble:
    base_score: float
    trees: tuple
    domain_sizes: tuple
    config: GbtConfig = field(default_factory=GbtConfig)

    @property
    def num_features(self) -> int:
        return len(self.domain_sizes)

    def check_point(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.shape != (self.num_features,):
            raise InvalidInputError(
                f"expected a vector of {self.num_features} features, got shape {x.shape}")
        sizes = np.asarray(self.domain_sizes)
        if np.any(x < 0) or np.any(x >= sizes):
            raise InvalidInputError(f"feature vector {x.tolist()} is out of domain")
        return x.astype(np.int64)


# ---------------------------------------------------------------------------
# tree helpers


def route(node: Node, x) -> Leaf:
    while isinstance(node, SplitNode):
        node = node.left if int(x[node.feature_index]) in node.left_categories else node.right
    return node


def iter_leaves(node: Node) -> Iterator[Leaf]:
    if isinstance(node, Leaf):
        yield node
    else:
        yield from iter_leaves(node.left)
        yield from iter_leaves(node.right)


def iter_splits(node: Node) -> Iterator[SplitNode]:
    if isinstance(node, SplitNode):
        yield node
        yield from iter_splits(node.left)
        yield from iter_splits(node.right)


def tree_depth(node: Node) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def n_leaves(node: Node) -> int:
    return sum(1 for _ in iter_leaves(node))


def _route_many(node: Node, X: np.ndarray, masks: dict) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        nd, rows = stack.pop()
        if isinstance(nd, Leaf):
            out[rows] = nd.value
            continue
        mask = masks.get(id(nd))
        if mask is None:
            mask = np.zeros(int(X[:, nd.feature_index].max(initial=0)) + 1, dtype=bool)
            cats = [c for c in nd.left_categories if c < mask.size]
            mask[cats] = True
        go_left = mask[X[rows, nd.feature_index]]
        stack.append((nd.left, rows[go_left]))
        stack.append((nd.right, rows[~go_left]))
    return out


def leaf_value_matrix(model: TreeEnsemble, X) -> np.ndarray:
    """Per-row, per-tree routed leaf values, shape ``(n_rows, n_trees)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.int64))
    if X.shape[1] != model.num_features:
        raise InvalidInputError("feature count mismatch")
    sizes = np.asarray(model.domain_sizes)
    if X.size and (np.any(X < 0) or np.any(X >= sizes[None, :])):
        raise InvalidInputError("feature value out of domain")
    masks = {}
    for tree in model.trees:
        for s in iter_splits(tree):
            m = np.zeros(model.domain_sizes[s.feature_index], dtype=bool)
            m[list(s.left_categories)] = True
            masks[id(s)] = m
    vals = np.zeros((X.shape[0], len(model.trees)))
    for t, tree in enumerate(model.trees):
        vals[:, t] = _route_many(tree, X, masks)
    return vals


# ---------------------------------------------------------------------------
# prediction / importances


def predict(model: TreeEnsemble, x) -> float:
    """Ensemble prediction at one point.

    The sum is formed with ``math.fsum`` so the result is the correctly
    rounded total of base score and leaf values, independent of tree order.
    """
    x = model.check_point(x)
    return math.fsum([model.base_score] + [route(t, x).value for t in model.trees])


def predict_many(model: TreeEnsemble, X) -> np.ndarray:
    vals = leaf_value_matrix(model, X)
    base = model.base_score
    return np.array([math.fsum([base, *row]) for row in vals.tolist()])


def feature_importances(model: TreeEnsemble) -> np.ndarray:
    imp = np.zeros(model.num_features)
    for tree in model.trees:
        for s in iter_splits(tree):
            imp[s.feature_index] += s.gain
    total = imp.sum()
    if total > 0:
        imp /= total
    return imp


# ---------------------------------------------------------------------------
# fitting


@njit(cache=True)
def _lex_less(a, b, K):
    # sorted-tuple order on category sets given as boolean masks
    i = 0
    j = 0
    while True:
        while i < K and not a[i]:
            i += 1
        while j < K and not b[j]:
            j += 1
        if i == K:
            return j < K
        if j == K:
            return False
        if i != j:
            return i < j
        i += 1
        j += 1


@njit(cache=True)
def _best_split(codes, resid, rows, sizes, kmax, min_leaf):
    F = codes.shape[1]
    n = rows.shape[0]
    sums = np.zeros((F, kmax))
    counts = np.zeros((F, kmax), dtype=np.int64)
    total = 0.0
    for r in rows:
        v = resid[r]
        total += v
        for f in range(F):
            c = codes[r, f]
            sums[f, c] += v
            counts[f, c] += 1
    parent = total * total / n
    best_gain = -np.inf
    best_f = -1
    best_mask = np.zeros(kmax, dtype=np.bool_)
    cand = np.zeros(kmax, dtype=np.bool_)
    means = np.empty(kmax)
    for f in range(F):
        K = sizes[f]
        m = 0
        present = np.empty(K, dtype=np.int64)
        for c in range(K):
            if counts[f, c] > 0:
                present[m] = c
                means[m] = sums[f, c] / counts[f, c]
                m += 1
        if m < 2:
            continue
        order = np.argsort(means[:m], kind="mergesort")
        sL = 0.0
        nL = 0
        cand[:] = False
        for p in range(m - 1):
            c = present[order[p]]
            sL += sums[f, c]
            nL += counts[f, c]
            cand[c] = True
            nR = n - nL
            if nL < min_leaf or nR < min_leaf:
                continue
            sR = total - sL
            gain = sL * sL / nL + sR * sR / nR - parent
            if gain > best_gain or (gain == best_gain and f == best_f
                                    and _lex_less(cand, best_mask, kmax)):
                best_gain = gain
                best_f = f
                best_mask[:] = cand
    return best_f, best_gain, best_mask


@njit(cache=True)
def _grow(codes, resid, sizes, kmax, max_depth, max_leaves, min_leaf, min_gain,
          shrinkage, pred, node_feat, node_left, node_right, node_mask, node_gain,
          node_value, node_count):
    """Grow one tree best-first; returns the node count (1 means no split)."""
    n = codes.shape[0]
    n_nodes = 1
    where = np.zeros(n, dtype=np.int64)
    depth = np.zeros(node_feat.shape[0], dtype=np.int64)
    cand_f = np.full(node_feat.shape[0], -1, dtype=np.int64)
    cand_g = np.full(node_feat.shape[0], -np.inf)
    cand_m = np.zeros((node_feat.shape[0], kmax), dtype=np.bool_)
    node_left[0] = -1
    node_right[0] = -1
    node_feat[0] = -1
    if max_depth > 0 and n >= 2 * min_leaf:
        f, g, m = _best_split(codes, resid, np.arange(n), sizes, kmax, min_leaf)
        cand_f[0] = f
        cand_g[0] = g
        cand_m[0] = m
    n_leaf = 1
    while n_leaf < max_leaves:
        best = -1
        for i in range(n_nodes):
            if node_left[i] == -1 and cand_f[i] >= 0 and cand_g[i] > min_gain:
                if best == -1 or cand_g[i] > cand_g[best]:
                    best = i
        if best == -1:
            break
        f = cand_f[best]
        lo = n_nodes
        hi = n_nodes + 1
        n_nodes += 2
        node_feat[best] = f
        node_gain[best] = cand_g[best]
        node_mask[best] = cand_m[best]
        node_left[best] = lo
        node_right[best] = hi
        for c in (lo, hi):
            node_left[c] = -1
            node_right[c] = -1
            node_feat[c] = -1
            depth[c] = depth[best] + 1
        nl = 0
        for r in range(n):
            if where[r] == best:
                if cand_m[best, codes[r, f]]:
                    where[r] = lo
                    nl += 1
                else:
                    where[r] = hi
        nr = 0
        for r in range(n):
            if where[r] == hi:
                nr += 1
        for c, cnt in ((lo, nl), (hi, nr)):
            if depth[c] < max_depth and cnt >= 2 * min_leaf:
                rows = np.empty(cnt, dtype=np.int64)
                k = 0
                for r in range(n):
                    if where[r] == c:
                        rows[k] = r
                        k += 1
                f2, g2, m2 = _best_split(codes, resid, rows, sizes, kmax, min_leaf)
                cand_f[c] = f2
                cand_g[c] = g2
                cand_m[c] = m2
        n_leaf += 1
    if n_nodes == 1:
        node_value[0] = 0.0
        node_count[0] = n
        return 1
    sums = np.zeros(n_nodes)
    counts = np.zeros(n_nodes, dtype=np.int64)
    for r in range(n):
        sums[where[r]] += resid[r]
        counts[where[r]] += 1
    for i in range(n_nodes):
        if node_left[i] == -1:
            node_value[i] = shrinkage * sums[i] / counts[i]
            node_count[i] = counts[i]
    for r in range(n):
        pred[r] += node_value[where[r]]
    return n_nodes


def _build(i, feat, left, right, mask, gain, value, count) -> Node:
    if left[i] == -1:
        return Leaf(float(value[i]), int(count[i]))
    cats = frozenset(int(c) for c in np.flatnonzero(mask[i]))
    return SplitNode(int(feat[i]), cats,
                     _build(left[i], feat, left, right, mask, gain, value, count),
                     _build(right[i], feat, left, right, mask, gain, value, count),
                     float(gain[i]))


def fit(data: CategoricalDataset, cfg: GbtConfig = GbtConfig(), *, callback=None) -> TreeEnsemble:
    """Boost ``cfg.n_trees`` squared-error regression trees on ``data``.

    ``callback(round_index, running_prediction)`` is called after every round
    if given.  Rounds whose best split has no positive gain produce a single
    leaf with value 0.
    """
    if len(data) == 0:
        raise InvalidInputError("cannot fit on an empty dataset")
    X = np.ascontiguousarray(data.features)
    y = data.targets
    sizes = np.asarray(data.domain_sizes, dtype=np.int64)
    kmax = int(sizes.max())
    # anchored mean: exact for constant targets
    base = float(y[0] + math.fsum(y - y[0]) / y.size)
    pred = np.full(y.size, base)
    min_gain = 1e-12 * float(np.sum((y - base) ** 2))
    maxn = 2 * cfg.max_leaves - 1
    feat = np.empty(maxn, dtype=np.int64)
    left = np.empty(maxn, dtype=np.int64)
    right = np.empty(maxn, dtype=np.int64)
    mask = np.zeros((maxn, kmax), dtype=np.bool_)
    gain = np.zeros(maxn)
    value = np.zeros(maxn)
    count = np.zeros(maxn, dtype=np.int64)
    trees = []
    for i in range(cfg.n_trees):
        resid = y - pred
        _grow(X, resid, sizes, kmax, cfg.interaction_depth, cfg.max_leaves,
              cfg.min_samples_leaf, min_gain, cfg.shrinkage, pred,
              feat, left, right, mask, gain, value, count)
        trees.append(_build(0, feat, left, right, mask, gain, value, count))
        if callback is not None:
            callback(i, pred)
    return TreeEnsemble(base, tuple(trees), data.domain_sizes, cfg)


# ---------------------------------------------------------------------------
# text serialization


def _write_node(node: Node, out: list) -> None:
    if isinstance(node, Leaf):
        out.append(f"leaf {node.value!r} {node.sample_count}")
    else:
        cats = ",".join(str(c) for c in sorted(node.left_categories))
        out.append(f"split {node.feature_index} {node.gain!r} {cats}")
        _write_node(node.left, out)
        _write_node(node.right, out)


def dumps(model: TreeEnsemble) -> str:
    cfg = model.config
    lines = [
        MAGIC,
        f"n_features {model.num_features}",
        "domain_sizes " + " ".join(str(k) for k in model.domain_sizes),
        f"config {cfg.n_trees} {cfg.interaction_depth} {cfg.min_samples_leaf} "
        f"{cfg.max_leaves} {cfg.shrinkage!r} {cfg.seed}",
        f"base_score {model.base_score!r}",
        f"n_trees {len(model.trees)}",
    ]
    for t, tree in enumerate(model.trees):
        lines.append(f"tree {t}")
        _write_node(tree, lines)
    return "\n".join(lines) + "\n"


def loads(text: str) -> TreeEnsemble:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise FormatError(f"missing {MAGIC!r} header")
    try:
        pos = iter(lines[1:])

        def field_(name):
            key, _, rest = next(pos).partition(" ")
            if key != name:
                raise FormatError(f"expected {name!r}, got {key!r}")
            return rest

        n_features = int(field_("n_features"))
        sizes = tuple(int(v) for v in field_("domain_sizes").split())
        c = field_("config").split()
        cfg = GbtConfig(int(c[0]), int(c[1]), int(c[2]), int(c[3]), float(c[4]), int(c[5]))
        base = float(field_("base_score"))
        count = int(field_("n_trees"))

        def read_node():
            kind, *rest = next(pos).split()
            if kind == "leaf":
                return Leaf(float(rest[0]), int(rest[1]))
            if kind == "split":
                cats = frozenset(int(v) for v in rest[2].split(","))
                left = read_node()
                right = read_node()
                return SplitNode(int(rest[0]), cats, left, right, float(rest[1]))
            raise FormatError(f"unknown node kind {kind!r}")

        trees = []
        for t in range(count):
            if field_("tree").strip() != str(t):
                raise FormatError("tree index out of sequence")
            trees.append(read_node())
    except (StopIteration, IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed model text: {exc}") from exc
    if len(sizes) != n_features:
        raise FormatError("domain_sizes does not match n_features")
    return TreeEnsemble(base, tuple(trees), sizes, cfg)


def training_mse(model: TreeEnsemble, data: CategoricalDataset) -> float:
    resid = data.targets - predict_many(model, data.features)
    return float(np.mean(resid ** 2))


def as_dataset(features: Sequence, targets: Sequence, domain_sizes) -> CategoricalDataset:
    if isinstance(domain_sizes, int):
        domain_sizes = (domain_sizes,) * np.asarray(features).shape[1]
    return CategoricalDataset(np.asarray(features), np.asarray(targets, dtype=float),
                              tuple(domain_sizes))
