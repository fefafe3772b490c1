"""Bagged decision-tree ensemble producing per-object class-vote vectors.

Implemented from first principles: bootstrap bags, axis-aligned splits
chosen by impurity decrease over a per-node random feature subset, trees
grown to purity. Each tree casts one hard vote (its leaf's majority
class); the forest's vote vector is the per-class fraction of trees.
Out-of-bag votes for training objects aggregate only trees whose bag
excludes the object, giving unbiased training-set vote vectors.

Determinism: per-tree random generators are spawned from the config seed,
so results are independent of evaluation order; all tie-breaks are fixed
(lowest class index, lowest feature index, lowest threshold).
"""

from __future__ import annotations

import io
import json
import warnings
import zipfile
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import InvalidArgument, MalformedInput

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    _HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f
        return wrap if not (len(a) == 1 and callable(a[0])) else a[0]

FORMAT_VERSION = 1
_MIN_DECREASE = 1e-12


@dataclass
class ForestConfig:
    n_trees: int = 500
    n_split_features: int | None = None  # default floor(sqrt(n_features))
    min_node_size: int = 1
    rng_seed: int = 0
    split_criterion: str = "gini"  # or "entropy"

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidArgument(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_node_size < 1:
            raise InvalidArgument(f"min_node_size must be >= 1, got {self.min_node_size}")
        if self.n_split_features is not None and self.n_split_features < 1:
            raise InvalidArgument("n_split_features must be >= 1")
        if self.split_criterion not in ("gini", "entropy"):
            raise InvalidArgument(f"unknown split_criterion {self.split_criterion!r}")

    def resolve_split_features(self, n_features: int) -> int:
        m = self.n_split_features
        if m is None:
            m = int(np.floor(np.sqrt(n_features)))
        m = max(1, m)
        if m > n_features:
            raise InvalidArgument(
                f"n_split_features={m} exceeds feature count {n_features}")
        return m


@dataclass
class Tree:
    """Flattened binary tree.

    Node i is internal iff ``feature[i] >= 0``; then ``x[feature[i]] <=
    threshold[i]`` descends to ``left[i]``, else ``right[i]``. Leaves carry
    the majority class of their bag rows (ties to the lowest class index).
    """

    feature: np.ndarray     # int32, -1 at leaves
    threshold: np.ndarray   # float64
    left: np.ndarray        # int32
    right: np.ndarray       # int32
    leaf_class: np.ndarray  # int32, -1 at internal nodes
    bag: np.ndarray         # int64 multiset of training row indices, len n

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


def bootstrap_bag(n: int, rng: np.random.Generator) -> np.ndarray:
    """n indices drawn uniformly with replacement."""
    if n < 1:
        raise InvalidArgument(f"bag size must be >= 1, got {n}")
    return rng.integers(0, n, size=n)


def _impurity_curves(counts_left, counts_right, criterion):
    """Weighted child impurity at every candidate boundary.

    counts_left/right: (b, k) class counts on each side of b boundaries.
    Returns (b,) array of (n_l*i_l + n_r*i_r) / n.
    """
    nl = counts_left.sum(axis=1)
    nr = counts_right.sum(axis=1)
    n = nl[0] + nr[0]
    if criterion == "gini":
        il = 1.0 - np.sum(counts_left**2, axis=1) / nl**2
        ir = 1.0 - np.sum(counts_right**2, axis=1) / nr**2
    else:  # entropy
        pl = counts_left / nl[:, None]
        pr = counts_right / nr[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            il = -np.sum(np.where(pl > 0, pl * np.log2(pl), 0.0), axis=1)
            ir = -np.sum(np.where(pr > 0, pr * np.log2(pr), 0.0), axis=1)
    return (nl * il + nr * ir) / n


def _node_impurity(counts, criterion):
    n = counts.sum()
    p = counts / n
    if criterion == "gini":
        return 1.0 - float(np.sum(p**2))
    return float(-np.sum(np.where(p > 0, p * np.log2(p), 0.0)))


def _best_split(X, y, rows, k, m_try, criterion, rng):
    """Best (feature, threshold, decrease) over a random feature subset.

    Candidate features are drawn without replacement and evaluated in
    ascending index order; strict improvement comparison keeps the lowest
    feature index on ties, and the first-best boundary keeps the lowest
    threshold.
    """
    n_features = X.shape[1]
    feats = np.sort(rng.choice(n_features, size=m_try, replace=False))
    y_node = y[rows]
    counts = np.bincount(y_node, minlength=k).astype(float)
    parent = _node_impurity(counts, criterion)
    # zero-decrease splits are allowed (trees grow to maximum size), so the
    # starting best is -inf, not 0
    best = (-1, 0.0, -np.inf)  # feature, threshold, decrease
    for f in feats:
        v = X[rows, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        boundaries = np.nonzero(vs[1:] > vs[:-1])[0]
        if len(boundaries) == 0:
            continue
        onehot = np.zeros((len(rows), k))
        onehot[np.arange(len(rows)), y_node[order]] = 1.0
        cum = np.cumsum(onehot, axis=0)
        cl = cum[boundaries]
        cr = counts - cl
        child = _impurity_curves(cl, cr, criterion)
        decrease = parent - child
        b = int(np.argmax(decrease))  # first max = lowest threshold
        if decrease[b] > best[2] + _MIN_DECREASE:  # strict: ties keep lower feature
            thr = 0.5 * (vs[boundaries[b]] + vs[boundaries[b] + 1])
            best = (int(f), float(thr), float(decrease[b]))
    return best


def grow_tree(X, y, bag, cfg: ForestConfig, rng: np.random.Generator, k: int) -> Tree:
    """Grow one tree on the bag rows to purity (or min_node_size)."""
    if len(bag) == 0:
        raise InvalidArgument("bag must be non-empty")
    m_try = cfg.resolve_split_features(X.shape[1])

    feature, threshold, left, right, leaf_class = [], [], [], [], []

    def add_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf_class.append(-1)
        return len(feature) - 1

    # explicit preorder stack (left child first), matching recursive order
    # without Python's recursion limit
    stack = [(np.asarray(bag, dtype=np.int64), -1, False)]
    while stack:
        rows, parent, is_left = stack.pop()
        node = add_node()
        if parent >= 0:
            (left if is_left else right)[parent] = node
        y_node = y[rows]
        counts = np.bincount(y_node, minlength=k)
        if len(rows) <= cfg.min_node_size or counts.max() == len(rows):
            leaf_class[node] = int(np.argmax(counts))
            continue
        f, thr, dec = _best_split(X, y, rows, k, m_try, cfg.split_criterion, rng)
        if f < 0:  # no candidate feature varies within the node
            leaf_class[node] = int(np.argmax(counts))
            continue
        feature[node] = f
        threshold[node] = thr
        go_left = X[rows, f] <= thr
        stack.append((rows[~go_left], node, False))
        stack.append((rows[go_left], node, True))
    return Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        leaf_class=np.array(leaf_class, dtype=np.int32),
        bag=np.asarray(bag, dtype=np.int64),
    )


@dataclass
class Forest:
    trees: list
    class_names: list
    config: ForestConfig
    n_features: int
    oob_votes: np.ndarray = None       # (n, k) training-set OOB vote vectors
    oob_coverage: np.ndarray = None    # (n,) trees that had row i out of bag
    oob_imputed: np.ndarray = field(default=None)  # rows with zero coverage
    _flat: tuple = field(default=None, repr=False, compare=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def flattened(self):
        """Concatenated node arrays for the fast prediction kernel."""
        if self._flat is None:
            offsets = np.zeros(len(self.trees) + 1, dtype=np.int64)
            for t, tree in enumerate(self.trees):
                offsets[t + 1] = offsets[t] + tree.n_nodes
            self._flat = (
                np.concatenate([t.feature for t in self.trees]),
                np.concatenate([t.threshold for t in self.trees]),
                np.concatenate([t.left for t in self.trees]),
                np.concatenate([t.right for t in self.trees]),
                np.concatenate([t.leaf_class for t in self.trees]),
                offsets,
            )
        return self._flat


def encode_labels(labels, class_names=None):
    """Map labels to integer codes; class order = first appearance."""
    if class_names is None:
        class_names = []
        for v in labels:
            v = v.item() if isinstance(v, np.generic) else v
            if v not in class_names:
                class_names.append(v)
    index = {c: j for j, c in enumerate(class_names)}
    try:
        y = np.array([index[v] for v in labels], dtype=np.int32)
    except KeyError as exc:
        raise InvalidArgument(f"label {exc.args[0]!r} not in class list {class_names}")
    return y, list(class_names)


def train_forest(X, labels, cfg: ForestConfig = None, class_names=None,
                 compute_oob: bool = True) -> Forest:
    """Train the ensemble; per-tree generators spawn from cfg.rng_seed."""
    cfg = cfg or ForestConfig()
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise InvalidArgument("X must be a non-empty 2-d matrix")
    y, class_names = encode_labels(labels, class_names)
    if len(y) != len(X):
        raise InvalidArgument("labels length must match X rows")
    k = len(class_names)
    n = len(X)

    children = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_trees)
    trees = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(children[t])
        bag = bootstrap_bag(n, rng)
        trees.append(grow_tree(X, y, bag, cfg, rng, k))

    forest = Forest(trees=trees, class_names=class_names, config=cfg,
                    n_features=X.shape[1])
    if compute_oob:
        votes, coverage, imputed = oob_vote_matrix(forest, X)
        forest.oob_votes = votes
        forest.oob_coverage = coverage
        forest.oob_imputed = imputed
    return forest


@njit(cache=True, nogil=True)
def _descend_counts(feature, threshold, left, right, leaf_class, offsets, X, counts):
    n = X.shape[0]
    n_trees = len(offsets) - 1
    for i in range(n):
        for t in range(n_trees):
            node = offsets[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node] + offsets[t]
                else:
                    node = right[node] + offsets[t]
            counts[i, leaf_class[node]] += 1


def _descend_counts_numpy(feature, threshold, left, right, leaf_class, offsets, X, counts):
    n = X.shape[0]
    n_trees = len(offsets) - 1
    idx = np.arange(n)
    for t in range(n_trees):
        node = np.full(n, offsets[t], dtype=np.int64)
        while True:
            f = feature[node]
            active = f >= 0
            if not active.any():
                break
            sub = idx[active]
            nd = node[active]
            go_left = X[sub, f[active]] <= threshold[nd]
            node[sub] = np.where(go_left, left[nd], right[nd]) + offsets[t]
        counts[idx, leaf_class[node]] += 1


def predict_counts(forest: Forest, X) -> np.ndarray:
    """Per-class hard-vote counts, shape (n, k)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise InvalidArgument(
            f"expected {forest.n_features} features, got shape {X.shape}")
    counts = np.zeros((len(X), forest.n_classes), dtype=np.int64)
    kernel = _descend_counts if _HAVE_NUMBA else _descend_counts_numpy
    kernel(*forest.flattened(), X, counts)
    return counts


def predict_matrix(forest: Forest, X) -> np.ndarray:
    """Vote vectors for each row: fraction of trees voting each class."""
    counts = predict_counts(forest, X)
    return counts / float(len(forest.trees))


def predict_votes(forest: Forest, x) -> np.ndarray:
    """Vote vector for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgument("predict_votes takes a single 1-d vector")
    return predict_matrix(forest, x[None, :])[0]


def oob_vote_matrix(forest: Forest, X):
    """Out-of-bag vote vectors for the training matrix.

    Returns (votes (n,k), coverage (n,), imputed row indices). Row i
    aggregates only trees whose bag excludes i; rows no tree left out are
    imputed with full-forest votes and flagged.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = len(X)
    k = forest.n_classes
    counts = np.zeros((n, k), dtype=np.int64)
    coverage = np.zeros(n, dtype=np.int64)

    feature, threshold, left, right, leaf_class, offsets = forest.flattened()
    for t, tree in enumerate(forest.trees):
        in_bag = np.zeros(n, dtype=bool)
        in_bag[tree.bag] = True
        out_rows = np.nonzero(~in_bag)[0]
        if len(out_rows) == 0:
            continue
        sub = np.zeros((len(out_rows), k), dtype=np.int64)
        kernel = _descend_counts if _HAVE_NUMBA else _descend_counts_numpy
        kernel(feature[offsets[t]:offsets[t + 1]],
               threshold[offsets[t]:offsets[t + 1]],
               left[offsets[t]:offsets[t + 1]],
               right[offsets[t]:offsets[t + 1]],
               leaf_class[offsets[t]:offsets[t + 1]],
               np.array([0, offsets[t + 1] - offsets[t]], dtype=np.int64),
               X[out_rows], sub)
        counts[out_rows] += sub
        coverage[out_rows] += 1

    votes = np.zeros((n, k))
    covered = coverage > 0
    votes[covered] = counts[covered] / coverage[covered, None]
    imputed = np.nonzero(~covered)[0]
    if len(imputed):
        warnings.warn(
            f"{len(imputed)} training object(s) had zero out-of-bag coverage; "
            "imputed with full-forest votes")
        votes[imputed] = predict_matrix(forest, X[imputed])
    return votes, coverage, imputed


def macro_f_score(votes, y) -> float:
    """Unweighted mean of per-class F1; predicted label = argmax vote."""
    votes = np.asarray(votes)
    y = np.asarray(y)
    preds = np.argmax(votes, axis=1)  # ties resolve to lowest class index
    k = votes.shape[1]
    scores = []
    for c in range(k):
        support = np.sum(y == c)
        if support == 0:
            warnings.warn(f"class index {c} absent from labels; skipped in macro F")
            continue
        tp = np.sum((preds == c) & (y == c))
        fp = np.sum((preds == c) & (y != c))
        fn = np.sum((preds != c) & (y == c))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(f1)
    return float(np.mean(scores)) if scores else 0.0


def _write_zip_entry(zf, name, payload: bytes):
    # fixed timestamp so identical forests produce identical bundle bytes
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_forest(forest: Forest, path) -> None:
    """Persist as a zip bundle: JSON metadata + one .npy entry per array.

    Bundle bytes are deterministic for identical forests (fixed entry
    timestamps, sorted keys).
    """
    feature, threshold, left, right, leaf_class, offsets = forest.flattened()
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "forest",
        "class_names": forest.class_names,
        "n_features": forest.n_features,
        "config": asdict(forest.config),
    }
    arrays = {
        "feature": feature, "threshold": threshold, "left": left,
        "right": right, "leaf_class": leaf_class, "offsets": offsets,
        "bags": np.stack([t.bag for t in forest.trees]),
    }
    if forest.oob_votes is not None:
        arrays["oob_votes"] = forest.oob_votes
        arrays["oob_coverage"] = forest.oob_coverage
        arrays["oob_imputed"] = forest.oob_imputed
    with zipfile.ZipFile(path, "w") as zf:
        _write_zip_entry(zf, "meta.json",
                         json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name])
            _write_zip_entry(zf, name + ".npy", buf.getvalue())


def load_forest(path) -> Forest:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            npz = {
                name[:-4]: np.load(io.BytesIO(zf.read(name)))
                for name in zf.namelist() if name.endswith(".npy")
            }
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise MalformedInput(f"cannot load forest bundle {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION or meta.get("kind") != "forest":
        raise MalformedInput(f"unsupported forest bundle version in {path}: {meta}")
    offsets = npz["offsets"]
    bags = npz["bags"]
    trees = []
    for t in range(len(offsets) - 1):
        lo, hi = offsets[t], offsets[t + 1]
        trees.append(Tree(
            feature=npz["feature"][lo:hi].copy(),
            threshold=npz["threshold"][lo:hi].copy(),
            left=npz["left"][lo:hi].copy(),
            right=npz["right"][lo:hi].copy(),
            leaf_class=npz["leaf_class"][lo:hi].copy(),
            bag=bags[t].copy(),
        ))
    forest = Forest(
        trees=trees,
        class_names=list(meta["class_names"]),
        config=ForestConfig(**meta["config"]),
        n_features=int(meta["n_features"]),
        oob_votes=npz["oob_votes"].copy() if "oob_votes" in npz else None,
        oob_coverage=npz["oob_coverage"].copy() if "oob_coverage" in npz else None,
        oob_imputed=npz["oob_imputed"].copy() if "oob_imputed" in npz else None,
    )
    return forest
