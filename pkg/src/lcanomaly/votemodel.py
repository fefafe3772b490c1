"""Discrete Bayesian network over forest vote variables.

Vote vectors are discretized into bins (20 by default); a network over
the k per-class vote variables is learned by greedy order-constrained
search (each node may only take parents that precede it in a fixed
topological order, at most ``max_parents`` of them), scored by the
Dirichlet-multinomial marginal likelihood with symmetric pseudo-count
``alpha``. Conditional tables are MAP multinomials; the outlier score of
a vote vector is one minus its joint probability under the network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import InvalidArgument, MalformedInput

DEFAULT_N_BINS = 20
DEFAULT_MAX_PARENTS = 2
DEFAULT_ALPHA = 4.0
FORMAT_VERSION = 1
_EDGE_TOL = 1e-9


@dataclass
class Discretizer:
    """Maps vote values in [0,1] to bin indices via fixed edges.

    Bins are half-open [edges[b], edges[b+1]) except the last, which
    includes 1.0; a value equal to an interior edge goes to the upper bin.
    """

    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        if len(self.edges) < 3:
            raise InvalidArgument("discretizer needs at least 2 bins")
        if self.edges[0] != 0.0 or self.edges[-1] != 1.0:
            raise InvalidArgument("bin edges must span [0, 1] exactly")
        if np.any(np.diff(self.edges) <= 0):
            raise InvalidArgument("bin edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def __call__(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if np.any(v < -_EDGE_TOL) or np.any(v > 1.0 + _EDGE_TOL):
            bad = v[(v < -_EDGE_TOL) | (v > 1.0 + _EDGE_TOL)]
            raise InvalidArgument(f"vote values outside [0,1]: {bad[:5]}")
        v = np.clip(v, 0.0, 1.0)
        bins = np.searchsorted(self.edges, v, side="right") - 1
        return np.clip(bins, 0, self.n_bins - 1).astype(np.int64)


def equal_width_discretizer(n_bins: int = DEFAULT_N_BINS) -> Discretizer:
    if n_bins < 2:
        raise InvalidArgument(f"n_bins must be >= 2, got {n_bins}")
    return Discretizer(np.linspace(0.0, 1.0, n_bins + 1))


def quantile_discretizer(values, n_bins: int = DEFAULT_N_BINS) -> Discretizer:
    """Edges at data quantiles; duplicate edges are merged, so heavily
    concentrated data may yield fewer than ``n_bins`` effective bins."""
    if n_bins < 2:
        raise InvalidArgument(f"n_bins must be >= 2, got {n_bins}")
    q = np.quantile(np.asarray(values, dtype=float).ravel(),
                    np.linspace(0, 1, n_bins + 1))
    q[0], q[-1] = 0.0, 1.0
    edges = np.unique(q)
    if len(edges) < 3:
        edges = np.array([0.0, float(np.median(values)) or 0.5, 1.0])
        edges = np.unique(edges)
        if len(edges) < 3:
            edges = np.array([0.0, 0.5, 1.0])
    return Discretizer(edges)


def parameter_count(n_bins: int, n_parents: int) -> int:
    """Free parameters of one node's conditional table."""
    if n_bins < 2:
        raise InvalidArgument(f"n_bins must be >= 2, got {n_bins}")
    if n_parents < 0:
        raise InvalidArgument(f"n_parents must be >= 0, got {n_parents}")
    return (n_bins - 1) * n_bins**n_parents


@dataclass
class NetworkStructure:
    """Parent sets under a fixed topological order (acyclic by construction)."""

    order: tuple          # permutation of node indices
    parents: tuple        # parents[j] = sorted tuple of parent node indices
    max_parents: int = DEFAULT_MAX_PARENTS

    def __post_init__(self):
        k = len(self.order)
        if sorted(self.order) != list(range(k)):
            raise InvalidArgument(f"order must be a permutation of 0..{k - 1}")
        pos = {node: i for i, node in enumerate(self.order)}
        for j, ps in enumerate(self.parents):
            if len(ps) > self.max_parents:
                raise InvalidArgument(
                    f"node {j} has {len(ps)} parents > max {self.max_parents}")
            for p in ps:
                if pos[p] >= pos[j]:
                    raise InvalidArgument(
                        f"parent {p} does not precede node {j} in the order")

    @property
    def n_nodes(self) -> int:
        return len(self.order)


def _parent_codes(D, parents, n_bins):
    """Mixed-radix code of each row's parent configuration."""
    code = np.zeros(len(D), dtype=np.int64)
    for i, p in enumerate(parents):
        code += D[:, p] * n_bins**i
    return code


def _family_counts(D, child, parents, n_bins):
    """(n_configs, n_bins) table of joint counts for one family."""
    n_configs = n_bins ** len(parents)
    if len(D) == 0:
        return np.zeros((n_configs, n_bins))
    code = _parent_codes(D, parents, n_bins) * n_bins + D[:, child]
    flat = np.bincount(code, minlength=n_configs * n_bins).astype(float)
    return flat.reshape(n_configs, n_bins)


def k2_local_score(child: int, parents, D, alpha: float = DEFAULT_ALPHA,
                   n_bins: int = None) -> float:
    """Log Dirichlet-multinomial marginal likelihood of one family.

    Per observed parent configuration with row total N and bin counts N_b:
    lnΓ(Bα) − lnΓ(N + Bα) + Σ_b [lnΓ(N_b + α) − lnΓ(α)], B = n_bins.
    Decomposable: depends only on the child column and its parents.
    """
    D = np.asarray(D)
    if D.ndim != 2 or len(D) == 0:
        raise InvalidArgument("score needs a non-empty 2-d discrete matrix")
    if n_bins is None:
        n_bins = int(D.max()) + 1
    counts = _family_counts(D, child, tuple(parents), n_bins)
    row_tot = counts.sum(axis=1)
    b_alpha = n_bins * alpha
    score = np.sum(gammaln(b_alpha) - gammaln(row_tot + b_alpha))
    score += np.sum(gammaln(counts + alpha) - gammaln(alpha))
    return float(score)


def network_score(structure: NetworkStructure, D, alpha: float = DEFAULT_ALPHA,
                  n_bins: int = None) -> float:
    """Total log score = sum of local family scores (decomposability)."""
    return float(sum(
        k2_local_score(j, structure.parents[j], D, alpha, n_bins)
        for j in range(structure.n_nodes)))


def entropy_order(D, n_bins: int) -> tuple:
    """Node order by descending marginal entropy (ties: lower index first)."""
    k = D.shape[1]
    ent = np.empty(k)
    for j in range(k):
        p = np.bincount(D[:, j], minlength=n_bins) / len(D)
        p = p[p > 0]
        ent[j] = -np.sum(p * np.log(p))
    return tuple(int(j) for j in np.lexsort((np.arange(k), -ent)))


def learn_structure(D, order=None, max_parents: int = DEFAULT_MAX_PARENTS,
                    alpha: float = DEFAULT_ALPHA, n_bins: int = None) -> NetworkStructure:
    """Greedy order-constrained parent search.

    For each node in ``order``, repeatedly add the single preceding node
    whose addition maximizes that node's local score; accept only strict
    improvements; stop when no candidate improves or ``max_parents`` is
    reached. The result is acyclic by construction.
    """
    D = np.asarray(D)
    if D.ndim != 2 or len(D) == 0:
        raise InvalidArgument("structure learning needs a non-empty matrix")
    k = D.shape[1]
    if n_bins is None:
        n_bins = int(D.max()) + 1
    if order is None:
        order = tuple(range(k))
    else:
        order = tuple(int(x) for x in order)
    if max_parents < 0:
        raise InvalidArgument("max_parents must be >= 0")

    parents = [() for _ in range(k)]
    for pos, node in enumerate(order):
        preceding = list(order[:pos])
        current = k2_local_score(node, (), D, alpha, n_bins)
        chosen: list = []
        while len(chosen) < max_parents:
            best_cand, best_score = -1, current
            for cand in preceding:
                if cand in chosen:
                    continue
                trial = tuple(sorted(chosen + [cand]))
                s = k2_local_score(node, trial, D, alpha, n_bins)
                if s > best_score:  # strict: ties keep earlier/no candidate
                    best_cand, best_score = cand, s
            if best_cand < 0:
                break
            chosen.append(best_cand)
            current = best_score
        parents[node] = tuple(sorted(chosen))
    return NetworkStructure(order=order, parents=tuple(parents),
                            max_parents=max_parents)


@dataclass
class CpdTable:
    """MAP multinomial rows, one per parent configuration (row-major in
    mixed-radix parent code order)."""

    node: int
    parents: tuple
    table: np.ndarray  # (n_bins^{|parents|}, n_bins), rows sum to 1
    alpha: float

    @property
    def n_bins(self) -> int:
        return self.table.shape[1]

    @property
    def free_parameters(self) -> int:
        return parameter_count(self.n_bins, len(self.parents))

    @property
    def stored_cells(self) -> int:
        return int(self.table.size)


def fit_cpds(structure: NetworkStructure, D, alpha: float = DEFAULT_ALPHA,
             n_bins: int = None, map_variant: str = "literal") -> list:
    """Fit each node's conditional table from discrete data.

    ``map_variant="literal"`` keeps the stated posterior form with
    exponents (N + α), giving cell estimates (N_b + α)/(N + Bα); the
    textbook posterior-mode variant (exponents N + α − 1) is available as
    ``map_variant="posterior_mode"``. Unseen parent configurations reduce
    to the pure-prior uniform row either way.
    """
    if map_variant not in ("literal", "posterior_mode"):
        raise InvalidArgument(f"unknown map_variant {map_variant!r}")
    D = np.asarray(D)
    if n_bins is None:
        n_bins = (int(D.max()) + 1) if D.size else 2
    cpds = []
    for node in range(structure.n_nodes):
        counts = _family_counts(D, node, structure.parents[node], n_bins)
        if map_variant == "literal":
            num = counts + alpha
        else:
            num = counts + alpha - 1.0
            if np.any(num <= 0):
                raise InvalidArgument(
                    "posterior_mode variant requires alpha > 1 or observed counts")
        table = num / num.sum(axis=1, keepdims=True)
        cpds.append(CpdTable(node=node, parents=structure.parents[node],
                             table=table, alpha=alpha))
    return cpds


@dataclass
class VoteModel:
    """Fitted discretizer + structure + conditional tables."""

    discretizer: Discretizer
    structure: NetworkStructure
    cpds: list
    class_names: list
    alpha: float = DEFAULT_ALPHA
    map_variant: str = "literal"
    order_strategy: str = "given"
    warnings: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.structure.n_nodes

    @property
    def n_bins(self) -> int:
        return self.discretizer.n_bins


def fit_vote_model(votes, class_names, n_bins: int = DEFAULT_N_BINS,
                   max_parents: int = DEFAULT_MAX_PARENTS,
                   alpha: float = DEFAULT_ALPHA, order=None,
                   order_strategy: str = "given", binning: str = "width",
                   map_variant: str = "literal") -> VoteModel:
    """Discretize vote vectors and learn the full network.

    Default node order is the class order of the vote matrix columns;
    ``order_strategy="entropy"`` reorders by descending marginal entropy.
    """
    votes = np.asarray(votes, dtype=float)
    if votes.ndim != 2 or votes.shape[1] != len(class_names):
        raise InvalidArgument("votes must be (n, k) with k = len(class_names)")
    if len(votes) == 0:
        raise InvalidArgument("cannot fit a vote model on zero vote vectors")
    if binning == "width":
        disc = equal_width_discretizer(n_bins)
    elif binning == "quantile":
        disc = quantile_discretizer(votes, n_bins)
    else:
        raise InvalidArgument(f"unknown binning {binning!r}")
    D = disc(votes)
    if order_strategy == "entropy":
        order = entropy_order(D, disc.n_bins)
    elif order_strategy != "given":
        raise InvalidArgument(f"unknown order_strategy {order_strategy!r}")
    structure = learn_structure(D, order=order, max_parents=max_parents,
                                alpha=alpha, n_bins=disc.n_bins)
    cpds = fit_cpds(structure, D, alpha=alpha, n_bins=disc.n_bins,
                    map_variant=map_variant)
    return VoteModel(discretizer=disc, structure=structure, cpds=cpds,
                     class_names=list(class_names), alpha=alpha,
                     map_variant=map_variant, order_strategy=order_strategy)


def joint_log_probability_matrix(model: VoteModel, votes) -> np.ndarray:
    """ln P(v) for each row of a vote matrix (computed fully in log space)."""
    votes = np.asarray(votes, dtype=float)
    if votes.ndim == 1:
        votes = votes[None, :]
    if votes.shape[1] != model.n_classes:
        raise InvalidArgument(
            f"expected {model.n_classes} vote columns, got {votes.shape[1]}")
    D = model.discretizer(votes)
    logp = np.zeros(len(votes))
    with np.errstate(divide="ignore"):
        for cpd in model.cpds:
            codes = _parent_codes(D, cpd.parents, model.n_bins)
            logp += np.log(cpd.table[codes, D[:, cpd.node]])
    return logp


def joint_probability(model: VoteModel, v) -> float:
    """P(v) under the network; in (0, 1] for fitted models."""
    return float(np.exp(joint_log_probability_matrix(model, v)[0]))


def outlier_score(model: VoteModel, v) -> float:
    """1 − joint probability; higher = more anomalous vote pattern."""
    return 1.0 - joint_probability(model, v)


def outlier_scores(model: VoteModel, votes) -> np.ndarray:
    return 1.0 - np.exp(joint_log_probability_matrix(model, votes))


def save_vote_model(model: VoteModel, path) -> None:
    """Persist as deterministic JSON (sorted keys, full float precision)."""
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "vote_model",
        "class_names": model.class_names,
        "alpha": model.alpha,
        "map_variant": model.map_variant,
        "order_strategy": model.order_strategy,
        "edges": [float(e) for e in model.discretizer.edges],
        "order": [int(x) for x in model.structure.order],
        "max_parents": model.structure.max_parents,
        "parents": [[int(p) for p in ps] for ps in model.structure.parents],
        "cpd_tables": [[[float(c) for c in row] for row in cpd.table]
                       for cpd in model.cpds],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_vote_model(path) -> VoteModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedInput(f"cannot load vote model {path}: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION or doc.get("kind") != "vote_model":
        raise MalformedInput(f"unsupported vote model file {path}")
    structure = NetworkStructure(
        order=tuple(doc["order"]),
        parents=tuple(tuple(ps) for ps in doc["parents"]),
        max_parents=int(doc["max_parents"]),
    )
    cpds = [CpdTable(node=j, parents=structure.parents[j],
                     table=np.array(doc["cpd_tables"][j], dtype=float),
                     alpha=float(doc["alpha"]))
            for j in range(structure.n_nodes)]
    return VoteModel(
        discretizer=Discretizer(np.array(doc["edges"], dtype=float)),
        structure=structure,
        cpds=cpds,
        class_names=list(doc["class_names"]),
        alpha=float(doc["alpha"]),
        map_variant=doc.get("map_variant", "literal"),
        order_strategy=doc.get("order_strategy", "given"),
    )
