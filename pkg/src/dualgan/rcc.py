"""Robust continuous clustering on a mutual k-nearest-neighbour graph.

Each point ``x_i`` gets a representative ``u_i``. The objective

    0.5 * sum_i ||x_i - u_i||^2 + lam/2 * sum_(p,q) w_pq * rho(||u_p - u_q||)

with the Geman-McClure penalty ``rho(y) = mu*y^2 / (mu + y^2)`` is minimised by
alternating closed-form line-process updates with an exact quadratic solve in
``U``, while ``mu`` is annealed downward (graduated nonconvexity). Clusters are
the connected components of graph edges whose representatives end up closer
than ``delta``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg

from .errors import ConfigurationError, DegenerateInputError, NumericError

log = logging.getLogger(__name__)

_KNN_CHUNK = 512


@dataclass
class KnnGraph:
    edges: np.ndarray  # (E, 2) int, p < q, sorted lexicographically
    node_count: int

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.node_count)


@dataclass
class RccConfig:
    graph_k: int = 10
    lam: float | None = None
    delta: float | None = None
    mu_init_factor: float = 3.0
    mu_decay: float = 0.5
    mu_update_period: int = 4
    max_outer_iters: int = 100
    convergence_tol: float = 1e-6
    cg_tol: float = 1e-8
    cg_maxiter: int = 500
    min_cluster_size: int = 5

    def __post_init__(self):
        if self.graph_k < 1:
            raise ConfigurationError("graph_k must be >= 1")
        if not 0.0 < self.mu_decay < 1.0:
            raise ConfigurationError("mu_decay must lie in (0, 1)")
        if self.max_outer_iters < 1:
            raise ConfigurationError("max_outer_iters must be >= 1")
        if self.mu_update_period < 1:
            raise ConfigurationError("mu_update_period must be >= 1")
        if self.lam is not None and self.lam <= 0:
            raise ConfigurationError("lam must be positive")
        if self.delta is not None and self.delta < 0:
            raise ConfigurationError("delta must be non-negative")
        if self.min_cluster_size < 1:
            raise ConfigurationError("min_cluster_size must be >= 1")


@dataclass
class Clustering:
    representatives: np.ndarray
    labels: np.ndarray
    cluster_count: int
    objective_trace: list[float] = field(default_factory=list)
    delta: float | None = None
    lam: float | None = None

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.labels == j)


def _neighbour_order(X: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other points per row; distance ties go to the lower index."""
    n = len(X)
    sq = np.einsum("ij,ij->i", X, X)
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, _KNN_CHUNK):
        stop = min(n, start + _KNN_CHUNK)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * X[start:stop] @ X.T
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def mutual_knn_graph(X, graph_k: int) -> KnnGraph:
    """Edge (p, q) iff each endpoint is among the other's ``graph_k`` nearest neighbours."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n < 2:
        raise DegenerateInputError("mutual kNN graph needs at least 2 points")
    if graph_k < 1:
        raise ConfigurationError("graph_k must be >= 1")
    k = min(graph_k, n - 1)
    nbrs = _neighbour_order(X, k)
    rows = np.repeat(np.arange(n), k)
    directed = sp.csr_matrix((np.ones(n * k, dtype=np.int8), (rows, nbrs.ravel())), shape=(n, n))
    mutual = directed.multiply(directed.T).tocoo()
    keep = mutual.row < mutual.col
    edges = np.column_stack([mutual.row[keep], mutual.col[keep]]).astype(np.int64)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))] if len(edges) else edges.reshape(0, 2)
    return KnnGraph(edges, n)


def edge_weights(graph: KnnGraph) -> np.ndarray:
    """``w_pq = n / (|E| * sqrt(deg_p * deg_q))``."""
    if graph.edge_count == 0:
        return np.zeros(0)
    deg = graph.degrees().astype(np.float64)
    p, q = graph.edges[:, 0], graph.edges[:, 1]
    return graph.node_count / (graph.edge_count * np.sqrt(deg[p] * deg[q]))


def auto_lambda(X: np.ndarray, graph: KnnGraph, weights: np.ndarray) -> float:
    if graph.edge_count == 0:
        return 1.0
    diff = X[graph.edges[:, 0]] - X[graph.edges[:, 1]]
    pair = float(np.sum(weights * np.einsum("ij,ij->i", diff, diff))) / graph.edge_count
    data = float(np.einsum("ij,ij->", X, X)) / len(X)
    if pair <= 0.0 or data <= 0.0:
        return 1.0
    return data / pair


def _edge_lengths(U: np.ndarray, edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros(0)
    return np.linalg.norm(U[edges[:, 0]] - U[edges[:, 1]], axis=1)


def geman_mcclure(y: np.ndarray, mu: float) -> np.ndarray:
    y2 = y * y
    return mu * y2 / (mu + y2)


def rcc_objective(X, U, graph: KnnGraph, weights, lam: float, mu: float) -> float:
    data = 0.5 * float(np.sum((X - U) ** 2))
    if graph.edge_count == 0:
        return data
    return data + 0.5 * lam * float(np.sum(weights * geman_mcclure(_edge_lengths(U, graph.edges), mu)))


def _floor_delta(lengths: np.ndarray) -> float:
    positive = np.sort(lengths[lengths > 0])
    if positive.size == 0:
        return 0.0
    take = max(1, int(np.ceil(0.01 * positive.size)))
    return float(positive[:take].mean())


def _solve_u_step(X, U, graph, edge_w, lam, config):
    n = len(X)
    p, q = graph.edges[:, 0], graph.edges[:, 1]
    w = lam * edge_w
    adj = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([p, q]), np.concatenate([q, p]))),
                        shape=(n, n)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    A = (sp.diags(1.0 + deg) - adj).tocsr()
    inv_diag = 1.0 / (1.0 + deg)
    precond = LinearOperator((n, n), matvec=lambda v: inv_diag * v.ravel(), dtype=np.float64)
    out = np.empty_like(U)
    for j in range(X.shape[1]):
        sol, _ = cg(A, X[:, j], x0=U[:, j].copy(), rtol=config.cg_tol, atol=0.0,
                    maxiter=config.cg_maxiter, M=precond)
        out[:, j] = sol
    return out


def optimize_representatives(X, graph: KnnGraph, config: RccConfig | None = None,
                             weights=None) -> tuple[np.ndarray, list[float]]:
    """Minimise the robust objective over representatives starting from ``U = X``.

    Returns the optimised representatives and the objective value after every
    outer iteration (evaluated at that iteration's ``mu``).
    """
    config = config or RccConfig()
    X = np.asarray(X, dtype=np.float64)
    U = X.copy()
    if graph.node_count != len(X):
        raise ConfigurationError("graph node count does not match data")
    if graph.edge_count == 0:
        return U, [0.0]
    w = edge_weights(graph) if weights is None else np.asarray(weights, dtype=np.float64)
    lam = config.lam if config.lam is not None else auto_lambda(X, graph, w)
    lengths = _edge_lengths(X, graph.edges)
    max_len = float(lengths.max())
    if max_len == 0.0:
        return U, [0.0]
    mu = config.mu_init_factor * max_len ** 2
    floor_delta = config.delta if config.delta is not None else _floor_delta(lengths)
    mu_floor = max(floor_delta ** 2 / 2.0, 1e-12 * max_len ** 2)

    trace: list[float] = []
    prev = rcc_objective(X, U, graph, w, lam, mu)
    for it in range(config.max_outer_iters):
        y2 = _edge_lengths(U, graph.edges) ** 2
        line = (mu / (mu + y2)) ** 2
        U = _solve_u_step(X, U, graph, w * line, lam, config)
        obj = rcc_objective(X, U, graph, w, lam, mu)
        if not np.isfinite(obj):
            raise NumericError(f"RCC objective became non-finite at iteration {it}")
        trace.append(obj)
        at_floor = mu <= mu_floor
        if at_floor and abs(prev - obj) <= config.convergence_tol * max(abs(prev), 1e-300):
            break
        prev = obj
        if (it + 1) % config.mu_update_period == 0 and not at_floor:
            mu = max(mu * config.mu_decay, mu_floor)
            prev = rcc_objective(X, U, graph, w, lam, mu)
    return U, trace


def _first_seen(labels: np.ndarray) -> np.ndarray:
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first, kind="stable"), kind="stable")
    return order[inverse].astype(np.int64)


def extract_clusters(U, graph: KnnGraph, delta: float) -> Clustering:
    """Connected components of graph edges with ``||u_p - u_q|| < delta``."""
    U = np.asarray(U, dtype=np.float64)
    n = graph.node_count
    if graph.edge_count:
        keep = _edge_lengths(U, graph.edges) < delta
        e = graph.edges[keep]
    else:
        e = np.zeros((0, 2), dtype=np.int64)
    adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    k, labels = connected_components(adj, directed=False)
    labels = _first_seen(labels)
    return Clustering(U, labels, int(k), delta=float(delta))


def auto_delta(X: np.ndarray, graph: KnnGraph) -> float:
    """Mean length of the shortest 1% (at least one) of the non-zero input-space edges."""
    if graph.edge_count == 0:
        return 0.0
    return _floor_delta(_edge_lengths(X, graph.edges))


def merge_small_clusters(X, labels, min_size: int) -> np.ndarray:
    """Fold clusters smaller than ``min_size`` into the cluster with the nearest centroid.

    Small clusters are absorbed one at a time, smallest first, into the nearest
    cluster that is still a merge target. If no cluster reaches ``min_size`` the
    largest one absorbs the rest.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels).copy()
    if min_size <= 1:
        return _first_seen(labels)
    while True:
        ids, counts = np.unique(labels, return_counts=True)
        if len(ids) <= 1:
            break
        small = ids[counts < min_size]
        if small.size == 0:
            break
        # smallest first, lower id on ties
        victim = small[np.lexsort((small, counts[counts < min_size]))][0]
        centroids = {c: X[labels == c].mean(axis=0) for c in ids}
        others = [c for c in ids if c != victim]
        vc = centroids[victim]
        target = min(others, key=lambda c: (float(np.sum((centroids[c] - vc) ** 2)), c))
        labels[labels == victim] = target
    return _first_seen(labels)


def cluster(X, config: RccConfig | None = None) -> Clustering:
    """Mutual-kNN graph, representative optimisation, then thresholded components."""
    config = config or RccConfig()
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise DegenerateInputError("cannot cluster an empty set")
    if n == 1:
        return Clustering(X.copy(), np.zeros(1, dtype=np.int64), 1, [0.0], 0.0, None)
    graph = mutual_knn_graph(X, config.graph_k)
    w = edge_weights(graph)
    lam = config.lam if config.lam is not None else auto_lambda(X, graph, w)
    run_cfg = RccConfig(**{**config.__dict__, "lam": lam})
    U, trace = optimize_representatives(X, graph, run_cfg, w)
    delta = config.delta if config.delta is not None else auto_delta(X, graph)
    result = extract_clusters(U, graph, delta)
    if config.min_cluster_size > 1:
        result.labels = merge_small_clusters(X, result.labels, config.min_cluster_size)
        result.cluster_count = int(result.labels.max()) + 1
    result.objective_trace = trace
    result.lam = lam
    log.debug("rcc n=%d edges=%d lam=%.4g delta=%.4g k=%d", n, graph.edge_count, lam, delta,
              result.cluster_count)
    return result
