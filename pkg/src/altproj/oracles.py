"""Independent slow-path oracles used by tests and the self-check command.

Everything here trades speed for obviousness: exhaustive enumeration over
label paths and centered finite differences.  The fast paths are validated
against these, never the other way around.
"""
from __future__ import annotations

import itertools

import numpy as np

from .errors import StateSpaceError

ENUMERATION_GUARD = 1_000_000


def all_paths(length: int, n_labels: int) -> np.ndarray:
    """(M, L) array of every label path, in lexicographic order."""
    if n_labels ** length > ENUMERATION_GUARD:
        raise StateSpaceError(
            f"{n_labels}^{length} paths exceed the enumeration guard")
    return np.array(list(itertools.product(range(n_labels), repeat=length)),
                    dtype=np.int64)


def path_scores(node: np.ndarray, edge: np.ndarray, paths: np.ndarray,
                extra=None) -> np.ndarray:
    """Total log-score of each path under the given tables.

    ``extra`` optionally maps a path (1-d int array) to an additional
    log-score term (used for non-factored features).
    """
    L = node.shape[0]
    pos = np.arange(L)
    scores = node[pos, paths].sum(axis=1).astype(np.float64)
    if L > 1:
        scores += edge[np.arange(L - 1), paths[:, :-1], paths[:, 1:]].sum(axis=1)
    if extra is not None:
        scores += np.array([extra(p) for p in paths], dtype=np.float64)
    return scores


def enumerate_chain_scores(node: np.ndarray, edge: np.ndarray, extra=None):
    """Exact (node_marginals, edge_marginals, log_z) by enumeration."""
    L, K = node.shape
    paths = all_paths(L, K)
    scores = path_scores(node, edge, paths, extra=extra)
    mx = scores.max()
    w = np.exp(scores - mx)
    z = w.sum()
    log_z = float(mx + np.log(z))
    w /= z
    node_marg = np.zeros((L, K))
    for t in range(L):
        for k in range(K):
            node_marg[t, k] = w[paths[:, t] == k].sum()
    edge_marg = np.zeros((max(L - 1, 0), K, K))
    for t in range(L - 1):
        for a in range(K):
            sel = paths[:, t] == a
            for b in range(K):
                edge_marg[t, a, b] = w[sel & (paths[:, t + 1] == b)].sum()
    return node_marg, edge_marg, log_z


def enumerate_expectation(node: np.ndarray, edge: np.ndarray, value_fn,
                          extra=None) -> float:
    """E[value_fn(path)] under the distribution induced by the tables."""
    L, K = node.shape
    paths = all_paths(L, K)
    scores = path_scores(node, edge, paths, extra=extra)
    mx = scores.max()
    w = np.exp(scores - mx)
    w /= w.sum()
    vals = np.array([value_fn(p) for p in paths], dtype=np.float64)
    return float(w @ vals)


def finite_difference_gradient(fn, x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Centered finite-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        grad[i] = (fn(xp) - fn(xm)) / (2.0 * step)
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Scale-free gradient discrepancy: ||a - n|| / max(||n||, 1e-12)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denom
