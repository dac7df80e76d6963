"""Chow-Liu tree learning and closed-form tree parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuits import CircuitStructure, clamp_probs

DEFAULT_ALPHA = 0.1


@dataclass(frozen=True)
class PairwiseCounts:
    """Smoothed joint counts ``table[u, v, a, b] = alpha + #{x_u = a, x_v = b}``."""

    table: np.ndarray
    total: int
    alpha: float


def pairwise_counts(data, alpha: float = DEFAULT_ALPHA) -> PairwiseCounts:
    X = np.asarray(getattr(data, "rows", data), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("pairwise counts need at least one row")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    Xc = 1.0 - X
    table = np.empty((X.shape[1], X.shape[1], 2, 2))
    table[:, :, 0, 0] = Xc.T @ Xc
    table[:, :, 0, 1] = Xc.T @ X
    table[:, :, 1, 0] = X.T @ Xc
    table[:, :, 1, 1] = X.T @ X
    return PairwiseCounts(table + alpha, X.shape[0], float(alpha))


def mutual_information(counts: PairwiseCounts) -> np.ndarray:
    """Pairwise mutual information in nats, with a zero diagonal."""
    n = counts.table
    q = n / n.sum(axis=(2, 3), keepdims=True)
    qa = q.sum(axis=3, keepdims=True)
    qb = q.sum(axis=2, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(q / (qa * qb)), 0.0)
    mi = terms.sum(axis=(2, 3))
    mi = 0.5 * (mi + mi.T)
    np.fill_diagonal(mi, 0.0)
    return np.maximum(mi, 0.0)


def max_spanning_tree(mi: np.ndarray, root: int = 0) -> CircuitStructure:
    """Kruskal on ``-MI``; ties broken by ``(min(u, v), max(u, v))``; edges directed away from ``root``."""
    mi = np.asarray(mi, dtype=np.float64)
    D = mi.shape[0]
    if not 0 <= root < D:
        raise ValueError(f"root {root} out of range for {D} variables")
    edges = sorted(((-mi[u, v], u, v) for u in range(D) for v in range(u + 1, D)))
    leader = list(range(D))

    def find(a):
        while leader[a] != a:
            leader[a] = leader[leader[a]]
            a = leader[a]
        return a

    nbrs = [[] for _ in range(D)]
    taken = 0
    for _, u, v in edges:
        ru, rv = find(u), find(v)
        if ru == rv:
            continue
        leader[ru] = rv
        nbrs[u].append(v)
        nbrs[v].append(u)
        taken += 1
        if taken == D - 1:
            break
    parent = [-1] * D
    seen = {root}
    stack = [root]
    while stack:
        a = stack.pop()
        for b in nbrs[a]:
            if b not in seen:
                seen.add(b)
                parent[b] = a
                stack.append(b)
    return CircuitStructure.clt([None if p == -1 else p for p in parent])


def learn_structure(data, alpha: float = DEFAULT_ALPHA, root: int = 0) -> CircuitStructure:
    return max_spanning_tree(mutual_information(pairwise_counts(data, alpha)), root=root)


def fit_clt_closed_form(data, structure: CircuitStructure, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Smoothed conditional frequencies laid out as ``[p_{v|0}, p_{v|1}]`` per variable.

    The root's second slot mirrors the first.
    """
    if structure.kind != "clt":
        raise ValueError("closed-form CLT fit needs a CLT structure")
    counts = pairwise_counts(data, alpha)
    if counts.table.shape[0] != structure.num_vars:
        raise ValueError(f"data has {counts.table.shape[0]} variables, structure has {structure.num_vars}")
    n = counts.table
    D = structure.num_vars
    params = np.empty(2 * D)
    for v, p in enumerate(structure.parent):
        if p == -1:
            c0, c1 = n[v, v, 0, 0], n[v, v, 1, 1]
            params[2 * v] = params[2 * v + 1] = _ratio(c1, c0 + c1)
        else:
            for b in (0, 1):
                params[2 * v + b] = _ratio(n[v, p, 1, b], n[v, p, 0, b] + n[v, p, 1, b])
    return clamp_probs(params)


def fit_independent(data, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Smoothed marginals, using the same per-cell smoothing as the pairwise counts."""
    n = pairwise_counts(data, alpha).table
    idx = np.arange(n.shape[0])
    c0, c1 = n[idx, idx, 0, 0], n[idx, idx, 1, 1]
    return clamp_probs(np.where(c0 + c1 > 0, c1 / np.where(c0 + c1 > 0, c0 + c1, 1.0), 0.5))


def _ratio(num, den):
    # an unseen parent state carries no information
    return num / den if den > 0 else 0.5
