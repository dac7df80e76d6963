"""Factorised and Chow-Liu-tree circuits and finite mixtures of them.

A compiled PC is a single sum node over ``N`` components that share one
structure.  Component parameters are Bernoulli probabilities:

* factorised: ``params[i, v] = P(x_v = 1)``
* CLT: ``params[i, 2v + b] = P(x_v = 1 | x_parent(v) = b)``; the root only
  uses slot ``2v``.

All queries accept a single row or a 2-D batch of rows.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logsumexp

EPS_P = 1e-7
KINDS = ("factorised", "clt")
FORMAT_VERSION = 1
BRUTE_FORCE_MAX_VARS = 20

# rows x components evaluated per chunk
_CHUNK_ENTRIES = 1 << 22


class CircuitError(ValueError):
    """Invalid structure, parameters or compiled-PC file."""


def clamp_probs(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS_P, 1.0 - EPS_P)


@dataclass(frozen=True)
class CircuitStructure:
    kind: str
    num_vars: int
    parent: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CircuitError(f"unknown structure kind {self.kind!r}")
        if self.num_vars < 1:
            raise CircuitError("num_vars must be >= 1")
        if self.kind == "factorised":
            object.__setattr__(self, "parent", None)
            return
        if self.parent is None or len(self.parent) != self.num_vars:
            raise CircuitError("CLT structure needs one parent entry per variable")
        parent = tuple(-1 if p is None else int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        roots = [v for v, p in enumerate(parent) if p == -1]
        if len(roots) != 1:
            raise CircuitError(f"CLT must have exactly one root, found {len(roots)}")
        if any(not (0 <= p < self.num_vars) or p == v for v, p in enumerate(parent) if p != -1):
            raise CircuitError("parent index out of range")
        if len(self.order) != self.num_vars:
            raise CircuitError("parent links do not form a single tree")

    @classmethod
    def factorised(cls, num_vars: int) -> "CircuitStructure":
        return cls("factorised", num_vars)

    @classmethod
    def clt(cls, parent) -> "CircuitStructure":
        return cls("clt", len(parent), tuple(parent))

    @property
    def param_width(self) -> int:
        return self.num_vars if self.kind == "factorised" else 2 * self.num_vars

    @cached_property
    def root(self) -> int:
        return self.parent.index(-1) if self.kind == "clt" else 0

    @cached_property
    def children(self) -> tuple:
        kids = [[] for _ in range(self.num_vars)]
        if self.kind == "clt":
            for v, p in enumerate(self.parent):
                if p != -1:
                    kids[p].append(v)
        return tuple(tuple(k) for k in kids)

    @cached_property
    def order(self) -> tuple:
        """Topological (parents first) order; incomplete if the links contain a cycle."""
        if self.kind == "factorised":
            return tuple(range(self.num_vars))
        out = [self.root]
        i = 0
        while i < len(out):
            out.extend(self.children[out[i]])
            i += 1
            if len(out) > self.num_vars:
                break
        return tuple(out)

    @cached_property
    def parent_array(self) -> np.ndarray:
        if self.kind == "factorised":
            return np.full(self.num_vars, -1)
        return np.array(self.parent)

    def edges(self) -> set:
        """Undirected edge set as ``(min, max)`` pairs."""
        if self.kind == "factorised":
            return set()
        return {(min(v, p), max(v, p)) for v, p in enumerate(self.parent) if p != -1}

    def to_json(self) -> dict:
        out = {"kind": self.kind, "num_vars": self.num_vars}
        if self.kind == "clt":
            out["parent"] = [None if p == -1 else p for p in self.parent]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CircuitStructure":
        try:
            kind, num_vars = obj["kind"], int(obj["num_vars"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CircuitError(f"malformed structure: {exc}") from exc
        if kind == "clt":
            if "parent" not in obj:
                raise CircuitError("CLT structure without parent list")
            return cls(kind, num_vars, tuple(obj["parent"]))
        return cls(kind, num_vars)


@dataclass(frozen=True)
class CompiledPC:
    structure: CircuitStructure
    weights: np.ndarray
    params: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        p = np.asarray(self.params, dtype=np.float64)
        if p.ndim == 1:
            p = p[None, :]
        if p.shape != (w.shape[0], self.structure.param_width):
            raise CircuitError(
                f"params shape {p.shape} does not match {w.shape[0]} components of width "
                f"{self.structure.param_width}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise CircuitError("mixture weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise CircuitError(f"mixture weights sum to {w.sum()!r}, not 1")
        if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise CircuitError("leaf probabilities must lie in [0, 1]")
        p = clamp_probs(p)
        w.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "params", p)

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def num_vars(self) -> int:
        return self.structure.num_vars

    @cached_property
    def _active(self):
        # zero-weight components are kept in the artifact but never evaluated
        idx = np.flatnonzero(self.weights > 0)
        return idx, np.log(self.weights[idx]), self.params[idx]


def single_component(structure: CircuitStructure, params) -> CompiledPC:
    return CompiledPC(structure, np.ones(1), np.asarray(params, dtype=np.float64)[None, :])


# ---------------------------------------------------------------------------
# dense evaluation


def _as_rows(x, num_vars):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != num_vars:
        raise CircuitError(f"rows have {x.shape[1]} entries, expected {num_vars}")
    return x, single


def _as_mask(observed, shape):
    m = np.atleast_2d(np.asarray(observed, dtype=bool))
    if m.shape[-1] != shape[-1] or m.shape[0] not in (1, shape[0]) or m.ndim != 2:
        raise CircuitError(f"mask shape {m.shape} does not match rows {shape}")
    return np.broadcast_to(m, shape)


def leaf_indicators(structure: CircuitStructure, X: np.ndarray, observed=None):
    """Split rows into (ones, zeros) indicator matrices over parameter slots.

    The component log-density is then ``ones @ log(P).T + zeros @ log(1-P).T``.
    Masks are only supported for factorised structures; CLT marginals need
    the tree pass.
    """
    if structure.kind == "factorised":
        ones, zeros = X, 1.0 - X
        if observed is not None:
            ones, zeros = ones * observed, zeros * observed
        return ones, zeros
    if observed is not None:
        raise CircuitError("indicator form of a CLT requires fully observed rows")
    B, D = X.shape
    pa = structure.parent_array
    xpa = np.where(pa >= 0, X[:, np.maximum(pa, 0)], 0.0)
    ones = np.zeros((B, 2 * D))
    zeros = np.zeros((B, 2 * D))
    slot = 2 * np.arange(D)[None, :] + xpa.astype(np.intp)
    rows = np.arange(B)[:, None]
    ones[rows, slot] = X
    zeros[rows, slot] = 1.0 - X
    return ones, zeros


def component_log_matrix(structure: CircuitStructure, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``(B, N)`` matrix of component log-densities for fully observed rows."""
    P = clamp_probs(params)
    ones, zeros = leaf_indicators(structure, X)
    return ones @ np.log(P).T + zeros @ np.log1p(-P).T


def component_log_density(structure: CircuitStructure, params, x):
    """Log-density of one component with leaf probabilities ``params``."""
    X, single = _as_rows(x, structure.num_vars)
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (structure.param_width,):
        raise CircuitError(f"expected {structure.param_width} parameters, got shape {params.shape}")
    out = component_log_matrix(structure, params[None, :], X)[:, 0]
    return out[0] if single else out


def _chunks(B, N):
    step = max(1, _CHUNK_ENTRIES // max(N, 1))
    for s in range(0, B, step):
        yield slice(s, min(B, s + step))


def mixture_log_density(pc: CompiledPC, x):
    """``log sum_i w_i p_i(x)`` by a max-shifted log-sum-exp."""
    X, single = _as_rows(x, pc.num_vars)
    _, logw, P = pc._active
    out = np.empty(X.shape[0])
    for sl in _chunks(X.shape[0], len(logw)):
        out[sl] = logsumexp(component_log_matrix(pc.structure, P, X[sl]) + logw, axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# tree passes over (possibly broadcast) batches


def _evidence(X, M, v, a):
    """Log-indicator of value ``a`` for variable ``v`` (0 where unobserved)."""
    return np.where(M[..., v] & (X[..., v] != a), -np.inf, 0.0)


def clt_upward(structure, logp1, logp0, X, M, maximise=False):
    """Bottom-up pass of a CLT with evidence.

    ``logp1[..., v, b]`` / ``logp0[..., v, b]`` hold ``log P(x_v = 1|b)`` and
    ``log P(x_v = 0|b)``; they broadcast against ``X[..., v]``. Returns the
    root value and the per-node state needed by downward/backward passes:
    ``u[v][a]`` (evidence plus incoming messages for ``x_v = a``).
    """
    op = np.maximum if maximise else np.logaddexp
    D = structure.num_vars
    incoming = [[0.0, 0.0] for _ in range(D)]
    u = [None] * D
    msg = [None] * D
    for v in reversed(structure.order):
        u[v] = (_evidence(X, M, v, 0) + incoming[v][0], _evidence(X, M, v, 1) + incoming[v][1])
        p = structure.parent[v]
        if p == -1:
            continue
        # message to parent for each parent value b
        msg[v] = tuple(op(logp0[..., v, b] + u[v][0], logp1[..., v, b] + u[v][1]) for b in (0, 1))
        incoming[p][0] = incoming[p][0] + msg[v][0]
        incoming[p][1] = incoming[p][1] + msg[v][1]
    r = structure.root
    root = op(logp0[..., r, 0] + u[r][0], logp1[..., r, 0] + u[r][1])
    return root, u, msg


def clt_marginal_backward(structure, logp1, logp0, u, msg, root, upstream):
    """Gradients of ``sum(upstream * root)`` w.r.t. ``logp1`` and ``logp0``.

    Summed over every axis of the broadcast batch that is absent from the
    parameter arrays (rows), keeping the parameter shape.
    """
    g1 = np.zeros(np.shape(logp1))
    g0 = np.zeros(np.shape(logp0))
    pshape = np.shape(logp1)[:-2]

    def reduce(a):
        a = np.asarray(a)
        extra = a.ndim - len(pshape)
        a = a.sum(axis=tuple(range(extra))) if extra > 0 else a
        for ax, n in enumerate(pshape):
            if n == 1 and a.shape[ax] != 1:
                a = a.sum(axis=ax, keepdims=True)
        return a

    D = structure.num_vars
    du = [[0.0, 0.0] for _ in range(D)]
    r = structure.root
    s1 = np.exp(logp1[..., r, 0] + u[r][1] - root)
    s0 = np.exp(logp0[..., r, 0] + u[r][0] - root)
    g1[..., r, 0] += reduce(upstream * s1)
    g0[..., r, 0] += reduce(upstream * s0)
    du[r] = [upstream * s0, upstream * s1]
    for v in structure.order:
        p = structure.parent[v]
        if p == -1:
            continue
        for b in (0, 1):
            dm = du[p][b]
            t1 = np.exp(logp1[..., v, b] + u[v][1] - msg[v][b])
            t0 = np.exp(logp0[..., v, b] + u[v][0] - msg[v][b])
            g1[..., v, b] += reduce(dm * t1)
            g0[..., v, b] += reduce(dm * t0)
            du[v][0] = du[v][0] + dm * t0
            du[v][1] = du[v][1] + dm * t1
    return g1, g0


def clt_log_tables(params):
    """Split CLT params ``(..., 2D)`` into ``(..., D, 2)`` log tables for x=1 and x=0."""
    P = clamp_probs(params)
    P = P.reshape(P.shape[:-1] + (-1, 2))
    return np.log(P), np.log1p(-P)


def component_marginal_matrix(structure, params, X, M) -> np.ndarray:
    """``(B, N)`` matrix of component log-marginals of the observed entries."""
    if structure.kind == "factorised":
        P = clamp_probs(params)
        ones, zeros = leaf_indicators(structure, X, M)
        return ones @ np.log(P).T + zeros @ np.log1p(-P).T
    lp1, lp0 = clt_log_tables(params)
    root, _, _ = clt_upward(structure, lp1[None], lp0[None], X[:, None, :], M[:, None, :])
    return np.broadcast_to(root, (X.shape[0], params.shape[0]))


def marginal_log_density(pc: CompiledPC, x, observed):
    """Exact ``log p(x_o)``; unobserved entries of ``x`` are ignored."""
    X, single = _as_rows(x, pc.num_vars)
    M = _as_mask(observed, X.shape)
    X = np.where(M, X, 0.0)
    _, logw, P = pc._active
    out = np.empty(X.shape[0])
    for sl in _chunks(X.shape[0], len(logw)):
        out[sl] = logsumexp(component_marginal_matrix(pc.structure, P, X[sl], M[sl]) + logw, axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# MPE and sampling


def _clt_mpe(structure, params, X, M):
    """Per-row max-product completion; ``params`` is ``(B, 2D)``."""
    lp1, lp0 = clt_log_tables(params)
    _, u, _ = clt_upward(structure, lp1, lp0, X, M, maximise=True)
    out = X.copy()
    rows = np.arange(X.shape[0])
    for v in structure.order:
        p = structure.parent[v]
        b = np.zeros(X.shape[0], dtype=np.intp) if p == -1 else out[:, p].astype(np.intp)
        score1 = lp1[rows, v, b] + u[v][1]
        score0 = lp0[rows, v, b] + u[v][0]
        out[:, v] = (score1 > score0).astype(np.float64)
    return out


def mpe_complete(pc: CompiledPC, x, observed):
    """Approximate mixture MPE: best component by weighted marginal, then exact MPE in it.

    Returns ``(completed_rows, component_indices)``; observed entries are
    returned unchanged.
    """
    X, single = _as_rows(x, pc.num_vars)
    M = _as_mask(observed, X.shape)
    Xo = np.where(M, X, 0.0)
    active, logw, P = pc._active
    best = np.empty(X.shape[0], dtype=np.intp)
    for sl in _chunks(X.shape[0], len(logw)):
        scores = component_marginal_matrix(pc.structure, P, Xo[sl], M[sl]) + logw
        best[sl] = np.argmax(scores, axis=1)
    chosen = P[best]
    if pc.structure.kind == "factorised":
        filled = np.where(M, Xo, (chosen > 0.5).astype(np.float64))
    else:
        filled = _clt_mpe(pc.structure, chosen, Xo, M)
        filled = np.where(M, Xo, filled)
    filled = filled.astype(np.uint8)
    idx = active[best]
    return (filled[0], int(idx[0])) if single else (filled, idx)


def sample(pc: CompiledPC, count: int, seed: int):
    """Ancestral samples: component from the weights, then leaves top-down."""
    from .data import BinaryDataset, rng_for

    if count < 1:
        raise ValueError("count must be >= 1")
    rng = rng_for(seed)
    comp = rng.choice(pc.num_components, size=count, p=pc.weights)
    P = pc.params[comp]
    U = rng.random((count, pc.num_vars))
    X = np.zeros((count, pc.num_vars), dtype=np.uint8)
    s = pc.structure
    for v in s.order:
        if s.kind == "factorised":
            q = P[:, v]
        else:
            p = s.parent[v]
            b = 0 if p == -1 else X[:, p].astype(np.intp)
            q = P[np.arange(count), 2 * v + b]
        X[:, v] = U[:, v] < q
    return BinaryDataset(X, split_tag="train")


# ---------------------------------------------------------------------------
# brute-force oracle (linear domain, enumeration)


def _check_enumerable(num_vars):
    if num_vars > BRUTE_FORCE_MAX_VARS:
        raise CircuitError(f"brute force limited to {BRUTE_FORCE_MAX_VARS} variables, got {num_vars}")


def _linear_component_probs(structure, params, states):
    """Probabilities of each state under each component: ``(S, N)``; plain products."""
    S = states.shape[0]
    out = np.ones((S, params.shape[0]))
    for v in range(structure.num_vars):
        if structure.kind == "factorised":
            q = params[None, :, v]
        else:
            p = structure.parent[v]
            b = np.zeros(S, dtype=np.intp) if p == -1 else states[:, p].astype(np.intp)
            q = params[:, 2 * v + b].T
        xv = states[:, v:v + 1]
        out *= np.where(xv == 1, q, 1.0 - q)
    return out


def brute_force_log_density(pc: CompiledPC, x):
    x = np.asarray(x, dtype=np.float64)
    _check_enumerable(pc.num_vars)
    probs = _linear_component_probs(pc.structure, pc.params, np.atleast_2d(x))
    dens = probs @ pc.weights
    return math.log(dens[0]) if x.ndim == 1 else np.log(dens)


def brute_force_marginal(pc: CompiledPC, x, observed) -> float:
    """``log sum`` over all completions of the unobserved entries of one row."""
    _check_enumerable(pc.num_vars)
    x = np.asarray(x, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    free = np.flatnonzero(~observed)
    completions = np.array(list(itertools.product((0.0, 1.0), repeat=len(free))), dtype=np.float64)
    completions = completions.reshape(2 ** len(free), len(free))
    states = np.repeat(x[None, :], completions.shape[0], axis=0)
    states[:, free] = completions
    total = 0.0
    for s in _linear_component_probs(pc.structure, pc.params, states):
        total += float(s @ pc.weights)
    return math.log(total)


def all_states(num_vars: int) -> np.ndarray:
    _check_enumerable(num_vars)
    return np.array(list(itertools.product((0.0, 1.0), repeat=num_vars)))


def brute_force_total_mass(pc: CompiledPC) -> float:
    states = all_states(pc.num_vars)
    return float((_linear_component_probs(pc.structure, pc.params, states) @ pc.weights).sum())


# ---------------------------------------------------------------------------
# serialisation


def pc_to_json(pc: CompiledPC) -> dict:
    return {
        "version": FORMAT_VERSION,
        "structure": pc.structure.to_json(),
        "components": [
            {"weight": float(w), "params": [float(v) for v in p]}
            for w, p in zip(pc.weights, pc.params)
        ],
        "metadata": pc.metadata,
    }


def pc_from_json(obj: dict) -> CompiledPC:
    if not isinstance(obj, dict):
        raise CircuitError("compiled PC must be a JSON object")
    if obj.get("version") != FORMAT_VERSION:
        raise CircuitError(f"unsupported compiled-PC version {obj.get('version')!r}")
    try:
        structure = CircuitStructure.from_json(obj["structure"])
        comps = obj["components"]
        weights = np.array([c["weight"] for c in comps], dtype=np.float64)
        params = np.array([c["params"] for c in comps], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CircuitError(f"malformed compiled PC: {exc}") from exc
    if len(comps) == 0:
        raise CircuitError("compiled PC has no components")
    return CompiledPC(structure, weights, params, dict(obj.get("metadata", {})))


def save_pc(pc: CompiledPC, path) -> None:
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(pc_to_json(pc), indent=1) + "\n", encoding="utf-8")


def load_pc(path) -> CompiledPC:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CircuitError(f"cannot read compiled PC {path}: {exc}") from exc
    return pc_from_json(obj)
