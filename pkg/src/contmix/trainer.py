"""Training continuous mixtures by numerical integration, plus plain-mixture baselines.

The objective for a batch ``X`` and a rule ``(z_i, w_i)`` is

    LL = sum_j log sum_i w_i p(x_j | theta(z_i))

with ``theta`` the decoder.  Optimisation uses the per-row mean so the
learning rate does not depend on the batch size.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp

from .circuits import (EPS_P, CircuitStructure, CompiledPC, clt_log_tables, clt_marginal_backward,
                       clt_upward, component_marginal_matrix, leaf_indicators, mixture_log_density,
                       marginal_log_density)
from .data import make_batches, rng_for
from .decoder import Adam, Decoder, init_decoder
from .quadrature import IntegrationRule, make_rule

_CHUNK_ENTRIES = 1 << 22


# ---------------------------------------------------------------------------
# objective pieces


def _rows(data):
    rows = getattr(data, "rows", data)
    return np.atleast_2d(np.asarray(rows, dtype=np.float64))


def _observed(masks, shape):
    if masks is None:
        return None
    m = np.asarray(getattr(masks, "entries", masks), dtype=bool)
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match batch shape {shape}")
    return m


def leaf_probs(logits):
    """Logistic leaf probabilities, clamped; also returns where the clamp is inactive."""
    raw = expit(logits)
    live = (raw > EPS_P) & (raw < 1.0 - EPS_P)
    return np.clip(raw, EPS_P, 1.0 - EPS_P), live


def component_terms(structure: CircuitStructure, logits, X, observed=None):
    """Component log-(marginal-)densities ``(B, N)`` and a map from row weights to logit gradients.

    The returned function takes ``R`` of shape ``(B, N)`` and returns
    ``d/dlogits sum(R * C)``.
    """
    P, live = leaf_probs(logits)
    if structure.kind == "factorised" or observed is None:
        ones, zeros = leaf_indicators(structure, X, observed)
        C = ones @ np.log(P).T + zeros @ np.log1p(-P).T

        def grad(R):
            return (R.T @ ones - (R.T @ (ones + zeros)) * P) * live

        return C, grad

    # CLT with missing entries: sum-product over the tree
    lp1, lp0 = clt_log_tables(P)
    lp1, lp0 = lp1[None], lp0[None]
    Xb, Mb = X[:, None, :], observed[:, None, :]
    root, u, msg = clt_upward(structure, lp1, lp0, Xb, Mb)
    C = np.broadcast_to(root, (X.shape[0], P.shape[0]))

    def grad(R):
        g1, g0 = clt_marginal_backward(structure, lp1, lp0, u, msg, root, R)
        Q = P.reshape(P.shape[0], -1, 2)
        g = g1[0] * (1.0 - Q) - g0[0] * Q
        return g.reshape(P.shape) * live

    return C, grad


def _log_weights(rule):
    with np.errstate(divide="ignore"):
        return np.log(rule.weights)


def _check_dims(dec, structure, rule):
    if rule.dim != dec.latent_dim:
        raise ValueError(f"rule has dimension {rule.dim}, decoder expects {dec.latent_dim}")
    if structure.param_width != dec.output_dim:
        raise ValueError(f"decoder outputs {dec.output_dim} values, structure needs {structure.param_width}")


def _decoder_logits(dec, rule):
    # batch statistics over the rule's points, running stats untouched
    return dec.forward(rule.points, mode="train", track=False)[0]


def batch_log_likelihood(dec: Decoder, structure, rule: IntegrationRule, rows, observed=None):
    """Per-row ``log sum_i w_i p(x_j | theta(z_i))`` and their total."""
    _check_dims(dec, structure, rule)
    X = _rows(rows)
    M = _observed(observed, X.shape)
    C, _ = component_terms(structure, _decoder_logits(dec, rule), X, M)
    ll = logsumexp(C + _log_weights(rule), axis=1)
    return ll, float(ll.sum())


def _topk_mask(S, k):
    """Keep each row's ``k`` largest scores (ties go to the lower index); the rest become ``-inf``.

    Masking in place rather than gathering keeps the summation order of the
    full objective, so the top-K value can never round above it.
    """
    if k >= S.shape[1]:
        return S
    keep = np.zeros_like(S, dtype=bool)
    np.put_along_axis(keep, np.argsort(-S, axis=1, kind="stable")[:, :k], True, axis=1)
    return np.where(keep, S, -np.inf)


def topk_log_likelihood(dec: Decoder, structure, rule: IntegrationRule, rows, k: int):
    """Per-row ``log sum_{i in top-k} w_i p(x_j | theta(z_i))`` (weights not renormalised)."""
    _check_dims(dec, structure, rule)
    if not 1 <= k <= rule.n_points:
        raise ValueError(f"K must be in [1, {rule.n_points}], got {k}")
    X = _rows(rows)
    C, _ = component_terms(structure, _decoder_logits(dec, rule), X)
    return logsumexp(_topk_mask(C + _log_weights(rule), k), axis=1)


def masked_log_likelihood_objective(dec: Decoder, structure, rule: IntegrationRule, rows, masks):
    """Integration objective with every component replaced by its marginal over observed entries."""
    return batch_log_likelihood(dec, structure, rule, rows, observed=_observed(masks, _rows(rows).shape))[1]


def objective_and_grads(dec: Decoder, structure, rule: IntegrationRule, rows, observed=None,
                        top_k: Optional[int] = None, track: bool = True, need_latent: bool = False):
    """Mean per-row objective with gradients w.r.t. decoder parameters (and optionally points).

    With ``top_k`` the candidate set is chosen by a gradient-free pass and
    gradients only flow through the selected components.
    """
    _check_dims(dec, structure, rule)
    X = _rows(rows)
    M = _observed(observed, X.shape)
    logits, cache = dec.forward(rule.points, mode="train", track=track)
    C, grad_fn = component_terms(structure, logits, X, M)
    S = C + _log_weights(rule)
    if top_k is not None:
        S = _topk_mask(S, top_k)
    ll = logsumexp(S, axis=1)
    R = np.exp(S - ll[:, None]) / X.shape[0]
    dlogits = grad_fn(R)
    grads, dZ = dec.backward(cache, dlogits)
    return float(ll.mean()), grads, (dZ if need_latent else None)


def _chunked_ll(structure, P, logw, X, M):
    out = np.empty(X.shape[0])
    step = max(1, _CHUNK_ENTRIES // max(P.shape[0], 1))
    for s in range(0, X.shape[0], step):
        sl = slice(s, s + step)
        if M is None:
            ones, zeros = leaf_indicators(structure, X[sl])
            C = ones @ np.log(P).T + zeros @ np.log1p(-P).T
        else:
            C = component_marginal_matrix(structure, P, X[sl], M[sl])
        out[sl] = logsumexp(C + logw, axis=1)
    return out


def row_log_likelihoods(model, structure, rule, data, observed=None) -> np.ndarray:
    """Per-row LL of a decoder (under ``rule``) or of a :class:`CompiledPC` (rule ignored)."""
    X = _rows(data)
    M = _observed(observed, X.shape)
    if isinstance(model, CompiledPC):
        if M is None:
            return mixture_log_density(model, X)
        return marginal_log_density(model, X, M)
    _check_dims(model, structure, rule)
    P, _ = leaf_probs(_decoder_logits(model, rule))
    w = rule.weights > 0
    if M is not None:
        X = np.where(M, X, 0.0)
    return _chunked_ll(structure, P[w], np.log(rule.weights[w]), X, M)


def mean_log_likelihood(model, structure, rule, data, observed=None) -> float:
    return float(row_log_likelihoods(model, structure, rule, data, observed).mean())


# ---------------------------------------------------------------------------
# configuration and reports


@dataclass
class TrainConfig:
    n_points: int = 2 ** 10
    latent_dim: int = 4
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 15
    top_k: Optional[int] = None
    seed: int = 0
    method: str = "rqmc"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_norm: bool = True
    slope: float = 0.01
    hidden: Optional[list] = None
    eval_seed: int = 42
    valid_n_points: Optional[int] = None

    def __post_init__(self):
        if self.method not in ("mc", "rqmc"):
            raise ValueError(f"training method must be 'mc' or 'rqmc', got {self.method!r}")
        if self.n_points < 1 or self.latent_dim < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("n_points, latent_dim, batch_size must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.method == "rqmc" and self.n_points & (self.n_points - 1):
            raise ValueError("RQMC needs a power-of-two number of points")
        if self.top_k is not None and not 1 <= self.top_k <= self.n_points:
            raise ValueError("top_k must lie in [1, n_points]")

    @classmethod
    def binary_mnist(cls, **overrides) -> "TrainConfig":
        return cls(**{"latent_dim": 16, "n_points": 2 ** 14, "batch_size": 512, **overrides})

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    train_obj: list = field(default_factory=list)
    valid_ll: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    best_epoch: int = -1
    best_valid_ll: float = float("-inf")
    stopped_early: bool = False
    test_ll: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_obj", "valid_ll", "wall_ms"])
            for e, row in enumerate(zip(self.train_obj, self.valid_ll, self.wall_ms)):
                w.writerow([e, *map(repr, row)])

    def summary(self) -> dict:
        return {
            "epochs_run": len(self.valid_ll), "best_epoch": self.best_epoch,
            "best_valid_ll": self.best_valid_ll, "stopped_early": self.stopped_early,
            "test_ll": {str(k): v for k, v in self.test_ll.items()},
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=1) + "\n", encoding="utf-8")


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7, int(step)]).generate_state(1)[0])


def _early_stopping_loop(n_epochs, patience, run_epoch, validate, snapshot, report):
    """Shared epoch loop: train, validate, keep the best snapshot, stop on patience."""
    best = snapshot()
    bad = 0
    for epoch in range(n_epochs):
        t0 = time.perf_counter()
        obj = run_epoch(epoch)
        vll = validate()
        report.train_obj.append(obj)
        report.valid_ll.append(vll)
        report.wall_ms.append((time.perf_counter() - t0) * 1e3)
        if vll > report.best_valid_ll:
            report.best_valid_ll, report.best_epoch = vll, epoch
            best = snapshot()
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                report.stopped_early = epoch < n_epochs - 1
                break
    return best


def train_cm(config: TrainConfig, train, valid, structure: CircuitStructure, train_masks=None,
             valid_masks=None, test=None, test_points=(), decoder: Optional[Decoder] = None):
    """Fit a decoder by maximising the integration objective; returns the best-validation decoder."""
    X = _rows(train)
    if X.shape[1] != structure.num_vars:
        raise ValueError(f"data has {X.shape[1]} variables, structure has {structure.num_vars}")
    M = _observed(train_masks, X.shape)
    dec = decoder if decoder is not None else init_decoder(
        config.latent_dim, structure.param_width, config.hidden, seed=config.seed,
        slope=config.slope, batch_norm=config.batch_norm)
    dec.structure_ref = structure.to_json()
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    n_valid = config.valid_n_points or config.n_points
    valid_rule = make_rule(config.method, n_valid, config.latent_dim, config.eval_seed)
    report = TrainReport()
    step = [0]

    def run_epoch(epoch):
        objs = []
        for idx in make_batches(X, config.batch_size, shuffle_seed=config.seed, epoch=epoch):
            rule = make_rule(config.method, config.n_points, config.latent_dim, step_seed(config.seed, step[0]))
            step[0] += 1
            obj, grads, _ = objective_and_grads(dec, structure, rule, X[idx], None if M is None else M[idx],
                                                top_k=config.top_k)
            opt.step(dec.parameters(), [-g for g in grads])
            dec.touch()
            objs.append(obj * len(idx))
        return float(np.sum(objs) / X.shape[0])

    def validate():
        with np.errstate(all="ignore"):
            v = mean_log_likelihood(dec, structure, valid_rule, valid, valid_masks)
        return v if np.isfinite(v) else float("-inf")

    best = _early_stopping_loop(config.max_epochs, config.patience, run_epoch, validate, dec.copy, report)
    for n in test_points:
        rule = make_rule(config.method, n, config.latent_dim, config.eval_seed)
        report.test_ll[n] = mean_log_likelihood(best, structure, rule, test)
    return best, report


# ---------------------------------------------------------------------------
# plain discrete mixtures


def _random_row_init(X, n, alpha, seed):
    rows = X[rng_for(seed, 3).integers(0, X.shape[0], size=n)]
    return (rows + alpha) / (1.0 + 2.0 * alpha)


def _mixture_params_from_rows(structure, p_rows):
    if structure.kind == "factorised":
        return p_rows
    return np.repeat(p_rows, 2, axis=1)


def train_plain_mixture(train, n_components: int, mode: str, config: TrainConfig,
                        structure: Optional[CircuitStructure] = None, valid=None, alpha: float = 0.1,
                        tol: float = 1e-6, init_alpha: Optional[float] = None) -> CompiledPC:
    """Discrete mixture baseline with free per-component parameters.

    ``equal``: fixed weights 1/N, gradient training. ``learnable``: softmax
    weights, gradient training. ``em``: Bernoulli-mixture EM (factorised),
    M-step smoothed by ``alpha``. Per-epoch history goes into the metadata.
    """
    X = _rows(train)
    structure = structure or CircuitStructure.factorised(X.shape[1])
    if structure.num_vars != X.shape[1]:
        raise ValueError("structure does not match the data")
    if n_components < 1:
        raise ValueError("need at least one component")
    init_alpha = alpha if init_alpha is None else init_alpha
    p0 = np.clip(_random_row_init(X, n_components, max(init_alpha, 1e-3), config.seed), EPS_P, 1 - EPS_P)
    if mode == "em":
        return _train_em(X, structure, p0, config.max_epochs, alpha, tol)
    if mode not in ("equal", "learnable"):
        raise ValueError(f"unknown plain-mixture mode {mode!r}")
    if valid is None:
        raise ValueError("gradient-trained mixtures need validation data for early stopping")
    p0 = _mixture_params_from_rows(structure, p0)
    logits = np.log(p0) - np.log1p(-p0)
    wlogits = np.zeros(n_components)
    params = [logits, wlogits]
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    report = TrainReport()

    def weights():
        return np.exp(wlogits - logsumexp(wlogits)) if mode == "learnable" else np.full(n_components, 1.0 / n_components)

    def run_epoch(epoch):
        total = 0.0
        for idx in make_batches(X, config.batch_size, shuffle_seed=config.seed, epoch=epoch):
            C, grad_fn = component_terms(structure, logits, X[idx])
            w = weights()
            S = C + np.log(w)
            ll = logsumexp(S, axis=1)
            R = np.exp(S - ll[:, None]) / len(idx)
            g_logits = grad_fn(R)
            g_w = (R.sum(axis=0) - w * R.sum()) if mode == "learnable" else np.zeros(n_components)
            opt.step(params, [-g_logits, -g_w])
            total += ll.sum()
        return total / X.shape[0]

    def snapshot():
        return CompiledPC(structure, weights(), leaf_probs(logits)[0], {"method": f"plain-{mode}"})

    def validate():
        return float(mixture_log_density(snapshot(), _rows(valid)).mean())

    best = _early_stopping_loop(config.max_epochs, config.patience, run_epoch, validate, snapshot, report)
    meta = {**best.metadata, "n_components": n_components, "train_obj": report.train_obj,
            "valid_ll": report.valid_ll, "best_epoch": report.best_epoch}
    return CompiledPC(best.structure, best.weights, best.params, meta)


def em_penalty(P, alpha):
    """Log-density of the symmetric Beta(alpha+1, alpha+1) prior the smoothed M-step maximises."""
    return alpha * float(np.sum(np.log(P) + np.log1p(-P)))


def _train_em(X, structure, P, max_iters, alpha, tol):
    if structure.kind != "factorised":
        raise ValueError("EM baseline supports factorised components only")
    n = P.shape[0]
    w = np.full(n, 1.0 / n)
    m = X.shape[0]
    history, objective = [], []

    def evaluate(w, P):
        with np.errstate(divide="ignore"):
            S = X @ np.log(P).T + (1.0 - X) @ np.log1p(-P).T + np.log(w)
        ll = logsumexp(S, axis=1)
        return S, ll

    S, ll = evaluate(w, P)
    history.append(float(ll.mean()))
    objective.append(float(ll.sum() + em_penalty(P, alpha)) / m)
    for _ in range(max_iters):
        R = np.exp(S - ll[:, None])
        mass = R.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            new_P = (R.T @ X + alpha) / (mass[:, None] + 2.0 * alpha)
        # components without responsibility keep their parameters
        dead = mass + 2.0 * alpha <= 0
        new_P[dead] = P[dead]
        P = np.clip(new_P, EPS_P, 1.0 - EPS_P)
        w = mass / mass.sum()
        S, ll = evaluate(w, P)
        history.append(float(ll.mean()))
        objective.append(float(ll.sum() + em_penalty(P, alpha)) / m)
        if objective[-1] - objective[-2] < tol:
            break
    return CompiledPC(structure, w, P, {"method": "plain-em", "n_components": n, "alpha": alpha,
                                        "train_ll": history, "objective": objective})


# ---------------------------------------------------------------------------
# evaluation tables


def evaluate(model, data, n_points=(), method: str = "rqmc", seed: int = 42, structure=None, observed=None):
    """Mean per-row LL (and its standard error) for each requested rule size.

    A :class:`CompiledPC` is evaluated once with its own components.
    """
    rows = []
    if isinstance(model, CompiledPC):
        ll = row_log_likelihoods(model, None, None, data, observed)
        rows.append({"n_points": model.num_components, "method": model.metadata.get("method", "pc"),
                     "seed": model.metadata.get("seed", ""), "mean_ll": float(ll.mean()),
                     "stderr": float(ll.std(ddof=1) / np.sqrt(len(ll))) if len(ll) > 1 else 0.0})
        return rows
    if structure is None:
        if model.structure_ref is None:
            raise ValueError("decoder has no structure reference; pass structure explicitly")
        structure = CircuitStructure.from_json(model.structure_ref)
    for n in n_points:
        rule = make_rule(method, int(n), model.latent_dim, seed)
        ll = row_log_likelihoods(model, structure, rule, data, observed)
        rows.append({"n_points": int(n), "method": method, "seed": seed, "mean_ll": float(ll.mean()),
                     "stderr": float(ll.std(ddof=1) / np.sqrt(len(ll))) if len(ll) > 1 else 0.0})
    return rows


LL_COLUMNS = ("n_points", "method", "seed", "mean_ll", "stderr")


def write_ll_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LL_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
