"""Latent optimisation: refine integration points of a frozen decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .circuits import CircuitStructure
from .data import make_batches
from .decoder import Adam, Decoder
from .quadrature import IntegrationRule
from .trainer import _rows, mean_log_likelihood, objective_and_grads


@dataclass
class LatOptConfig:
    n_points: int = 2 ** 10
    max_epochs: int = 50
    patience: int = 15
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1 or self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("invalid latent-optimisation config")

    def to_json(self) -> dict:
        return asdict(self)


def latent_optimise(dec: Decoder, structure: CircuitStructure, init_rule: IntegrationRule, train, valid,
                    config: LatOptConfig) -> IntegrationRule:
    """Adam ascent on the integration objective over the points only.

    Weights stay as in ``init_rule``.  A checkpoint is kept only if it
    improves validation LL *and* its full training objective is not below
    the starting one; the initial points are the fallback.  The history is
    stored in the returned rule's provenance.
    """
    if init_rule.n_points != config.n_points:
        raise ValueError(f"config expects {config.n_points} points, rule has {init_rule.n_points}")
    X = _rows(train)
    Z = np.array(init_rule.points)
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)

    def as_rule(points):
        return init_rule.with_points(points, method="latopt")

    init_train = mean_log_likelihood(dec, structure, init_rule, X)
    best_valid = mean_log_likelihood(dec, structure, init_rule, valid)
    best_Z, best_epoch = Z.copy(), -1
    history = {"train_ll": [init_train], "valid_ll": [best_valid]}
    bad = 0
    for epoch in range(config.max_epochs):
        for idx in make_batches(X, config.batch_size, shuffle_seed=config.seed, epoch=epoch):
            _, _, dZ = objective_and_grads(dec, structure, as_rule(Z), X[idx], track=False, need_latent=True)
            opt.step([Z], [-dZ])
        rule = as_rule(Z)
        tr = mean_log_likelihood(dec, structure, rule, X)
        va = mean_log_likelihood(dec, structure, rule, valid)
        history["train_ll"].append(tr)
        history["valid_ll"].append(va)
        if va > best_valid and tr >= init_train:
            best_valid, best_Z, best_epoch = va, Z.copy(), epoch
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    return as_rule(best_Z).with_points(best_Z, best_epoch=best_epoch, history=history)
