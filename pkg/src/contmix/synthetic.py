"""Ground-truth models for recovery tests and desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .circuits import CircuitStructure, CompiledPC, clamp_probs
from .data import BinaryDataset, generate_synthetic, rng_for


def random_tree(num_vars: int, seed: int) -> CircuitStructure:
    """Uniformly attach each variable (in random order) to an earlier one."""
    rng = rng_for(seed)
    order = rng.permutation(num_vars)
    parent = [None] * num_vars
    for k in range(1, num_vars):
        parent[order[k]] = int(order[rng.integers(0, k)])
    return CircuitStructure.clt(parent)


def flip_tree_pc(structure: CircuitStructure, seed: int, levels=(0.1, 0.9)) -> CompiledPC:
    """Single CLT component whose edge conditionals are drawn from ``levels``."""
    rng = rng_for(seed, 1)
    params = np.empty(2 * structure.num_vars)
    for v, p in enumerate(structure.parent):
        if p == -1:
            params[2 * v] = params[2 * v + 1] = 0.5
        else:
            lo, hi = rng.permutation(levels)[:2]
            params[2 * v], params[2 * v + 1] = lo, hi
    return CompiledPC(structure, np.ones(1), params[None, :], {"method": "ground-truth"})


def bernoulli_mixture_pc(num_vars: int, n_components: int, seed: int, spread: float = 0.8) -> CompiledPC:
    """Random factorised mixture with probabilities in ``[0.5 - spread/2, 0.5 + spread/2]``."""
    rng = rng_for(seed, 2)
    params = 0.5 + spread * (rng.random((n_components, num_vars)) - 0.5)
    weights = rng.dirichlet(np.full(n_components, 5.0))
    return CompiledPC(CircuitStructure.factorised(num_vars), weights, clamp_probs(params), {"method": "ground-truth"})


def continuous_mixture_pc(num_vars: int, latent_dim: int, seed: int, n_points: int = 2 ** 14,
                          sharpness: float = 3.0, structure=None) -> CompiledPC:
    """Finely integrated continuous mixture with a random smooth decoder.

    Leaf logits are ``sharpness * tanh(z A + b)`` with Gaussian ``A``; compiled
    with an RQMC rule of ``n_points`` points, so the resulting PC is a
    near-exact stand-in for the continuous model.
    """
    from .quadrature import rqmc_rule

    structure = structure or CircuitStructure.factorised(num_vars)
    rng = rng_for(seed, 3)
    A = rng.normal(size=(latent_dim, structure.param_width))
    b = rng.normal(scale=0.5, size=structure.param_width)
    rule = rqmc_rule(n_points, latent_dim, seed)
    logits = sharpness * np.tanh(rule.points @ A + b)
    params = clamp_probs(1.0 / (1.0 + np.exp(-logits)))
    return CompiledPC(structure, rule.weights, params, {"method": "ground-truth"})


def split_samples(pc: CompiledPC, sizes, seed: int):
    """Independent train/valid/test samples of the given sizes."""
    names = ("train", "valid", "test")
    return {name: BinaryDataset(generate_synthetic(pc, n, seed=seed * 1000 + k).rows, split_tag=name)
            for k, (name, n) in enumerate(zip(names, sizes))}
