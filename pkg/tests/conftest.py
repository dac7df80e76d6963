import numpy as np
import pytest

from contmix.circuits import CircuitStructure, CompiledPC
from contmix.synthetic import bernoulli_mixture_pc, random_tree, split_samples
from contmix.trainer import TrainConfig, train_cm


def random_structure(rng, num_vars, kind):
    if kind == "factorised":
        return CircuitStructure.factorised(num_vars)
    return random_tree(num_vars, seed=int(rng.integers(1 << 30)))


def random_pc(rng, num_vars, n_components, kind, zero_weight=False):
    structure = random_structure(rng, num_vars, kind)
    weights = rng.dirichlet(np.ones(n_components))
    if zero_weight and n_components > 1:
        weights[0] = 0.0
        weights /= weights.sum()
    params = rng.uniform(0.02, 0.98, size=(n_components, structure.param_width))
    return CompiledPC(structure, weights, params)


def random_rows(rng, count, num_vars):
    return rng.integers(0, 2, size=(count, num_vars)).astype(float)


def fd_check(f, arrays, analytic, touch, rng, n_entries=12, step=1e-4):
    """Relative error between central differences and analytic grads on random entries."""
    num, ana = [], []
    for arr, g in zip(arrays, analytic):
        flat_idx = rng.choice(arr.size, size=min(n_entries, arr.size), replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape)
            old = arr[idx]
            arr[idx] = old + step
            touch()
            up = f()
            arr[idx] = old - step
            touch()
            down = f()
            arr[idx] = old
            touch()
            num.append((up - down) / (2 * step))
            ana.append(g[idx])
    num, ana = np.array(num), np.array(ana)
    # the floor keeps near-zero gradients from turning rounding noise into a relative error
    return np.linalg.norm(num - ana) / max(np.linalg.norm(num), 1e-6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mixture_data():
    gt = bernoulli_mixture_pc(8, 2, seed=1)
    return gt, split_samples(gt, (4000, 1000, 5000), seed=2)


@pytest.fixture(scope="session")
def trained(mixture_data):
    _, sp = mixture_data
    cfg = TrainConfig(n_points=256, max_epochs=40, patience=5, seed=0)
    dec, report = train_cm(cfg, sp["train"], sp["valid"], CircuitStructure.factorised(8),
                           test=sp["test"], test_points=(1024,))
    return dec, report, cfg
