"""Synthetic stand-ins for the benchmark-based acceptance criteria.

These check the same behaviours (continuous mixture vs plain mixture, gain
from latent optimisation) on generated data, so they run without the
benchmark files.  They do not replace the benchmark checks.
"""

import pytest

from contmix.circuits import CircuitStructure, mixture_log_density
from contmix.clt import learn_structure
from contmix.latopt import LatOptConfig, latent_optimise
from contmix.quadrature import rqmc_rule
from contmix.synthetic import continuous_mixture_pc, random_tree, split_samples
from contmix.trainer import TrainConfig, mean_log_likelihood, train_cm, train_plain_mixture

pytestmark = pytest.mark.slow

CFG = TrainConfig(n_points=2 ** 8, max_epochs=30, patience=5, seed=0)


@pytest.mark.parametrize("seed", [5, 8])
def test_continuous_beats_equal_weight_mixture(seed):
    gt = continuous_mixture_pc(16, 4, seed=seed)
    sp = split_samples(gt, (3000, 500, 1000), seed=seed)
    s = CircuitStructure.factorised(16)
    _, report = train_cm(CFG, sp["train"], sp["valid"], s, test=sp["test"], test_points=(CFG.n_points,))
    dm = train_plain_mixture(sp["train"], CFG.n_points, "equal", CFG, valid=sp["valid"])
    assert report.test_ll[CFG.n_points] > mixture_log_density(dm, sp["test"].rows).mean()


def test_latent_optimisation_helps_small_rules():
    gt = continuous_mixture_pc(16, 4, seed=6, structure=random_tree(16, seed=6))
    sp = split_samples(gt, (3000, 500, 1000), seed=6)
    s = learn_structure(sp["train"])
    dec, _ = train_cm(CFG, sp["train"], sp["valid"], s)
    rule = rqmc_rule(2 ** 6, 4, 42)
    before = mean_log_likelihood(dec, s, rule, sp["test"])
    opt = latent_optimise(dec, s, rule, sp["train"], sp["valid"], LatOptConfig(n_points=2 ** 6, max_epochs=20))
    assert mean_log_likelihood(dec, s, opt, sp["test"]) > before
