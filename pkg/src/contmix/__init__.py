"""Continuous mixtures of tractable circuits, trained by numerical integration."""

from .circuits import (CircuitStructure, CompiledPC, brute_force_log_density, brute_force_marginal,
                       brute_force_total_mass, component_log_density, load_pc, marginal_log_density,
                       mixture_log_density, mpe_complete, sample, save_pc)
from .clt import fit_clt_closed_form, learn_structure, max_spanning_tree, mutual_information, pairwise_counts
from .compilepc import compile_pc
from .data import BinaryDataset, MissingMask, load_dataset, make_batches
from .decoder import Adam, Decoder, init_decoder, load_decoder, save_decoder
from .latopt import LatOptConfig, latent_optimise
from .quadrature import (IntegrationRule, estimate_integration_error, gauss_hermite_rule, lattice_uniform,
                         make_rule, mc_uniform, rqmc_rule, to_gaussian)
from .trainer import (TrainConfig, TrainReport, batch_log_likelihood, evaluate, topk_log_likelihood,
                      train_cm, train_plain_mixture)

__version__ = "0.1.0"
