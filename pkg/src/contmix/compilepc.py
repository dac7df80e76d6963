"""Compile a (decoder, integration rule) pair into a finite mixture of circuits."""

from __future__ import annotations

import numpy as np

from .circuits import CircuitStructure, CompiledPC
from .decoder import Decoder
from .quadrature import IntegrationRule
from .trainer import leaf_probs


def compile_pc(dec: Decoder, structure: CircuitStructure, rule: IntegrationRule, method=None) -> CompiledPC:
    """One eval-mode decoder pass over the rule's points.

    Batch-norm statistics are frozen over ``rule.points`` on a copy of the
    decoder, so the result equals the integration objective evaluated with
    the same rule.  ``dec`` itself is not modified.
    """
    if rule.dim != dec.latent_dim:
        raise ValueError(f"rule has dimension {rule.dim}, decoder expects {dec.latent_dim}")
    if structure.param_width != dec.output_dim:
        raise ValueError(f"decoder outputs {dec.output_dim} values, structure needs {structure.param_width}")
    frozen = dec.copy()
    if frozen.batch_norm:
        frozen.freeze_stats(rule.points)
    logits, _ = frozen.forward(rule.points, mode="eval" if frozen.batch_norm else "train", track=False)
    params, _ = leaf_probs(logits)
    metadata = {
        "method": method or rule.method,
        "n_points": rule.n_points,
        "latent_dim": rule.dim,
        "decoder_digest": dec.digest(),
        "frozen_decoder_digest": frozen.digest(),
        "bn_stats": "frozen over compile-time points" if frozen.batch_norm else "none",
        "rule": {k: v for k, v in rule.provenance.items() if k != "history"},
    }
    if "seed" in rule.provenance:
        metadata["seed"] = rule.provenance["seed"]
    return CompiledPC(structure, np.array(rule.weights), params, metadata)
