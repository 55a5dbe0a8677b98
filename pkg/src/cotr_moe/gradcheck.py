"""Finite-difference verification entry points for the two core modules.

Both checks run in wide (float64) precision on fixed seeded inputs: the
full token-reducer forward over every one of its parameters, and the soft
mixture surrogate over router, routed-expert, and general-expert
parameters.  The hard top-k path is excluded by design; its forward is
piecewise constant in the router and is trained through the soft
surrogate's gradients.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import RunConfig
from .cotr import TokenReducer
from .mmoe import MmoeLayer, soft_mmoe_forward
from .tensor import FiniteDiffReport

EPSILON = 1e-5
TOLERANCE = 1e-4


def cotr_report(config: RunConfig) -> FiniteDiffReport:
    cotr_cfg = config.cotr_config()
    reducer = TokenReducer(cotr_cfg, seed=config.seed, dtype=np.float64)
    rng = np.random.default_rng([config.seed, 31])
    visual = [T.constant(rng.normal(size=(e.n_tokens, e.dim)) * 0.5)
              for e in cotr_cfg.experts]
    text = T.constant(rng.normal(size=(4, cotr_cfg.d_text)) * 0.5)

    def f():
        return T.mean(reducer.forward(visual, text).projected)

    return T.finite_diff_check(f, reducer.named_parameters("cotr"),
                               eps=EPSILON, tol=TOLERANCE)


def mmoe_report(config: RunConfig) -> FiniteDiffReport:
    d_llm = config.raw["model"]["d_llm"]
    d_hidden = config.raw["model"]["mlp_hidden"]
    rng = np.random.default_rng([config.seed, 37])
    layer = MmoeLayer(d_llm, d_hidden, 2 * d_llm, config.mmoe_config(),
                      rng, np.float64)
    # Zero-init up-maps would zero the expert gradients; randomize them so
    # the check exercises real curvature.
    layer.general.up.data[:] = rng.normal(0.0, 0.1, size=layer.general.up.shape)
    for expert in layer.experts:
        expert.up.data[:] = rng.normal(0.0, 0.1, size=expert.up.shape)
    i_tilde = T.constant(rng.normal(size=(5, d_llm)) * 0.5)
    text = T.constant(rng.normal(size=(3, d_llm)) * 0.5)
    x = T.constant(rng.normal(size=(1, d_llm)) * 0.5)

    def f():
        return T.mean(soft_mmoe_forward(layer, i_tilde, text, x))

    params = layer.named_parameters("mmoe", include_original=False)
    return T.finite_diff_check(f, params, eps=EPSILON, tol=TOLERANCE)


def group_summary(report: FiniteDiffReport, depth: int = 2) -> dict[str, float]:
    """Worst relative error per parameter group (first path components)."""
    groups: dict[str, float] = {}
    for entry in report.entries:
        group = "/".join(entry.name.split("/")[:depth])
        groups[group] = max(groups.get(group, 0.0), entry.max_rel_error)
    return groups
