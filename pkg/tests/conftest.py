"""Shared helpers: toy models, random sequences, finite-difference oracle."""

import numpy as np
import pytest

from evseq.events import EventSequence, make_targets
from evseq.model import (
    PARAM_NAMES,
    ModelConfig,
    ModelState,
    init_model,
    l2_penalty,
    sequence_loss,
)


def make_model(
    n_input=3,
    n_target=3,
    embed_dim=2,
    hidden_dim=3,
    seed=0,
    learning_rate=0.005,
    l2_weight=0.0,
) -> ModelState:
    return init_model(
        ModelConfig(
            n_input=n_input,
            n_target=n_target,
            embed_dim=embed_dim,
            hidden_dim=hidden_dim,
            learning_rate=learning_rate,
            l2_weight=l2_weight,
            rng_seed=seed,
        )
    )


def random_sequence(rng, length, n_input, target_mask=None, pid="p0") -> EventSequence:
    if target_mask is None:
        target_mask = np.ones(n_input, dtype=bool)
    inputs = (rng.random((length, n_input)) < 0.45).astype(np.float64)
    return EventSequence(pid, inputs, make_targets(inputs, target_mask))


def loss_with_penalty(model, seq, weights=None, l2_weight=0.0) -> float:
    return sequence_loss(model, seq, weights) + l2_penalty(model, l2_weight)


def finite_diff_grads(model, seq, weights=None, l2_weight=0.0, eps=1e-5):
    """Central differences of the full training objective, parameter by
    parameter; the independent check for the analytic backward pass."""
    grads = {}
    for name in PARAM_NAMES:
        p = model.params[name]
        g = np.zeros_like(p)
        flat = p.ravel()
        g_flat = g.ravel()
        for idx in range(flat.shape[0]):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_with_penalty(model, seq, weights, l2_weight)
            flat[idx] = orig - eps
            down = loss_with_penalty(model, seq, weights, l2_weight)
            flat[idx] = orig
            g_flat[idx] = (up - down) / (2.0 * eps)
        grads[name] = g
    return grads


def grad_rel_error(analytic, numeric) -> float:
    """Worst per-parameter relative error between two gradient sets."""
    worst = 0.0
    for name in PARAM_NAMES:
        a = analytic[name]
        n = numeric[name]
        denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-10)
        worst = max(worst, float(np.linalg.norm(a - n)) / denom)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
