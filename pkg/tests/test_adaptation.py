"""Online adaptation: kernel, stopping rule, and the three modes.

The cross-mode identities (mu = 0 combined vs self, empty-prefix combined
vs subpop) are asserted bit-exact; fast-vs-generic path equivalence is
numeric (same math, different evaluation order).
"""

import math

import numpy as np
import pytest

from evseq.adaptation import (
    AdaptConfig,
    _NeighborTerm,
    _PrefixTerm,
    adapt_combined,
    adapt_self,
    adapt_subpopulation,
    discount_kernel,
    kernel_weights,
    predict_next,
)
from evseq.memory import MemoryBank, build_memory, knn, subpop_head_loss
from evseq.model import (
    PARAM_GROUPS,
    head_forward,
    models_equal,
    sequence_loss,
    unroll,
)

from conftest import grad_rel_error, make_model, random_sequence

FULL_MASK = frozenset(PARAM_GROUPS)


def make_bank(model, rng, n_seq=4, length=6):
    data = [random_sequence(rng, length, 3, pid=f"m{i}") for i in range(n_seq)]
    return build_memory(model, data)


# ---------------------------------------------------------------- kernel


def test_kernel_frozen_values():
    assert discount_kernel(7, 7, 3.0) == 1.0
    assert discount_kernel(5, 2, 3.0) == pytest.approx(math.exp(-1.0), abs=1e-12)
    assert discount_kernel(2, 5, 3.0) == pytest.approx(math.exp(-1.0), abs=1e-12)
    with pytest.raises(ValueError):
        discount_kernel(3, 1, 0.0)


def test_kernel_weights_recent_pairs_heavier():
    w = kernel_weights(6, 3.0)
    assert w.shape == (5,)
    assert np.all(np.diff(w) > 0)
    assert w[-1] == pytest.approx(math.exp(-1 / 3.0), abs=1e-12)
    expected = np.exp(-(6 - np.arange(1, 6)) / 3.0)
    assert np.allclose(w, expected, atol=1e-15)


def test_config_validation():
    AdaptConfig().validate()
    for bad in (
        AdaptConfig(epsilon=0.0),
        AdaptConfig(gamma=-1.0),
        AdaptConfig(mu=-0.1),
        AdaptConfig(k_neighbors=0),
        AdaptConfig(adapt_lr=0.0),
        AdaptConfig(max_adapt_epochs=0),
        AdaptConfig(param_mask=frozenset({"decoder"})),
    ):
        with pytest.raises(ValueError):
            bad.validate()


# ----------------------------------------------------------- adapt_self


def test_degenerate_prefix_returns_clone(rng):
    pop = make_model()
    prefix = random_sequence(rng, 1, 3)
    result = adapt_self(pop, prefix, AdaptConfig())
    assert result.epochs_run == 0
    assert result.loss_trace == []
    assert models_equal(result.model, pop)
    assert result.model is not pop


def test_self_adaptation_reduces_objective(rng):
    pop = make_model(hidden_dim=8)
    prefix = random_sequence(rng, 8, 3)
    cfg = AdaptConfig(adapt_lr=0.05, epsilon=1e-9)
    result = adapt_self(pop, prefix, cfg)
    assert result.epochs_run >= 2
    assert result.loss_trace[-1] < result.loss_trace[0]


def test_stopping_rule_soundness(rng):
    """Either the cap was hit, or the final epoch-over-epoch decrease is
    below epsilon. The first epoch can never trigger the stop."""
    pop = make_model()
    cfg = AdaptConfig(epsilon=1e-3, max_adapt_epochs=50)
    for trial in range(8):
        prefix = random_sequence(rng, int(rng.integers(2, 9)), 3)
        result = adapt_self(pop, prefix, cfg)
        trace = result.loss_trace
        assert result.epochs_run == len(trace)
        if result.epochs_run < cfg.max_adapt_epochs:
            assert result.epochs_run >= 2
            assert trace[-2] - trace[-1] < cfg.epsilon
        for a, b in zip(trace, trace[1:-1]):
            assert a - b >= cfg.epsilon  # every survived epoch earned its keep


def test_population_model_untouched(rng):
    pop = make_model()
    before = {k: v.copy() for k, v in pop.params.items()}
    bank = make_bank(pop, rng)
    prefix = random_sequence(rng, 6, 3)
    h = unroll(pop, prefix.inputs)[-1]
    adapt_self(pop, prefix, AdaptConfig())
    adapt_subpopulation(pop, bank, h, AdaptConfig())
    adapt_combined(pop, bank, prefix, AdaptConfig())
    for name, value in pop.params.items():
        assert np.array_equal(value, before[name])


def test_output_mask_keeps_hidden_trajectory(rng):
    pop = make_model()
    prefix = random_sequence(rng, 7, 3)
    result = adapt_self(pop, prefix, AdaptConfig())
    assert result.epochs_run >= 1
    for name in ("w_emb", "w_z", "w_r", "w_h", "b_z", "b_r", "b_h"):
        assert np.array_equal(result.model.params[name], pop.params[name])
    assert not np.array_equal(result.model.params["w_o"], pop.params["w_o"])
    assert np.array_equal(
        unroll(result.model, prefix.inputs), unroll(pop, prefix.inputs)
    )


def test_fast_and_generic_prefix_terms_agree(rng):
    """The precomputed-hidden head pass and full backpropagation give the
    same loss and the same output-group gradients."""
    pop = make_model()
    prefix = random_sequence(rng, 6, 3)
    fast = _PrefixTerm(pop, prefix, AdaptConfig())
    slow = _PrefixTerm(pop, prefix, AdaptConfig(param_mask=FULL_MASK))
    assert fast.fast and not slow.fast
    loss_f, grads_f = fast.eval(pop)
    loss_s, grads_s = slow.eval(pop)
    assert loss_f == pytest.approx(loss_s, rel=1e-12)
    for name in ("w_o", "b_o"):
        assert np.allclose(grads_f[name], grads_s[name], atol=1e-12)


# ---------------------------------------------------------- identities


def test_mu_zero_combined_is_self(rng):
    pop = make_model()
    bank = make_bank(pop, rng)
    prefix = random_sequence(rng, 7, 3)
    cfg = AdaptConfig(mu=0.0)
    combined = adapt_combined(pop, bank, prefix, cfg)
    alone = adapt_self(pop, prefix, AdaptConfig(mu=1.0))
    assert combined.loss_trace == alone.loss_trace
    assert combined.epochs_run == alone.epochs_run
    assert models_equal(combined.model, alone.model)


def test_empty_prefix_combined_is_subpop(rng):
    pop = make_model()
    bank = make_bank(pop, rng)
    prefix = random_sequence(rng, 1, 3)
    h = unroll(pop, prefix.inputs)[-1]
    cfg = AdaptConfig(mu=1.0)
    combined = adapt_combined(pop, bank, prefix, cfg)
    alone = adapt_subpopulation(pop, bank, h, cfg)
    assert combined.loss_trace == alone.loss_trace
    assert models_equal(combined.model, alone.model)


def test_combined_gradients_match_finite_differences(rng):
    """Analytic gradient of prefix + mu * neighborhood objective against
    central differences, over all parameter groups."""
    pop = make_model(n_input=3, n_target=3, embed_dim=2, hidden_dim=3, seed=4)
    bank = make_bank(pop, rng, n_seq=2, length=4)
    prefix = random_sequence(rng, 5, 3)
    mu, gamma, k = 0.7, 3.0, 3
    h = unroll(pop, prefix.inputs)[-1]
    hood = knn(bank, h, k)
    neigh_bank = MemoryBank(hood.keys, hood.values, [("n", i) for i in range(k)])
    weights = kernel_weights(len(prefix), gamma)

    prefix_term = _PrefixTerm(pop, prefix, AdaptConfig(param_mask=FULL_MASK))
    neigh_term = _NeighborTerm(hood)
    _, g1 = prefix_term.eval(pop)
    _, g2 = neigh_term.eval(pop)
    analytic = {k_: g1[k_] + mu * g2[k_] for k_ in g1}

    eps = 1e-5
    numeric = {}
    for name, p in pop.params.items():
        g = np.zeros_like(p)
        flat_p, flat_g = p.ravel(), g.ravel()
        for idx in range(flat_p.size):
            orig = flat_p[idx]
            flat_p[idx] = orig + eps
            hi = sequence_loss(pop, prefix, weights) + mu * subpop_head_loss(
                pop, neigh_bank
            )
            flat_p[idx] = orig - eps
            lo = sequence_loss(pop, prefix, weights) + mu * subpop_head_loss(
                pop, neigh_bank
            )
            flat_p[idx] = orig
            flat_g[idx] = (hi - lo) / (2 * eps)
        numeric[name] = g
    assert grad_rel_error(analytic, numeric) <= 1e-4


# -------------------------------------------------------------- subpop


def test_subpop_huge_epsilon_stops_after_two_epochs(rng):
    """The stop compares against the previous epoch, so even an absurd
    epsilon cannot stop before the second epoch."""
    pop = make_model()
    bank = make_bank(pop, rng)
    h = rng.normal(size=pop.config.hidden_dim)
    result = adapt_subpopulation(pop, bank, h, AdaptConfig(epsilon=1e9))
    assert result.epochs_run == 2


def test_subpop_respects_k(rng):
    pop = make_model()
    bank = make_bank(pop, rng, n_seq=6, length=5)
    h = rng.normal(size=pop.config.hidden_dim)
    r_small = adapt_subpopulation(pop, bank, h, AdaptConfig(k_neighbors=2))
    r_large = adapt_subpopulation(pop, bank, h, AdaptConfig(k_neighbors=len(bank)))
    assert not np.array_equal(
        r_small.model.params["w_o"], r_large.model.params["w_o"]
    )


def test_warm_start_uses_given_model(rng):
    pop = make_model()
    prefix_long = random_sequence(rng, 6, 3)
    warm = adapt_self(pop, prefix_long, AdaptConfig()).model
    assert not models_equal(warm, pop)
    short = random_sequence(rng, 1, 3)
    cold = adapt_self(pop, short, AdaptConfig(), warm=warm)
    assert models_equal(cold.model, pop)  # warm ignored by default
    hot = adapt_self(pop, short, AdaptConfig(warm_start=True), warm=warm)
    assert models_equal(hot.model, warm)


def test_predict_next_paths_agree(rng):
    pop = make_model()
    prefix = random_sequence(rng, 5, 3)
    h = unroll(pop, prefix.inputs)[-1]
    via_hidden = predict_next(pop, prefix.inputs, pop_hidden=h)
    via_unroll = predict_next(pop, prefix.inputs, output_only=False)
    assert np.array_equal(via_hidden, head_forward(pop, h))
    assert np.allclose(via_hidden, via_unroll, atol=1e-15)
