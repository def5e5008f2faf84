"""Online adaptation of a trained population model at prediction time.

Three modes, all starting from a fresh clone of the population model and
taking one optimizer step per epoch over their full objective:

  self:      recency-weighted BCE over the patient's own observed prefix;
             the supervised pair at step i is weighted by the kernel
             exp(-|t - i| / gamma) relative to the current time t.
  subpop:    BCE of the output head applied directly to the k hidden
             states retrieved from the memory bank by the current hidden
             state (no re-unrolling of the stored patients).
  combined:  self + mu * subpop on one clone.

Epochs stop when the decrease of the objective between consecutive
epochs falls below epsilon, or at max_adapt_epochs.  By default only the
output parameter group is updated, which keeps the adapted model's
hidden trajectory identical to the population model's.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .events import EventSequence
from .memory import MemoryBank, Neighborhood, knn
from .model import (
    PARAM_GROUPS,
    ModelState,
    add_grads,
    backward,
    bce_components,
    clone_model,
    head_backward,
    head_forward,
    optimizer_step,
    reset_optimizer,
    unroll,
)


@dataclass
class AdaptConfig:
    epsilon: float = 1e-4
    gamma: float = 3.0
    mu: float = 1.0
    k_neighbors: int = 32
    adapt_lr: float = 0.005
    param_mask: frozenset[str] = frozenset({"output"})
    max_adapt_epochs: int = 15
    warm_start: bool = False

    def validate(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.adapt_lr <= 0:
            raise ValueError("adapt_lr must be positive")
        if self.max_adapt_epochs < 1:
            raise ValueError("max_adapt_epochs must be >= 1")
        unknown = set(self.param_mask) - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")


@dataclass
class AdaptResult:
    model: ModelState
    epochs_run: int
    loss_trace: list[float] = field(default_factory=list)
    wall_time: float = 0.0


def discount_kernel(t: int, i: int, gamma: float) -> float:
    """Recency kernel exp(-|t - i| / gamma)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return math.exp(-abs(t - i) / gamma)


def kernel_weights(t: int, gamma: float) -> np.ndarray:
    """Weights for the supervised pairs i = 1..t-1 of a prefix at time t."""
    i = np.arange(1, t)
    return np.exp(-(t - i) / gamma)


class _PrefixTerm:
    """Recency-weighted loss over the observed prefix.

    When only the output group adapts, the hidden trajectory is fixed, so
    it is computed once and each epoch reduces to a batched head pass.
    """

    def __init__(
        self, pop: ModelState, prefix: EventSequence, cfg: AdaptConfig
    ):
        t = len(prefix)
        self.prefix = prefix
        self.weights = kernel_weights(t, cfg.gamma)
        self.fast = cfg.param_mask == frozenset({"output"})
        if self.fast:
            self.hidden = unroll(pop, prefix.inputs[: t - 1])

    def eval(self, model: ModelState) -> tuple[float, dict[str, np.ndarray]]:
        if self.fast:
            return head_backward(
                model, self.hidden, self.prefix.targets, self.weights
            )
        return backward(model, self.prefix, self.weights, l2_weight=0.0)


class _NeighborTerm:
    """Head loss over a retrieved neighborhood of stored hidden states."""

    def __init__(self, neighborhood: Neighborhood):
        self.neighborhood = neighborhood

    def eval(self, model: ModelState) -> tuple[float, dict[str, np.ndarray]]:
        return head_backward(
            model, self.neighborhood.keys, self.neighborhood.values
        )


def _optimize(
    source: ModelState, terms: list[tuple[float, object]], cfg: AdaptConfig
) -> AdaptResult:
    """Clone `source`, then repeat { evaluate objective, update } until the
    epoch-over-epoch decrease drops below epsilon or the epoch cap."""
    start = time.perf_counter()
    model = clone_model(source)
    reset_optimizer(model)
    terms = [(coef, term) for coef, term in terms if coef != 0.0]
    trace: list[float] = []
    prev_loss = math.inf
    epochs = 0
    while epochs < cfg.max_adapt_epochs:
        loss = 0.0
        grads = None
        for coef, term in terms:
            term_loss, term_grads = term.eval(model)
            loss += coef * term_loss
            if grads is None:
                if coef != 1.0:
                    for g in term_grads.values():
                        g *= coef
                grads = term_grads
            else:
                add_grads(grads, term_grads, coef)
        if grads is None:
            grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        trace.append(loss)
        optimizer_step(model, grads, cfg.param_mask, lr=cfg.adapt_lr)
        epochs += 1
        if prev_loss - loss < cfg.epsilon:
            break
        prev_loss = loss
    return AdaptResult(model, epochs, trace, time.perf_counter() - start)


def adapt_self(
    pop: ModelState,
    prefix: EventSequence,
    cfg: AdaptConfig,
    warm: ModelState | None = None,
) -> AdaptResult:
    """Adapt a clone of `pop` to the patient's own prefix (time t is the
    prefix length).  A prefix without a supervised pair returns the clone
    unmodified with epochs_run = 0."""
    cfg.validate()
    source = warm if (cfg.warm_start and warm is not None) else pop
    if len(prefix) < 2:
        return AdaptResult(clone_model(source), 0, [], 0.0)
    return _optimize(source, [(1.0, _PrefixTerm(pop, prefix, cfg))], cfg)


def adapt_subpopulation(
    pop: ModelState,
    bank: MemoryBank,
    h_query: np.ndarray,
    cfg: AdaptConfig,
    warm: ModelState | None = None,
) -> AdaptResult:
    """Adapt a clone of `pop` to the k bank entries nearest to h_query
    (the current hidden state under the population model)."""
    cfg.validate()
    neighborhood = knn(bank, h_query, cfg.k_neighbors)
    source = warm if (cfg.warm_start and warm is not None) else pop
    return _optimize(source, [(1.0, _NeighborTerm(neighborhood))], cfg)


def adapt_combined(
    pop: ModelState,
    bank: MemoryBank,
    prefix: EventSequence,
    cfg: AdaptConfig,
    h_query: np.ndarray | None = None,
    warm: ModelState | None = None,
) -> AdaptResult:
    """Adapt one clone to self + mu * subpop.  With mu = 0 the trajectory
    is bit-identical to adapt_self; with an empty prefix the self term
    vanishes and (at mu = 1) the trajectory matches adapt_subpopulation.
    The retrieval query is the population model's hidden state at the end
    of the prefix unless h_query is given."""
    cfg.validate()
    terms: list[tuple[float, object]] = []
    if len(prefix) >= 2:
        terms.append((1.0, _PrefixTerm(pop, prefix, cfg)))
    if cfg.mu != 0.0:
        if h_query is None:
            h_query = unroll(pop, prefix.inputs)[-1]
        terms.append((cfg.mu, _NeighborTerm(knn(bank, h_query, cfg.k_neighbors))))
    source = warm if (cfg.warm_start and warm is not None) else pop
    if not terms:
        return AdaptResult(clone_model(source), 0, [], 0.0)
    return _optimize(source, terms, cfg)


def predict_next(
    model: ModelState,
    inputs_prefix: np.ndarray,
    pop_hidden: np.ndarray | None = None,
    output_only: bool = True,
) -> np.ndarray:
    """Next-step probabilities after the prefix.  When the model shares the
    population model's embedding and cell (output-only adaptation) the
    caller can pass the population hidden state to skip re-unrolling."""
    if output_only and pop_hidden is not None:
        return head_forward(model, pop_hidden)
    return head_forward(model, unroll(model, inputs_prefix)[-1])
