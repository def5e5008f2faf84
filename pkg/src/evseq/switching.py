"""Meta-level switching between the population model and adapted models.

At every prediction step of a test patient the pool holds four models:
P (population), S (subpopulation-adapted), I (self-adapted), and
C (combined).  Each model's realized prediction errors are kept in a
per-patient history; switching picks, per step, the model whose
recency-discounted historical loss is smallest.  Histories update only
with observed outcomes, so selection at step t sees errors from steps
i <= t-1 and never looks ahead.  The per-event variant picks a model
independently for every target event type.

A model is tracked in the history only from the first step its
adaptation preconditions hold (self-adaptation needs one supervised
pair, so step 2); an empty history scores +inf and is never selected.
Ties are broken by the fixed label order P, S, C, I.  At step 1 every
history is empty and the population model is selected by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adaptation import AdaptConfig, adapt_combined, adapt_self, adapt_subpopulation
from .errors import TooShortError
from .events import EventSequence
from .memory import MemoryBank
from .model import ModelState, bce_components, cell_step, head_forward, unroll

LABELS = ("P", "S", "C", "I")

STRATEGY_POP = "GRU-POP"
STRATEGY_SUBPOP = "SubpopAdap"
STRATEGY_SELF = "SelfAdapt"
STRATEGY_COMBINED = "CombinedAdap"
STRATEGY_SWITCH = "Meta-Switch"
STRATEGY_SWITCH_EVENT = "Meta-Switch-Event"

STRATEGIES = (
    STRATEGY_POP,
    STRATEGY_SUBPOP,
    STRATEGY_SELF,
    STRATEGY_COMBINED,
    STRATEGY_SWITCH,
    STRATEGY_SWITCH_EVENT,
)

_LABEL_TO_STRATEGY = {
    "P": STRATEGY_POP,
    "S": STRATEGY_SUBPOP,
    "I": STRATEGY_SELF,
    "C": STRATEGY_COMBINED,
}


@dataclass
class SwitchConfig:
    gamma: float = 3.0
    event_criterion: str = "last_step"  # or "discounted"

    def validate(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.event_criterion not in ("last_step", "discounted"):
            raise ValueError(
                f"event_criterion must be last_step or discounted,"
                f" got {self.event_criterion!r}"
            )


@dataclass
class StepTrace:
    step: int
    losses: dict[str, float]
    chosen: str
    event_chosen: list[str]
    predictions: dict[str, np.ndarray]
    target: np.ndarray


@dataclass
class SwitchTrace:
    patient_id: str
    steps: list[StepTrace] = field(default_factory=list)


def discounted_model_loss(
    history: list[tuple[int, np.ndarray]], t: int, gamma: float
) -> float:
    """Sum over recorded steps i (all < t) of the total prediction error
    at i discounted by exp(-(t - i) / gamma); +inf for an empty history."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if not history:
        return math.inf
    total = 0.0
    for i, e_vec in history:
        if i >= t:
            raise ValueError(f"history step {i} not strictly before t={t}")
        total += float(np.sum(e_vec)) * math.exp(-(t - i) / gamma)
    return total


def select_global(losses: dict[str, float]) -> str:
    """Label with the smallest loss; ties (including all +inf) resolve by
    the fixed order P, S, C, I."""
    return min(LABELS, key=lambda z: (losses.get(z, math.inf), LABELS.index(z)))


def select_per_event(
    histories: dict[str, list[tuple[int, np.ndarray]]],
    t: int,
    n_targets: int,
    cfg: SwitchConfig,
) -> list[str]:
    """Per-event labels: for each target event, the model whose criterion
    (previous step's per-component error by default, or the discounted
    per-component history) is smallest, ties by the fixed label order."""
    criteria = np.full((len(LABELS), n_targets), math.inf)
    for zi, z in enumerate(LABELS):
        history = histories.get(z, [])
        if cfg.event_criterion == "last_step":
            for i, e_vec in history:
                if i == t - 1:
                    criteria[zi] = e_vec
                    break
        else:
            acc = None
            for i, e_vec in history:
                k = math.exp(-(t - i) / cfg.gamma)
                acc = k * e_vec if acc is None else acc + k * e_vec
            if acc is not None:
                criteria[zi] = acc
    # argmin returns the lowest index on ties, and LABELS is tie order.
    return [LABELS[int(np.argmin(criteria[:, j]))] for j in range(n_targets)]


class PoolBuilder:
    """Builds the per-step model pool from the frozen population model,
    the memory bank, and the adaptation settings."""

    def __init__(self, pop: ModelState, bank: MemoryBank, acfg: AdaptConfig):
        acfg.validate()
        self.pop = pop
        self.bank = bank
        self.acfg = acfg
        self.output_only = acfg.param_mask <= frozenset({"output"})
        self._warm: dict[str, ModelState] = {}

    def build(
        self, prefix: EventSequence, h_t: np.ndarray
    ) -> dict[str, ModelState]:
        """Models available at the current step; I needs one supervised
        pair so it joins the pool from step 2."""
        acfg = self.acfg
        warm = self._warm if acfg.warm_start else {}
        pool = {"P": self.pop}
        pool["S"] = adapt_subpopulation(
            self.pop, self.bank, h_t, acfg, warm=warm.get("S")
        ).model
        pool["C"] = adapt_combined(
            self.pop, self.bank, prefix, acfg, h_query=h_t, warm=warm.get("C")
        ).model
        if len(prefix) >= 2:
            pool["I"] = adapt_self(self.pop, prefix, acfg, warm=warm.get("I")).model
        if acfg.warm_start:
            self._warm = {z: m for z, m in pool.items() if z != "P"}
        return pool

    def predict(
        self, model: ModelState, h_pop: np.ndarray, inputs_prefix: np.ndarray
    ) -> np.ndarray:
        if self.output_only:
            return head_forward(model, h_pop)
        return head_forward(model, unroll(model, inputs_prefix)[-1])


def run_patient(
    builder: PoolBuilder, seq: EventSequence, scfg: SwitchConfig
) -> tuple[dict[str, np.ndarray], SwitchTrace]:
    """Online pass over one test sequence.

    Returns per-strategy prediction matrices of shape (T-1, n_targets)
    (row t-1 is the step-t prediction of the step t+1 targets) and the
    switching trace.  The emitted prediction at step t depends only on
    inputs y_1..y_t and targets observed through step t.
    """
    scfg.validate()
    if len(seq) < 2:
        raise TooShortError(
            f"patient {seq.patient_id}: need length >= 2, got {len(seq)}"
        )
    n_steps = len(seq) - 1
    n_targets = seq.targets.shape[1]
    out = {s: np.empty((n_steps, n_targets)) for s in STRATEGIES}
    trace = SwitchTrace(seq.patient_id)
    histories: dict[str, list[tuple[int, np.ndarray]]] = {z: [] for z in LABELS}

    h = np.zeros(builder.pop.config.hidden_dim)
    for t in range(1, n_steps + 1):
        h = cell_step(builder.pop, h, seq.inputs[t - 1])
        prefix = seq.prefix(t)
        pool = builder.build(prefix, h)
        preds = {
            z: builder.predict(m, h, prefix.inputs) for z, m in pool.items()
        }

        losses = {
            z: discounted_model_loss(histories[z], t, scfg.gamma) for z in LABELS
        }
        chosen = select_global(losses)
        event_chosen = select_per_event(histories, t, n_targets, scfg)

        # A label outside the pool has an empty history, scores +inf, and
        # can only be chosen as the all-inf default P, which is present.
        row = t - 1
        out[STRATEGY_POP][row] = preds["P"]
        out[STRATEGY_SUBPOP][row] = preds["S"]
        out[STRATEGY_SELF][row] = preds.get("I", preds["P"])
        out[STRATEGY_COMBINED][row] = preds["C"]
        out[STRATEGY_SWITCH][row] = preds[chosen]
        out[STRATEGY_SWITCH_EVENT][row] = np.array(
            [preds.get(event_chosen[j], preds["P"])[j] for j in range(n_targets)]
        )

        # Outcome observed; histories update after every emission above.
        target = seq.targets[t - 1]
        for z, p_z in preds.items():
            histories[z].append((t, bce_components(target, p_z)))

        trace.steps.append(
            StepTrace(
                step=t,
                losses=losses,
                chosen=chosen,
                event_chosen=event_chosen,
                predictions=preds,
                target=target,
            )
        )
    return out, trace
