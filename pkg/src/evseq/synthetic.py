"""Synthetic cohort generator with planted subpopulation dynamics.

Each subpopulation owns a conditional-probability table over the shared
event vocabulary.  Event types are dealt round-robin into per-subpopulation
blocks, and within its own block a subpopulation plants a small causal
cascade: one gateway event that switches on by itself and then persists,
a few late-onset events that only become likely while the gateway is
active, and a handful of flare events that also key off the gateway but
start out present.  Event types belonging to other blocks idle at low
background rates.  On top of the shared tables, every patient rewires a
random subset of event types to private chronic dynamics (high
persistence, fast relight) that ignore the subpopulation table entirely.

Ground truth (which patient belongs to which subpopulation) is stored
separately from the event logs so evaluation code can grade subpopulation
recovery without leaking labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import (
    CATEGORIES,
    DEFAULT_WINDOW_HOURS,
    EventSequence,
    EventVocabulary,
    RawEventLog,
    make_targets,
)

# Per-role transition ranges.  "active" is P(fire | parent fired last window),
# "onset" is P(fire | parent quiet).  Gateways parent themselves, so for them
# the pair acts as persistence/onset of a slow self-sustaining process.
GATEWAY_ACTIVE = (0.75, 0.90)
GATEWAY_ONSET = (0.06, 0.10)
LATE_ACTIVE = (0.20, 0.35)
LATE_ONSET = (0.003, 0.01)
FLARE_ACTIVE = (0.35, 0.55)
FLARE_ONSET = (0.01, 0.03)
BACKGROUND_ACTIVE = (0.08, 0.18)
BACKGROUND_ONSET = (0.002, 0.008)

# Block layout: one gateway, then up to this many late-onset events, the
# rest of the block flares.
N_LATE_ONSET = 4

# Patient-private chronic dynamics (self-parented, independent of tables).
CHRONIC_PERSIST = (0.82, 0.95)
CHRONIC_RELIGHT = (0.45, 0.65)


@dataclass
class SubpopTable:
    """First-order conditional table: each event fires based on one parent.

    parent[j] is the index whose previous-window value gates event j.
    starts_lit[j] marks events that are already present in the first
    window (scaled by SyntheticSpec.base_rates); gateway and late-onset
    events start dark so their cascade has an observable onset.
    """

    parent: np.ndarray
    p_active: np.ndarray
    p_inactive: np.ndarray
    starts_lit: np.ndarray

    def conditional(self, prev: np.ndarray) -> np.ndarray:
        """Per-event fire probabilities given the previous window."""
        return np.where(prev[self.parent] > 0, self.p_active, self.p_inactive)


def derive_table(
    seed: int,
    n_event_types: int,
    subpop: int = 0,
    n_subpopulations: int = 1,
) -> SubpopTable:
    """Build the conditional table for one subpopulation.

    The subpopulation's own block (event indices congruent to `subpop`
    modulo `n_subpopulations`) carries the planted cascade; everything
    else is background.  Deterministic given the seed.
    """
    if n_event_types < 1:
        raise ValueError("n_event_types must be >= 1")
    if not 0 <= subpop < n_subpopulations:
        raise ValueError("subpop must be in [0, n_subpopulations)")
    rng = np.random.default_rng(seed)
    n = n_event_types
    block = np.flatnonzero(np.arange(n) % n_subpopulations == subpop)
    if block.size == 0:
        raise ValueError("empty block: need n_event_types >= n_subpopulations")
    gateway = block[0]
    n_late = min(N_LATE_ONSET, block.size - 1)
    late = block[1 : 1 + n_late]
    flare = block[1 + n_late :]

    parent = np.arange(n)
    parent[late] = gateway
    parent[flare] = gateway

    # Draw order is fixed: background for all, then role overrides.
    p_active = rng.uniform(*BACKGROUND_ACTIVE, n)
    p_inactive = rng.uniform(*BACKGROUND_ONSET, n)
    p_active[gateway] = rng.uniform(*GATEWAY_ACTIVE)
    p_inactive[gateway] = rng.uniform(*GATEWAY_ONSET)
    p_active[late] = rng.uniform(*LATE_ACTIVE, late.size)
    p_inactive[late] = rng.uniform(*LATE_ONSET, late.size)
    p_active[flare] = rng.uniform(*FLARE_ACTIVE, flare.size)
    p_inactive[flare] = rng.uniform(*FLARE_ONSET, flare.size)

    starts_lit = np.ones(n, dtype=bool)
    starts_lit[gateway] = False
    starts_lit[late] = False
    return SubpopTable(
        parent=parent,
        p_active=p_active,
        p_inactive=p_inactive,
        starts_lit=starts_lit,
    )


@dataclass
class SyntheticSpec:
    """Parameters for one synthetic cohort."""

    n_patients: int = 200
    n_event_types: int = 20
    n_subpopulations: int = 3
    min_len: int = 20
    max_len: int = 40
    base_rates: float | list[float] = 1.0
    subpop_transition_seeds: list[int] | None = None
    patient_noise: float = 0.3
    rng_seed: int = 7

    def validate(self) -> None:
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if self.n_event_types < 2:
            raise ValueError("n_event_types must be >= 2")
        if self.n_subpopulations < 1:
            raise ValueError("n_subpopulations must be >= 1")
        if self.n_subpopulations > self.n_event_types:
            raise ValueError("need at least one event type per subpopulation")
        if not 2 <= self.min_len <= self.max_len:
            raise ValueError("need 2 <= min_len <= max_len")
        if not 0.0 <= self.patient_noise <= 1.0:
            raise ValueError("patient_noise must be in [0, 1]")
        rates = self.base_rate_vector()
        if rates.shape != (self.n_event_types,):
            raise ValueError("base_rates length must match n_event_types")
        if np.any(rates < 0.0) or np.any(rates > 1.0):
            raise ValueError("base_rates must be probabilities")
        if self.subpop_transition_seeds is not None:
            if len(self.subpop_transition_seeds) != self.n_subpopulations:
                raise ValueError("need one transition seed per subpopulation")

    def base_rate_vector(self) -> np.ndarray:
        """First-window presence probability for events that start lit."""
        if np.isscalar(self.base_rates):
            return np.full(self.n_event_types, float(self.base_rates))
        return np.asarray(self.base_rates, dtype=np.float64)

    def table_seeds(self) -> list[int]:
        if self.subpop_transition_seeds is not None:
            return list(self.subpop_transition_seeds)
        return [self.rng_seed + 101 * (s + 1) for s in range(self.n_subpopulations)]


def make_synthetic_vocabulary(n_event_types: int) -> EventVocabulary:
    names = [f"evt_{i:03d}" for i in range(n_event_types)]
    categories = [CATEGORIES[i % len(CATEGORIES)] for i in range(n_event_types)]
    return EventVocabulary(
        names=names,
        categories=categories,
        target_mask=np.ones(n_event_types, dtype=bool),
    )


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[list[EventSequence], dict[str, int]]:
    """Sample a cohort of event sequences from planted dynamics.

    Deterministic given spec.rng_seed.  Returns (sequences, ground truth)
    where ground truth maps patient_id to its subpopulation.  Each patient
    draws its subpopulation and length up front, rewires
    round(patient_noise * n_event_types) event types to private chronic
    dynamics, and then rolls the first-order process forward: window t+1
    fires each event according to its conditional given window t.
    """
    spec.validate()
    n = spec.n_event_types
    tables = [
        derive_table(seed, n, s, spec.n_subpopulations)
        for s, seed in enumerate(spec.table_seeds())
    ]
    base = spec.base_rate_vector()
    mask = np.ones(n, dtype=bool)

    assign_rng = np.random.default_rng([spec.rng_seed, 0])
    assignments = assign_rng.integers(0, spec.n_subpopulations, size=spec.n_patients)
    lengths = assign_rng.integers(spec.min_len, spec.max_len + 1, size=spec.n_patients)
    n_chronic = int(round(spec.patient_noise * n))

    sequences: list[EventSequence] = []
    ground_truth: dict[str, int] = {}
    for p in range(spec.n_patients):
        table = tables[int(assignments[p])]
        rng = np.random.default_rng([spec.rng_seed, 1, p])
        chronic_rng = np.random.default_rng([spec.rng_seed, 2, p])
        chronic_idx = chronic_rng.choice(n, size=n_chronic, replace=False)
        chronic = np.zeros(n, dtype=bool)
        chronic[chronic_idx] = True
        # Full-size draws keep the stream independent of which events are
        # chronic, so varying patient_noise does not reshuffle dynamics.
        p_persist = chronic_rng.uniform(*CHRONIC_PERSIST, size=n)
        p_relight = chronic_rng.uniform(*CHRONIC_RELIGHT, size=n)

        n_windows = int(lengths[p])
        inputs = np.zeros((n_windows, n), dtype=np.float64)
        start_p = np.where(table.starts_lit, base, 0.0)
        inputs[0] = rng.random(n) < np.where(chronic, 1.0, start_p)
        for t in range(1, n_windows):
            prev = inputs[t - 1]
            probs = table.conditional(prev)
            own = np.where(prev == 1, p_persist, p_relight)
            probs = np.where(chronic, own, probs)
            inputs[t] = rng.random(n) < probs

        pid = f"p{p:04d}"
        ground_truth[pid] = int(assignments[p])
        sequences.append(
            EventSequence(
                patient_id=pid,
                inputs=inputs,
                targets=make_targets(inputs, mask),
                window_hours=DEFAULT_WINDOW_HOURS,
            )
        )
    return sequences, ground_truth


def sequences_to_event_logs(
    sequences: list[EventSequence], vocab: EventVocabulary
) -> list[RawEventLog]:
    """Render binary windows back into timestamped raw logs.

    Every event present in window t is stamped at t * window_hours, so
    discretizing the log reproduces the occupied prefix of the sequence.
    """
    logs = []
    for seq in sequences:
        events = []
        for t in range(len(seq)):
            ts = t * seq.window_hours
            for j in np.flatnonzero(seq.inputs[t] > 0):
                events.append((vocab.names[int(j)], ts))
        logs.append(RawEventLog(patient_id=seq.patient_id, events=events))
    return logs


def save_ground_truth(ground_truth: dict[str, int], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("patient_id\tsubpopulation\n")
        for pid, subpop in ground_truth.items():
            fh.write(f"{pid}\t{int(subpop)}\n")


def load_ground_truth(path: str | Path) -> dict[str, int]:
    path = Path(path)
    out: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("patient_id"):
            raise ValueError("unrecognized ground-truth file")
        for line in fh:
            parts = line.strip().split("\t")
            if len(parts) != 2:
                continue
            out[parts[0]] = int(parts[1])
    return out
