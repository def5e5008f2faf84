"""Event vocabularies, raw event logs, and windowed binary sequences.

A raw log is a list of (event_name, timestamp_hours) pairs per patient.
Discretization buckets events into fixed windows of `window_hours` using
half-open intervals [t*W, (t+1)*W), so a timestamp exactly on a boundary
belongs to the later window.  Each window becomes a multi-hot vector over
the vocabulary; the supervised targets are the next window's vector
restricted to the vocabulary's target mask, so a sequence of length T
carries T-1 supervised steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyLogError, NoKnownEventsError, ParseError

logger = logging.getLogger(__name__)

CATEGORIES = ("medication", "lab", "procedure", "physiological")

DEFAULT_WINDOW_HOURS = 24.0


class EventVocabulary:
    """Ordered event-type vocabulary with per-type category and target flag.

    Indices are contiguous and assigned by entry order.  `target_mask`
    marks which event types are prediction targets; the target space is
    the masked subset in vocabulary order.
    """

    def __init__(self, names, categories, target_mask):
        names = list(names)
        categories = list(categories)
        mask = np.asarray(target_mask, dtype=bool)
        if len(names) != len(categories) or len(names) != mask.shape[0]:
            raise ValueError("names, categories, and target_mask lengths differ")
        if len(set(names)) != len(names):
            raise ValueError("duplicate event names in vocabulary")
        for cat in categories:
            if cat not in CATEGORIES:
                raise ValueError(f"unknown category {cat!r}")
        if not mask.any():
            raise ValueError("target mask selects no event types")
        self.names = names
        self.categories = categories
        self.target_mask = mask
        self._index = {name: i for i, name in enumerate(names)}
        self.target_indices = np.flatnonzero(mask)

    def __len__(self) -> int:
        return len(self.names)

    @property
    def n_targets(self) -> int:
        return int(self.target_mask.sum())

    def index_of(self, name: str) -> int | None:
        return self._index.get(name)

    def target_category(self, j: int) -> str:
        """Category of the j-th target event (target-space index)."""
        return self.categories[self.target_indices[j]]

    def target_name(self, j: int) -> str:
        return self.names[self.target_indices[j]]


@dataclass
class RawEventLog:
    """Events of one patient, sorted by timestamp (ties keep file order)."""

    patient_id: str
    events: list[tuple[str, float]] = field(default_factory=list)


@dataclass
class EventSequence:
    """Windowed binary sequence for one patient.

    inputs:  (T, |E|) 0/1 matrix, one row per window.
    targets: (T-1, |E'|) 0/1 matrix; targets[t] is the target-masked
             projection of inputs[t+1].
    """

    patient_id: str
    inputs: np.ndarray
    targets: np.ndarray
    window_hours: float = DEFAULT_WINDOW_HOURS

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def prefix(self, t: int) -> "EventSequence":
        """Observed prefix through window t (1-indexed): inputs y_1..y_t
        and the t-1 targets whose outcomes are known by time t."""
        if not 1 <= t <= len(self):
            raise ValueError(f"prefix length {t} outside [1, {len(self)}]")
        return EventSequence(
            self.patient_id, self.inputs[:t], self.targets[: t - 1], self.window_hours
        )


def make_targets(inputs: np.ndarray, target_mask: np.ndarray) -> np.ndarray:
    """Next-step labels: row t is inputs[t+1] restricted to the mask."""
    return inputs[1:][:, np.asarray(target_mask, dtype=bool)].copy()


def discretize(
    log: RawEventLog, vocab: EventVocabulary, window_hours: float = DEFAULT_WINDOW_HOURS
) -> EventSequence:
    """Bucket a raw log into half-open windows of `window_hours`.

    Unknown event names are counted and skipped (logged as a warning);
    a log whose events are all unknown raises NoKnownEventsError.
    """
    if window_hours <= 0:
        raise ValueError("window_hours must be positive")
    if not log.events:
        raise EmptyLogError(f"patient {log.patient_id}: log has no events")
    known = []
    unknown = 0
    last_ts = None
    for name, ts in log.events:
        if not np.isfinite(ts) or ts < 0:
            raise ParseError(f"patient {log.patient_id}: bad timestamp {ts!r}")
        if last_ts is not None and ts < last_ts:
            raise ValueError(f"patient {log.patient_id}: events not sorted")
        last_ts = ts
        idx = vocab.index_of(name)
        if idx is None:
            unknown += 1
        else:
            known.append((idx, ts))
    if unknown:
        logger.warning(
            "patient %s: skipped %d events with unknown names", log.patient_id, unknown
        )
    if not known:
        raise NoKnownEventsError(
            f"patient {log.patient_id}: no events match the vocabulary"
        )
    # Half-open windows: an event at exactly t*W lands in window t, so the
    # window count is floor(last/W)+1 (equals ceil(last/W) off boundaries).
    n_windows = int(known[-1][1] // window_hours) + 1
    inputs = np.zeros((n_windows, len(vocab)), dtype=np.float64)
    for idx, ts in known:
        inputs[int(ts // window_hours), idx] = 1.0
    targets = make_targets(inputs, vocab.target_mask)
    return EventSequence(log.patient_id, inputs, targets, window_hours)


def load_event_log(path, format: str = "tsv") -> list[RawEventLog]:
    """Read a patient event-log file.

    Format: one event per line, `patient_id \\t event_name \\t timestamp_hours`,
    UTF-8, `#` comment lines ignored.  Events out of order within a patient
    are sorted (stable) with a warning.  Logs are returned in order of each
    patient's first appearance.
    """
    if format != "tsv":
        raise ValueError(f"unsupported event-log format {format!r}")
    by_patient: dict[str, list[tuple[str, float]]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            pid, name, ts_text = parts
            try:
                ts = float(ts_text)
            except ValueError:
                raise ParseError(
                    f"{path}:{lineno}: bad timestamp {ts_text!r}"
                ) from None
            if not np.isfinite(ts) or ts < 0:
                raise ParseError(f"{path}:{lineno}: negative or non-finite timestamp")
            if pid not in by_patient:
                by_patient[pid] = []
                order.append(pid)
            by_patient[pid].append((name, ts))
    logs = []
    for pid in order:
        events = by_patient[pid]
        if any(events[i][1] > events[i + 1][1] for i in range(len(events) - 1)):
            logger.warning("patient %s: timestamps out of order, sorting", pid)
            events = sorted(events, key=lambda ev: ev[1])
        logs.append(RawEventLog(pid, events))
    return logs


def save_event_log(logs: list[RawEventLog], path) -> None:
    """Write logs in the canonical form load_event_log produces."""
    with open(path, "w", encoding="utf-8") as fh:
        for log in logs:
            for name, ts in log.events:
                fh.write(f"{log.patient_id}\t{name}\t{float(ts)!r}\n")


def load_vocabulary(path) -> EventVocabulary:
    """Read a vocabulary file: `event_name \\t category \\t target_flag(0|1)`,
    indexed by line order, `#` comments ignored."""
    names, categories, flags = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            name, category, flag = parts
            if category not in CATEGORIES:
                raise ParseError(f"{path}:{lineno}: unknown category {category!r}")
            if flag not in ("0", "1"):
                raise ParseError(f"{path}:{lineno}: target flag must be 0 or 1")
            names.append(name)
            categories.append(category)
            flags.append(flag == "1")
    if not names:
        raise ParseError(f"{path}: vocabulary file has no entries")
    return EventVocabulary(names, categories, flags)


def save_vocabulary(vocab: EventVocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, cat, flag in zip(vocab.names, vocab.categories, vocab.target_mask):
            fh.write(f"{name}\t{cat}\t{1 if flag else 0}\n")


def split_train_test(
    data: list, ratio: float, seed: int
) -> tuple[list, list]:
    """Patient-level split: shuffle with the seeded generator, first
    round(ratio*n) go to train.  Both sides are guaranteed non-empty."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be strictly between 0 and 1")
    n = len(data)
    if n < 2:
        raise ValueError("need at least 2 patients to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratio * n))
    n_train = min(max(n_train, 1), n - 1)
    train = [data[i] for i in perm[:n_train]]
    test = [data[i] for i in perm[n_train:]]
    return train, test
