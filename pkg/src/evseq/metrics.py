"""Ranking-quality evaluation of per-step prediction records.

The headline metric is area under the precision-recall curve in the
average-precision (step-sum) formulation: scores are sorted descending,
tied scores are collapsed into one block, and each block contributes its
end-of-block precision times its recall increment.  A pool with no
positive labels has no defined value and yields NaN, which reports flag
rather than fold into averages.

Overall AUPRC is micro-pooled (every (score, label) instance in one
pool) by default; macro (mean of per-event values) is also reported.
Category rows macro-average the per-event values within the category.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import EventSequence, EventVocabulary
from .switching import LABELS, SwitchTrace


@dataclass
class PredictionRecord:
    """One strategy's prediction of one patient-step's target vector.

    mask, when set, limits which components count as instances (used by
    the repetitive / non-repetitive split)."""

    patient_id: str
    step: int
    strategy: str
    scores: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None

    def instance_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.scores.shape[0], dtype=bool)
        return self.mask


@dataclass
class MetricReport:
    strategy: str
    auprc_micro: float
    auprc_macro: float
    per_step: dict[int, float]
    per_event: dict[int, float]
    per_category: dict[str, float]
    counts_per_step: dict[int, int]
    event_occurrence: dict[int, float]
    n_instances: int
    events_without_positives: list[int]
    repetitive_auprc: float | None = None
    non_repetitive_auprc: float | None = None
    repetitive_instances: int = 0
    non_repetitive_instances: int = 0


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision over a flat pool of (score, binary label) pairs.

    NaN when the pool is empty or has no positive labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("auprc expects matching 1-D scores and labels")
    n = scores.shape[0]
    n_pos = float(labels.sum())
    if n == 0 or n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    pp = np.arange(1, n + 1, dtype=np.float64)
    # End of each tied-score block.
    block_end = np.ones(n, dtype=bool)
    block_end[:-1] = s[:-1] != s[1:]
    tp_end = tp[block_end]
    prec = tp_end / pp[block_end]
    rec_delta = np.diff(np.concatenate([[0.0], tp_end])) / n_pos
    return float(np.sum(prec * rec_delta))


def _pool(records: list[PredictionRecord]) -> tuple[np.ndarray, np.ndarray]:
    scores, labels = [], []
    for r in records:
        m = r.instance_mask()
        scores.append(r.scores[m])
        labels.append(r.labels[m])
    if not scores:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(scores), np.concatenate(labels)


def evaluate(
    records: list[PredictionRecord],
    vocab: EventVocabulary,
    sequences: list[EventSequence] | None = None,
) -> dict[str, MetricReport]:
    """Per-strategy reports.  When `sequences` is given, the repetitive /
    non-repetitive breakdown is filled in as well."""
    by_strategy: dict[str, list[PredictionRecord]] = {}
    for r in records:
        by_strategy.setdefault(r.strategy, []).append(r)

    reports = {}
    for strategy, recs in by_strategy.items():
        reports[strategy] = _evaluate_strategy(strategy, recs, vocab)
        if sequences is not None:
            rep, nonrep = split_repetitive(recs, sequences, vocab)
            rep_s, rep_y = _pool(rep)
            non_s, non_y = _pool(nonrep)
            report = reports[strategy]
            report.repetitive_auprc = auprc(rep_s, rep_y)
            report.non_repetitive_auprc = auprc(non_s, non_y)
            report.repetitive_instances = int(rep_s.shape[0])
            report.non_repetitive_instances = int(non_s.shape[0])
    return reports


def _evaluate_strategy(strategy, recs, vocab) -> MetricReport:
    n_targets = vocab.n_targets
    pooled_s, pooled_y = _pool(recs)
    micro = auprc(pooled_s, pooled_y)

    per_step: dict[int, float] = {}
    counts: dict[int, int] = {}
    by_step: dict[int, list[PredictionRecord]] = {}
    for r in recs:
        by_step.setdefault(r.step, []).append(r)
    for step in sorted(by_step):
        s, y = _pool(by_step[step])
        per_step[step] = auprc(s, y)
        counts[step] = len(by_step[step])

    per_event: dict[int, float] = {}
    occurrence: dict[int, float] = {}
    no_positives: list[int] = []
    for j in range(n_targets):
        s = np.array([r.scores[j] for r in recs if r.instance_mask()[j]])
        y = np.array([r.labels[j] for r in recs if r.instance_mask()[j]])
        per_event[j] = auprc(s, y)
        occurrence[j] = float(y.mean()) if y.size else float("nan")
        if y.size and y.sum() == 0:
            no_positives.append(j)

    defined = [v for v in per_event.values() if not np.isnan(v)]
    macro = float(np.mean(defined)) if defined else float("nan")

    per_category: dict[str, float] = {}
    by_cat: dict[str, list[float]] = {}
    for j in range(n_targets):
        by_cat.setdefault(vocab.target_category(j), []).append(per_event[j])
    for cat, vals in sorted(by_cat.items()):
        defined = [v for v in vals if not np.isnan(v)]
        per_category[cat] = float(np.mean(defined)) if defined else float("nan")

    return MetricReport(
        strategy=strategy,
        auprc_micro=micro,
        auprc_macro=macro,
        per_step=per_step,
        per_event=per_event,
        per_category=per_category,
        counts_per_step=counts,
        event_occurrence=occurrence,
        n_instances=int(pooled_s.shape[0]),
        events_without_positives=no_positives,
    )


def split_repetitive(
    records: list[PredictionRecord],
    sequences: list[EventSequence],
    vocab: EventVocabulary | None = None,
) -> tuple[list[PredictionRecord], list[PredictionRecord]]:
    """Split prediction instances by whether the target event type already
    appeared in the patient's inputs strictly before the target step.

    A record at step t predicts the step t+1 targets, so the lookback is
    inputs y_1..y_t.  Returns masked copies of the records; every input
    instance lands in exactly one side."""
    seq_by_pid = {s.patient_id: s for s in sequences}
    seen_by_pid: dict[str, np.ndarray] = {}
    for pid, seq in seq_by_pid.items():
        if vocab is not None:
            cols = seq.inputs[:, vocab.target_indices]
        else:
            cols = seq.inputs
        seen_by_pid[pid] = np.cumsum(cols, axis=0) > 0

    repetitive, non_repetitive = [], []
    for r in records:
        seen = seen_by_pid[r.patient_id]
        if seen.shape[1] != r.scores.shape[0]:
            raise ValueError(
                "target dimension mismatch between records and sequences;"
                " pass the vocabulary when targets are masked"
            )
        rep_mask = seen[r.step - 1] & r.instance_mask()
        non_mask = ~seen[r.step - 1] & r.instance_mask()
        repetitive.append(
            PredictionRecord(r.patient_id, r.step, r.strategy, r.scores, r.labels, rep_mask)
        )
        non_repetitive.append(
            PredictionRecord(r.patient_id, r.step, r.strategy, r.scores, r.labels, non_mask)
        )
    return repetitive, non_repetitive


def selection_ratio(
    traces: list[SwitchTrace],
) -> tuple[dict[int, dict[str, float]], dict[int, int]]:
    """Per step, the fraction of patients whose global switch chose each
    label, plus the patient count per step.  Fractions sum to 1."""
    counts: dict[int, dict[str, int]] = {}
    for trace in traces:
        for st in trace.steps:
            counts.setdefault(st.step, {z: 0 for z in LABELS})[st.chosen] += 1
    ratios: dict[int, dict[str, float]] = {}
    totals: dict[int, int] = {}
    for step in sorted(counts):
        total = sum(counts[step].values())
        totals[step] = total
        ratios[step] = {z: counts[step][z] / total for z in LABELS}
    return ratios, totals


def performance_gain_table(
    report_a: MetricReport, report_b: MetricReport
) -> list[dict]:
    """Per-event relative gain of strategy B over strategy A in percent:
    100 * (B - A) / A, flagged None when A is zero or either side is
    undefined.  Rows also carry the event's occurrence rate."""
    rows = []
    for j in sorted(report_a.per_event):
        a = report_a.per_event[j]
        b = report_b.per_event.get(j, float("nan"))
        if np.isnan(a) or np.isnan(b) or a == 0.0:
            gain = None
        else:
            gain = 100.0 * (b - a) / a
        rows.append(
            {
                "event_index": j,
                "occurrence": report_a.event_occurrence.get(j, float("nan")),
                "auprc_a": a,
                "auprc_b": b,
                "gain_pct": gain,
            }
        )
    return rows
