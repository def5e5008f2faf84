"""Command-line pipeline: synth, train, build-memory, run, report.

Every stage reads and writes files under --out (default ./out), so the
full pipeline is:

    evseq synth --out work
    evseq train --out work
    evseq build-memory --out work
    evseq run --out work
    evseq report --out work

All stages are deterministic given the seed; rerunning a stage with the
same inputs reproduces its outputs byte for byte.  Errors exit non-zero
with a single machine-parsable line on stderr: ERROR:<CODE>: <message>.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import AdaptConfig
from .config import RunConfig, load_config
from .errors import EvseqError
from .events import (
    EventSequence,
    EventVocabulary,
    discretize,
    load_event_log,
    load_vocabulary,
    save_event_log,
    save_vocabulary,
    split_train_test,
)
from .memory import build_memory, load_bank, save_bank
from .metrics import (
    MetricReport,
    PredictionRecord,
    auprc,
    evaluate,
    performance_gain_table,
    selection_ratio,
)
from .model import ModelConfig, load_model, save_model
from .switching import (
    LABELS,
    STRATEGIES,
    STRATEGY_POP,
    STRATEGY_SWITCH_EVENT,
    PoolBuilder,
    StepTrace,
    SwitchTrace,
    run_patient,
)
from .synthetic import (
    generate_synthetic,
    make_synthetic_vocabulary,
    save_ground_truth,
    sequences_to_event_logs,
)
from .training import TrainConfig, grid_select_l2, train_population

logger = logging.getLogger("evseq")


def _fmt(x: float) -> str:
    return repr(float(x))


def _load_sequences(cfg: RunConfig) -> tuple[EventVocabulary, list[EventSequence]]:
    vocab = load_vocabulary(cfg.vocab_path)
    logs = load_event_log(cfg.data_path)
    return vocab, [discretize(log, vocab, cfg.run.window_hours) for log in logs]


def _split(cfg: RunConfig, sequences: list[EventSequence]):
    return split_train_test(sequences, cfg.run.split_ratio, cfg.split_seed)


def cmd_synth(cfg: RunConfig) -> int:
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    sequences, ground_truth = generate_synthetic(cfg.synthetic)
    vocab = make_synthetic_vocabulary(cfg.synthetic.n_event_types)
    logs = sequences_to_event_logs(sequences, vocab)
    save_event_log(logs, cfg.data_path)
    save_vocabulary(vocab, cfg.vocab_path)
    save_ground_truth(ground_truth, cfg.ground_truth_path)
    logger.info(
        "wrote %d patients, %d event types -> %s",
        len(sequences),
        len(vocab),
        cfg.out_dir,
    )
    return 0


def cmd_train(cfg: RunConfig) -> int:
    vocab, sequences = _load_sequences(cfg)
    train_data, _ = _split(cfg, sequences)
    mcfg = ModelConfig(
        n_input=len(vocab),
        n_target=vocab.n_targets,
        embed_dim=cfg.model.embed_dim,
        hidden_dim=cfg.model.hidden_dim,
        learning_rate=cfg.model.learning_rate,
        l2_weight=cfg.model.l2_weight,
        rng_seed=cfg.model_seed,
    )
    tcfg = TrainConfig(
        max_epochs=cfg.train.max_epochs,
        patience=cfg.train.patience,
        val_fraction=cfg.train.val_fraction,
        shuffle_seed=cfg.shuffle_seed,
    )
    if cfg.train.l2_grid:
        choice, scores = grid_select_l2(train_data, mcfg, tcfg, cfg.train.l2_grid)
        logger.info("l2 grid %s -> %s", scores, choice)
        tcfg.l2_weight = choice
        mcfg.l2_weight = choice
    model, report = train_population(train_data, mcfg, tcfg)
    save_model(model, cfg.model_path)
    with open(cfg.train_log_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, (tr, va) in enumerate(
            zip(report.train_losses, report.val_losses), start=1
        ):
            fh.write(f"{epoch},{_fmt(tr)},{_fmt(va)}\n")
    logger.info(
        "trained on %d patients, best epoch %d/%d, val loss %s",
        len(train_data),
        report.best_epoch,
        report.epochs_run,
        _fmt(min(report.val_losses)),
    )
    return 0


def cmd_build_memory(cfg: RunConfig) -> int:
    _, sequences = _load_sequences(cfg)
    train_data, _ = _split(cfg, sequences)
    model = load_model(cfg.model_path)
    bank = build_memory(model, train_data)
    save_bank(bank, cfg.bank_path)
    logger.info("memory bank: %d entries -> %s", len(bank), cfg.bank_path)
    return 0


def cmd_run(cfg: RunConfig) -> int:
    vocab, sequences = _load_sequences(cfg)
    _, test_data = _split(cfg, sequences)
    model = load_model(cfg.model_path)
    bank = load_bank(cfg.bank_path)
    builder = PoolBuilder(model, bank, cfg.adapt)

    all_outputs = []
    traces = []
    failures = 0
    for seq in sorted(test_data, key=lambda s: s.patient_id):
        try:
            outputs, trace = run_patient(builder, seq, cfg.switch)
        except EvseqError as exc:
            failures += 1
            logger.error("patient %s failed: %s", seq.patient_id, exc)
            continue
        all_outputs.append((seq, outputs))
        traces.append(trace)

    write_records(cfg.records_path, all_outputs)
    write_traces(cfg.traces_path, cfg.event_choices_path, traces)
    logger.info(
        "ran %d patients (%d failed) -> %s",
        len(all_outputs),
        failures,
        cfg.records_path,
    )
    if failures:
        logger.error("%d patients failed; outputs cover the rest", failures)
        return 1
    return 0


def write_records(path, all_outputs) -> None:
    """Canonical record order: patient, step, strategy (fixed order),
    event index."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("patient_id,step,strategy,event_index,score,label\n")
        for seq, outputs in all_outputs:
            for step in range(1, len(seq)):
                target = seq.targets[step - 1]
                for strategy in STRATEGIES:
                    scores = outputs[strategy][step - 1]
                    for j in range(scores.shape[0]):
                        fh.write(
                            f"{seq.patient_id},{step},{strategy},{j},"
                            f"{_fmt(scores[j])},{int(target[j])}\n"
                        )


def read_records(path, n_targets: int) -> list[PredictionRecord]:
    grouped: dict[tuple[str, int, str], PredictionRecord] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "patient_id,step,strategy,event_index,score,label":
            raise EvseqError(f"{path}: unexpected records header")
        for line in fh:
            pid, step, strategy, j, score, label = line.rstrip("\n").split(",")
            key = (pid, int(step), strategy)
            rec = grouped.get(key)
            if rec is None:
                rec = PredictionRecord(
                    pid,
                    int(step),
                    strategy,
                    np.zeros(n_targets),
                    np.zeros(n_targets),
                )
                grouped[key] = rec
            rec.scores[int(j)] = float(score)
            rec.labels[int(j)] = float(label)
    return list(grouped.values())


def write_traces(trace_path, event_path, traces: list[SwitchTrace]) -> None:
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("patient_id,step,loss_P,loss_S,loss_I,loss_C,chosen\n")
        for trace in traces:
            for st in trace.steps:
                fh.write(
                    f"{trace.patient_id},{st.step},"
                    f"{_fmt(st.losses['P'])},{_fmt(st.losses['S'])},"
                    f"{_fmt(st.losses['I'])},{_fmt(st.losses['C'])},"
                    f"{st.chosen}\n"
                )
    with open(event_path, "w", encoding="utf-8") as fh:
        fh.write("patient_id,step,event_index,chosen\n")
        for trace in traces:
            for st in trace.steps:
                for j, label in enumerate(st.event_chosen):
                    fh.write(f"{trace.patient_id},{st.step},{j},{label}\n")


def read_traces(path) -> list[SwitchTrace]:
    traces: dict[str, SwitchTrace] = {}
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            pid, step, lp, ls, li, lc, chosen = line.rstrip("\n").split(",")
            trace = traces.setdefault(pid, SwitchTrace(pid))
            losses = {
                "P": float(lp),
                "S": float(ls),
                "I": float(li),
                "C": float(lc),
            }
            trace.steps.append(
                StepTrace(int(step), losses, chosen, [], {}, None)
            )
    return list(traces.values())


def _json_safe(x):
    if isinstance(x, float) and np.isnan(x):
        return None
    return x


def cmd_report(cfg: RunConfig) -> int:
    vocab, sequences = _load_sequences(cfg)
    records = read_records(cfg.records_path, vocab.n_targets)
    traces = read_traces(cfg.traces_path)
    reports = evaluate(records, vocab, sequences)
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    write_report_files(cfg.report_dir, reports, traces, vocab)
    logger.info("report -> %s", cfg.report_dir)
    return 0


def write_report_files(
    out_dir: Path,
    reports: dict[str, MetricReport],
    traces: list[SwitchTrace],
    vocab: EventVocabulary,
) -> None:
    ordered = [s for s in STRATEGIES if s in reports] + sorted(
        set(reports) - set(STRATEGIES)
    )

    with open(out_dir / "table1.csv", "w", encoding="utf-8") as fh:
        fh.write("strategy,auprc_micro,auprc_macro,n_instances\n")
        for s in ordered:
            r = reports[s]
            fh.write(
                f"{s},{_fmt(r.auprc_micro)},{_fmt(r.auprc_macro)},{r.n_instances}\n"
            )

    with open(out_dir / "per_step.csv", "w", encoding="utf-8") as fh:
        fh.write("strategy,step,auprc,n_patients\n")
        for s in ordered:
            r = reports[s]
            for step in sorted(r.per_step):
                fh.write(
                    f"{s},{step},{_fmt(r.per_step[step])},"
                    f"{r.counts_per_step[step]}\n"
                )

    with open(out_dir / "per_event.csv", "w", encoding="utf-8") as fh:
        fh.write("strategy,event_index,event_name,category,occurrence,auprc\n")
        for s in ordered:
            r = reports[s]
            for j in sorted(r.per_event):
                fh.write(
                    f"{s},{j},{vocab.target_name(j)},{vocab.target_category(j)},"
                    f"{_fmt(r.event_occurrence[j])},{_fmt(r.per_event[j])}\n"
                )

    with open(out_dir / "per_category.csv", "w", encoding="utf-8") as fh:
        fh.write("strategy,category,auprc\n")
        for s in ordered:
            r = reports[s]
            for cat in sorted(r.per_category):
                fh.write(f"{s},{cat},{_fmt(r.per_category[cat])}\n")

    with open(out_dir / "repetitive.csv", "w", encoding="utf-8") as fh:
        fh.write("strategy,group,auprc,n_instances\n")
        for s in ordered:
            r = reports[s]
            if r.repetitive_auprc is None:
                continue
            fh.write(
                f"{s},repetitive,{_fmt(r.repetitive_auprc)},"
                f"{r.repetitive_instances}\n"
            )
            fh.write(
                f"{s},non_repetitive,{_fmt(r.non_repetitive_auprc)},"
                f"{r.non_repetitive_instances}\n"
            )

    ratios, totals = selection_ratio(traces)
    with open(out_dir / "selection_ratio.csv", "w", encoding="utf-8") as fh:
        fh.write("step,n_patients," + ",".join(f"frac_{z}" for z in LABELS) + "\n")
        for step in sorted(ratios):
            fracs = ",".join(_fmt(ratios[step][z]) for z in LABELS)
            fh.write(f"{step},{totals[step]},{fracs}\n")

    if STRATEGY_POP in reports and STRATEGY_SWITCH_EVENT in reports:
        rows = performance_gain_table(
            reports[STRATEGY_POP], reports[STRATEGY_SWITCH_EVENT]
        )
        with open(out_dir / "gain_vs_pop.csv", "w", encoding="utf-8") as fh:
            fh.write(
                "event_index,event_name,occurrence,auprc_pop,"
                "auprc_switch_event,gain_pct\n"
            )
            for row in rows:
                gain = "" if row["gain_pct"] is None else _fmt(row["gain_pct"])
                fh.write(
                    f"{row['event_index']},{vocab.target_name(row['event_index'])},"
                    f"{_fmt(row['occurrence'])},{_fmt(row['auprc_a'])},"
                    f"{_fmt(row['auprc_b'])},{gain}\n"
                )

    summary = {
        "strategies": {
            s: {
                "auprc_micro": _json_safe(reports[s].auprc_micro),
                "auprc_macro": _json_safe(reports[s].auprc_macro),
                "n_instances": reports[s].n_instances,
                "repetitive_auprc": _json_safe(reports[s].repetitive_auprc),
                "non_repetitive_auprc": _json_safe(reports[s].non_repetitive_auprc),
            }
            for s in ordered
        },
        "n_patients": len(traces),
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evseq",
        description="Next-step event prediction with online model adaptation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic cohort"),
        ("train", "train the population model"),
        ("build-memory", "harvest the memory bank from the trained model"),
        ("run", "run all prediction strategies over the test patients"),
        ("report", "compute evaluation reports from run outputs"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--out", help="working directory (default ./out)")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "build-memory": cmd_build_memory,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return _COMMANDS[args.command](cfg)
    except EvseqError as exc:
        print(f"ERROR:{exc.code}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"ERROR:NOT_FOUND: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"ERROR:INVALID: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
