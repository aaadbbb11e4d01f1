"""``icdbert`` command line: fixture, prepare, tokenize, train, eval, eda.

Every option defaults to the value from ``--config`` (or the built-in
default), and every relative path is taken relative to ``--workdir``.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
from pathlib import Path

import click
import numpy as np

from . import config as cfg
from .archive import ArchiveError
from .checkpoint import export_weights, load_checkpoint
from .corpus import (
    DIAGNOSES_FILE,
    NOTES_FILE,
    PROCEDURES_FILE,
    CodeKind,
    CorpusError,
    generate_synthetic_corpus,
    load_code_descriptors,
    load_code_records,
    load_note_events,
)
from .encoder import ModelConfig, NumericError, init_parameters, parameter_count, predict_proba
from .labels import (
    LabelEntry,
    build_label_vocabulary,
    coverage_fraction,
    eda_report,
    join_notes_with_labels,
    one_hot_encode_admissions,
    read_label_vocabulary,
    read_labeled_csv,
    split_train_test,
    write_eda_csv,
    write_label_files,
    write_labeled_csv,
)
from .metrics import (
    aggregate_report,
    bar_chart_svg,
    confusion_counts,
    emit_reports,
    precision_recall_f1,
    threshold_predictions,
)
from .rng import derive_seed
from .tokenizer import (
    Vocabulary,
    desk_vocabulary_path,
    encode_dataset,
    load_encoded,
    load_vocabulary,
    save_encoded,
    tokenize,
)
from .trainer import TrainingConfig, dataset_loss, fine_tune, latest_checkpoint

RUNTIME_ERRORS = (OSError, CorpusError, ArchiveError, NumericError, ValueError, KeyError, IndexError)


class Context:
    def __init__(self, workdir: Path, file_values: dict):
        self.workdir = workdir
        self.file_values = file_values

    def path(self, value: str) -> Path:
        return self.workdir / value

    def settings(self, overrides: dict) -> dict:
        try:
            return cfg.resolve(self.file_values, overrides)
        except cfg.ConfigError as exc:
            raise click.UsageError(str(exc)) from None


def command(func):
    """Map configuration problems to exit 2 and runtime failures to exit 1."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except cfg.ConfigError as exc:
            raise click.UsageError(str(exc)) from None
        except RUNTIME_ERRORS as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from None

    return wrapper


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _micro_f1(probs: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    pooled = confusion_counts(threshold_predictions(probs, threshold), truth)
    return precision_recall_f1(pooled)[2]


@click.group()
@click.option("--workdir", type=click.Path(file_okay=False, path_type=Path), default=Path("."),
              show_default=True, help="Base directory for every relative path.")
@click.option("--config", "config_file", type=str, default=None,
              help="Plain-text 'section.key = value' file (relative to the workdir).")
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
@click.pass_context
def main(ctx: click.Context, workdir: Path, config_file: str | None, verbose: int) -> None:
    """Multi-label ICD-9 code prediction from clinical notes."""
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    values = {}
    if config_file is not None:
        path = workdir / config_file
        if not path.is_file():
            raise click.BadParameter(f"no such file: {path}", param_hint="--config")
        try:
            values = cfg.load_config_file(path)
        except cfg.ConfigError as exc:
            raise click.BadParameter(str(exc), param_hint="--config") from None
    ctx.obj = Context(workdir, values)


@main.command()
@click.option("--out", type=str, default=None, help="Output directory for the corpus.")
@click.option("--seed", type=int, default=None)
@click.option("--admissions", type=int, default=None)
@click.option("--codes", type=int, default=None, help="Distinct codes per kind.")
@click.option("--zipf", type=float, default=None, help="Zipf exponent of code frequencies.")
@click.pass_obj
@command
def fixture(obj: Context, out, seed, admissions, codes, zipf):
    """Write a synthetic MIMIC-shaped corpus (three CSVs and a manifest)."""
    s = obj.settings({
        "fixture.out": out, "run.seed": seed, "fixture.admissions": admissions,
        "fixture.codes": codes, "fixture.zipf": zipf,
    })
    if not s["fixture.out"]:
        raise click.UsageError("Missing option '--out'.")
    corpus = generate_synthetic_corpus(
        obj.path(s["fixture.out"]), s["run.seed"], s["fixture.admissions"],
        s["fixture.codes"], s["fixture.zipf"],
    )
    click.echo(
        f"wrote {len(corpus.notes)} notes, {len(corpus.diagnoses)} diagnosis rows, "
        f"{len(corpus.procedures)} procedure rows to {corpus.directory}"
    )


@main.command()
@click.option("--corpus", type=str, default=None, help="Directory holding the three CSV tables.")
@click.option("--out", type=str, default=None)
@click.option("--top-k", type=int, default=None, help="Codes kept per kind; 2K labels in total.")
@click.option("--ratio", type=float, default=None, help="Train fraction of the split.")
@click.option("--seed", type=int, default=None)
@click.option("--group-by-admission/--no-group-by-admission", default=None,
              help="Keep all notes of an admission on one side of the split.")
@click.option("--lenient/--strict", default=None, help="Skip and count malformed rows.")
@click.option("--categories", type=str, default=None, help="Comma-separated note categories to keep.")
@click.option("--diagnosis-descriptors", type=str, default=None, help="D_ICD_DIAGNOSES-style CSV.")
@click.option("--procedure-descriptors", type=str, default=None, help="D_ICD_PROCEDURES-style CSV.")
@click.pass_obj
@command
def prepare(obj: Context, corpus, out, top_k, ratio, seed, group_by_admission, lenient, categories,
            diagnosis_descriptors, procedure_descriptors):
    """Build the labeled dataset, label files and a coverage report."""
    s = obj.settings({
        "prepare.corpus": corpus, "prepare.out": out, "prepare.top_k": top_k,
        "prepare.ratio": ratio, "run.seed": seed,
        "prepare.group_by_admission": group_by_admission, "prepare.lenient": lenient,
        "prepare.categories": categories,
        "prepare.diagnosis_descriptors": diagnosis_descriptors,
        "prepare.procedure_descriptors": procedure_descriptors,
    })
    source = obj.path(s["prepare.corpus"])
    lenient = s["prepare.lenient"]
    wanted = [c for c in s["prepare.categories"].split(",") if c.strip()] or None

    note_stream = load_note_events(source / NOTES_FILE, lenient=lenient, categories=wanted)
    diag_stream = load_code_records(source / DIAGNOSES_FILE, CodeKind.DIAGNOSIS, lenient=lenient)
    proc_stream = load_code_records(source / PROCEDURES_FILE, CodeKind.PROCEDURE, lenient=lenient)
    notes, diagnoses, procedures = list(note_stream), list(diag_stream), list(proc_stream)

    descriptors = {}
    for key, kind in (("prepare.diagnosis_descriptors", CodeKind.DIAGNOSIS),
                      ("prepare.procedure_descriptors", CodeKind.PROCEDURE)):
        if s[key]:
            descriptors.update(load_code_descriptors(obj.path(s[key]), kind))

    vocab = build_label_vocabulary(diagnoses, procedures, s["prepare.top_k"], descriptors)
    label_map = one_hot_encode_admissions(diagnoses + procedures, vocab)
    rows = join_notes_with_labels(notes, label_map)
    if not rows:
        raise ValueError("no note joins a labeled admission; nothing to prepare")
    split = split_train_test(
        rows, s["prepare.ratio"], derive_seed(s["run.seed"], "split"), s["prepare.group_by_admission"]
    )

    all_admissions = (
        {n.admission_id for n in notes}
        | {r.admission_id for r in diagnoses}
        | {r.admission_id for r in procedures}
    )
    dataset_admissions = {r.admission_id for r in rows}
    coverage = coverage_fraction(len(dataset_admissions), len(all_admissions))
    matrix = np.stack([r.labels for r in rows]).astype(np.int64)
    per_label = {
        entry.name: {
            "kind": entry.kind.value,
            "code": entry.code,
            "short_title": entry.short_title,
            "notes": int(matrix[:, j].sum()),
            "admissions": int(sum(int(label_map[a][j]) for a in dataset_admissions)),
        }
        for j, entry in enumerate(vocab)
    }

    target = obj.path(s["prepare.out"])
    target.mkdir(parents=True, exist_ok=True)
    write_labeled_csv(target / "dataset.csv", rows, vocab)
    write_labeled_csv(target / "train.csv", split.train, vocab)
    write_labeled_csv(target / "test.csv", split.test, vocab)
    write_label_files(target, vocab)
    _write_json(target / "prepare_report.json", {
        "top_k": s["prepare.top_k"],
        "n_labels": len(vocab),
        "admissions_total": len(all_admissions),
        "admissions_labeled": len(label_map),
        "admissions_in_dataset": len(dataset_admissions),
        "coverage_percent": coverage,
        "rows": len(rows),
        "train_rows": len(split.train),
        "test_rows": len(split.test),
        "skipped_rows": {
            "notes": note_stream.skipped,
            "diagnoses": diag_stream.skipped,
            "procedures": proc_stream.skipped,
        },
        "per_label": per_label,
    })
    cfg.write_config(target, s)
    click.echo(f"labels: {len(vocab)} ({s['prepare.top_k']} diagnoses + {s['prepare.top_k']} procedures)")
    click.echo(f"rows: {len(rows)} (train {len(split.train)}, test {len(split.test)})")
    click.echo(
        f"coverage: {coverage:.2f}% ({len(dataset_admissions)} of {len(all_admissions)} admissions)"
    )


def _model_config(s: dict, n_labels: int, vocab_size: int, max_len: int | None = None) -> ModelConfig:
    overrides = {"num_labels": n_labels, "vocab_size": vocab_size, "dropout": s["model.dropout"]}
    config = ModelConfig.preset(s["model.preset"], **overrides)
    if max_len is not None and max_len > config.max_len:
        raise ValueError(
            f"token cache max_len {max_len} exceeds the {s['model.preset']} preset's {config.max_len}"
        )
    return config


@main.command(name="tokenize")
@click.option("--prepared", type=str, default=None)
@click.option("--out", type=str, default=None)
@click.option("--vocab", type=str, default=None, help="WordPiece vocabulary file (default: bundled).")
@click.option("--max-len", type=int, default=None, help="Sequence length; 0 uses the preset's.")
@click.option("--preset", type=click.Choice(["desk", "paper"]), default=None)
@click.pass_obj
@command
def tokenize_cmd(obj: Context, prepared, out, vocab, max_len, preset):
    """Encode the train and test splits into a binary token cache."""
    s = obj.settings({
        "tokenize.prepared": prepared, "tokenize.out": out, "tokenize.vocab": vocab,
        "tokenize.max_len": max_len, "model.preset": preset,
    })
    vocab_path = obj.path(s["tokenize.vocab"]) if s["tokenize.vocab"] else desk_vocabulary_path()
    vocabulary = load_vocabulary(vocab_path)
    length = s["tokenize.max_len"] or ModelConfig.preset(s["model.preset"]).max_len
    source = obj.path(s["tokenize.prepared"])
    target = obj.path(s["tokenize.out"])
    target.mkdir(parents=True, exist_ok=True)
    (target / "vocab.txt").write_text("".join(t + "\n" for t in vocabulary.tokens), encoding="utf-8")

    report = {"max_len": length, "vocab_size": len(vocabulary), "vocab_sha256": vocabulary.fingerprint()}
    for split in ("train", "test"):
        names, rows = read_labeled_csv(source / f"{split}.csv")
        data = encode_dataset(rows, vocabulary, length, names)
        save_encoded(target / f"{split}.bin", data, vocabulary)
        report[split] = _token_stats(rows, vocabulary, length)
        click.echo(f"{split}: {len(data)} sequences of length {length}")
    _write_json(target / "tokenize_report.json", report)
    cfg.write_config(target, s)


def _token_stats(rows, vocabulary: Vocabulary, max_len: int) -> dict:
    lengths, unknown, total = [], 0, 0
    for row in rows:
        pieces = tokenize(row.text, vocabulary)
        lengths.append(len(pieces))
        unknown += sum(p == vocabulary.tokens[vocabulary.unk_id] for p in pieces)
        total += len(pieces)
    return {
        "rows": len(rows),
        "mean_pieces": float(np.mean(lengths)) if lengths else 0.0,
        "truncated_rows": int(sum(n > max_len - 2 for n in lengths)),
        "unk_fraction": unknown / total if total else 0.0,
    }


@main.command()
@click.option("--tokens", type=str, default=None, help="Token cache directory.")
@click.option("--out", type=str, default=None, help="Run directory.")
@click.option("--preset", type=click.Choice(["desk", "paper"]), default=None)
@click.option("--dropout", type=float, default=None)
@click.option("--lr", type=float, default=None, help="Peak learning rate [default: 3e-5].")
@click.option("--epochs", type=int, default=None)
@click.option("--steps", type=int, default=None, help="Total optimizer steps (0: epochs decide).")
@click.option("--stop-after", type=int, default=None,
              help="Halt after this many steps without changing the schedule (0: never).")
@click.option("--batch-size", type=int, default=None)
@click.option("--accumulation-steps", type=int, default=None)
@click.option("--schedule", type=click.Choice(["constant", "linear"]), default=None)
@click.option("--warmup-steps", type=int, default=None)
@click.option("--eval-every", type=int, default=None, help="Log the training loss every N steps.")
@click.option("--wall-time/--no-wall-time", default=None, help="Record wall-clock ms in the log.")
@click.option("--seed", type=int, default=None)
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint in the run directory.")
@click.pass_obj
@command
def train(obj: Context, tokens, out, preset, dropout, lr, epochs, steps, stop_after, batch_size,
          accumulation_steps, schedule, warmup_steps, eval_every, wall_time, seed, resume):
    """Fine-tune every parameter with Adam and write checkpoints and a loss log."""
    s = obj.settings({
        "train.tokens": tokens, "train.out": out, "model.preset": preset, "model.dropout": dropout,
        "train.lr": lr, "train.epochs": epochs, "train.steps": steps, "train.stop_after": stop_after,
        "train.batch_size": batch_size, "train.accumulation_steps": accumulation_steps,
        "train.schedule": schedule, "train.warmup_steps": warmup_steps,
        "train.eval_every": eval_every, "train.wall_time": wall_time, "run.seed": seed,
    })
    data, meta = load_encoded(obj.path(s["train.tokens"]) / "train.bin")
    if len(data) == 0:
        raise ValueError("training split is empty")
    model_config = _model_config(s, len(data.label_names), int(meta["vocab_size"]), data.max_len)

    run = obj.path(s["train.out"])
    ckpt_dir = run / "checkpoints"
    steps_total = s["train.steps"] or None
    epochs = s["train.epochs"]
    if steps_total is not None:
        # A step budget overrides the epoch count.
        per_epoch = -(-len(data) // s["train.batch_size"])
        per_epoch = -(-per_epoch // s["train.accumulation_steps"])
        epochs = -(-steps_total // per_epoch)
    training = TrainingConfig(
        learning_rate=s["train.lr"],
        epochs=epochs,
        batch_size=s["train.batch_size"],
        seed=derive_seed(s["run.seed"], "train"),
        eval_every=s["train.eval_every"],
        checkpoint_dir=str(ckpt_dir),
        max_steps=steps_total,
        stop_after=s["train.stop_after"] or None,
        accumulation_steps=s["train.accumulation_steps"],
        schedule=s["train.schedule"],
        warmup_steps=s["train.warmup_steps"],
        record_wall_time=s["train.wall_time"],
    )
    resume_from = None
    if resume:
        resume_from = latest_checkpoint(ckpt_dir) if ckpt_dir.is_dir() else None
        if resume_from is None:
            raise FileNotFoundError(f"--resume given but no checkpoint in {ckpt_dir}")
        click.echo(f"resuming from {resume_from.name}")
    elif ckpt_dir.is_dir():
        for stale in ckpt_dir.glob("*.ckpt"):
            stale.unlink()

    run.mkdir(parents=True, exist_ok=True)
    cfg.write_config(run, s)
    params = init_parameters(model_config, derive_seed(s["run.seed"], "init"))
    params, state = fine_tune(
        params, model_config, data, training, log_path=run / "train_log.csv", resume_from=resume_from
    )
    export_weights(run / "model.weights", params, model_config)

    probs = predict_proba(params, model_config, data.input_ids, data.attention_mask, data.segment_ids)
    f1 = _micro_f1(probs, data.labels)
    loss = dataset_loss(params, model_config, data)
    _write_json(run / "train_summary.json", {
        "steps": state.step,
        "epochs_completed": state.epoch,
        "epoch_losses": state.epoch_losses,
        "final_train_loss": loss,
        "final_train_micro_f1": f1,
        "label_names": data.label_names,
        "parameters": parameter_count(model_config),
        "model_config": model_config.to_dict(),
    })
    click.echo(f"steps: {state.step}  epochs completed: {state.epoch}")
    click.echo(f"final train loss: {loss:.6f}")
    click.echo(f"final train micro-F1: {f1:.4f}")


def _label_entries(prepared: Path, names: list[str]) -> list[LabelEntry]:
    """Entries with titles from the prepared label vocabulary, else bare names."""
    if (prepared / "label_vocabulary.csv").is_file():
        vocab = read_label_vocabulary(prepared)
        if vocab.names == names:
            return list(vocab)
    entries = []
    for name in names:
        kind, _, code = name.partition("_")
        entries.append(LabelEntry(code, CodeKind(kind), code))
    return entries


@main.command(name="eval")
@click.option("--run", type=str, default=None, help="Run directory written by train.")
@click.option("--tokens", type=str, default=None)
@click.option("--prepared", type=str, default=None, help="Prepared directory (for label titles).")
@click.option("--checkpoint", type=str, default=None, help="Checkpoint file (default: latest in the run).")
@click.option("--split", type=click.Choice(["train", "test"]), default=None)
@click.option("--threshold", type=float, default=None)
@click.option("--out", type=str, default=None)
@click.pass_obj
@command
def eval_cmd(obj: Context, run, tokens, prepared, checkpoint, split, threshold, out):
    """Per-label and aggregate metrics, ROC figures and predictions."""
    s = obj.settings({
        "eval.run": run, "eval.tokens": tokens, "eval.prepared": prepared,
        "eval.checkpoint": checkpoint, "eval.split": split, "eval.threshold": threshold,
        "eval.out": out,
    })
    if s["eval.checkpoint"]:
        ckpt_path = obj.path(s["eval.checkpoint"])
    else:
        ckpt_dir = obj.path(s["eval.run"]) / "checkpoints"
        ckpt_path = latest_checkpoint(ckpt_dir) if ckpt_dir.is_dir() else None
        if ckpt_path is None:
            raise FileNotFoundError(f"no checkpoint in {ckpt_dir}")
    ckpt = load_checkpoint(ckpt_path)
    data, _ = load_encoded(obj.path(s["eval.tokens"]) / f"{s['eval.split']}.bin")
    if len(data.label_names) != ckpt.config.num_labels:
        raise ValueError(
            f"checkpoint predicts {ckpt.config.num_labels} labels, token cache has {len(data.label_names)}"
        )
    if len(data) == 0:
        raise ValueError(f"{s['eval.split']} split is empty")
    probs = predict_proba(ckpt.params, ckpt.config, data.input_ids, data.attention_mask, data.segment_ids)
    entries = _label_entries(obj.path(s["eval.prepared"]), data.label_names)
    report, curves = aggregate_report(probs, data.labels, entries, s["eval.threshold"])

    target = obj.path(s["eval.out"])
    emit_reports(report, curves, target)
    with open(target / "predictions.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["admission_id", *data.label_names])
        for admission, row in zip(data.admission_ids, probs):
            writer.writerow([int(admission), *(f"{p:.6f}" for p in row)])
    cfg.write_config(target, s)

    click.echo(f"examples: {report.n_examples}  threshold: {report.threshold}")
    for name in ("accuracy", "precision", "recall", "f1"):
        click.echo(f"{name}: micro {report.micro[name]:.4f}  macro {report.macro[name]:.4f}")
    micro_auc, macro_auc = report.micro["auc"], report.macro["auc"]
    click.echo(
        "auc: micro " + ("n/a" if micro_auc is None else f"{micro_auc:.4f}")
        + "  macro " + ("n/a" if macro_auc is None else f"{macro_auc:.4f}")
    )
    if report.auc_missing:
        click.echo(f"auc undefined (single class): {', '.join(report.auc_missing)}")


@main.command()
@click.option("--prepared", type=str, default=None)
@click.option("--out", type=str, default=None)
@click.pass_obj
@command
def eda(obj: Context, prepared, out):
    """Per-label note counts and mean note length, as CSV and bar charts."""
    s = obj.settings({"eda.prepared": prepared, "eda.out": out})
    source = obj.path(s["eda.prepared"])
    vocab = read_label_vocabulary(source)
    names, rows = read_labeled_csv(source / "dataset.csv")
    if names != vocab.names:
        raise ValueError("dataset.csv columns do not match label_vocabulary.csv")
    stats = eda_report(rows, vocab)

    target = obj.path(s["eda.out"])
    target.mkdir(parents=True, exist_ok=True)
    write_eda_csv(target / "eda.csv", stats)
    labels = [st.name for st in stats]
    (target / "note_counts.svg").write_text(
        bar_chart_svg(labels, [st.note_count for st in stats], "Notes per label")
    )
    (target / "word_counts.svg").write_text(
        bar_chart_svg(labels, [st.mean_word_count for st in stats], "Mean words per note", "{:.1f}")
    )
    cfg.write_config(target, s)
    click.echo(f"{len(rows)} notes, {len(stats)} labels")
    empty = [st.name for st in stats if st.empty]
    if empty:
        click.echo(f"labels with no notes: {', '.join(empty)}")


if __name__ == "__main__":
    main()
