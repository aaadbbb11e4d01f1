import csv
import json
import shutil
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from click.testing import CliRunner

from icdbert.checkpoint import import_weights
from icdbert.cli import main
from icdbert.encoder import ModelConfig, init_parameters
from icdbert.rng import derive_seed
from icdbert.tokenizer import load_encoded
from icdbert.trainer import dataset_loss


def invoke(workdir, *args):
    return CliRunner().invoke(main, ["--workdir", str(workdir), *map(str, args)])


def ok(workdir, *args):
    result = invoke(workdir, *args)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """fixture -> prepare -> tokenize on a small corpus, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    ok(root, "fixture", "--out", "data", "--seed", 3, "--admissions", 60, "--codes", 20)
    ok(root, "prepare", "--corpus", "data", "--out", "prepared", "--top-k", 3)
    ok(root, "tokenize", "--prepared", "prepared", "--out", "tokens", "--max-len", 32)
    return root


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


class TestFixture:
    def test_inventory(self, tmp_path):
        ok(tmp_path, "fixture", "--out", "c", "--admissions", 10)
        names = sorted(p.name for p in (tmp_path / "c").iterdir())
        assert names == ["DIAGNOSES_ICD.csv", "NOTEEVENTS.csv", "PROCEDURES_ICD.csv", "manifest.json"]

    def test_missing_out(self, tmp_path):
        result = invoke(tmp_path, "fixture")
        assert result.exit_code == 2 and "--out" in result.output

    def test_rerun_identical(self, tmp_path):
        ok(tmp_path, "fixture", "--out", "a", "--seed", 5, "--admissions", 15)
        ok(tmp_path, "fixture", "--out", "b", "--seed", 5, "--admissions", 15)
        for path in (tmp_path / "a").iterdir():
            assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()


class TestPrepare:
    @pytest.mark.parametrize("k", [10, 50])
    def test_label_width(self, tmp_path, k):
        ok(tmp_path, "fixture", "--out", "data", "--admissions", 120, "--codes", 60)
        result = ok(tmp_path, "prepare", "--corpus", "data", "--out", "p", "--top-k", k)
        labels = (tmp_path / "p" / "labels.txt").read_text().splitlines()
        assert len(labels) == 2 * k and f"labels: {2 * k}" in result.output
        assert [n.split("_")[0] for n in labels] == ["diagnosis"] * k + ["procedure"] * k
        header = read_csv(tmp_path / "p" / "dataset.csv")[0]
        assert header[:2] == ["admission_id", "text"] and len(header) == 2 + 2 * k

    def test_coverage_recount(self, workdir):
        admissions, in_dataset = set(), set()
        for name in ("NOTEEVENTS.csv", "DIAGNOSES_ICD.csv", "PROCEDURES_ICD.csv"):
            rows = read_csv(workdir / "data" / name)
            col = rows[0].index("HADM_ID")
            admissions |= {int(r[col]) for r in rows[1:]}
        for row in read_csv(workdir / "prepared" / "dataset.csv")[1:]:
            in_dataset.add(int(row[0]))
        report = json.loads((workdir / "prepared" / "prepare_report.json").read_text())
        ratio = Decimal(100 * len(in_dataset)) / Decimal(len(admissions))
        expected = float(ratio.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))
        assert report["coverage_percent"] == expected
        assert report["admissions_total"] == len(admissions)

    def test_split_sizes(self, workdir):
        report = json.loads((workdir / "prepared" / "prepare_report.json").read_text())
        assert report["train_rows"] == int(0.8 * report["rows"])
        assert report["train_rows"] + report["test_rows"] == report["rows"]

    def test_missing_corpus_is_runtime_error(self, tmp_path):
        result = invoke(tmp_path, "prepare", "--corpus", "nowhere")
        assert result.exit_code == 1 and "nowhere" in result.output

    def test_bad_ratio_is_usage_error(self, workdir):
        assert invoke(workdir, "prepare", "--ratio", 1.5, "--out", "x").exit_code == 2


class TestConfig:
    def test_echo_reproduces_run(self, workdir, tmp_path):
        shutil.copytree(workdir / "data", tmp_path / "data")
        shutil.copytree(workdir / "prepared", tmp_path / "original")
        ok(tmp_path, "--config", "original/config.txt", "prepare")
        for path in (tmp_path / "original").iterdir():
            assert path.read_bytes() == (tmp_path / "prepared" / path.name).read_bytes(), path.name

    def test_file_values_and_override(self, workdir, tmp_path):
        shutil.copytree(workdir / "data", tmp_path / "data")
        (tmp_path / "run.txt").write_text("# top-k from file\nprepare.top_k = 2\nprepare.out = p2\n")
        ok(tmp_path, "--config", "run.txt", "prepare")
        assert len((tmp_path / "p2" / "labels.txt").read_text().splitlines()) == 4
        ok(tmp_path, "--config", "run.txt", "prepare", "--top-k", 1)
        assert len((tmp_path / "p2" / "labels.txt").read_text().splitlines()) == 2

    @pytest.mark.parametrize("text", ["prepare.nope = 1\n", "prepare.top_k = many\n", "no equals\n"])
    def test_bad_config_exits_2(self, tmp_path, text):
        (tmp_path / "bad.txt").write_text(text)
        assert invoke(tmp_path, "--config", "bad.txt", "eda").exit_code == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert invoke(tmp_path, "--config", "absent.txt", "eda").exit_code == 2


class TestTokenize:
    def test_outputs(self, workdir):
        names = sorted(p.name for p in (workdir / "tokens").iterdir())
        assert names == ["config.txt", "test.bin", "tokenize_report.json", "train.bin", "vocab.txt"]
        data, meta = load_encoded(workdir / "tokens" / "train.bin")
        assert data.max_len == 32 and meta["vocab_size"] == 200
        train_rows = read_csv(workdir / "prepared" / "train.csv")[1:]
        assert len(data) == len(train_rows)
        assert (data.input_ids[:, 0] == 2).all()

    def test_max_len_beyond_preset_rejected_by_train(self, workdir, tmp_path):
        ok(workdir, "tokenize", "--out", "long", "--max-len", 100)
        result = invoke(workdir, "train", "--tokens", "long", "--out", str(tmp_path / "r"), "--steps", 1)
        assert result.exit_code == 1 and "max_len" in result.output


class TestTrain:
    def test_zero_lr(self, workdir, tmp_path):
        out = tmp_path / "zero"
        result = ok(workdir, "train", "--out", out, "--lr", 0, "--steps", 3, "--batch-size", 8)
        data, _ = load_encoded(workdir / "tokens" / "train.bin")
        config = ModelConfig.preset("desk", num_labels=len(data.label_names))
        start = init_parameters(config, derive_seed(7, "init"))
        weights = import_weights(out / "model.weights", config)
        assert all(np.array_equal(start[k], weights[k]) for k in start)
        summary = json.loads((out / "train_summary.json").read_text())
        assert abs(summary["final_train_loss"] - dataset_loss(start, config, data)) <= 1e-12
        assert summary["steps"] == 3 and "final train micro-F1" in result.output

    def test_outputs(self, workdir, tmp_path):
        out = tmp_path / "r"
        ok(workdir, "train", "--out", out, "--steps", 4, "--batch-size", 8, "--eval-every", 2)
        assert sorted(p.name for p in out.iterdir()) == [
            "checkpoints", "config.txt", "model.weights", "train_log.csv", "train_summary.json"]
        assert [r[1] for r in read_csv(out / "train_log.csv")[1:]] == ["2", "4"]

    def test_interrupt_and_resume(self, workdir, tmp_path):
        common = ["--steps", 9, "--batch-size", 8, "--eval-every", 1, "--lr", 1e-3]
        ok(workdir, "train", "--out", tmp_path / "full", *common)
        ok(workdir, "train", "--out", tmp_path / "cut", *common, "--stop-after", 4)
        assert (tmp_path / "cut" / "checkpoints" / "step_000004.ckpt").is_file()
        result = ok(workdir, "train", "--out", tmp_path / "cut", *common, "--resume")
        assert "resuming from step_000004.ckpt" in result.output
        for name in ("model.weights", "train_log.csv", "train_summary.json"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "cut" / name).read_bytes()
        full = sorted(p.name for p in (tmp_path / "full" / "checkpoints").iterdir())
        for name in full:
            assert (tmp_path / "full" / "checkpoints" / name).read_bytes() == (
                tmp_path / "cut" / "checkpoints" / name).read_bytes()

    def test_resume_without_checkpoint(self, workdir, tmp_path):
        assert invoke(workdir, "train", "--out", tmp_path / "none", "--resume").exit_code == 1

    def test_epochs_zero_usage_error(self, workdir, tmp_path):
        assert invoke(workdir, "train", "--out", tmp_path / "e", "--epochs", 0).exit_code == 2


@pytest.fixture(scope="module")
def trained(workdir):
    ok(workdir, "train", "--out", "run", "--steps", 30, "--batch-size", 8, "--lr", 2e-3)
    return workdir


class TestEval:
    def test_outputs_and_rows(self, trained):
        result = ok(trained, "eval", "--out", "ev")
        names = sorted(p.name for p in (trained / "ev").iterdir())
        assert names == ["config.txt", "metrics.csv", "metrics.json", "predictions.csv", "roc.svg"]
        test_rows = read_csv(trained / "prepared" / "test.csv")
        preds = read_csv(trained / "ev" / "predictions.csv")
        assert len(preds) == len(test_rows) and preds[0][1:] == test_rows[0][2:]
        assert "f1: micro" in result.output

    def test_higher_threshold_lowers_recall(self, trained):
        ok(trained, "eval", "--out", "t5", "--threshold", 0.5)
        ok(trained, "eval", "--out", "t9", "--threshold", 0.9)
        low = {r[0]: r for r in read_csv(trained / "t5" / "metrics.csv")[1:]}
        high = {r[0]: r for r in read_csv(trained / "t9" / "metrics.csv")[1:]}
        header = read_csv(trained / "t5" / "metrics.csv")[0]
        col = header.index("recall")
        for name in low:
            assert float(high[name][col]) <= float(low[name][col])

    def test_label_count_mismatch(self, trained, tmp_path):
        shutil.copytree(trained / "data", tmp_path / "data")
        ok(tmp_path, "prepare", "--top-k", 2)
        ok(tmp_path, "tokenize", "--max-len", 32)
        result = invoke(tmp_path, "eval", "--run", str(trained / "run"))
        assert result.exit_code == 1 and "labels" in result.output


class TestEda:
    def test_flags_label_without_notes(self, tmp_path):
        ok(tmp_path, "fixture", "--out", "data", "--admissions", 30, "--codes", 5)
        # An admission with a code but no notes: the code becomes a label with zero rows.
        with open(tmp_path / "data" / "DIAGNOSES_ICD.csv", "a", newline="") as handle:
            csv.writer(handle).writerow([99999, 1, 999999, 1, "999.9"])
        ok(tmp_path, "prepare", "--top-k", 6)
        result = ok(tmp_path, "eda")
        assert "labels with no notes: diagnosis_999.9" in result.output
        rows = read_csv(tmp_path / "eda" / "eda.csv")
        flagged = [r for r in rows[1:] if r[0] == "diagnosis_999.9"]
        assert len(flagged) == 1
        n_labels = len((tmp_path / "prepared" / "labels.txt").read_text().splitlines())
        assert n_labels == 6 + 5
        for svg in ("note_counts.svg", "word_counts.svg"):
            assert (tmp_path / "eda" / svg).read_text().count("<rect data-label") == n_labels
