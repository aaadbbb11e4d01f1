"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The lines are repeated in an "acceptance criteria" section of the pytest
terminal summary.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from acceptance_log import criterion
from icdbert.cli import main
from icdbert.encoder import (
    ModelConfig,
    bce_with_logits,
    compute_gradients,
    forward,
    init_parameters,
    parameter_count,
)
from icdbert.labels import coverage_fraction
from icdbert.metrics import (
    auc,
    confusion_counts,
    multilabel_accuracy,
    precision_recall_f1,
    roc_points,
    threshold_predictions,
)
from icdbert.tokenizer import Vocabulary, wordpiece_tokenize
from oracles import (
    central_difference_errors,
    greedy_by_exhaustion,
    mann_whitney_auc,
    naive_counts,
    naive_prf,
    random_wordpiece_case,
    scalar_forward,
)


def run_cli(workdir, *args):
    result = CliRunner().invoke(main, ["--workdir", str(workdir), *map(str, args)])
    assert result.exit_code == 0, result.output
    return result.output


def desk_batch(config, lengths, seed):
    rng = np.random.default_rng(seed)
    ids = np.zeros((len(lengths), config.max_len), dtype=np.int64)
    mask = np.zeros_like(ids, dtype=np.int8)
    for i, n in enumerate(lengths):
        ids[i, :n] = rng.integers(5, config.vocab_size, size=n)
        ids[i, 0] = 2
        mask[i, :n] = 1
    return ids, mask


def test_coverage_arithmetic():
    with criterion("coverage arithmetic") as info:
        low = coverage_fraction(27521, 58000)
        high = coverage_fraction(42993, 58000)
        assert abs(low - 47.45) <= 0.01
        assert 74.12 - 0.01 <= high <= 74.13 + 0.01
        info["detail"] = f"{low:.2f}% and {high:.2f}%"


def test_label_widths(tmp_path):
    with criterion("label widths via prepare") as info:
        run_cli(tmp_path, "fixture", "--out", "data", "--admissions", 200, "--codes", 60)
        widths = {}
        for k in (10, 50):
            run_cli(tmp_path, "prepare", "--corpus", "data", "--out", f"p{k}", "--top-k", k)
            labels = (tmp_path / f"p{k}" / "labels.txt").read_text().splitlines()
            header = (tmp_path / f"p{k}" / "dataset.csv").read_text().splitlines()[0].split(",")
            assert len(header) - 2 == len(labels)
            widths[k] = len(labels)
        assert widths == {10: 20, 50: 100}
        info["detail"] = "top-k 10 -> 20 columns, top-k 50 -> 100 columns"


def test_parameter_count():
    with criterion("paper-preset parameter count") as info:
        n = parameter_count(ModelConfig.preset("paper", num_labels=20))
        deviation = abs(n - 1.10e8) / 1.10e8
        assert deviation <= 0.02
        info["detail"] = f"{n:,} parameters, {deviation:.2%} from 1.10e8"


def test_gradient_suite():
    with criterion("desk gradient suite", budget_s=60) as info:
        config = ModelConfig.preset("desk", num_labels=20, dropout=0.0)
        params = init_parameters(config, 21)
        ids, mask = desk_batch(config, [40, 17], seed=4)
        targets = np.random.default_rng(5).integers(0, 2, size=(2, 20))
        _, grads, _ = compute_gradients(params, config, ids, mask, targets)

        # Probe the 16 largest-gradient entries of each tensor plus 16 at random,
        # so large sparse tables (token, position) are checked where it matters.
        rng = np.random.default_rng(6)
        indices = {}
        for name, g in grads.items():
            flat = np.abs(g.reshape(-1))
            top = np.argsort(flat)[-16:]
            rand = rng.choice(flat.size, size=min(16, flat.size), replace=False)
            indices[name] = np.unique(np.concatenate([top, rand]))

        def loss(p):
            return bce_with_logits(forward(p, config, ids, mask).logits, targets)

        errors = central_difference_errors(loss, params, grads, indices=indices)
        worst = max(errors, key=errors.get)
        assert len(errors) == len(params)
        assert errors[worst] <= 1e-4, f"{worst}: {errors[worst]:.2e}"
        info["detail"] = f"{len(errors)} tensors, worst {worst} at {errors[worst]:.2e}"


def test_encoder_oracle():
    with criterion("scalar encoder oracle", budget_s=10) as info:
        config = ModelConfig.preset("desk", num_labels=20, dropout=0.0)
        params = init_parameters(config, 8)
        ids, mask = desk_batch(config, [12], seed=9)
        fast = forward(params, config, ids, mask).logits[0]
        slow = np.array(scalar_forward({k: v.tolist() for k, v in params.items()},
                                       config, ids[0].tolist(), mask[0].tolist()))
        rel = np.max(np.abs(fast - slow) / np.maximum(np.abs(slow), 1e-300))
        assert rel <= 1e-6
        info["detail"] = f"max relative difference {rel:.2e}"


def test_attention_invariants():
    with criterion("attention invariants", budget_s=10) as info:
        config = ModelConfig.preset("desk", num_labels=20, dropout=0.0)
        params = init_parameters(config, 10)
        lengths = [64, 30, 5, 1]
        ids, mask = desk_batch(config, lengths, seed=11)
        act = forward(params, config, ids, mask)
        row_err = pad_weight = 0.0
        for probs in act.attention:
            row_err = max(row_err, float(np.abs(probs.sum(-1) - 1.0).max()))
            for b, n in enumerate(lengths):
                pad_weight = max(pad_weight, float(probs[b, :, :, n:].sum(-1).max()))
        perturbed = ids.copy()
        noise = np.random.default_rng(12).integers(0, config.vocab_size, size=ids.shape)
        perturbed[mask == 0] = noise[mask == 0]
        shift = float(np.abs(forward(params, config, perturbed, mask).logits - act.logits).max())
        assert row_err <= 1e-6 and pad_weight <= 1e-6 and shift <= 1e-6
        info["detail"] = f"row-sum error {row_err:.1e}, pad weight {pad_weight:.1e}, logit shift {shift:.1e}"


def test_tokenizer_suite():
    with criterion("WordPiece against exhaustive oracle", budget_s=30) as info:
        rng = np.random.default_rng(13)
        matched = reconstructed = 0
        for i in range(1000):
            word, tokens = random_wordpiece_case(rng, from_pieces=i % 2 == 1)
            vocab = Vocabulary.from_tokens(tokens)
            got = wordpiece_tokenize(word, vocab)
            assert got == greedy_by_exhaustion(word, set(tokens)), (word, tokens, got)
            matched += 1
            if got != ["[UNK]"]:
                assert "".join(p.removeprefix("##") for p in got) == word
                assert not got[0].startswith("##") and all(p.startswith("##") for p in got[1:])
                reconstructed += 1
        info["detail"] = f"{matched} cases match, {reconstructed} non-[UNK] outputs reconstruct"


def test_metrics_suite():
    with criterion("AUC and count metrics against recounts", budget_s=30) as info:
        rng = np.random.default_rng(14)
        worst = 0.0
        for _ in range(500):
            n = int(rng.integers(2, 120))
            truth = rng.integers(0, 2, size=n)
            truth[0], truth[-1] = 0, 1
            # Coarse rounding forces ties on many instances.
            scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
            diff = abs(auc(roc_points(scores, truth)) - mann_whitney_auc(scores.tolist(), truth.tolist()))
            worst = max(worst, diff)
        assert worst <= 1e-9
        for _ in range(100):
            shape = (int(rng.integers(1, 60)), int(rng.integers(1, 30)))
            probs = rng.uniform(size=shape)
            truth = rng.integers(0, 2, size=shape)
            preds = threshold_predictions(probs, 0.5)
            tp, fp, tn, fn = naive_counts(preds.tolist(), truth.tolist())
            counts = confusion_counts(preds, truth)
            assert (counts.tp, counts.fp, counts.tn, counts.fn) == (tp, fp, tn, fn)
            assert precision_recall_f1(counts) == pytest.approx(naive_prf(tp, fp, fn), abs=1e-15)
            assert multilabel_accuracy(preds, truth) == pytest.approx((tp + tn) / preds.size, abs=1e-15)
        info["detail"] = f"500 AUC instances (max gap {worst:.1e}), 100 count matrices"


E2E_TRAIN = ["--steps", 200, "--lr", 2e-3, "--batch-size", 32]


def end_to_end(workdir: Path) -> tuple[dict, float]:
    start = time.perf_counter()
    run_cli(workdir, "fixture", "--out", "data", "--seed", 7, "--admissions", 200)
    run_cli(workdir, "prepare", "--corpus", "data", "--top-k", 5)
    run_cli(workdir, "tokenize")
    run_cli(workdir, "train", "--preset", "desk", *E2E_TRAIN)
    run_cli(workdir, "eval", "--split", "test", "--out", "eval_test")
    run_cli(workdir, "eval", "--split", "train", "--out", "eval_train")
    metrics = {
        split: json.loads((workdir / f"eval_{split}" / "metrics.json").read_text())
        for split in ("train", "test")
    }
    return metrics, time.perf_counter() - start


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    first = tmp_path_factory.mktemp("e2e_a")
    second = tmp_path_factory.mktemp("e2e_b")
    return (first, *end_to_end(first)), (second, *end_to_end(second))


def test_end_to_end_overfit(e2e_runs):
    with criterion("end-to-end overfit") as info:
        (workdir, metrics, elapsed), _ = e2e_runs
        train_f1 = metrics["train"]["micro"]["f1"]
        test_f1 = metrics["test"]["micro"]["f1"]
        summary = json.loads((workdir / "run" / "train_summary.json").read_text())
        assert summary["steps"] == 200
        assert train_f1 >= 0.99 and test_f1 >= 0.90, f"train {train_f1:.4f}, test {test_f1:.4f}"
        assert elapsed < 600, f"pipeline took {elapsed:.0f} s"
        info["detail"] = f"train micro-F1 {train_f1:.4f}, test micro-F1 {test_f1:.4f}, pipeline {elapsed:.0f} s"


def test_determinism(e2e_runs):
    with criterion("byte-identical reruns") as info:
        (first, _, _), (second, _, _) = e2e_runs
        compared = 0
        for sub in ("prepared", "tokens", "run", "eval_test", "eval_train"):
            files = sorted(p.relative_to(first) for p in (first / sub).rglob("*") if p.is_file())
            other = sorted(p.relative_to(second) for p in (second / sub).rglob("*") if p.is_file())
            assert files == other
            for rel in files:
                assert (first / rel).read_bytes() == (second / rel).read_bytes(), str(rel)
                compared += 1
        assert any(p.suffix == ".ckpt" for p in (first / "run" / "checkpoints").iterdir())
        info["detail"] = f"{compared} files identical (checkpoints, logs, reports)"
