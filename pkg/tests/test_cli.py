"""Command-line surface: exit codes, JSON errors, end-to-end chains."""

import json
import os
import sys

import numpy as np
import pytest

from beyondct import cli
from beyondct.metrics import PredictionPair, save_predictions
from beyondct.train import load_checkpoint, load_manifest
from beyondct.volume import HU, NORM255

from test_volume import write_nifti


def run_cli(argv, capsys):
    """Invoke main() in-process; return (exit_code, stdout_doc, stderr_text)."""
    code = cli.main(argv)
    captured = capsys.readouterr()
    out = json.loads(captured.out) if captured.out.strip() else None
    return code, out, captured.err


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    """A small deterministic phantom cohort shared across CLI tests."""
    out = tmp_path_factory.mktemp("cohort")
    code = cli.main([
        "phantom-gen", "--out", str(out), "--n", "4", "--seed", "11",
    ])
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# thread pinning
# ---------------------------------------------------------------------------


def test_pin_threads_sets_blas_vars_when_numpy_not_loaded(monkeypatch):
    monkeypatch.delitem(sys.modules, "numpy", raising=False)
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    cli._pin_threads(True)
    for var in cli._THREAD_VARS:
        assert os.environ[var] == "1"


def test_pin_threads_honors_thread_cap_env(monkeypatch):
    monkeypatch.delitem(sys.modules, "numpy", raising=False)
    monkeypatch.setenv("BCT_THREADS", "3")
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    cli._pin_threads(False)
    for var in cli._THREAD_VARS:
        assert os.environ[var] == "3"


def test_pin_threads_no_op_once_numpy_loaded(monkeypatch):
    assert "numpy" in sys.modules
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    cli._pin_threads(True)
    assert all(var not in os.environ for var in cli._THREAD_VARS)


# ---------------------------------------------------------------------------
# error contract
# ---------------------------------------------------------------------------


def test_missing_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main([])
    assert err.value.code != 0


def test_config_error_is_machine_readable_json(capsys):
    code, out, err = run_cli(["train"], capsys)
    assert code == 1
    assert out is None
    doc = json.loads(err)
    assert doc["error"] == "ConfigError"
    assert "manifest" in doc["message"]


def test_bad_override_reports_the_offending_path(capsys, tmp_path):
    code, _, err = run_cli([
        "train", "--manifest", "whatever.csv", "--out", str(tmp_path),
        "--set", "model.embeed_dim=64",
    ], capsys)
    assert code == 1
    doc = json.loads(err)
    assert doc["error"] == "ConfigError"
    assert "embeed_dim" in doc["message"]


def test_missing_file_is_oserror_json(capsys, tmp_path):
    code, _, err = run_cli([
        "evaluate", "--predictions", str(tmp_path / "absent.csv"),
        "--out", str(tmp_path / "e"),
    ], capsys)
    assert code == 1
    doc = json.loads(err)
    assert doc["error"] in ("FormatError", "OSError", "ContractError")


# ---------------------------------------------------------------------------
# import / preprocess
# ---------------------------------------------------------------------------


def test_import_then_preprocess_chain(capsys, tmp_path):
    rng = np.random.default_rng(0)
    hu = rng.integers(-1000, 400, size=(8, 8, 8)).astype(np.int16)
    nii = tmp_path / "scan.nii"
    write_nifti(nii, hu, (1.0, 1.0, 1.0), dtype_code=4)

    code, out, _ = run_cli([
        "import", str(nii), str(tmp_path / "raw"),
    ], capsys)
    assert code == 0
    assert out["dims"] == [8, 8, 8]
    assert out["intensity"] == HU

    code, out, _ = run_cli([
        "preprocess", str(tmp_path / "raw"), str(tmp_path / "norm"),
        "--spacing", "1.5", "--cube", "16",
    ], capsys)
    assert code == 0
    assert out["dims"] == [16, 16, 16]
    assert out["intensity"] == NORM255
    header = json.loads((tmp_path / "norm.vol.json").read_text(encoding="utf-8"))
    assert header["spacing_mm"] == [1.5, 1.5, 1.5]


# ---------------------------------------------------------------------------
# phantom-gen
# ---------------------------------------------------------------------------


def test_phantom_gen_writes_manifest_and_run_manifest(cohort_dir):
    samples = load_manifest(cohort_dir / "manifest.csv")
    assert len(samples) == 4
    manifest = json.loads((cohort_dir / "run-manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "phantom-gen"
    assert manifest["seed"] == 11
    assert len(manifest["config_hash"]) == 64
    assert "beyondct" in manifest["versions"]
    assert "timestamp" not in manifest


def test_phantom_gen_rejects_bad_spec(capsys, tmp_path):
    code, _, err = run_cli([
        "phantom-gen", "--out", str(tmp_path / "c"), "--n", "2",
        "--gamma", "1.5",
    ], capsys)
    assert code == 1
    assert json.loads(err)["error"] == "ContractError"


# ---------------------------------------------------------------------------
# train / predict / evaluate / report chain
# ---------------------------------------------------------------------------


def test_train_zero_epochs_writes_initial_checkpoint(capsys, cohort_dir, tmp_path):
    out_dir = tmp_path / "run0"
    code, out, _ = run_cli([
        "train", "--tiny", "--manifest", str(cohort_dir / "manifest.csv"),
        "--out", str(out_dir), "--epochs", "0",
        "--set", "train.split_fractions=[0.5,0.25,0.25]",
    ], capsys)
    assert code == 0
    assert out["epochs_run"] == 0
    ckpt = load_checkpoint(out["checkpoint"])
    assert ckpt.epoch == 0
    assert (out_dir / "run-manifest.json").exists()
    assert (out_dir / "splits.json").exists()


def test_train_predict_evaluate_report_chain(capsys, cohort_dir, tmp_path):
    run_dir = tmp_path / "run"
    code, out, _ = run_cli([
        "train", "--tiny", "--manifest", str(cohort_dir / "manifest.csv"),
        "--out", str(run_dir), "--epochs", "1", "--seed", "2",
        "--set", "train.split_fractions=[0.5,0.25,0.25]",
        "--set", "train.batch_size=2",
        "--no-augment",
    ], capsys)
    assert code == 0
    assert out["epochs_run"] == 1

    preds = tmp_path / "preds.csv"
    code, out, _ = run_cli([
        "predict", "--checkpoint", str(run_dir / "best.ckpt"),
        "--manifest", str(cohort_dir / "manifest.csv"), "--out", str(preds),
    ], capsys)
    assert code == 0
    assert out["rows"] == len(load_manifest(cohort_dir / "manifest.csv"))

    eval_dir = tmp_path / "eval"
    code, out, _ = run_cli([
        "evaluate", "--predictions", str(preds), "--out", str(eval_dir),
    ], capsys)
    assert code == 0
    assert out["n"] == 4
    for name in ("report.json", "scatter.csv", "bland_altman.csv", "cdf.csv",
                 "scatter.png", "bland_altman.png", "cdf.png", "run-manifest.json"):
        assert (eval_dir / name).stat().st_size > 0, name

    merged = tmp_path / "merged"
    code, out, _ = run_cli([
        "report", str(eval_dir / "report.json"), str(eval_dir / "report.json"),
        "--labels", "first,second", "--out", str(merged),
    ], capsys)
    assert code == 0
    doc = json.loads((merged / "merged.json").read_text(encoding="utf-8"))
    assert [r["label"] for r in doc["runs"]] == ["first", "second"]
    assert (merged / "comparison.png").stat().st_size > 0


def test_predict_stamps_stage_labels_with_reference(capsys, cohort_dir, tmp_path):
    run_dir = tmp_path / "run"
    assert cli.main([
        "train", "--tiny", "--manifest", str(cohort_dir / "manifest.csv"),
        "--out", str(run_dir), "--epochs", "0",
        "--set", "train.split_fractions=[0.5,0.25,0.25]",
    ]) == 0
    capsys.readouterr()
    coeffs = tmp_path / "ref.json"
    coeffs.write_text(json.dumps(
        {"a0": 0.5, "a_age": -0.01, "a_height": 0.03, "a_sex": 0.2}
    ), encoding="utf-8")
    preds = tmp_path / "preds.csv"
    code, out, _ = run_cli([
        "predict", "--checkpoint", str(run_dir / "best.ckpt"),
        "--manifest", str(cohort_dir / "manifest.csv"), "--out", str(preds),
        "--reference-coeffs", str(coeffs),
    ], capsys)
    assert code == 0
    rows = preds.read_text(encoding="utf-8").strip().splitlines()
    header = rows[0].split(",")
    stage_col = header.index("gold_stage")
    stages = {row.split(",")[stage_col] for row in rows[1:]}
    assert stages <= {"NonCOPD", "I", "II", "III", "IV"}
    assert stages  # every row got a label


def test_evaluate_perfect_predictions_reports_ideal_metrics(capsys, tmp_path):
    pairs = [
        PredictionPair(f"P{i}", f"P{i}-S1", 2.0 + 0.3 * i, 2.0 + 0.3 * i)
        for i in range(6)
    ]
    preds = tmp_path / "perfect.csv"
    save_predictions(pairs, preds)
    code, out, _ = run_cli([
        "evaluate", "--predictions", str(preds), "--out", str(tmp_path / "e"),
        "--no-figures",
    ], capsys)
    assert code == 0
    assert out["mae_l"] == 0.0
    assert out["r2"] == 1.0
    assert out["pct_error"] == 0.0


def test_evaluate_with_groups_and_bins(capsys, tmp_path):
    rng = np.random.default_rng(5)
    pairs = [
        PredictionPair(
            f"P{i}", f"P{i}-S1", 2.0 + 0.2 * i, 2.0 + 0.2 * i + rng.normal(0, 0.1),
            sex=str(i % 2), smoking_status=str((i // 2) % 2),
        )
        for i in range(12)
    ]
    preds = tmp_path / "p.csv"
    save_predictions(pairs, preds)
    eval_dir = tmp_path / "e"
    code, out, _ = run_cli([
        "evaluate", "--predictions", str(preds), "--out", str(eval_dir),
        "--group", "sex", "--group", "smoking", "--bins", "20", "--no-figures",
    ], capsys)
    assert code == 0
    report = json.loads((eval_dir / "report.json").read_text(encoding="utf-8"))
    assert {g["grouping"] for g in report["subgroups"]} == {"sex", "smoking"}
    cdf_rows = (eval_dir / "cdf.csv").read_text(encoding="utf-8").strip().splitlines()
    assert len(cdf_rows) == 21  # header + 20 thresholds


def test_stage_confusion_requires_all_inputs(capsys, tmp_path):
    pairs = [PredictionPair(f"P{i}", f"P{i}-S1", 2.0 + i, 2.0 + i) for i in range(3)]
    preds = tmp_path / "p.csv"
    save_predictions(pairs, preds)
    code, _, err = run_cli([
        "evaluate", "--predictions", str(preds), "--out", str(tmp_path / "e"),
        "--fvc-predictions", str(preds), "--no-figures",
    ], capsys)
    assert code == 1
    message = json.loads(err)["message"]
    assert "--fev1-predictions" in message and "--reference-coeffs" in message


def test_report_label_count_mismatch(capsys, tmp_path):
    stub = tmp_path / "r.json"
    stub.write_text(json.dumps({"n": 1, "mae_l": 0.1, "pct_error": 5.0, "r2": 0.9}),
                    encoding="utf-8")
    code, _, err = run_cli([
        "report", str(stub), str(stub), "--labels", "only-one",
        "--out", str(tmp_path / "m"),
    ], capsys)
    assert code == 1
    assert json.loads(err)["error"] == "ConfigError"


# ---------------------------------------------------------------------------
# augment-preview
# ---------------------------------------------------------------------------


def test_augment_preview_is_seed_deterministic(capsys, cohort_dir, tmp_path):
    samples = load_manifest(cohort_dir / "manifest.csv")
    volume = cohort_dir / samples[0].volume_path
    outs = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        code, _, _ = run_cli([
            "augment-preview", "--volume", str(volume), "--seed", "42",
            "--out", str(out_dir),
        ], capsys)
        assert code == 0
        outs.append((
            (out_dir / "plan.json").read_bytes(),
            (out_dir / "augmented.vol.raw").read_bytes(),
        ))
    assert outs[0] == outs[1]
    plan = json.loads(outs[0][0])
    assert plan["seed"] == 42


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def test_gradcheck_passes_and_reports_every_primitive(capsys):
    code, out, _ = run_cli([
        "gradcheck", "--cube", "32", "--max-elements", "1",
    ], capsys)
    assert code == 0
    assert out["passed"] is True
    assert out["max_rel_err"] < 1e-4
    for op in ("matmul", "conv3d", "softmax_lastdim", "layer_norm", "relu",
               "gelu", "add", "sub", "mul", "scale", "abs", "mean",
               "reshape", "transpose", "concat_rows"):
        assert op in out["op_results"], op
        assert out["op_results"][op] < 1e-4


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------


def test_deterministic_rerun_is_byte_identical(capsys, cohort_dir, tmp_path):
    blobs = []
    for name in ("r1", "r2"):
        out_dir = tmp_path / name
        code, _, _ = run_cli([
            "train", "--tiny", "--deterministic",
            "--manifest", str(cohort_dir / "manifest.csv"),
            "--out", str(out_dir), "--epochs", "1", "--seed", "3",
            "--set", "train.split_fractions=[0.5,0.25,0.25]",
        ], capsys)
        assert code == 0
        blobs.append((
            (out_dir / "best.ckpt").read_bytes(),
            (out_dir / "epochs.jsonl").read_bytes(),
            (out_dir / "splits.json").read_bytes(),
        ))
    assert blobs[0] == blobs[1]
