import sys
from pathlib import Path

import numpy as np
import pytest

from lpat import cache, cli, evaluate, training
from lpat.checkpoint import checkpoint_load

FIXTURE = Path(__file__).parent / "fixtures" / "fixture_50.csv"


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_synth_writes_deterministic_backblaze_csv(tmp_path, capsys):
    out_a = tmp_path / "a.csv"
    out_b = tmp_path / "b.csv"
    for out in (out_a, out_b):
        code, _, err = run(capsys, "synth", "--healthy", "10", "--failed", "2",
                           "--attrs", "3", "--days", "40", "--seed", "5",
                           "--out", str(out))
        assert code == 0, err
    assert out_a.read_bytes() == out_b.read_bytes()
    lines = out_a.read_text().splitlines()
    assert lines[0].startswith("date,serial_number,model,capacity_bytes,failure")
    assert len(lines) == 1 + 12 * 40
    serials = {ln.split(",")[1] for ln in lines[1:]}
    assert len(serials) == 12
    failures = [ln for ln in lines[1:] if ln.split(",")[4] == "1"]
    assert len(failures) == 2


def test_synth_output_preps_with_zero_cleaning_removals(tmp_path, capsys):
    csv_path = tmp_path / "fleet.csv"
    cache_path = tmp_path / "fleet.cache"
    run(capsys, "synth", "--healthy", "8", "--failed", "3", "--attrs", "2",
        "--days", "45", "--seed", "1", "--out", str(csv_path))
    code, out, err = run(capsys, "prep", "--input", str(csv_path),
                         "--out", str(cache_path), "--attrs",
                         "smart_5_raw,smart_9_raw", "--clusters", "2",
                         "--keep-frac", "1.0", "--window", "10", "--seed", "0")
    assert code == 0, err
    assert "healthy         8                8" in out
    split = cache.load_split(cache_path)
    assert split.window == 10
    assert len(split.attrs) == 2


def test_prep_keep_frac_one_drops_no_healthy_drive(tmp_path, capsys):
    cache_path = tmp_path / "fx.cache"
    code, out, _ = run(capsys, "prep", "--input", str(FIXTURE),
                       "--out", str(cache_path),
                       "--attrs", "smart_5_raw,smart_187_raw",
                       "--clusters", "1", "--keep-frac", "1.0",
                       "--window", "1", "--seed", "0")
    assert code == 0
    assert "train=17" in out and "test=33" in out and "valid=0" in out


def test_prep_window_larger_than_history_fails_cleanly(tmp_path, capsys):
    cache_path = tmp_path / "fx.cache"
    code, out, err = run(capsys, "prep", "--input", str(FIXTURE),
                         "--out", str(cache_path),
                         "--attrs", "smart_5_raw,smart_187_raw",
                         "--clusters", "1", "--keep-frac", "1.0",
                         "--window", "99", "--seed", "0")
    assert code == 1
    assert err and not cache_path.exists()


def test_prep_missing_column_exits_nonzero(tmp_path, capsys):
    code, _, err = run(capsys, "prep", "--input", str(FIXTURE),
                       "--out", str(tmp_path / "x.cache"),
                       "--attrs", "smart_5_raw,smart_42_raw",
                       "--clusters", "1", "--window", "1")
    assert code == 1
    assert "smart_42_raw" in err


@pytest.fixture(scope="module")
def fixture_pipeline(tmp_path_factory):
    """prep + train on the 50-row fixture, shared across CLI tests."""
    root = tmp_path_factory.mktemp("pipe")
    cache_path = root / "fx.cache"
    ckpt_path = root / "fx.ckpt"
    report_path = root / "fx.report"
    assert cli.main(["prep", "--input", str(FIXTURE), "--out", str(cache_path),
                     "--attrs", "smart_5_raw,smart_187_raw", "--clusters", "1",
                     "--keep-frac", "1.0", "--window", "1", "--seed", "0"]) == 0
    assert cli.main(["train", "--data", str(cache_path), "--mode", "basic",
                     "--epochs", "2", "--batch", "8", "--seed", "0",
                     "--out", str(ckpt_path), "--report", str(report_path)]) == 0
    return root, cache_path, ckpt_path, report_path


def test_train_writes_checkpoint_and_report(fixture_pipeline):
    _, _, ckpt_path, report_path = fixture_pipeline
    net, meta = checkpoint_load(ckpt_path)
    assert meta["window"] == "1"
    assert meta["attrs"] == "smart_5_raw,smart_187_raw"
    report = training.parse_report(report_path.read_text())
    assert len(report.epochs) == 2
    assert report.best_epoch == 2  # empty validation split keeps the last epoch


def test_eval_writes_round_trippable_metrics(fixture_pipeline, capsys, tmp_path):
    _, cache_path, ckpt_path, _ = fixture_pipeline
    metrics_path = tmp_path / "metrics.txt"
    code, out, err = run(capsys, "eval", "--data", str(cache_path),
                         "--checkpoint", str(ckpt_path), "--split", "test",
                         "--report", str(metrics_path))
    assert code == 0, err
    assert "Accuracy" in out and "Macro-F1" in out and "<=15" in out
    report = evaluate.parse_metrics(metrics_path.read_text())
    assert report.total == 33


def test_eval_empty_valid_split_is_an_error(fixture_pipeline, capsys):
    _, cache_path, ckpt_path, _ = fixture_pipeline
    code, _, err = run(capsys, "eval", "--data", str(cache_path),
                       "--checkpoint", str(ckpt_path), "--split", "valid")
    assert code == 1 and "empty" in err


def test_eval_rejects_bogus_split_name(fixture_pipeline, capsys):
    _, cache_path, ckpt_path, _ = fixture_pipeline
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--data", str(cache_path), "--checkpoint",
                  str(ckpt_path), "--split", "bogus"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "valid" in err and "test" in err


def test_predict_prints_class_and_unit_sum_probabilities(fixture_pipeline,
                                                         capsys, tmp_path):
    _, _, ckpt_path, _ = fixture_pipeline
    window_csv = tmp_path / "w.csv"
    window_csv.write_text("smart_5_raw,smart_187_raw\n5,105\n")
    code, out, err = run(capsys, "predict", "--checkpoint", str(ckpt_path),
                         "--window", str(window_csv))
    assert code == 0, err
    assert out.startswith("class=")
    probs = [float(tok) for tok in
             out.split("probs=[")[1].rstrip("]\n").split(",")]
    assert abs(sum(probs) - 1.0) < 1e-9
    assert f"{sum(probs):.3f}" == "1.000"


def test_predict_wrong_row_count_errors_without_stdout(fixture_pipeline,
                                                       capsys, tmp_path):
    _, _, ckpt_path, _ = fixture_pipeline
    window_csv = tmp_path / "w.csv"
    window_csv.write_text("smart_5_raw,smart_187_raw\n5,105\n6,106\n")
    code, out, err = run(capsys, "predict", "--checkpoint", str(ckpt_path),
                         "--window", str(window_csv))
    assert code == 1
    assert out == ""
    assert "expected exactly 1 rows" in err


def test_predict_malformed_row_errors_without_stdout(fixture_pipeline,
                                                     capsys, tmp_path):
    _, _, ckpt_path, _ = fixture_pipeline
    window_csv = tmp_path / "w.csv"
    window_csv.write_text("smart_5_raw,smart_187_raw\nfive,105\n")
    code, out, err = run(capsys, "predict", "--checkpoint", str(ckpt_path),
                         "--window", str(window_csv))
    assert code == 1 and out == "" and "malformed" in err


def test_train_mode_at_with_unlabeled_pool_is_a_usage_error(tmp_path, capsys):
    csv_path = tmp_path / "fleet.csv"
    cache_path = tmp_path / "fleet.cache"
    run(capsys, "synth", "--healthy", "6", "--failed", "3", "--attrs", "2",
        "--days", "45", "--seed", "3", "--out", str(csv_path))
    run(capsys, "prep", "--input", str(csv_path), "--out", str(cache_path),
        "--attrs", "smart_5_raw,smart_9_raw", "--clusters", "1",
        "--keep-frac", "1.0", "--window", "10", "--seed", "1")
    split = cache.load_split(cache_path)
    assert split.train_unlabeled  # 45-day failing drives have >15-day windows
    code, _, err = run(capsys, "train", "--data", str(cache_path),
                       "--mode", "at", "--epochs", "1",
                       "--out", str(tmp_path / "x.ckpt"))
    assert code == 1 and "unlabeled" in err
    code, _, err = run(capsys, "train", "--data", str(cache_path),
                       "--mode", "at", "--epochs", "1", "--unlabeled-frac", "0",
                       "--batch", "8", "--out", str(tmp_path / "x.ckpt"))
    assert code == 0, err


def test_config_file_equals_flags_and_flags_override(tmp_path, capsys):
    out_flags = tmp_path / "flags.csv"
    out_file = tmp_path / "file.csv"
    cfg_path = tmp_path / "synth.cfg"
    cfg_path.write_text(
        "# synthetic fleet\n"
        "healthy=7\n"
        "failed=2\n"
        "attrs=2\n"
        "days=40\n"
        "seed=11\n"
        f"out={out_file}\n")
    assert cli.main(["synth", "--healthy", "7", "--failed", "2", "--attrs", "2",
                     "--days", "40", "--seed", "11", "--out", str(out_flags)]) == 0
    assert cli.main(["synth", "--config", str(cfg_path)]) == 0
    capsys.readouterr()
    assert out_flags.read_bytes() == out_file.read_bytes()

    out_override = tmp_path / "override.csv"
    assert cli.main(["synth", "--config", str(cfg_path), "--seed", "12",
                     "--out", str(out_override)]) == 0
    capsys.readouterr()
    assert out_override.read_bytes() != out_file.read_bytes()


def test_prep_is_byte_deterministic(tmp_path, capsys):
    csv_path = tmp_path / "fleet.csv"
    run(capsys, "synth", "--healthy", "6", "--failed", "2", "--attrs", "2",
        "--days", "40", "--seed", "4", "--out", str(csv_path))
    caches = []
    for name in ("a.cache", "b.cache"):
        out = tmp_path / name
        code, _, err = run(capsys, "prep", "--input", str(csv_path),
                           "--out", str(out), "--attrs", "smart_5_raw,smart_9_raw",
                           "--clusters", "2", "--keep-frac", "1.0",
                           "--window", "10", "--seed", "3")
        assert code == 0, err
        caches.append(out.read_bytes())
    assert caches[0] == caches[1]


def test_cache_resave_is_byte_stable(tmp_path, capsys):
    csv_path = tmp_path / "fleet.csv"
    cache_path = tmp_path / "fleet.cache"
    run(capsys, "synth", "--healthy", "5", "--failed", "2", "--attrs", "2",
        "--days", "40", "--seed", "8", "--out", str(csv_path))
    run(capsys, "prep", "--input", str(csv_path), "--out", str(cache_path),
        "--attrs", "smart_5_raw,smart_9_raw", "--clusters", "1",
        "--keep-frac", "1.0", "--window", "10", "--seed", "0")
    split = cache.load_split(cache_path)
    resaved = tmp_path / "resaved.cache"
    cache.save_split(split, resaved)
    assert resaved.read_bytes() == cache_path.read_bytes()


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    cfg_path = tmp_path / "bad.cfg"
    cfg_path.write_text("healthy=3\nbogus-key=1\n")
    code, _, err = run(capsys, "synth", "--config", str(cfg_path),
                       "--out", str(tmp_path / "x.csv"))
    assert code == 1 and "bogus-key" in err


def test_runconfig_save_load_round_trip(tmp_path):
    cfg = cli.RunConfig.merge("train", {"data": "d.cache", "out": "m.ckpt",
                                        "lam": 2.5, "epochs": 3}, None)
    path = tmp_path / "train.cfg"
    cfg.save(path)
    loaded = cli.RunConfig.load_file("train", path)
    assert loaded["lam"] == 2.5
    assert loaded["epochs"] == 3
    assert loaded["data"] == "d.cache"


def test_basic_equals_lpat_with_lambda_zero(tmp_path, capsys):
    csv_path = tmp_path / "fleet.csv"
    cache_path = tmp_path / "fleet.cache"
    run(capsys, "synth", "--healthy", "6", "--failed", "2", "--attrs", "2",
        "--days", "40", "--seed", "2", "--out", str(csv_path))
    run(capsys, "prep", "--input", str(csv_path), "--out", str(cache_path),
        "--attrs", "smart_5_raw,smart_9_raw", "--clusters", "1",
        "--keep-frac", "1.0", "--window", "8", "--seed", "0")
    ck_basic = tmp_path / "basic.ckpt"
    ck_lpat = tmp_path / "lpat.ckpt"
    common = ["--data", str(cache_path), "--epochs", "2", "--batch", "16",
              "--seed", "7"]
    assert cli.main(["train", *common, "--mode", "basic",
                     "--out", str(ck_basic)]) == 0
    assert cli.main(["train", *common, "--mode", "lpat", "--lambda", "0",
                     "--epsilon", "1", "--xi", "1", "--out", str(ck_lpat)]) == 0
    capsys.readouterr()
    net_a, _ = checkpoint_load(ck_basic)
    net_b, _ = checkpoint_load(ck_lpat)
    for name, arr in net_a.params().items():
        assert np.array_equal(arr, net_b.params()[name]), name
