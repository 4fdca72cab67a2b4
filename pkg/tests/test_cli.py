import json
import subprocess
import sys
from pathlib import Path


from scda import cli

FAST = ["--pretrain-epochs", "2", "--inner-epochs", "1", "--outer-epochs", "2",
        "--hidden", "8", "--feature-dim", "6", "--pca-dim", "4", "--k-max", "4",
        "--kmeans-restarts", "1", "--source-per-class", "20", "--target-per-class", "20"]


def invoke(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def artifacts(out):
    return [Path(p) for p in json.loads(out.strip().splitlines()[-1])["artifacts"]]


def test_generate_default(tmp_path, capsys):
    code, out, _ = invoke(capsys, "generate", "--out-dir", tmp_path)
    assert code == 0
    paths = artifacts(out)
    assert [p.name for p in paths] == ["source.csv", "target.csv"]
    assert [len(p.read_text().splitlines()) - 1 for p in paths] == [400, 700]


def test_generate_same_seed_same_bytes(tmp_path, capsys):
    a = artifacts(invoke(capsys, "generate", "--seed", 7, "--out-dir", tmp_path / "a")[1])
    b = artifacts(invoke(capsys, "generate", "--seed", 7, "--out-dir", tmp_path / "b")[1])
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert a[0].parent.name.endswith("-s7")


def test_invalid_spec_exit_2(tmp_path, capsys):
    code, _, err = invoke(capsys, "generate", "--num-known", 0, "--out-dir", tmp_path)
    assert code == 2 and "num_known" in err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    code, _, err = invoke(capsys, "run", "--config", cfg, "--dry-run")
    assert code == 2 and "learning_rate" in err
    cfg.write_text(json.dumps({"model": {}}))
    assert invoke(capsys, "run", "--config", cfg, "--dry-run")[0] == 2


def test_precedence_flag_over_file_over_default(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lr": 0.5, "batch_size": 16},
                               "benchmark": {"dim": 8}}))
    args = cli.build_parser().parse_args(["run", "--config", str(cfg), "--lr", "0.25"])
    conf = cli.resolve(cli.load_config(cfg), args)
    assert conf["train"].lr == 0.25
    assert conf["train"].batch_size == 16
    assert conf["train"].momentum == 0.9
    assert conf["benchmark"].dim == 8


def test_dry_run_trains_nothing(tmp_path, capsys):
    code, out, _ = invoke(capsys, "run", "--dry-run", "--out-dir", tmp_path)
    assert code == 0 and artifacts(out) == [] and not any(tmp_path.iterdir())


def test_run_writes_report_and_plot_data(tmp_path, capsys):
    code, out, _ = invoke(capsys, "run", *FAST, "--out-dir", tmp_path)
    assert code == 0
    names = {p.name for p in artifacts(out)}
    assert {"report.json", "epochs.jsonl", "loss_curve.csv", "k_trajectory.csv",
            "features_2d.csv", "sweep.csv", "model.json", "config.json"} <= names
    for p in artifacts(out):
        assert p.exists()
    run_dir = artifacts(out)[0].parent
    scatter = (run_dir / "features_2d.csv").read_text().splitlines()
    assert scatter[0] == "domain,label,gt,pc0,pc1" and len(scatter) == 1 + 80 + 140
    code, out, _ = invoke(capsys, "report", run_dir / "report.json")
    assert code == 0 and "OS" in out


def test_k_fixed_1_report_has_no_sweep(tmp_path, capsys):
    code, out, _ = invoke(capsys, "run", *FAST, "--ablation", "k_fixed_1", "--out-dir", tmp_path)
    assert code == 0
    report = next(p for p in artifacts(out) if p.name == "report.json")
    assert json.loads(report.read_text())["sweep"] is None
    assert "sweep.csv" not in {p.name for p in artifacts(out)}


def test_run_from_files(tmp_path, capsys):
    src, tgt = artifacts(invoke(capsys, "generate", "--out-dir", tmp_path,
                                "--source-per-class", 20, "--target-per-class", 20)[1])
    code, out, _ = invoke(capsys, "run", *FAST, "--source", src, "--target", tgt,
                          "--out-dir", tmp_path / "r")
    assert code == 0 and "report.json" in {p.name for p in artifacts(out)}
    bad = tmp_path / "bad.csv"
    bad.write_text("f0,label\n1.0,-1\nx,-1\n")
    code, _, err = invoke(capsys, "run", "--source", src, "--target", bad, "--dry-run")
    assert code == 2 and "line 3" in err


def test_numerical_failure_exit_3(tmp_path, capsys):
    import numpy as np

    with np.errstate(all="ignore"):
        code, _, err = invoke(capsys, "run", *FAST, "--lr", "1e30", "--out-dir", tmp_path)
    assert code == 3 and "epoch" in err


def test_ablate_rows_and_determinism(tmp_path, capsys):
    argv = ["ablate", *FAST, "--modes", "full,k_fixed_1", "--seeds", 10]
    code, out, _ = invoke(capsys, *argv, "--out-dir", tmp_path / "a")
    assert code == 0
    paths = {p.name: p for p in artifacts(out)}
    assert len(paths["rows.csv"].read_text().splitlines()) == 1 + 20
    header = paths["table.csv"].read_text().splitlines()[0]
    assert "os_mean" in header and "os_sd" in header
    again = {p.name: p for p in artifacts(invoke(capsys, *argv, "--out-dir", tmp_path / "b")[1])}
    for name in paths:
        assert paths[name].read_bytes() == again[name].read_bytes()


def test_help_lists_defaults():
    proc = subprocess.run([sys.executable, "-m", "scda.cli", "run", "--help"],
                          capture_output=True, text=True, check=True)
    assert "--pretrain-epochs" in proc.stdout and "(default: 100)" in proc.stdout
    assert "--rotation-deg" in proc.stdout


def test_missing_report_file(capsys, tmp_path):
    assert invoke(capsys, "report", tmp_path / "nope.json")[0] == 1
