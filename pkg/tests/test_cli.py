import json
from dataclasses import replace
from pathlib import Path

import pytest

from lanid.cli import main
from lanid.config import config_from_dict
from lanid.runner import ConfigError, run_baseline, run_experiment
from lanid.synthetic import write_synthetic


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return write_synthetic(out, seed=1, n_intents=4, per_intent=30, dim=8)


def _argv(cmd, data, out, *extra):
    return [
        cmd,
        "--preset", "banking",
        "--k", "4",
        "--knn-k", "10",
        "--dataset", data["dataset"],
        "--train-embeddings", data["train_embeddings"],
        "--test-embeddings", data["test_embeddings"],
        "--output-dir", str(out),
        *extra,
    ]


def test_cli_run_writes_bundle(data, tmp_path, capsys):
    assert main(_argv("run", data, tmp_path, "--epochs", "4", "--eps", "auto")) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["method"] == "lanid_both" and report["k"] == 4
    (run_dir,) = tmp_path.iterdir()
    assert sorted(p.name for p in run_dir.iterdir()) == [
        "adapter.ckpt", "assignment.csv", "config.json", "log.jsonl", "report.json"
    ]
    snapshot = json.loads((run_dir / "config.json").read_text())
    assert snapshot["sampler"]["K"] == 10 and snapshot["train"]["epochs"] == 4


def test_cli_report_and_baseline(data, tmp_path, capsys):
    assert main(_argv("baseline", data, tmp_path)) == 0
    capsys.readouterr()
    (run_dir,) = tmp_path.iterdir()
    assert main(["report", str(run_dir)]) == 0
    assert json.loads(capsys.readouterr().out)["method"] == "baseline"
    assert main(["report", str(tmp_path / "missing")]) == 1


def test_cli_validate(data, tmp_path, capsys):
    assert main(_argv("validate", data, tmp_path)) == 0
    assert main(_argv("validate", data, tmp_path, "--nk", "10")) == 1
    assert "n_k must be < K" in capsys.readouterr().out


def test_cli_errors_exit_nonzero(data, tmp_path, capsys):
    assert main(_argv("run", data, tmp_path, "--dataset", str(tmp_path / "nope.tsv"))) != 0
    assert main(_argv("run", data, tmp_path, "--k", "0")) != 0
    # k larger than the test split fails inside clustering
    assert main(_argv("run", data, tmp_path, "--k", "1000", "--epochs", "1")) == 1
    assert "error" in capsys.readouterr().err


def test_cli_config_file_with_flag_override(data, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(
        f"preset: banking\ndataset: {data['dataset']}\ntrain_embeddings: {data['train_embeddings']}\n"
        f"test_embeddings: {data['test_embeddings']}\ncluster:\n  k: 4\nsampler:\n  K: 10\n"
    )
    assert main(["validate", "--config", str(cfg)]) == 0
    assert main(["validate", "--config", str(cfg), "--knn-k", "1", "--nk", "2"]) == 1


def test_cli_synth(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "s"), "--intents", "3", "--per-intent", "5", "--dim", "4"]) == 0
    assert Path(json.loads(capsys.readouterr().out)["dataset"]).exists()


def _config(data, out, **kw):
    return config_from_dict(
        {"preset": "banking", "cluster": {"k": 4}, "sampler": {"K": 10}, "output_dir": str(out), **data, **kw}
    )


def test_rerun_is_byte_identical(data, tmp_path):
    cfg = _config(data, tmp_path)
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert (a.run_dir / "report.json").read_bytes() == (b.run_dir / "report.json").read_bytes()
    assert a.run_dir != b.run_dir


def test_baseline_equals_zero_epoch_run(data, tmp_path):
    cfg = _config(data, tmp_path)
    zero = run_experiment(replace(cfg, train=replace(cfg.train, epochs=0)))
    base = run_baseline(cfg)
    # unit-norm inputs make the output normalization a no-op up to rounding
    assert set(zero.report) == set(base.report)
    for key, value in base.report.items():
        if key != "method":
            assert zero.report[key] == pytest.approx(value, rel=1e-9)
    assert (zero.assignment.labels == base.assignment.labels).all()


def test_lanid_near_never_invokes_density(data, tmp_path):
    res = run_experiment(_config(data, tmp_path, variant="lanid_near"))
    its = res.log.iterations()
    assert its and all(r["samplers"] == ["knn"] and r["pairs_density"] == 0 for r in its)


def test_semi_supervised_run(data, tmp_path):
    res = run_experiment(_config(data, tmp_path, mode="semi_supervised", kcr="kcr50"))
    assert res.report["mode"] == "semi_supervised"


def test_invalid_config_enumerates_everything(data, tmp_path):
    cfg = _config(data, tmp_path, mode="semi_supervised", kcr=0.0, sampler={"K": 2, "n_k": 3})
    with pytest.raises(ConfigError) as info:
        run_experiment(cfg)
    assert len(info.value.violations) >= 2
    assert list(tmp_path.iterdir()) == []
