import csv
import json

import pytest

from gyrodiff.cli import main
from gyrodiff.datasets import load_jsonl

TINY = [
    "data_count=40",
    "ae_epochs=1",
    "diff_epochs=1",
    "T=8",
    "hidden=16",
    "heads=2",
    "L_enc=1",
    "L_denoise=1",
    "m=8",
    "d_latent=4",
    "pe_eig=2",
    "k=3",
    "gen_count=6",
    "batch=16",
]


def run(out, cmd, *extra):
    args = [cmd, "--out", str(out)]
    for s in TINY + list(extra):
        args += ["--set", s]
    return main(args)


def pipeline(out):
    for cmd in ("make-data", "train-ae", "train-diff", "generate", "evaluate", "export-embeddings"):
        assert run(out, cmd) == 0


ARTIFACTS = ["dataset.jsonl", "ae.ckpt", "diff.ckpt", "generated.jsonl", "gen_report.csv", "eval_report.csv", "embeddings.csv", "manifold_weights.csv", "centroids.csv", "manifest.json"]


@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    pipeline(a)
    pipeline(b)
    return a, b


def test_pipeline_artifacts_byte_identical(twin_runs):
    a, b = twin_runs
    for name in ARTIFACTS:
        assert (a / name).exists(), name
        if name == "manifest.json":
            ja, jb = json.loads((a / name).read_text()), json.loads((b / name).read_text())
            assert {k: v["sha256"] for k, v in ja.items()} == {k: v["sha256"] for k, v in jb.items()}
        else:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_generated_file_parses_and_report_header(twin_runs):
    a, _ = twin_runs
    assert len(load_jsonl(a / "generated.jsonl")) == 6
    head = (a / "gen_report.csv").read_text().splitlines()[0]
    assert head == "validity,uniqueness,novelty,mmd_degree,mmd_clustering,count"


def test_seed_changes_artifacts(tmp_path, twin_runs):
    a, _ = twin_runs
    assert run(tmp_path, "train-ae", "seed=1") == 0
    assert (tmp_path / "ae.ckpt").read_bytes() != (a / "ae.ckpt").read_bytes()


def test_verify_prop31_and_stability(tmp_path, capsys):
    assert main(["verify-prop31", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "prop31.csv")))
    assert len(rows) == 25 and max(float(r["rel_error"]) for r in rows) < 0.01
    assert main(["bench-stability", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "gyrokernel_nonfinite=0" in out
    first = (tmp_path / "stability_report.csv").read_bytes()
    main(["bench-stability", "--out", str(tmp_path)])
    assert (tmp_path / "stability_report.csv").read_bytes() == first


def test_predict_regression_tiny(tmp_path):
    extra = ["task=graph_regress"]
    for cmd in ("train-ae", "train-diff", "predict"):
        assert run(tmp_path, cmd, *extra) == 0
    rows = list(csv.DictReader(open(tmp_path / "predictions.csv")))
    assert rows and set(rows[0]) == {"index", "target", "prediction"}
    metric = list(csv.DictReader(open(tmp_path / "predict_metric.csv")))[0]
    assert metric["metric"] == "mae" and float(metric["value"]) >= 0


def test_config_file_and_errors(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny\n" + "\n".join(s.replace("=", " = ") for s in TINY) + f"\nout_dir = {tmp_path / 'o'}\n")
    assert main(["make-data", "--config", str(cfg)]) == 0
    assert len(load_jsonl(tmp_path / "o" / "dataset.jsonl")) == 40
    with pytest.raises(KeyError):
        main(["make-data", "--set", "bogus=1", "--out", str(tmp_path)])
    with pytest.raises(SystemExit):
        main(["no-such-command"])
    with pytest.raises(ValueError):
        run(tmp_path / "p", "predict")
