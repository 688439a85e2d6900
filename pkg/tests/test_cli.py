import json

import pytest

from moddiff.cli import load_config, main
from moddiff.report import read_bench, report, threshold_table

SMALL = ["model.d_model=32", "model.n_heads=2", "model.d_head=16", "model.n_layers=1",
         "data.n_und=40", "data.n_gen=40", "data.n_il=10"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "train.cfg"
    cfg.write_text("# tiny run\nsteps = 4\nwarmup = 1\nbatch_und = 4\nbatch_gen = 4\nbatch_il = 2\nrow_len = 64\n"
                   + "\n".join(SMALL) + "\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_config_loading(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("lr = 0.002\nmodel.n_layers = 3\ndata.seed = 9\n")
    cfg, model_kv, data_kv = load_config(str(p), ["steps=5"])
    assert cfg.lr == 0.002 and cfg.steps == 5
    assert model_kv == {"n_layers": 3} and data_kv == {"seed": 9}
    with pytest.raises(ValueError):
        load_config(None, ["model.bogus=1"])


def test_train_outputs(trained):
    run = trained / "run"
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [1, 2, 3, 4]
    assert (run / "checkpoint.bin").exists() and (run / "timings.jsonl").exists()
    assert "steps = 4" in (run / "train.cfg").read_text()


def test_resume_and_init(trained, tmp_path):
    cfg = trained / "train.cfg"
    out = tmp_path / "split"
    base = ["train", "--config", str(cfg), "--data", str(trained / "data"), "--out", str(out)]
    assert main(base + ["--until", "2"]) == 0
    assert main(base + ["--resume", str(out / "checkpoint.bin")]) == 0
    assert (out / "metrics.jsonl").read_bytes() == (trained / "run" / "metrics.jsonl").read_bytes()
    stage2 = tmp_path / "stage2"
    assert main(["train", "--config", str(cfg), "--set", "stage=with-augmentation", "--data", str(trained / "data"),
                 "--out", str(stage2), "--init", str(trained / "run" / "checkpoint.bin")]) == 0


def test_eval_and_benchmarks(trained, tmp_path, capsys):
    ckpt = str(trained / "run" / "checkpoint.bin")
    assert main(["eval-und", ckpt, "--n", "2", "--block-len", "4", "8", "--max-blocks", "2",
                 "--out", str(tmp_path / "len.json")]) == 0
    assert "Average tokens" in capsys.readouterr().out
    assert main(["bench-threshold", ckpt, "--n", "2", "--block-len", "4", "--max-blocks", "2",
                 "--thresholds", "0.5", "1.0", "--out", str(tmp_path / "tau.json")]) == 0
    out = capsys.readouterr().out
    assert "Accuracy (%)" in out and "Throughput (tokens/s)" in out
    assert main(["bench-cache", ckpt, "--prefix-len", "0", "16", "--block-len", "4", "--reps", "1",
                 "--out", str(tmp_path / "cache.json")]) == 0
    rows = read_bench(tmp_path / "cache.json")["rows"]
    assert rows[0]["positions_ratio"] == pytest.approx(1.0)
    assert main(["sample-latent", ckpt, "--cls", "1", "--n", "3", "--steps", "2", "--out", str(tmp_path / "z.csv")]) == 0
    assert len((tmp_path / "z.csv").read_text().splitlines()) == 1 + 3 * 4
    assert main(["report", str(trained / "run" / "metrics.jsonl"), str(tmp_path / "tau.json"),
                 str(tmp_path / "len.json"), str(tmp_path / "cache.json"), "--plot-dir", str(tmp_path / "plots"),
                 "--out", str(tmp_path / "report.txt")]) == 0
    text = (tmp_path / "report.txt").read_text()
    assert "threshold-sweep" in text and "loss_und" in text
    assert (tmp_path / "plots" / "run_loss.csv").exists()


def test_report_empty_and_deterministic(trained, tmp_path):
    assert report([], []) == ""
    empty = tmp_path / "metrics.jsonl"
    empty.write_text("")
    assert report([str(empty)], []) == ""
    m = str(trained / "run" / "metrics.jsonl")
    assert report([m], []) == report([m], [])


def test_threshold_table_layout():
    rows = [{"tau": 0.5, "tokens_per_s": 120.0, "passes_per_token": 0.25, "accuracy": 0.9},
            {"tau": 0.9, "tokens_per_s": 60.0, "passes_per_token": 0.5, "accuracy": 0.95}]
    lines = threshold_table(rows).splitlines()
    assert lines[0].split("|")[1].strip() == "Threshold"
    assert [line.split("|")[1].strip() for line in lines[2:]] == ["Accuracy (%)", "Throughput (tokens/s)",
                                                                 "Passes per token"]
    assert "90.0" in lines[2] and "95.0" in lines[2]
