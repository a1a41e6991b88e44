import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from echolstm import cli, diagnostics, weights
from echolstm.tasks import gen_distractor

TINY = ["--hidden-size", "6", "--embed-dim", "4", "--max-epochs", "2"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("ECHO_RNN_OUT", raising=False)
    return tmp_path


def gen(*extra):
    return cli.main(["gen", "--task", "distractor", "--n", "60", "--n-test", "20", "--seed", "7", "--output-dir", "out", *extra])


@pytest.fixture
def trained(workdir):
    assert gen() == 0
    for model in ("echo", "baseline"):
        assert cli.main(["train", "--model", model, "--output-dir", "out", *TINY]) == 0
    return {m: workdir / "out" / "distractor" / m / "seed0" / "weights.bin" for m in ("echo", "baseline")}


# ---------------------------------------------------------------- gen


def test_gen_writes_files_and_manifest(workdir):
    assert gen() == 0
    data = workdir / "out" / "data" / "distractor"
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["format_version"] == 1 and manifest["seed"] == 7
    for split in ("train", "val", "test"):
        lines = (data / f"{split}.txt").read_text().splitlines()
        assert len(lines) == manifest["counts"][split]
    assert manifest["counts"] == {"train": 54, "val": 6, "test": 20}


def test_gen_is_byte_identical_and_refuses_overwrite(workdir):
    assert gen() == 0
    data = workdir / "out" / "data" / "distractor"
    first = {p.name: p.read_bytes() for p in data.iterdir()}
    assert gen() == cli.EXIT_USAGE
    assert gen("--force") == 0
    assert {p.name: p.read_bytes() for p in data.iterdir()} == first


def test_gen_test_split_is_disjoint_from_pool(workdir):
    gen()
    data = workdir / "out" / "data" / "distractor"
    pool = set((data / "train.txt").read_text().splitlines()) | set((data / "val.txt").read_text().splitlines())
    assert not pool & set((data / "test.txt").read_text().splitlines())


def test_gen_listops(workdir):
    assert cli.main(["gen", "--task", "listops", "--n", "30", "--n-test", "10", "--max-depth", "2", "--output-dir", "out"]) == 0
    manifest = json.loads((workdir / "out" / "data" / "listops" / "manifest.json").read_text())
    assert manifest["spec"]["max_depth"] == 2 and manifest["vocab_size"] == 16


# ---------------------------------------------------------------- train


def test_train_defaults_and_outputs(workdir):
    gen()
    assert cli.main(["train", "--model", "baseline", "--output-dir", "out", "--max-epochs", "1", "--hidden-size", "4"]) == 0
    run = workdir / "out" / "distractor" / "baseline" / "seed0"
    assert sorted(p.name for p in run.iterdir()) == ["curves.csv", "result.json", "weights.bin"]
    result = json.loads((run / "result.json").read_text())
    train_cfg = result["config"]["train"]
    assert (train_cfg["batch_size"], train_cfg["lr"], train_cfg["weight_decay"]) == (16, 1e-3, 5e-4)
    assert result["meta"]["experiment"]["patience"] == 15
    model_cfg = result["config"]["model"]
    assert not model_cfg["use_ocg"] and not model_cfg["use_attention"] and model_cfg["num_layers"] == 2
    assert (run / "curves.csv").read_text().splitlines()[0] == "epoch,train_loss,val_acc"
    assert weights.load(run / "weights.bin").config.hidden_size == 4


def test_train_echo_flags(workdir):
    gen()
    assert cli.main(["train", "--model", "echo", "--output-dir", "out", *TINY]) == 0
    result = json.loads((workdir / "out/distractor/echo/seed0/result.json").read_text())
    assert result["config"]["model"]["use_ocg"] and result["config"]["model"]["use_attention"]
    assert result["config"]["model"]["num_layers"] == 1


def test_train_is_deterministic(workdir):
    gen()
    outputs = []
    for _ in range(2):
        assert cli.main(["train", "--model", "echo", "--output-dir", "out", *TINY]) == 0
        run = workdir / "out/distractor/echo/seed0"
        r = json.loads((run / "result.json").read_text())
        outputs.append((r["loss_curve"], r["accuracy_curve"], (run / "weights.bin").read_bytes(), (run / "curves.csv").read_bytes()))
    assert outputs[0] == outputs[1]


def test_train_without_data(workdir):
    assert cli.main(["train", "--model", "echo", "--output-dir", "out"]) == cli.EXIT_DATA


def test_train_version_mismatch(workdir):
    gen()
    path = workdir / "out/data/distractor/manifest.json"
    manifest = json.loads(path.read_text())
    manifest["format_version"] = 99
    path.write_text(json.dumps(manifest))
    assert cli.main(["train", "--model", "echo", "--output-dir", "out", *TINY]) == cli.EXIT_DATA


def test_train_task_mismatch(workdir):
    gen()
    assert cli.main(["train", "--task", "listops", "--data", "out/data/distractor", "--output-dir", "out", *TINY]) == cli.EXIT_DATA


def test_env_overrides_output_dir(workdir, monkeypatch):
    monkeypatch.setenv("ECHO_RNN_OUT", str(workdir / "envout"))
    assert cli.main(["gen", "--n", "40", "--n-test", "10"]) == 0
    assert (workdir / "envout/data/distractor/manifest.json").is_file()


def test_usage_errors(workdir, capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["train", "--model", "gru"]) == cli.EXIT_USAGE
    cfg = workdir / "bad.json"
    cfg.write_text(json.dumps({"schema_version": 1, "hiden": 3}))
    assert cli.main(["gen", "--config", str(cfg)]) == cli.EXIT_USAGE
    assert "unknown config keys" in capsys.readouterr().err


# ---------------------------------------------------------------- ablate


def test_ablate_table(workdir):
    gen()
    assert cli.main(["ablate", "--output-dir", "out", "--seeds", "0,1", "--hidden-size", "4", "--max-epochs", "1"]) == 0
    payload = json.loads((workdir / "out/distractor/ablation.json").read_text())
    assert [r["model"] for r in payload["rows"]] == ["baseline", "attentive", "hybrid-ocg", "echo"]
    for row in payload["rows"]:
        accs = [run["test_accuracy"] for run in row["runs"]]
        assert row["n_seeds"] == 2
        assert row["mean"] == pytest.approx(np.mean(accs)) and row["std"] == pytest.approx(np.std(accs))
    table = (workdir / "out/distractor/ablation.txt").read_text().splitlines()
    assert [line.split()[0] for line in table[2:6]] == ["baseline", "attentive", "hybrid-ocg", "echo"]


def test_ablate_records_divergence_and_continues(workdir, monkeypatch):
    gen()
    real = cli.train_one

    def flaky(cfg, data, model_name, seed):
        if model_name == "attentive":
            raise cli.TrainingError("loss diverged (non-finite) in epoch 1")
        return real(cfg, data, model_name, seed)

    monkeypatch.setattr(cli, "train_one", flaky)
    assert cli.main(["ablate", "--output-dir", "out", "--seeds", "0", "--hidden-size", "4", "--max-epochs", "1"]) == 0
    rows = {r["model"]: r for r in json.loads((workdir / "out/distractor/ablation.json").read_text())["rows"]}
    assert rows["attentive"]["mean"] is None and "diverged" in rows["attentive"]["runs"][0]["error"]
    assert rows["echo"]["mean"] is not None


# ---------------------------------------------------------------- diagnose


def model_args(paths):
    return [a for name, p in paths.items() for a in ("--model", f"{name}={p}")]


def test_diagnose_all(trained, workdir):
    args = ["diagnose", *model_args(trained), "--all", "--n-eval", "30", "--out", "diag", "--data", "out/data/distractor"]
    assert cli.main(args) == 0
    out = workdir / "diag"
    headers = {p.name: next(csv.reader(open(p))) for p in out.glob("*.csv")}
    assert headers == {
        "gate_timeline.csv": ["t", "mean_f", "std_f", "model"],
        "variance.csv": ["model", "variance", "t_lo", "t_hi", "n_samples"],
        "attention.csv": ["sample_id", "t", "alpha"],
        "grad_profile.csv": ["t", "grad_norm", "model"],
        "half_life.csv": ["model", "mean_f_trigger", "mean_f_no_trigger", "difference", "p_value", "n_pairs"],
    }
    rows = {r["model"]: float(r["variance"]) for r in csv.DictReader(open(out / "variance.csv"))}
    assert rows["ratio:echo/baseline"] == pytest.approx(rows["echo"] / rows["baseline"], rel=1e-9)

    # independent recomputation of the echo variance from raw gate traces
    spec = cli._eval_spec(cli.build_parser().parse_args(args))
    batch = gen_distractor(spec, 30, start=cli.EVAL_OFFSET)
    model = weights.load(trained["echo"])
    per = []
    for s in batch:
        f = model.forward(np.array([s.tokens])).trace().f[-1, 0]
        per.append(np.mean([np.var(f[9:50, u]) for u in range(f.shape[1])]))
    assert rows["echo"] == pytest.approx(float(np.mean(per)), abs=1e-9)

    alpha = {}
    for r in csv.DictReader(open(out / "attention.csv")):
        alpha[r["sample_id"]] = alpha.get(r["sample_id"], 0.0) + float(r["alpha"])
    assert len(alpha) == 30 and all(abs(v - 1) < 1e-9 for v in alpha.values())

    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert cli.main(args) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_diagnose_attention_on_baseline(trained):
    assert cli.main(["diagnose", "--model", f"baseline={trained['baseline']}", "--attention", "--out", "d"]) == cli.EXIT_USAGE


def test_diagnose_untrained_changes_weights_only_in_memory(trained, workdir):
    before = trained["echo"].read_bytes()
    assert cli.main(["diagnose", *model_args(trained), "--variance", "--untrained", "--n-eval", "10", "--out", "d"]) == 0
    assert trained["echo"].read_bytes() == before


def test_diagnose_needs_a_selection(trained):
    assert cli.main(["diagnose", *model_args(trained), "--out", "d"]) == cli.EXIT_USAGE


# ---------------------------------------------------------------- sweep


def test_sweep(trained, workdir):
    assert cli.main(["sweep", *model_args(trained), "--n", "20", "--out", "sweep.csv"]) == 0
    result = diagnostics.SweepResult.read_csv(workdir / "sweep.csv")
    assert len(result.rows) == 10
    assert sorted({p for p, _, _ in result.rows}) == [5, 15, 25, 35, 45]


def test_sweep_errors(trained, workdir):
    assert cli.main(["sweep", "--model", f"echo={trained['echo']}"]) == cli.EXIT_USAGE
    assert cli.main(["sweep", "--model", f"echo={trained['echo']}", "--model", "b=missing.bin"]) == cli.EXIT_DATA
    junk = workdir / "junk.bin"
    junk.write_bytes(b"garbage")
    assert cli.main(["sweep", "--model", f"echo={trained['echo']}", "--model", f"b={junk}"]) == cli.EXIT_DATA


# ---------------------------------------------------------------- verify-gradients and entry point


def test_verify_gradients(capsys):
    assert cli.main(["verify-gradients"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and all(line.startswith("PASS") for line in lines)


def test_console_script(workdir):
    exe = shutil.which("echolstm")
    cmd = [exe] if exe else [sys.executable, "-m", "echolstm.cli"]
    proc = subprocess.run([*cmd, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("gen", "train", "ablate", "diagnose", "sweep", "verify-gradients"):
        assert sub in proc.stdout
