import json

import pytest

from echolstm.cells import ConfigError
from echolstm.config import DESK_SCALE, MODELS, OUT_ENV, SCHEMA_VERSION, ExperimentConfig, build_config, model_name
from echolstm.tasks import DistractorSpec, ListOpsSpec


def write(tmp_path, **values):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **values}))
    return str(path)


def test_models_cover_the_ablation_grid():
    assert list(MODELS) == ["baseline", "attentive", "hybrid-ocg", "echo"]
    assert set(MODELS.values()) == {(False, False), (False, True), (True, False), (True, True)}
    for name, flags in MODELS.items():
        assert model_name(*flags) == name


def test_task_defaults():
    d = build_config(task="distractor").resolved()
    assert (d.batch_size, d.max_epochs, d.hidden_size, d.patience, d.lr, d.weight_decay) == (16, 120, 64, 15, 1e-3, 5e-4)
    lo = build_config(task="listops").resolved()
    assert (lo.batch_size, lo.max_epochs, lo.hidden_size) == (32, 80, 128)


def test_layers_follow_the_model():
    assert build_config(model="echo").resolved().num_layers == 1
    assert build_config(model="hybrid-ocg").resolved().num_layers == 1
    assert build_config(model="baseline").resolved().num_layers == 2
    assert build_config(model="baseline", num_layers=3).resolved().num_layers == 3


def test_echo_model_config():
    mc = build_config(model="echo").model_config(12, 4)
    assert mc.use_ocg and mc.use_attention and mc.num_layers == 1
    mc = build_config(model="attentive").model_config(12, 4)
    assert not mc.use_ocg and mc.use_attention and mc.num_layers == 2


def test_precedence(tmp_path, monkeypatch):
    path = write(tmp_path, lr=0.01, batch_size=8, output_dir="from-file")
    monkeypatch.delenv(OUT_ENV, raising=False)
    cfg = build_config(path)
    assert (cfg.lr, cfg.batch_size, cfg.output_dir) == (0.01, 8, "from-file")
    monkeypatch.setenv(OUT_ENV, "from-env")
    assert build_config(path).output_dir == "from-env"
    cfg = build_config(path, lr=0.5, output_dir="from-flag", batch_size=None)
    assert (cfg.lr, cfg.output_dir, cfg.batch_size) == (0.5, "from-flag", 8)


def test_desk_scale(tmp_path):
    cfg = build_config(desk_scale=True)
    assert cfg.n_train == DESK_SCALE["distractor"]["n_train"]
    assert cfg.max_epochs == DESK_SCALE["distractor"]["max_epochs"]
    lo = build_config(desk_scale=True, task="listops")
    assert lo.max_depth == 2 and lo.n_train == 5000
    # an explicit file value beats the preset
    assert build_config(write(tmp_path, max_epochs=3), desk_scale=True).max_epochs == 3


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        build_config(write(tmp_path, lerning_rate=1))
    bad = tmp_path / "nov.json"
    bad.write_text(json.dumps({"lr": 0.1}))
    with pytest.raises(ConfigError, match="schema_version"):
        build_config(str(bad))
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        build_config(str(bad))
    with pytest.raises(ConfigError):
        build_config(write(tmp_path, schema_version=99))


@pytest.mark.parametrize("kw", [{"task": "imdb"}, {"model": "gru"}, {"seeds": []}, {"val_fraction": 1.0}])
def test_invalid_values(kw):
    with pytest.raises(ConfigError):
        build_config(**kw)


def test_round_trip(tmp_path):
    cfg = build_config(model="attentive", seeds=[1, 2], lr=0.002)
    cfg.dump(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_specs_and_train_config():
    cfg = build_config(seq_len=30, num_distractors=2, data_seed=3)
    spec = cfg.task_spec()
    assert isinstance(spec, DistractorSpec) and spec.seq_len == 30 and spec.num_distractors == 2 and spec.seed == 3
    assert isinstance(build_config(task="listops").task_spec(), ListOpsSpec)
    tc = build_config(max_epochs=4).train_config(seed=9)
    assert tc.patience == 4 and tc.seed == 9 and tc.batch_size == 16
