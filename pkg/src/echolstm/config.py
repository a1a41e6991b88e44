"""Experiment configuration: one flat record covering task, model and training.

Config files are flat JSON objects carrying ``schema_version``; unknown keys
are rejected.  Task-dependent defaults (batch size, epochs, hidden size) are
``None`` until :meth:`ExperimentConfig.resolved` fills them from
:data:`TASK_DEFAULTS`.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .cells import ConfigError, ModelConfig
from .tasks import DistractorSpec, ListOpsSpec
from .training import TrainConfig

SCHEMA_VERSION = 1
OUT_ENV = "ECHO_RNN_OUT"

# model name -> (use_ocg, use_attention), in ablation-table row order
MODELS = {
    "baseline": (False, False),
    "attentive": (False, True),
    "hybrid-ocg": (True, False),
    "echo": (True, True),
}

TASK_DEFAULTS = {
    "distractor": {"batch_size": 16, "max_epochs": 120, "hidden_size": 64},
    "listops": {"batch_size": 32, "max_epochs": 80, "hidden_size": 128},
}

# Reduced sizes so a full comparison fits in minutes on one CPU core.
DESK_SCALE = {
    "distractor": {"n_train": 2000, "n_test": 500, "max_epochs": 30},
    "listops": {"n_train": 5000, "n_test": 500, "max_epochs": 20, "max_depth": 2, "hidden_size": 64},
}


def model_flags(name: str) -> tuple[bool, bool]:
    try:
        return MODELS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; choose from {list(MODELS)}") from None


def model_name(use_ocg: bool, use_attention: bool) -> str:
    for name, flags in MODELS.items():
        if flags == (bool(use_ocg), bool(use_attention)):
            return name
    raise AssertionError("unreachable")


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    task: str = "distractor"
    model: str = "echo"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    # data
    n_train: int = 2000
    n_test: int = 500
    val_fraction: float = 0.1
    data_seed: int = 7
    # distractor task
    seq_len: int = 50
    trigger_window: list[int] = field(default_factory=lambda: [1, 10])
    num_classes: int = 4
    num_distractors: int = 3
    noise_vocab_size: int = 8
    # listops
    max_depth: int = 4
    max_args: int = 4
    min_len: int = 1
    max_len: int = 128
    nest_prob: float = 0.35
    # model
    hidden_size: int | None = None
    embed_dim: int = 32
    num_layers: int | None = None
    attention_scoring: str = "additive"
    forget_bias: float = 1.0
    # training
    batch_size: int | None = None
    lr: float = 1e-3
    weight_decay: float = 5e-4
    dropout: float = 0.3
    max_epochs: int | None = None
    patience: int = 15
    eval_every: int = 1
    clip_norm: float | None = 5.0

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {self.schema_version} != supported {SCHEMA_VERSION}")
        if self.task not in TASK_DEFAULTS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {list(TASK_DEFAULTS)}")
        model_flags(self.model)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        return self

    def resolved(self) -> "ExperimentConfig":
        """Copy with task-dependent defaults filled in."""
        defaults = TASK_DEFAULTS[self.task]
        updates = {k: v for k, v in defaults.items() if getattr(self, k) is None}
        if self.num_layers is None:
            updates["num_layers"] = 1 if model_flags(self.model)[0] else 2
        return replace(self, **updates)

    def with_desk_scale(self) -> "ExperimentConfig":
        return replace(self, **DESK_SCALE[self.task])

    def task_spec(self, seed: int | None = None):
        seed = self.data_seed if seed is None else seed
        if self.task == "distractor":
            return DistractorSpec(
                seq_len=self.seq_len,
                trigger_window=tuple(self.trigger_window),
                num_classes=self.num_classes,
                num_distractors=self.num_distractors,
                noise_vocab_size=self.noise_vocab_size,
                seed=seed,
            )
        return ListOpsSpec(
            max_depth=self.max_depth,
            max_args=self.max_args,
            min_len=self.min_len,
            max_len=self.max_len,
            nest_prob=self.nest_prob,
            seed=seed,
        )

    def model_config(self, vocab_size: int, num_classes: int) -> ModelConfig:
        cfg = self.resolved()
        use_ocg, use_attention = model_flags(cfg.model)
        return ModelConfig(
            vocab_size=vocab_size,
            num_classes=num_classes,
            hidden_size=cfg.hidden_size,
            embed_dim=cfg.embed_dim,
            use_ocg=use_ocg,
            use_attention=use_attention,
            num_layers=cfg.num_layers,
            dropout_rate=cfg.dropout,
            attention_scoring=cfg.attention_scoring,
            forget_bias=cfg.forget_bias,
        )

    def train_config(self, seed: int) -> TrainConfig:
        cfg = self.resolved()
        return TrainConfig(
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            dropout=cfg.dropout,
            max_epochs=cfg.max_epochs,
            patience=min(cfg.patience, cfg.max_epochs),
            seed=seed,
            eval_every=cfg.eval_every,
            clip_norm=cfg.clip_norm,
        )

    # file round trip

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "schema_version" not in d:
            raise ConfigError("config file lacks schema_version")
        return cls(**d).validate()

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat JSON object")
        return cls.from_dict(data)


def build_config(file: str | None = None, desk_scale: bool = False, **flags) -> ExperimentConfig:
    """Defaults < desk-scale preset < config file < ECHO_RNN_OUT < explicit flags (non-None)."""
    cfg = ExperimentConfig()
    if "task" in flags and flags["task"] is not None:
        cfg = replace(cfg, task=flags["task"])
    if file is not None:
        cfg = ExperimentConfig.load(file)
        if flags.get("task") is not None:
            cfg = replace(cfg, task=flags["task"])
    if desk_scale:
        cfg = cfg.validate().with_desk_scale()
        if file is not None:
            # values set in the file still beat the preset
            file_values = json.loads(Path(file).read_text())
            cfg = replace(cfg, **{k: v for k, v in file_values.items() if k != "schema_version"})
    env_out = os.environ.get(OUT_ENV)
    if env_out:
        cfg = replace(cfg, output_dir=env_out)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(flags) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    return cfg.validate()
