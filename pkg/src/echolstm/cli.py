"""``echolstm`` command-line entry point.

Subcommands: gen, train, ablate, diagnose, sweep, verify-gradients.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric or
training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from . import weights
from .autograd import NonFiniteLossError, finite_diff_check
from .cells import ConfigError, DataError, ModelConfig, SequenceClassifier
from .config import MODELS, ExperimentConfig, build_config
from .tasks import (
    DATASET_FORMAT_VERSION,
    Dataset,
    DistractorSpec,
    ListOpsSpec,
    SpecError,
    gen_distractor,
    gen_listops,
    read_samples,
    split,
    write_samples,
)
from .tensor import Rng
from .training import RunResult, TrainingError, train
from .weights import WeightFormatError, atomic_write

log = logging.getLogger("echolstm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TEST_OFFSET = 1_000_000  # sample-index offset of the test split
EVAL_OFFSET = 2_000_000  # sample-index offset of diagnostic batches


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- shared flags

_EXPERIMENT_FLAGS = [
    ("--n-train", "n_train", int),
    ("--n-test", "n_test", int),
    ("--val-fraction", "val_fraction", float),
    ("--seq-len", "seq_len", int),
    ("--num-classes", "num_classes", int),
    ("--num-distractors", "num_distractors", int),
    ("--noise-vocab-size", "noise_vocab_size", int),
    ("--max-depth", "max_depth", int),
    ("--max-args", "max_args", int),
    ("--max-len", "max_len", int),
    ("--hidden-size", "hidden_size", int),
    ("--embed-dim", "embed_dim", int),
    ("--num-layers", "num_layers", int),
    ("--attention-scoring", "attention_scoring", str),
    ("--batch-size", "batch_size", int),
    ("--lr", "lr", float),
    ("--weight-decay", "weight_decay", float),
    ("--dropout", "dropout", float),
    ("--max-epochs", "max_epochs", int),
    ("--patience", "patience", int),
    ("--eval-every", "eval_every", int),
    ("--clip-norm", "clip_norm", float),
]


def _add_experiment_flags(p: argparse.ArgumentParser, model: bool = True):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--task", choices=["distractor", "listops"])
    if model:
        p.add_argument("--model", choices=list(MODELS))
    p.add_argument("--desk-scale", action="store_true", help="reduced sizes and epochs for CPU runs")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--trigger-window", dest="trigger_window", type=int, nargs=2, metavar=("LO", "HI"))
    for flag, dest, typ in _EXPERIMENT_FLAGS:
        p.add_argument(flag, dest=dest, type=typ)


def _experiment_config(args, **extra) -> ExperimentConfig:
    flags = {dest: getattr(args, dest, None) for _, dest, _ in _EXPERIMENT_FLAGS}
    for name in ("task", "model", "output_dir", "data_seed", "trigger_window"):
        flags[name] = getattr(args, name, None)
    if flags["trigger_window"] is not None:
        flags["trigger_window"] = list(flags["trigger_window"])
    flags.update(extra)
    return build_config(args.config, args.desk_scale, **flags)


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.replace(",", " ").split()]


# ---------------------------------------------------------------- gen


def generate_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset, dict]:
    spec = cfg.task_spec()
    gen = gen_distractor if cfg.task == "distractor" else gen_listops
    pool = gen(spec, cfg.n_train)
    train_set, val_set = split(pool, (1.0 - cfg.val_fraction, cfg.val_fraction), seed=cfg.data_seed)
    test_set = gen(spec, cfg.n_test, start=TEST_OFFSET)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "task": cfg.task,
        "seed": cfg.data_seed,
        "spec": spec.to_dict(),
        "vocab_size": pool.vocab_size,
        "num_classes": pool.num_classes,
        "counts": {"train": len(train_set), "val": len(val_set), "test": len(test_set)},
        "files": {"train": "train.txt", "val": "val.txt", "test": "test.txt"},
    }
    return train_set, val_set, test_set, manifest


def data_dir_for(cfg: ExperimentConfig, explicit: str | None) -> Path:
    return Path(explicit) if explicit else Path(cfg.output_dir) / "data" / cfg.task


def cmd_gen(args) -> int:
    cfg = _experiment_config(args)
    out = data_dir_for(cfg, args.out)
    names = ["train.txt", "val.txt", "test.txt", "manifest.json"]
    existing = [n for n in names if (out / n).exists()]
    if existing and not args.force:
        raise UsageError(f"{out} already holds {existing}; pass --force to overwrite")
    train_set, val_set, test_set, manifest = generate_dataset(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train.txt", train_set), ("val.txt", val_set), ("test.txt", test_set)):
        write_samples(out / name, ds.samples)
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {manifest['counts']} to {out}")
    return EXIT_OK


def load_data(path: Path) -> tuple[Dataset, Dataset, Dataset, dict]:
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no dataset manifest at {manifest_path}; run `echolstm gen` first")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(
            f"dataset format version {manifest.get('format_version')} != supported {DATASET_FORMAT_VERSION}"
        )
    parts = []
    for split_name in ("train", "val", "test"):
        samples = read_samples(path / manifest["files"][split_name])
        if len(samples) != manifest["counts"][split_name]:
            raise DataError(f"{split_name} file has {len(samples)} samples, manifest says {manifest['counts'][split_name]}")
        parts.append(Dataset(manifest["task"], samples, manifest["vocab_size"], manifest["num_classes"], manifest["spec"]))
    return parts[0], parts[1], parts[2], manifest


# ---------------------------------------------------------------- train / ablate


def run_dir(cfg: ExperimentConfig, model: str, seed: int) -> Path:
    return Path(cfg.output_dir) / cfg.task / model / f"seed{seed}"


def train_one(cfg: ExperimentConfig, data_path: str, model_name: str, seed: int) -> dict:
    """Train one (model, seed) pair and write result.json, curves.csv, weights.bin."""
    train_set, val_set, test_set, manifest = load_data(Path(data_path))
    if manifest["task"] != cfg.task:
        raise DataError(f"dataset at {data_path} is for task {manifest['task']!r}, config says {cfg.task!r}")
    mcfg = ExperimentConfig(**{**cfg.to_dict(), "model": model_name})
    model = SequenceClassifier(mcfg.model_config(manifest["vocab_size"], manifest["num_classes"]), seed=seed)
    model, result = train(model, train_set, val_set, mcfg.train_config(seed), test_set)
    result.meta = {
        "model_name": model_name,
        "experiment": mcfg.resolved().to_dict(),
        "dataset": {"path": str(data_path), "manifest": manifest},
        "num_parameters": model.num_parameters(),
        "rng": Rng.ALGORITHM,
    }
    out = run_dir(cfg, model_name, seed)
    out.mkdir(parents=True, exist_ok=True)
    weights.save(model, out / "weights.bin")
    result.write_curves(out / "curves.csv")
    atomic_write(out / "result.json", result.to_json() + "\n")
    return {"model": model_name, "seed": seed, "dir": str(out), "test_accuracy": result.test_accuracy,
            "best_val_accuracy": result.best_val_accuracy, "stopped_epoch": result.stopped_epoch}


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    data = data_dir_for(cfg, args.data)
    seeds = _seeds(args.seed) if args.seed is not None else cfg.seeds
    for seed in seeds:
        info = train_one(cfg, str(data), cfg.model, seed)
        print(f"{info['model']} seed {seed}: val {info['best_val_accuracy']:.4f} test {info['test_accuracy']:.4f} -> {info['dir']}")
    return EXIT_OK


def _grid_job(job):
    cfg_dict, data, model_name, seed = job
    cfg = ExperimentConfig(**cfg_dict)
    try:
        return train_one(cfg, data, model_name, seed)
    except (TrainingError, NonFiniteLossError, FloatingPointError) as exc:
        return {"model": model_name, "seed": seed, "error": str(exc)}


def run_grid(cfg: ExperimentConfig, data: str, models, seeds, jobs: int = 1) -> list[dict]:
    work = [(cfg.to_dict(), data, m, s) for m in models for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_grid_job, work))
    return [_grid_job(w) for w in work]


def summarize_grid(results: list[dict], models) -> list[dict]:
    rows = []
    for m in models:
        cells = [r for r in results if r["model"] == m]
        accs = [r["test_accuracy"] for r in cells if "error" not in r]
        rows.append({
            "model": m,
            "mean": float(np.mean(accs)) if accs else None,
            # population std over seeds
            "std": float(np.std(accs)) if accs else None,
            "n_seeds": len(accs),
            "runs": cells,
        })
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'model':<12} {'accuracy %':>16}  seeds", "-" * 36]
    for r in rows:
        acc = "diverged" if r["mean"] is None else f"{100 * r['mean']:6.1f} ± {100 * r['std']:4.1f}"
        lines.append(f"{r['model']:<12} {acc:>16}  {r['n_seeds']}")
    lines.append("(mean ± population std of test accuracy over seeds)")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = _experiment_config(args)
    data = data_dir_for(cfg, args.data)
    load_data(data)  # fail early on missing or mismatched data
    seeds = _seeds(args.seeds) if args.seeds else cfg.seeds
    models = list(MODELS)
    results = run_grid(cfg, str(data), models, seeds, args.jobs)
    rows = summarize_grid(results, models)
    out = Path(cfg.output_dir) / cfg.task
    out.mkdir(parents=True, exist_ok=True)
    payload = {"rows": rows, "seeds": seeds, "experiment": cfg.resolved().to_dict(),
               "std": "population std over seeds"}
    atomic_write(out / "ablation.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    table = format_table(rows)
    atomic_write(out / "ablation.txt", table + "\n")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------- diagnose / sweep


def _named_paths(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            path = name
            name = Path(path).parent.parent.name if Path(path).parent.name.startswith("seed") else Path(path).stem
        if name in out:
            raise UsageError(f"model name {name!r} given twice")
        out[name] = path
    return out


def _load_models(items, untrained: bool = False, seed: int = 0) -> dict[str, SequenceClassifier]:
    models = {}
    for name, path in _named_paths(items).items():
        try:
            model = weights.load(path)
        except (FileNotFoundError, WeightFormatError) as exc:
            raise DataError(f"cannot load weights for {name!r}: {exc}") from None
        models[name] = SequenceClassifier(model.config, seed=seed) if untrained else model
    return models


def _eval_spec(args) -> DistractorSpec:
    if args.data:
        manifest = json.loads((Path(args.data) / "manifest.json").read_text())
        spec = dict(manifest["spec"])
        spec["trigger_window"] = tuple(spec["trigger_window"])
        spec.pop("trigger_position", None)
        spec["seed"] = args.eval_seed
        return DistractorSpec(**spec)
    return DistractorSpec(seed=args.eval_seed)


def _ratio_pair(names) -> tuple[str, str] | None:
    names = list(names)
    if "echo" in names and "baseline" in names:
        return ("echo", "baseline")
    return (names[0], names[1]) if len(names) >= 2 else None


def cmd_diagnose(args) -> int:
    models = _load_models(args.model, args.untrained)
    wanted = {"gates", "variance", "attention", "gradients", "half-life"} if args.all else {
        k for k in ("gates", "variance", "attention", "gradients", "half-life") if getattr(args, k.replace("-", "_"))
    }
    if not wanted:
        raise UsageError("choose at least one diagnostic or --all")
    attn_models = [n for n, m in models.items() if m.config.use_attention]
    if "attention" in wanted:
        if not args.all and len(attn_models) < len(models):
            bad = [n for n in models if n not in attn_models]
            raise ConfigError(f"attention diagnostic requested for non-attention model(s) {bad}")
        if not attn_models:
            raise ConfigError("no model with attention to export")

    spec = _eval_spec(args)
    batch = gen_distractor(spec, args.n_eval, start=EVAL_OFFSET)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    window = tuple(args.window)
    summary: dict = {"eval_seed": args.eval_seed, "n_eval": args.n_eval, "untrained": args.untrained}

    if wanted & {"gates", "variance"}:
        records = {n: diag.collect_gates(m, batch) for n, m in models.items()}
        if "gates" in wanted:
            diag.write_gate_timeline(out / "gate_timeline.csv", {n: diag.gate_timeline(r) for n, r in records.items()})
        if "variance" in wanted:
            variances = {n: diag.gate_variance(r, window) for n, r in records.items()}
            pair = _ratio_pair(variances)
            diag.write_variance(out / "variance.csv", variances, window, len(batch), pair)
            summary["variance"] = variances
            if pair:
                summary["variance_ratio"] = variances[pair[0]] / variances[pair[1]]
    if "attention" in wanted:
        name = "echo" if "echo" in attn_models else attn_models[0]
        export = diag.attention_export(models[name], batch)
        diag.write_attention(out / "attention.csv", export)
        summary["attention"] = {"model": name, "window_mass": export.window_mass}
    if "gradients" in wanted:
        profiles = {n: diag.grad_profile(m, batch) for n, m in models.items()}
        diag.write_grad_profiles(out / "grad_profile.csv", profiles)
        pair = _ratio_pair(profiles)
        if pair:
            summary["grad_ratio_t_le_5"] = diag.early_ratio(profiles[pair[0]], profiles[pair[1]])
    if "half-life" in wanted:
        with_t, without_t = diag.paired_trigger_sets(spec, args.n_eval, start=EVAL_OFFSET)
        reports = {n: diag.half_life_check(m, with_t, without_t) for n, m in models.items()}
        diag.write_half_life(out / "half_life.csv", reports)
        summary["half_life"] = {n: r.difference for n, r in reports.items()}
    atomic_write(out / "diagnostics.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    models = _load_models(args.model)
    if len(models) < 2:
        raise UsageError("sweep needs at least two models")
    positions = [int(p) for p in args.positions.split(",")]
    result = diag.sensitivity_sweep(models, _eval_spec(args), positions, args.n, start=EVAL_OFFSET)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.write_csv(out)
    for p, m, a in result.rows:
        print(f"{p:>4} {m:<12} {a:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- verify-gradients


def gradient_check_instance(use_ocg: bool, use_attention: bool, hidden: int = 4, steps: int = 5,
                            classes: int = 4, vocab: int = 8, batch: int = 2, seed: int = 0):
    """Random model and batch for a finite-difference check.

    Parameters are drawn from N(0, 1) rather than the training init so that
    gates are away from their linear regime and no gradient block is tiny.
    """
    cfg = ModelConfig(vocab_size=vocab, num_classes=classes, hidden_size=hidden, embed_dim=hidden,
                      use_ocg=use_ocg, use_attention=use_attention,
                      num_layers=1 if use_ocg else 2, dropout_rate=0.0)
    rng = Rng(seed)
    model = SequenceClassifier(cfg, seed=seed)
    model.params = {k: rng.gen.standard_normal(v.shape) for k, v in model.params.items()}
    tokens = rng.integers(0, vocab, size=(batch, steps))
    labels = rng.integers(0, classes, size=batch)
    return model, (tokens, labels)


def verify_gradients(hidden=4, steps=5, classes=4, epsilon=1e-5, tol=1e-4, seed=0) -> list[dict]:
    rows = []
    for name, (ocg, att) in MODELS.items():
        model, batch = gradient_check_instance(ocg, att, hidden, steps, classes, seed=seed)
        report = finite_diff_check(model, batch, epsilon)
        row = {"model": name, "max_rel_err": report.max_rel_err, "worst_param": report.worst_param,
               "n_coords": report.n_coords, "passed": report.passed(tol)}
        if ocg:
            nonzero = {p: bool(np.any(report.analytic[p] != 0))
                       for p in report.analytic if p.split(".")[-1] in ("W_of", "W_oi", "W_ho")}
            row["ocg_grads_nonzero"] = nonzero
            row["passed"] = row["passed"] and all(nonzero.values())
        rows.append(row)
    return rows


def cmd_verify_gradients(args) -> int:
    rows = verify_gradients(args.hidden, args.steps, args.classes, args.epsilon, args.tol, args.seed)
    ok = True
    for r in rows:
        extra = ""
        if "ocg_grads_nonzero" in r:
            extra = "  ocg grads nonzero: " + ("yes" if all(r["ocg_grads_nonzero"].values()) else "NO")
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['model']:<12} max rel err {r['max_rel_err']:.2e} "
              f"({r['worst_param']}, {r['n_coords']} coords){extra}")
        ok &= r["passed"]
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echolstm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate train/val/test files and a manifest")
    _add_experiment_flags(p, model=False)
    p.add_argument("--n", dest="n_train", type=int, help="training pool size (validation is carved from it)")
    p.add_argument("--seed", dest="data_seed", type=int)
    p.add_argument("--out", help="dataset directory (default OUTPUT_DIR/data/TASK)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model per seed")
    _add_experiment_flags(p)
    p.add_argument("--data", help="dataset directory (default OUTPUT_DIR/data/TASK)")
    p.add_argument("--seed", help="seed or comma-separated seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train all four variants over seeds and tabulate")
    _add_experiment_flags(p, model=False)
    p.add_argument("--data")
    p.add_argument("--seeds", help="comma-separated seeds (default from config)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="gate, attention, gradient and half-life diagnostics")
    p.add_argument("--model", action="append", required=True, metavar="NAME=WEIGHTS")
    p.add_argument("--data", help="dataset directory whose task spec is used for the eval batch")
    p.add_argument("--out", default="diagnostics")
    p.add_argument("--n-eval", type=int, default=200)
    p.add_argument("--eval-seed", type=int, default=1234)
    p.add_argument("--window", type=int, nargs=2, default=[10, 50], metavar=("T_LO", "T_HI"))
    p.add_argument("--untrained", action="store_true", help="re-initialise models (null comparison)")
    for flag in ("gates", "variance", "attention", "gradients", "half-life"):
        p.add_argument(f"--{flag}", action="store_true")
    p.add_argument("--all", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="accuracy as the trigger moves to later positions")
    p.add_argument("--model", action="append", required=True, metavar="NAME=WEIGHTS")
    p.add_argument("--data")
    p.add_argument("--positions", default="5,15,25,35,45")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--eval-seed", type=int, default=1234)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-gradients", help="finite-difference check of all four variants")
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_gradients)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SpecError, WeightFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
