"""Read-only analyses of trained models: gate statistics, gradient flow,
attention focus, trigger-position sensitivity.

Positions and windows are 1-based and inclusive throughout, matching the
sample metadata.  CSV schemas:

* gate_timeline.csv: t, mean_f, std_f, model
* variance.csv:      model, variance, t_lo, t_hi, n_samples  (plus a ratio row)
* attention.csv:     sample_id, t, alpha
* sweep.csv:         position, model, accuracy, n_samples
* grad_profile.csv:  t, grad_norm, model
* half_life.csv:     model, mean_f_trigger, mean_f_no_trigger, difference, p_value, n_pairs
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autograd import hidden_grad_norms
from .cells import ConfigError, SequenceClassifier
from .tasks import Dataset, DistractorSpec, Sample, SpecError, gen_distractor, gen_distractor_shifted, to_batch
from .tensor import Rng
from .training import evaluate


@dataclass
class GateRecord:
    f: np.ndarray  # (T, hidden)
    i: np.ndarray | None = None
    trigger_position: int | None = None


def collect_gates(model: SequenceClassifier, dataset: Dataset, layer: int = -1, batch_size: int = 200) -> list[GateRecord]:
    """Forget (and input) gate activations per sample from layer ``layer`` (default: top)."""
    records = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start : start + batch_size]
        tokens, _, lengths = to_batch(chunk)
        trace = model.forward(tokens, lengths).trace()
        for b, s in enumerate(chunk):
            n = len(s.tokens)
            records.append(GateRecord(trace.f[layer, b, :n], trace.i[layer, b, :n], s.meta.get("trigger")))
    return records


def _window(t_lo: int, t_hi: int, length: int) -> slice:
    if t_lo > t_hi:
        raise SpecError(f"empty window [{t_lo}, {t_hi}]")
    if t_lo < 1 or t_hi > length:
        raise SpecError(f"window [{t_lo}, {t_hi}] outside a sequence of length {length}")
    return slice(t_lo - 1, t_hi)


def gate_variance(records, window=(10, 50)) -> float:
    """Variance of f_t over the window, per sample and unit, then averaged."""
    records = list(records)
    if not records:
        raise SpecError("no gate records")
    t_lo, t_hi = window
    per_sample = []
    for r in records:
        f = np.asarray(r.f, dtype=np.float64)
        f = f.reshape(len(f), -1)
        w = f[_window(t_lo, t_hi, len(f))]
        # shifting by the first step keeps a constant signal at exactly zero
        per_sample.append(np.var(w - w[0], axis=0).mean())
    return float(np.mean(per_sample))


@dataclass
class Timeline:
    mean: np.ndarray
    std: np.ndarray


def gate_timeline(records) -> Timeline:
    """Mean and std of f_t over samples and units, per timestep."""
    records = list(records)
    if not records:
        raise SpecError("no gate records")
    stacked = np.stack([np.asarray(r.f, dtype=np.float64).reshape(len(r.f), -1) for r in records])
    flat = stacked.transpose(1, 0, 2).reshape(stacked.shape[1], -1)
    return Timeline(flat.mean(axis=1), flat.std(axis=1))


# ---------------------------------------------------------------- trigger half-life check


def remove_trigger(spec: DistractorSpec, sample: Sample, index: int) -> Sample:
    """Same sequence with the true trigger replaced by a noise token."""
    pos = sample.meta["trigger"]
    rng = Rng.derive(spec.seed, index, 1)
    tokens = list(sample.tokens)
    tokens[pos - 1] = int(rng.integers(0, spec.noise_vocab_size))
    meta = dict(sample.meta)
    meta.pop("trigger")
    return Sample(tuple(tokens), sample.label, meta)


def paired_trigger_sets(spec: DistractorSpec, n: int, start: int = 0) -> tuple[Dataset, Dataset]:
    with_trigger = gen_distractor(spec, n, start=start)
    without = [remove_trigger(spec, s, start + k) for k, s in enumerate(with_trigger.samples)]
    return with_trigger, Dataset("distractor", without, spec.vocab_size, spec.num_classes, with_trigger.spec)


@dataclass
class HalfLifeReport:
    mean_f_trigger: float
    mean_f_no_trigger: float
    difference: float
    p_value: float
    null_std: float
    n_pairs: int
    window: tuple[int, int]

    @property
    def premise_holds(self) -> bool:
        return self.difference > 0


def sign_flip_test(diffs: np.ndarray, n_perm: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """One-sided paired permutation test of mean(diffs) > 0; returns (p, null std)."""
    diffs = np.asarray(diffs, dtype=np.float64)
    observed = diffs.mean()
    signs = Rng(seed).integers(0, 2, size=(n_perm, diffs.size)) * 2 - 1
    null = (signs * diffs).mean(axis=1)
    p = (1 + np.count_nonzero(null >= observed)) / (n_perm + 1)
    return float(p), float(null.std())


def half_life_check(
    model: SequenceClassifier,
    with_trigger: Dataset,
    without_trigger: Dataset,
    window: tuple[int, int] | None = None,
    layer: int = -1,
    n_perm: int = 10_000,
    seed: int = 0,
) -> HalfLifeReport:
    """Post-window mean forget activation with vs. without the trigger, over matched pairs."""
    if len(with_trigger) != len(without_trigger) or len(with_trigger) == 0:
        raise SpecError("paired datasets must be non-empty and of equal size")
    for a, b in zip(with_trigger, without_trigger):
        if len(a.tokens) != len(b.tokens):
            raise SpecError("paired samples differ in length")
    length = len(with_trigger[0].tokens)
    if window is None:
        hi = with_trigger.spec.get("trigger_window", [1, 10])[1]
        window = (hi + 1, length)
    sl = _window(window[0], window[1], length)
    f_on = np.array([r.f[sl].mean() for r in collect_gates(model, with_trigger, layer)])
    f_off = np.array([r.f[sl].mean() for r in collect_gates(model, without_trigger, layer)])
    diffs = f_on - f_off
    p, null_std = sign_flip_test(diffs, n_perm, seed)
    return HalfLifeReport(float(f_on.mean()), float(f_off.mean()), float(diffs.mean()), p, null_std, len(diffs), tuple(window))


# ---------------------------------------------------------------- attention


@dataclass
class AttentionExport:
    alpha: np.ndarray  # (samples, T)
    window_mass: float
    window: tuple[int, int]


def attention_export(model: SequenceClassifier, dataset: Dataset, window=(1, 10), batch_size: int = 200) -> AttentionExport:
    if not model.config.use_attention:
        raise ConfigError("attention export needs a model with use_attention=true")
    rows = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start : start + batch_size]
        tokens, _, lengths = to_batch(chunk)
        rows.append(model.forward(tokens, lengths).trace().alpha)
    width = max(r.shape[1] for r in rows)
    alpha = np.zeros((len(dataset), width))
    k = 0
    for r in rows:
        alpha[k : k + len(r), : r.shape[1]] = r
        k += len(r)
    lo, hi = window
    mass = alpha[:, lo - 1 : min(hi, width)].sum(axis=1).mean()
    return AttentionExport(alpha, float(mass), tuple(window))


# ---------------------------------------------------------------- sensitivity sweep


@dataclass
class SweepResult:
    rows: list[tuple[int, str, float]]
    n_samples: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        positions = sorted({p for p, _, _ in self.rows})
        seen = []
        for p, _, _ in self.rows:
            if not seen or seen[-1] != p:
                seen.append(p)
        if seen != positions or len(seen) != len(set(seen)):
            raise SpecError("sweep positions must be strictly increasing")
        if any(not 0.0 <= a <= 1.0 for _, _, a in self.rows):
            raise SpecError("accuracies must lie in [0, 1]")

    def accuracy(self, position: int, model: str) -> float:
        for p, m, a in self.rows:
            if p == position and m == model:
                return a
        raise KeyError((position, model))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["position", "model", "accuracy", "n_samples"])
            for p, m, a in self.rows:
                w.writerow([p, m, repr(float(a)), self.n_samples])

    @classmethod
    def read_csv(cls, path) -> "SweepResult":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise SpecError(f"{path} has no sweep rows")
        return cls(
            [(int(r["position"]), r["model"], float(r["accuracy"])) for r in rows],
            int(rows[0]["n_samples"]),
        )


def sensitivity_sweep(
    models: dict[str, SequenceClassifier],
    spec: DistractorSpec,
    positions=(5, 15, 25, 35, 45),
    n: int = 200,
    start: int = 0,
) -> SweepResult:
    """Accuracy of each model with the true trigger pinned at each position."""
    positions = list(positions)
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise SpecError("positions must be strictly increasing")
    rows = []
    for pos in positions:
        data = gen_distractor_shifted(spec, pos, n, start=start)
        for name, model in models.items():
            rows.append((pos, name, evaluate(model, data)))
    return SweepResult(rows, n, {"spec": spec.to_dict()})


# ---------------------------------------------------------------- gradient profiles


def grad_profile(model: SequenceClassifier, dataset: Dataset) -> np.ndarray:
    """Mean per-sample ||dL/dh_t|| for t = 1..T (top layer), L the summed batch loss."""
    tokens, labels, lengths = to_batch(dataset.samples)
    fw, loss = model.loss(tokens, labels, lengths, reduction="sum")
    return hidden_grad_norms(fw.tape, output=loss)


def early_ratio(numerator: np.ndarray, denominator: np.ndarray, upto: int = 5) -> float:
    """Ratio of the mean gradient norm over t <= ``upto``."""
    den = float(np.mean(denominator[:upto]))
    return float(np.mean(numerator[:upto])) / den if den > 0 else float("inf")


# ---------------------------------------------------------------- CSV writers


def write_gate_timeline(path, timelines: dict[str, Timeline]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "mean_f", "std_f", "model"])
        for name, tl in timelines.items():
            for t, (m, s) in enumerate(zip(tl.mean, tl.std), 1):
                w.writerow([t, repr(float(m)), repr(float(s)), name])


def write_variance(path, variances: dict[str, float], window, n_samples: int, ratio: tuple[str, str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "variance", "t_lo", "t_hi", "n_samples"])
        for name, v in variances.items():
            w.writerow([name, repr(float(v)), window[0], window[1], n_samples])
        if ratio is not None:
            num, den = ratio
            w.writerow([f"ratio:{num}/{den}", repr(variances[num] / variances[den]), window[0], window[1], n_samples])


def write_attention(path, export: AttentionExport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "t", "alpha"])
        for sid, row in enumerate(export.alpha):
            for t, a in enumerate(row, 1):
                w.writerow([sid, t, repr(float(a))])


def write_grad_profiles(path, profiles: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "grad_norm", "model"])
        for name, prof in profiles.items():
            for t, g in enumerate(prof, 1):
                w.writerow([t, repr(float(g)), name])


def write_half_life(path, reports: dict[str, HalfLifeReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "mean_f_trigger", "mean_f_no_trigger", "difference", "p_value", "n_pairs"])
        for name, r in reports.items():
            w.writerow([name, repr(r.mean_f_trigger), repr(r.mean_f_no_trigger), repr(r.difference), repr(r.p_value), r.n_pairs])
