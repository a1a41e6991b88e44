"""Synthetic benchmarks: the distractor-signal memory task and ListOps.

Every sample is generated from its own sub-stream ``Rng.derive(seed, index)``
so serial and parallel generation agree and any single sample can be
regenerated in isolation.

Distractor vocabulary: ids ``0 .. noise_vocab_size-1`` are noise, ids
``noise_vocab_size + k`` are the trigger token for class ``k``.  Positions
in sample metadata are 1-based.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import Rng

DATASET_FORMAT_VERSION = 1


class SpecError(ValueError):
    """A task specification cannot produce valid data."""


class ListOpsParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    label: int
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __len__(self):
        return len(self.tokens)


@dataclass
class Dataset:
    task: str
    samples: list[Sample]
    vocab_size: int
    num_classes: int
    spec: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.task, [self.samples[i] for i in indices], self.vocab_size, self.num_classes, self.spec)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def to_batch(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad token sequences with 0: ``(tokens (B, T), labels (B,), lengths (B,))``."""
    samples = list(samples)
    lengths = np.array([len(s.tokens) for s in samples], dtype=np.int64)
    tokens = np.zeros((len(samples), int(lengths.max())), dtype=np.int64)
    for b, s in enumerate(samples):
        tokens[b, : len(s.tokens)] = s.tokens
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return tokens, labels, lengths


# ---------------------------------------------------------------- distractor


@dataclass
class DistractorSpec:
    seq_len: int = 50
    trigger_window: tuple[int, int] = (1, 10)
    num_classes: int = 4
    num_distractors: int = 3
    noise_vocab_size: int = 8
    seed: int = 0

    def __post_init__(self):
        self.trigger_window = tuple(int(v) for v in self.trigger_window)

    @property
    def vocab_size(self) -> int:
        return self.noise_vocab_size + self.num_classes

    def trigger_id(self, cls: int) -> int:
        return self.noise_vocab_size + cls

    def validate(self):
        lo, hi = self.trigger_window
        if self.seq_len < 1 or not 1 <= lo <= hi <= self.seq_len:
            raise SpecError(f"trigger window {self.trigger_window} must lie inside [1, {self.seq_len}]")
        if self.num_classes < 2:
            raise SpecError("need at least two classes")
        if self.noise_vocab_size < 1:
            raise SpecError("noise_vocab_size must be at least 1")
        if self.num_distractors < 0:
            raise SpecError("num_distractors must be non-negative")
        if self.num_distractors > self.seq_len - hi:
            raise SpecError(
                f"{self.num_distractors} distractors do not fit in the {self.seq_len - hi} steps after the window"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trigger_window"] = list(self.trigger_window)
        return d


def _distractor_sample(spec: DistractorSpec, index: int, trigger_at: int | None) -> Sample:
    rng = Rng.derive(spec.seed, index)
    lo, hi = spec.trigger_window
    label = int(rng.integers(0, spec.num_classes))
    pos = int(rng.integers(lo, hi + 1)) if trigger_at is None else trigger_at
    tokens = rng.integers(0, spec.noise_vocab_size, size=spec.seq_len)
    tokens[pos - 1] = spec.trigger_id(label)

    slots = np.array([p for p in range(hi + 1, spec.seq_len + 1) if p != pos], dtype=np.int64)
    k = min(spec.num_distractors, len(slots))
    distractors = np.sort(rng.choice(slots, size=k, replace=False)) if k else np.empty(0, dtype=np.int64)
    others = [c for c in range(spec.num_classes) if c != label]
    for p in distractors:
        tokens[p - 1] = spec.trigger_id(others[int(rng.integers(0, len(others)))])

    meta = {"trigger": pos, "distractors": [int(p) for p in distractors]}
    return Sample(tuple(int(t) for t in tokens), label, meta)


def gen_distractor(spec: DistractorSpec, n: int, start: int = 0) -> Dataset:
    """``n`` samples: one true trigger in the window, false triggers after it, noise elsewhere."""
    spec.validate()
    if n < 1:
        raise SpecError("n must be at least 1")
    samples = [_distractor_sample(spec, start + i, None) for i in range(n)]
    return Dataset("distractor", samples, spec.vocab_size, spec.num_classes, spec.to_dict())


def gen_distractor_shifted(spec: DistractorSpec, trigger_position: int, n: int = 200, start: int = 0) -> Dataset:
    """Like :func:`gen_distractor` but with the true trigger pinned at ``trigger_position``."""
    spec.validate()
    if not 1 <= trigger_position <= spec.seq_len:
        raise SpecError(f"trigger position {trigger_position} outside [1, {spec.seq_len}]")
    if n < 1:
        raise SpecError("n must be at least 1")
    samples = [_distractor_sample(spec, start + i, trigger_position) for i in range(n)]
    d = spec.to_dict()
    d["trigger_position"] = trigger_position
    return Dataset("distractor", samples, spec.vocab_size, spec.num_classes, d)


def read_trigger(spec: DistractorSpec, tokens) -> int:
    """Class of the first trigger token in ``tokens`` (-1 when none)."""
    for t in tokens:
        if t >= spec.noise_vocab_size:
            return int(t) - spec.noise_vocab_size
    return -1


# ---------------------------------------------------------------- ListOps

OPERATORS = ("MAX", "MIN", "MED", "SM")
OPEN, CLOSE = 10, 11
OP_IDS = {name: 12 + k for k, name in enumerate(OPERATORS)}
LISTOPS_VOCAB = [str(d) for d in range(10)] + ["[", "]"] + list(OPERATORS)
LISTOPS_VOCAB_SIZE = len(LISTOPS_VOCAB)

_LEX = re.compile(r"\s*(\[|\]|[A-Za-z]+|\d+|\S)")


@dataclass
class ListOpsSpec:
    max_depth: int = 4
    max_args: int = 4
    num_classes: int = 10
    min_len: int = 1
    max_len: int = 128
    nest_prob: float = 0.35
    seed: int = 0
    operators: tuple[str, ...] = OPERATORS

    def __post_init__(self):
        self.operators = tuple(self.operators)

    def validate(self):
        if self.max_depth < 1:
            raise SpecError("max_depth must be at least 1")
        if self.max_args < 2:
            raise SpecError("max_args must be at least 2")
        if self.num_classes != 10:
            raise SpecError("ListOps labels are digits, num_classes must be 10")
        if not set(self.operators) <= set(OPERATORS) or not self.operators:
            raise SpecError(f"operators must be a non-empty subset of {OPERATORS}")
        if not 1 <= self.min_len <= self.max_len:
            raise SpecError("need 1 <= min_len <= max_len")
        if self.max_len < 4:
            raise SpecError("max_len below the shortest expression '[OP d d]'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["operators"] = list(self.operators)
        return d


def tokenize_listops(expr: str) -> list[int]:
    """Token ids for a ListOps string; errors carry a character offset."""
    ids, pos = [], 0
    expr = expr.rstrip()
    while pos < len(expr):
        m = _LEX.match(expr, pos)
        if m is None:
            break
        tok, start = m.group(1), m.start(1)
        if tok == "[":
            ids.append(OPEN)
        elif tok == "]":
            ids.append(CLOSE)
        elif tok in OP_IDS:
            ids.append(OP_IDS[tok])
        elif tok.isdigit() and len(tok) == 1:
            ids.append(int(tok))
        else:
            raise ListOpsParseError(f"unexpected token {tok!r}", start)
        pos = m.end()
    return ids


def render_listops(ids) -> str:
    out: list[str] = []
    for t in ids:
        word = LISTOPS_VOCAB[t]
        if out and (out[-1] == "[" or word == "]"):
            out[-1] += word
        elif out and out[-1].endswith("[") and word in OPERATORS:
            out[-1] += word
        else:
            out.append(word)
    return " ".join(out)


def apply_op(op: str, args: list[int]) -> int:
    if op == "MAX":
        return max(args)
    if op == "MIN":
        return min(args)
    if op == "MED":
        return sorted(args)[(len(args) - 1) // 2]
    if op == "SM":
        return sum(args) % 10
    raise ValueError(f"unknown operator {op!r}")


def eval_listops(expr) -> int:
    """Evaluate a ListOps expression (string or token ids) by recursive descent.

    MED returns the lower median for an even number of arguments.
    Parse errors carry a token index (a character offset for lexing errors).
    """
    ids = tokenize_listops(expr) if isinstance(expr, str) else [int(t) for t in expr]
    names = {v: k for k, v in OP_IDS.items()}
    pos = 0

    def parse() -> int:
        nonlocal pos
        if pos >= len(ids):
            raise ListOpsParseError("unexpected end of expression", pos)
        tok = ids[pos]
        if 0 <= tok <= 9:
            pos += 1
            return tok
        if tok != OPEN:
            raise ListOpsParseError(f"expected digit or '[', got {LISTOPS_VOCAB[tok] if 0 <= tok < LISTOPS_VOCAB_SIZE else tok!r}", pos)
        pos += 1
        if pos >= len(ids) or ids[pos] not in names:
            raise ListOpsParseError("expected operator after '['", pos)
        op = names[ids[pos]]
        pos += 1
        args = []
        while pos < len(ids) and ids[pos] != CLOSE:
            args.append(parse())
        if pos >= len(ids):
            raise ListOpsParseError("missing ']'", pos)
        if not args:
            raise ListOpsParseError(f"{op} with no arguments", pos)
        pos += 1
        return apply_op(op, args)

    value = parse()
    if pos != len(ids):
        raise ListOpsParseError("trailing tokens", pos)
    return value


def _gen_expr(rng: Rng, spec: ListOpsSpec, depth: int) -> list[int]:
    op = spec.operators[int(rng.integers(0, len(spec.operators)))]
    n_args = int(rng.integers(2, spec.max_args + 1))
    ids = [OPEN, OP_IDS[op]]
    for _ in range(n_args):
        if depth < spec.max_depth and rng.random() < spec.nest_prob:
            ids.extend(_gen_expr(rng, spec, depth + 1))
        else:
            ids.append(int(rng.integers(0, 10)))
    ids.append(CLOSE)
    return ids


def _listops_sample(spec: ListOpsSpec, index: int) -> Sample:
    rng = Rng.derive(spec.seed, index)
    for _ in range(1000):
        ids = _gen_expr(rng, spec, 1)
        if spec.min_len <= len(ids) <= spec.max_len:
            return Sample(tuple(ids), eval_listops(ids), {"depth": _depth(ids)})
    raise SpecError(f"could not generate an expression with length in [{spec.min_len}, {spec.max_len}]")


def _depth(ids) -> int:
    d = best = 0
    for t in ids:
        if t == OPEN:
            d += 1
            best = max(best, d)
        elif t == CLOSE:
            d -= 1
    return best


def gen_listops(spec: ListOpsSpec, n: int, start: int = 0) -> Dataset:
    spec.validate()
    if n < 1:
        raise SpecError("n must be at least 1")
    samples = [_listops_sample(spec, start + i) for i in range(n)]
    return Dataset("listops", samples, LISTOPS_VOCAB_SIZE, spec.num_classes, spec.to_dict())


# ---------------------------------------------------------------- splits & files


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, ...]:
    """Seeded shuffle, then cut at the rounded cumulative fractions."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SpecError(f"fractions must be positive and sum to 1, got {fractions}")
    n = len(dataset)
    order = Rng(seed).permutation(n)
    cuts = [0] + [int(round(n * c)) for c in np.cumsum(fractions)[:-1]] + [n]
    parts = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            raise SpecError(f"split of {n} samples by {fractions} leaves an empty part")
        parts.append(dataset.subset(order[a:b]))
    return tuple(parts)


def _format_meta(meta: dict) -> str:
    items = []
    for k, v in meta.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        items.append(f"{k}={v}")
    return " ".join(items)


def _parse_meta(text: str) -> dict:
    meta = {}
    for item in text.split():
        k, _, v = item.partition("=")
        if k == "distractors":
            meta[k] = [int(x) for x in v.split(",") if x]
        else:
            meta[k] = int(v) if v.lstrip("-").isdigit() else v
    return meta


def format_sample(s: Sample) -> str:
    return " ".join(str(t) for t in s.tokens) + "\t" + str(s.label) + "\t" + _format_meta(s.meta)


def parse_sample(line: str) -> Sample:
    parts = line.rstrip("\n").split("\t")
    if len(parts) not in (2, 3):
        raise ValueError(f"expected 2 or 3 tab-separated fields, got {len(parts)}")
    tokens = tuple(int(t) for t in parts[0].split())
    meta = _parse_meta(parts[2]) if len(parts) == 3 else {}
    return Sample(tokens, int(parts[1]), meta)


def write_samples(path, samples) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(format_sample(s) + "\n")
            n += 1
    return n


def read_samples(path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        out = []
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_sample(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        return out
