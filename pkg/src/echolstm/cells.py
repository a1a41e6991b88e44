"""Recurrent cores and the sequence classifier built on them.

Two code paths compute the same model:

* ``lstm_step`` / ``echo_step`` / ``attention_pool`` work on single
  (unbatched) vectors with the named weight matrices.  They are the readable
  reference and back :func:`reference_forward`.
* :meth:`SequenceClassifier.forward` records a batched unroll on a
  :class:`~echolstm.autograd.Tape` using the fused ``cell`` and
  ``attention`` primitives; this is what training and diagnostics use.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autograd import Node, Tape, attention_forward, backward
from .tensor import DTYPE, DomainError, Rng, ShapeError, rand_init, sigmoid, softmax

GATES = ("i", "f", "g", "o")
LSTM_WEIGHTS = ("W_xi", "W_hi", "W_xf", "W_hf", "W_xg", "W_hg", "W_xo", "W_ho_gate")
LSTM_BIASES = ("b_i", "b_f", "b_g", "b_o")
OCG_WEIGHTS = ("W_of", "W_oi", "W_ho")


class DataError(ValueError):
    """Input tokens or labels are invalid for the model."""


class ConfigError(ValueError):
    pass


@dataclass
class LstmParams:
    W_xi: np.ndarray
    W_hi: np.ndarray
    W_xf: np.ndarray
    W_hf: np.ndarray
    W_xg: np.ndarray
    W_hg: np.ndarray
    W_xo: np.ndarray
    W_ho_gate: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.W_hi.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_xi.shape[1]


@dataclass
class EchoParams(LstmParams):
    W_of: np.ndarray = None
    W_oi: np.ndarray = None
    W_ho: np.ndarray = None

    def as_lstm(self) -> LstmParams:
        return LstmParams(**{f.name: getattr(self, f.name) for f in fields(LstmParams)})


@dataclass
class AttentionParams:
    W_q: np.ndarray | None = None
    W_k: np.ndarray | None = None
    v: np.ndarray | None = None
    scoring: str = "additive"


def _vec(a) -> np.ndarray:
    return np.asarray(a, dtype=DTYPE).reshape(-1)


def _check_step(p: LstmParams, x, h, c):
    if x.shape != (p.input_dim,):
        raise ShapeError(f"x_t has shape {x.shape}, expected ({p.input_dim},)")
    for name, v in (("h_prev", h), ("c_prev", c)):
        if v.shape != (p.hidden_size,):
            raise ShapeError(f"{name} has shape {v.shape}, expected ({p.hidden_size},)")


def _preacts(p: LstmParams, x, h):
    return (
        p.W_xi @ x + p.W_hi @ h + _vec(p.b_i),
        p.W_xf @ x + p.W_hf @ h + _vec(p.b_f),
        p.W_xg @ x + p.W_hg @ h + _vec(p.b_g),
        p.W_xo @ x + p.W_ho_gate @ h + _vec(p.b_o),
    )


def _finish(zi, zf, zg, zo, c_prev):
    i, f, g, o = sigmoid(zi), sigmoid(zf), np.tanh(zg), sigmoid(zo)
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, {"i": i, "f": f, "g": g, "o": o}


def lstm_step(p: LstmParams, x_t, h_prev, c_prev):
    """Standard LSTM step. Returns ``(h_t, c_t, gates)``."""
    x, h, c = _vec(x_t), _vec(h_prev), _vec(c_prev)
    _check_step(p, x, h, c)
    return _finish(*_preacts(p, x, h), c)


def echo_step(p: EchoParams, x_t, h_prev, c_prev, o_prev):
    """LSTM step whose input and forget gates also see the projected previous output.

    Returns ``(h_t, c_t, o_t, gates)`` with ``o_t = W_ho @ h_t``.
    """
    x, h, c, o = _vec(x_t), _vec(h_prev), _vec(c_prev), _vec(o_prev)
    _check_step(p, x, h, c)
    if o.shape != (p.W_of.shape[1],):
        raise ShapeError(f"o_prev has shape {o.shape}, expected ({p.W_of.shape[1]},)")
    zi, zf, zg, zo = _preacts(p, x, h)
    zf = zf + p.W_of @ o
    zi = zi + p.W_oi @ o
    h_t, c_t, gates = _finish(zi, zf, zg, zo, c)
    return h_t, c_t, p.W_ho @ h_t, gates


def attention_pool(states, params: AttentionParams):
    """Pool hidden states (T, H) with h_T as the query. Returns ``(context, alpha)``."""
    hs = np.asarray(states, dtype=DTYPE)
    if hs.ndim != 2:
        raise ShapeError(f"attention_pool needs a (T, H) matrix, got {hs.shape}")
    if hs.shape[0] == 0:
        raise DomainError("attention over an empty sequence")
    query = hs[-1]
    if params.scoring == "additive":
        scores = np.tanh(params.W_q @ query + hs @ params.W_k.T) @ _vec(params.v)
    else:
        scores = hs @ query
    alpha = softmax(scores)
    return alpha @ hs, alpha


# ---------------------------------------------------------------- model


@dataclass
class ModelConfig:
    vocab_size: int
    num_classes: int
    hidden_size: int = 64
    embed_dim: int = 32
    input_dim: int | None = None
    use_ocg: bool = True
    use_attention: bool = True
    num_layers: int = 1
    dropout_rate: float = 0.3
    attention_scoring: str = "additive"
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.input_dim is None:
            self.input_dim = self.embed_dim
        for name in ("vocab_size", "num_classes", "hidden_size", "embed_dim", "num_layers"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.input_dim != self.embed_dim:
            raise ConfigError("input_dim must equal embed_dim (the recurrent input is the embedding)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.attention_scoring not in ("additive", "dot"):
            raise ConfigError(f"unknown attention_scoring {self.attention_scoring!r}")

    @property
    def proj_dim(self) -> int:
        return self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepTrace:
    """Per-timestep record of a batched forward pass.

    Gate and state arrays are shaped (layers, batch, T, hidden); ``o`` is
    None without output conditioning and ``alpha`` (batch, T) is None
    without attention.  Positions at or beyond ``lengths`` are padding.
    """

    f: np.ndarray
    i: np.ndarray
    h: np.ndarray
    c: np.ndarray
    o: np.ndarray | None
    alpha: np.ndarray | None
    lengths: np.ndarray


@dataclass
class Forward:
    tape: Tape
    logits: Node
    pooled: Node
    cells: list[list[Node]] = field(default_factory=list)
    o_nodes: list[list[Node]] = field(default_factory=list)
    attention: Node | None = None
    lengths: np.ndarray | None = None

    def trace(self) -> StepTrace:
        f, i, h, c, o = [], [], [], [], []
        for layer, cell_nodes in enumerate(self.cells):
            hsz = cell_nodes[0].value.shape[1] // 2
            f.append(np.stack([n.ctx[1] for n in cell_nodes], axis=1))
            i.append(np.stack([n.ctx[0] for n in cell_nodes], axis=1))
            h.append(np.stack([n.value[:, :hsz] for n in cell_nodes], axis=1))
            c.append(np.stack([n.value[:, hsz:] for n in cell_nodes], axis=1))
            if self.o_nodes and self.o_nodes[layer]:
                o.append(np.stack([n.value for n in self.o_nodes[layer]], axis=1))
        alpha = self.attention.ctx[0] if self.attention is not None else None
        return StepTrace(
            f=np.stack(f),
            i=np.stack(i),
            h=np.stack(h),
            c=np.stack(c),
            o=np.stack(o) if o else None,
            alpha=alpha,
            lengths=self.lengths,
        )


class SequenceClassifier:
    """Embedding -> stacked (Echo)LSTM -> last state or attention pooling -> dropout -> linear."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, Rng(seed))
        missing = set(param_shapes(config)) - set(self.params)
        extra = set(self.params) - set(param_shapes(config))
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "SequenceClassifier":
        return SequenceClassifier(self.config, {k: v.copy() for k, v in self.params.items()})

    def layer_params(self, layer: int) -> LstmParams | EchoParams:
        pre = f"l{layer}."
        kw = {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}
        return EchoParams(**kw) if self.config.use_ocg else LstmParams(**kw)

    def attention_params(self) -> AttentionParams | None:
        if not self.config.use_attention:
            return None
        if self.config.attention_scoring == "dot":
            return AttentionParams(scoring="dot")
        p = self.params
        return AttentionParams(p["attn.W_q"], p["attn.W_k"], p["attn.v"], "additive")

    def _check_tokens(self, tokens: np.ndarray, lengths: np.ndarray):
        vocab = self.config.vocab_size
        for b in range(tokens.shape[0]):
            row = tokens[b, : lengths[b]]
            bad = np.flatnonzero((row < 0) | (row >= vocab))
            if bad.size:
                pos = int(bad[0])
                raise DataError(f"token {int(row[pos])} at position {pos + 1} of sample {b} is outside vocab of size {vocab}")

    def forward(
        self,
        tokens,
        lengths=None,
        train: bool = False,
        rng: Rng | None = None,
        tape: Tape | None = None,
    ) -> Forward:
        """Record a batched forward pass. ``tokens`` is (B, T); rows shorter than T are padded."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        bsz, steps = tokens.shape
        if steps == 0:
            raise DataError("empty sequence")
        lengths = np.full(bsz, steps) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if np.any(lengths < 1) or np.any(lengths > steps):
            raise DataError("sequence lengths must lie in [1, T]")
        self._check_tokens(tokens, lengths)
        padded = bool(np.any(lengths < steps))
        step_mask = (np.arange(steps)[None, :] < lengths[:, None]) if padded else None

        tape = tape or Tape()
        P = {name: tape.param(name, value) for name, value in self.params.items()}
        safe = np.where(step_mask, tokens, 0) if padded else tokens
        x = tape.embed(P["embed"], safe)
        hsz = cfg.hidden_size
        fw = Forward(tape=tape, logits=None, pooled=None, lengths=lengths)

        for layer in range(cfg.num_layers):
            pre = f"l{layer}."
            wx = tape.concat_rows(*(P[pre + n] for n in ("W_xi", "W_xf", "W_xg", "W_xo")))
            bx = tape.concat_rows(*(P[pre + n] for n in LSTM_BIASES))
            wh = tape.concat_rows(*(P[pre + n] for n in ("W_hi", "W_hf", "W_hg", "W_ho_gate")))
            xg = tape.linear(x, wx, bx)
            h = tape.const(np.zeros((bsz, hsz)))
            c = tape.const(np.zeros((bsz, hsz)))
            extra = ()
            if cfg.use_ocg:
                wo = tape.concat_rows(P[pre + "W_oi"], P[pre + "W_of"])
                o = tape.const(np.zeros((bsz, cfg.proj_dim)))
            cells, o_nodes, states = [], [], []
            top = layer == cfg.num_layers - 1
            for t in range(steps):
                m = step_mask[:, t : t + 1].astype(DTYPE) if padded else None
                if cfg.use_ocg:
                    extra = (o, wo)
                hc = tape.apply("cell", xg, h, c, wh, *extra, t=t, mask=m)
                h = tape.cols(hc, 0, hsz)
                c = tape.cols(hc, hsz, 2 * hsz)
                if cfg.use_ocg:
                    o = tape.linear(h, P[pre + "W_ho"])
                    o_nodes.append(o)
                if top:
                    tape.mark("h", h)
                cells.append(hc)
                states.append(h)
            fw.cells.append(cells)
            fw.o_nodes.append(o_nodes)
            if layer < cfg.num_layers - 1 or cfg.use_attention:
                x = tape.stack_time(*states)

        if cfg.use_attention:
            if cfg.attention_scoring == "additive":
                att = tape.apply(
                    "attention", x, P["attn.W_q"], P["attn.W_k"], P["attn.v"], mask=step_mask, scoring="additive"
                )
            else:
                att = tape.apply("attention", x, mask=step_mask, scoring="dot")
            fw.attention = att
            pooled = att
        else:
            pooled = h
        fw.pooled = pooled
        if train and cfg.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training-mode forward needs an rng for dropout")
            keep = 1.0 - cfg.dropout_rate
            mask = (rng.random(pooled.value.shape) < keep) / keep
            pooled = tape.dropout(pooled, mask)
        fw.logits = tape.linear(pooled, P["out.W"], P["out.b"])
        return fw

    def loss(self, tokens, labels, lengths=None, train=False, rng=None, reduction="mean"):
        """Forward plus mean cross-entropy; returns ``(Forward, loss_node)``."""
        labels = np.asarray(labels, dtype=np.int64)
        if np.any(labels < 0) or np.any(labels >= self.config.num_classes):
            raise DataError(f"labels must lie in [0, {self.config.num_classes})")
        fw = self.forward(tokens, lengths, train=train, rng=rng)
        return fw, fw.tape.softmax_ce(fw.logits, labels, reduction=reduction)

    def gradients(self, tokens, labels, lengths=None, train=False, rng=None):
        fw, loss = self.loss(tokens, labels, lengths, train, rng)
        return float(loss.value[0, 0]), backward(fw.tape, loss)

    def logits(self, tokens, lengths=None) -> np.ndarray:
        return self.forward(tokens, lengths).logits.value


def forward_sequence(model: SequenceClassifier, tokens) -> tuple[np.ndarray, StepTrace]:
    """Evaluation-mode forward of one sequence: ``(logits, trace)``."""
    fw = model.forward(np.asarray(tokens, dtype=np.int64)[None, :])
    return fw.logits.value[0], fw.trace()


def reference_forward(model: SequenceClassifier, tokens) -> np.ndarray:
    """Unbatched evaluation-mode logits computed step by step with the named weights."""
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
        raise DataError("token outside vocabulary")
    xs = [model.params["embed"][tok] for tok in tokens]
    for layer in range(cfg.num_layers):
        p = model.layer_params(layer)
        h = np.zeros(cfg.hidden_size)
        c = np.zeros(cfg.hidden_size)
        o = np.zeros(cfg.proj_dim)
        states = []
        for x in xs:
            if cfg.use_ocg:
                h, c, o, _ = echo_step(p, x, h, c, o)
            else:
                h, c, _ = lstm_step(p, x, h, c)
            states.append(h)
        xs = states
    if cfg.use_attention:
        pooled, _ = attention_pool(np.stack(xs), model.attention_params())
    else:
        pooled = xs[-1]
    return model.params["out.W"] @ pooled + model.params["out.b"][:, 0]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    hsz = cfg.hidden_size
    shapes = {"embed": (cfg.vocab_size, cfg.embed_dim)}
    for layer in range(cfg.num_layers):
        d_in = cfg.input_dim if layer == 0 else hsz
        pre = f"l{layer}."
        for gate in ("i", "f", "g", "o"):
            shapes[pre + f"W_x{gate}"] = (hsz, d_in)
        for name in ("W_hi", "W_hf", "W_hg", "W_ho_gate"):
            shapes[pre + name] = (hsz, hsz)
        for name in LSTM_BIASES:
            shapes[pre + name] = (hsz, 1)
        if cfg.use_ocg:
            shapes[pre + "W_of"] = (hsz, cfg.proj_dim)
            shapes[pre + "W_oi"] = (hsz, cfg.proj_dim)
            shapes[pre + "W_ho"] = (cfg.proj_dim, hsz)
    if cfg.use_attention and cfg.attention_scoring == "additive":
        shapes["attn.W_q"] = (hsz, hsz)
        shapes["attn.W_k"] = (hsz, hsz)
        shapes["attn.v"] = (hsz, 1)
    shapes["out.W"] = (cfg.num_classes, hsz)
    shapes["out.b"] = (cfg.num_classes, 1)
    return shapes


def init_params(cfg: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    params = {}
    for name, (rows, cols) in param_shapes(cfg).items():
        short = name.split(".")[-1]
        if short.startswith("b_") or name == "out.b":
            params[name] = rand_init(rng, rows, cols, "zeros")
            if short == "b_f":
                params[name] += cfg.forget_bias
        else:
            params[name] = rand_init(rng, rows, cols, "xavier-uniform")
    return params
