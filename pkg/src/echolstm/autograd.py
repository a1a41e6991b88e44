"""Tape-based reverse-mode differentiation.

Every forward computation appends a node (op name, input node ids, attrs,
cached context) to a :class:`Tape`.  :func:`backward` walks the tape in
reverse and returns the gradient of a scalar node with respect to every
named parameter leaf.

Besides the elementary primitives (add, mul, sigmoid, matmul, ...) the tape
has three fused primitives that keep a 50-step unroll at a few nodes per
step: ``cell`` (one LSTM step with optional output-conditioned gating),
``attention`` (additive or dot-product pooling queried by the last state)
and ``softmax_ce``.  Their backward rules are hand-written and covered by
the finite-difference checks in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import ShapeError, as_float, log_softmax, sigmoid, softmax


class ContractError(RuntimeError):
    """A caller violated a documented precondition of the engine."""


class NonFiniteLossError(ArithmeticError):
    pass


class SliceGrad:
    """Gradient that only touches ``target[index]``; accumulated in place."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


class Node:
    __slots__ = ("id", "op", "inputs", "value", "attrs", "ctx", "needs_grad", "name", "grad")

    def __init__(self, id, op, inputs, value, attrs=None, ctx=None, needs_grad=False, name=None):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs or {}
        self.ctx = ctx
        self.needs_grad = needs_grad
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} {self.value.shape}>"


# name -> (forward, backward)
#   forward(*input_values, **attrs) -> (value, ctx)
#   backward(grad, inputs, value, ctx, needs, **attrs) -> tuple of grads (None allowed)
PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def primitive(name):
    def register(cls):
        PRIMITIVES[name] = (cls.forward, cls.backward)
        return cls

    return register


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.marks: dict[str, list[Node]] = {}

    def __len__(self):
        return len(self.nodes)

    # leaves

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice on one tape")
        node = Node(len(self.nodes), "param", (), as_float(value), needs_grad=True, name=name)
        self.nodes.append(node)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        node = Node(len(self.nodes), "const", (), as_float(value))
        self.nodes.append(node)
        return node

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        forward, _ = PRIMITIVES[op]
        value, ctx = forward(*(n.value for n in inputs), **attrs)
        node = Node(
            len(self.nodes),
            op,
            tuple(n.id for n in inputs),
            value,
            attrs,
            ctx,
            needs_grad=any(n.needs_grad for n in inputs),
        )
        self.nodes.append(node)
        return node

    def mark(self, tag: str, node: Node) -> Node:
        self.marks.setdefault(tag, []).append(node)
        return node

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; returns the fresh values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op in ("param", "const"):
                values.append(node.value)
                continue
            forward, _ = PRIMITIVES[node.op]
            v, _ = forward(*(values[i] for i in node.inputs), **node.attrs)
            values.append(v)
        return values

    # sugar over apply()

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def scale(self, a, k: float):
        return self.apply("scale", a, k=float(k))

    def sigmoid(self, a):
        return self.apply("sigmoid", a)

    def tanh(self, a):
        return self.apply("tanh", a)

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def linear(self, x, w, b=None):
        return self.apply("linear", x, w) if b is None else self.apply("linear", x, w, b)

    def sum(self, a):
        return self.apply("sum", a)

    def concat_rows(self, *mats):
        return self.apply("concat_rows", *mats)

    def cols(self, a, start: int, stop: int):
        return self.apply("slice_last", a, start=start, stop=stop)

    def embed(self, table, ids):
        return self.apply("embed", table, ids=np.asarray(ids, dtype=np.int64))

    def stack_time(self, *states):
        return self.apply("stack_time", *states)

    def dropout(self, a, mask: np.ndarray):
        return self.apply("mask_mul", a, mask=mask)

    def softmax_ce(self, logits, labels, reduction: str = "mean"):
        return self.apply("softmax_ce", logits, labels=np.asarray(labels, dtype=np.int64), reduction=reduction)


@dataclass
class GradientSet:
    """Parameter name -> gradient of the loss, same shape as the parameter."""

    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def __len__(self):
        return len(self.grads)

    def items(self):
        return self.grads.items()

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))


def backward(tape: Tape, output: Node | None = None, retain: bool = False) -> GradientSet:
    """Gradients of the scalar ``output`` (default: last node) w.r.t. all params.

    With ``retain=True`` every marked node also gets its gradient stored in
    ``node.grad`` (used for hidden-state diagnostics).
    """
    if not tape.nodes:
        raise ContractError("empty tape")
    out = tape.nodes[-1] if output is None else output
    if out.value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {out.value.shape}")

    keep = {n.id for nodes in tape.marks.values() for n in nodes} if retain else set()
    grads: dict[int, np.ndarray] = {out.id: np.ones_like(out.value)}
    owned: set[int] = {out.id}
    result: dict[str, np.ndarray] = {}
    nodes = tape.nodes

    for node in reversed(nodes[: out.id + 1]):
        g = grads.get(node.id)
        if node.id in keep:
            node.grad = np.zeros_like(node.value) if g is None else g
        if g is None or not node.needs_grad:
            continue
        if node.op == "param":
            result[node.name] = g
            continue
        if node.op == "const":
            continue
        del grads[node.id]
        _, bwd = PRIMITIVES[node.op]
        inputs = [nodes[i] for i in node.inputs]
        needs = tuple(n.needs_grad for n in inputs)
        in_grads = bwd(g, [n.value for n in inputs], node.value, node.ctx, needs, **node.attrs)
        for src, ig, need in zip(inputs, in_grads, needs):
            if ig is None or not need:
                continue
            cur = grads.get(src.id)
            if isinstance(ig, SliceGrad):
                if cur is None:
                    cur = np.zeros_like(src.value)
                    grads[src.id] = cur
                    owned.add(src.id)
                elif src.id not in owned:
                    cur = cur.copy()
                    grads[src.id] = cur
                    owned.add(src.id)
                cur[ig.index] += ig.value
            elif cur is None:
                grads[src.id] = ig
            elif src.id in owned:
                cur += ig
            else:
                grads[src.id] = cur + ig
                owned.add(src.id)

    for name, leaf in tape.params.items():
        if name not in result:
            result[name] = np.zeros_like(leaf.value)
    return GradientSet(result)


def hidden_grad_norms(tape: Tape, tag: str = "h", output: Node | None = None) -> np.ndarray:
    """Per-timestep L2 norm of dL/dh_t, averaged over the batch rows.

    The tape must carry hidden-state nodes marked under ``tag`` in time order.
    """
    marked = tape.marks.get(tag)
    if not marked:
        raise ContractError(f"no hidden states marked {tag!r} on this tape")
    backward(tape, output=output, retain=True)
    norms = []
    for node in marked:
        g = node.grad.reshape(node.grad.shape[0], -1) if node.grad.ndim > 1 else node.grad.reshape(1, -1)
        norms.append(float(np.mean(np.sqrt(np.sum(g * g, axis=1)))))
    return np.asarray(norms)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    per_param: dict[str, float]
    n_coords: int
    analytic: GradientSet

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def rel_err(a, b, floor: float = 1e-8) -> float:
    return float(abs(a - b) / max(abs(a), abs(b), floor))


def finite_diff_check(model, batch, epsilon: float = 1e-5, extended: bool = True, max_params: int = 10_000):
    """Compare ``model.gradients`` against central differences, coordinate by coordinate.

    ``model`` needs ``params`` (name -> array), ``copy()``, ``loss(tokens,
    labels, lengths)`` and ``gradients(tokens, labels, lengths)``; ``batch``
    is ``(tokens, labels)`` or ``(tokens, labels, lengths)``.  With
    ``extended`` the perturbed losses are evaluated in ``np.longdouble`` so
    that round-off in the oracle stays far below the tolerance even for
    gradient coordinates near 1e-8.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    n_params = sum(p.size for p in model.params.values())
    if n_params > max_params:
        raise ContractError(f"gradient check limited to {max_params} parameters, model has {n_params}")
    tokens, labels, *rest = batch
    lengths = rest[0] if rest else None
    _, analytic = model.gradients(tokens, labels, lengths)

    probe = model.copy()
    if extended:
        probe.params = {k: v.astype(np.longdouble) for k, v in probe.params.items()}

    def loss_at(name):
        val = probe.loss(tokens, labels, lengths)[1].value.reshape(())
        if not np.isfinite(val):
            raise NonFiniteLossError(f"non-finite loss while perturbing {name!r}")
        return val

    per_param: dict[str, float] = {}
    worst = (0.0, "", ())
    for name, p in probe.params.items():
        worst_here = 0.0
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + epsilon
            up = loss_at(name)
            p[idx] = old - epsilon
            down = loss_at(name)
            p[idx] = old
            numeric = float((up - down) / (2 * epsilon))
            err = rel_err(numeric, float(analytic[name][idx]))
            worst_here = max(worst_here, err)
            if err > worst[0]:
                worst = (err, name, idx)
        per_param[name] = worst_here
    return GradCheckReport(worst[0], worst[1], worst[2], per_param, n_params, analytic)


# ---------------------------------------------------------------- primitives


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


@primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _check_same("add", a, b)
        return a + b, None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        return g, g


@primitive("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _check_same("sub", a, b)
        return a - b, None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        return g, -g


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _check_same("mul", a, b)
        return a * b, None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        a, b = ins
        return g * b, g * a


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(a, k):
        return a * k, None

    @staticmethod
    def backward(g, ins, out, ctx, needs, k):
        return (g * k,)


@primitive("mask_mul")
class _MaskMul:
    @staticmethod
    def forward(a, mask):
        return a * mask, None

    @staticmethod
    def backward(g, ins, out, ctx, needs, mask):
        return (g * mask,)


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(a):
        return sigmoid(a), None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        return (g * out * (1.0 - out),)


@primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(a):
        return np.tanh(a), None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        return (g * (1.0 - out * out),)


@primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
        return a @ b, None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        a, b = ins
        return (g @ b.T if needs[0] else None), (a.T @ g if needs[1] else None)


@primitive("linear")
class _Linear:
    """x (..., D) times W.T with W (K, D), plus an optional bias column (K, 1)."""

    @staticmethod
    def forward(x, w, b=None):
        if x.shape[-1] != w.shape[1]:
            raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
        y = x @ w.T
        if b is not None:
            if b.shape != (w.shape[0], 1):
                raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
            y = y + b[:, 0]
        return y, None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        x, w = ins[0], ins[1]
        gx = g @ w if needs[0] else None
        gw = None
        if needs[1]:
            gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        if len(ins) == 2:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0).reshape(-1, 1) if needs[2] else None
        return gx, gw, gb


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(a):
        return np.array([[a.sum()]]), None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        return (np.full_like(ins[0], g.reshape(())),)


@primitive("concat_rows")
class _ConcatRows:
    @staticmethod
    def forward(*mats):
        return np.concatenate(mats, axis=0), None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        grads, start = [], 0
        for m in ins:
            grads.append(g[start : start + m.shape[0]])
            start += m.shape[0]
        return tuple(grads)


@primitive("slice_last")
class _SliceLast:
    @staticmethod
    def forward(a, start, stop):
        return a[..., start:stop], None

    @staticmethod
    def backward(g, ins, out, ctx, needs, start, stop):
        return (SliceGrad((Ellipsis, slice(start, stop)), g),)


@primitive("embed")
class _Embed:
    @staticmethod
    def forward(table, ids):
        return table[ids], None

    @staticmethod
    def backward(g, ins, out, ctx, needs, ids):
        gt = np.zeros_like(ins[0])
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)


@primitive("stack_time")
class _StackTime:
    """T states of shape (B, H) -> (B, T, H)."""

    @staticmethod
    def forward(*states):
        return np.stack(states, axis=1), None

    @staticmethod
    def backward(g, ins, out, ctx, needs):
        return tuple(g[:, t] for t in range(g.shape[1]))


@primitive("softmax_ce")
class _SoftmaxCE:
    @staticmethod
    def forward(logits, labels, reduction="mean"):
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f"softmax_ce: logits {logits.shape} vs labels {labels.shape}")
        logp = log_softmax(logits, axis=1)
        picked = logp[np.arange(len(labels)), labels]
        total = -picked.sum()
        if reduction == "mean":
            total = total / len(labels)
        return np.array([[total]]), logp

    @staticmethod
    def backward(g, ins, out, ctx, needs, labels, reduction="mean"):
        p = np.exp(ctx)
        p[np.arange(len(labels)), labels] -= 1.0
        if reduction == "mean":
            p /= len(labels)
        return (p * g.reshape(()),)


# -------- fused recurrent step


def cell_forward(xg, h_prev, c_prev, wh, o_prev=None, wo=None, mask=None):
    """One LSTM step on row-batched arrays with gate blocks ordered (i, f, g, o).

    ``xg`` holds the input projection plus bias, shape (B, 4H); ``wh`` is
    (4H, H).  When ``o_prev`` is given, ``o_prev @ wo.T`` (wo is (2H, P)) is
    added to the input and forget gate blocks.  Rows where ``mask`` is 0 carry
    the previous state through unchanged.
    """
    hsz = h_prev.shape[1]
    pre = xg + h_prev @ wh.T
    if o_prev is not None:
        pre[:, : 2 * hsz] += o_prev @ wo.T
    i = sigmoid(pre[:, :hsz])
    f = sigmoid(pre[:, hsz : 2 * hsz])
    g = np.tanh(pre[:, 2 * hsz : 3 * hsz])
    og = sigmoid(pre[:, 3 * hsz :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = og * tc
    if mask is not None:
        h = mask * h + (1.0 - mask) * h_prev
        c = mask * c + (1.0 - mask) * c_prev
    return h, c, (i, f, g, og, tc)


@primitive("cell")
class _Cell:
    """Inputs: xg_all (B, T, 4H), h_prev, c_prev, wh[, o_prev, wo]; output [h | c]."""

    @staticmethod
    def forward(xg_all, h_prev, c_prev, wh, o_prev=None, wo=None, t=0, mask=None):
        h, c, gates = cell_forward(xg_all[:, t], h_prev, c_prev, wh, o_prev, wo, mask)
        return np.concatenate([h, c], axis=1), gates

    @staticmethod
    def backward(grad, ins, out, ctx, needs, t=0, mask=None):
        h_prev, c_prev, wh = ins[1], ins[2], ins[3]
        hsz = h_prev.shape[1]
        i, f, g, og, tc = ctx
        dh = grad[:, :hsz]
        dc = grad[:, hsz:]
        if mask is not None:
            dh_carry = (1.0 - mask) * dh
            dc_carry = (1.0 - mask) * dc
            dh = mask * dh
            dc = mask * dc
        dc = dc + dh * og * (1.0 - tc * tc)
        dpre = np.empty((h_prev.shape[0], 4 * hsz))
        dpre[:, :hsz] = dc * g * i * (1.0 - i)
        dpre[:, hsz : 2 * hsz] = dc * c_prev * f * (1.0 - f)
        dpre[:, 2 * hsz : 3 * hsz] = dc * i * (1.0 - g * g)
        dpre[:, 3 * hsz :] = dh * tc * og * (1.0 - og)

        dxg = SliceGrad((slice(None), t), dpre) if needs[0] else None
        dh_prev = dpre @ wh
        dc_prev = dc * f
        if mask is not None:
            dh_prev += dh_carry
            dc_prev += dc_carry
        dwh = dpre.T @ h_prev if needs[3] else None
        if len(ins) == 4:
            return dxg, dh_prev, dc_prev, dwh
        o_prev, wo = ins[4], ins[5]
        dgate = dpre[:, : 2 * hsz]
        do_prev = dgate @ wo if needs[4] else None
        dwo = dgate.T @ o_prev if needs[5] else None
        return dxg, dh_prev, dc_prev, dwh, do_prev, dwo


# -------- fused attention pooling


def attention_forward(hs, wq=None, wk=None, v=None, mask=None, scoring="additive"):
    """Pool states ``hs`` (B, T, H) using the last state as the query.

    additive: score_t = v . tanh(wq h_T + wk h_t);  dot: score_t = h_t . h_T.
    Returns (context (B, H), alpha (B, T), cache).
    """
    if hs.ndim != 3 or hs.shape[1] == 0:
        raise ShapeError(f"attention needs states of shape (B, T>=1, H), got {hs.shape}")
    query = hs[:, -1]
    if scoring == "additive":
        u = np.tanh((query @ wq.T)[:, None, :] + hs @ wk.T)
        scores = u @ v[:, 0]
    elif scoring == "dot":
        u = None
        scores = np.einsum("bth,bh->bt", hs, query)
    else:
        raise ValueError(f"unknown attention scoring {scoring!r}")
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    alpha = softmax(scores, axis=1)
    context = np.einsum("bt,bth->bh", alpha, hs)
    return context, alpha, u


@primitive("attention")
class _Attention:
    @staticmethod
    def forward(hs, wq=None, wk=None, v=None, mask=None, scoring="additive"):
        context, alpha, u = attention_forward(hs, wq, wk, v, mask, scoring)
        return context, (alpha, u)

    @staticmethod
    def backward(g, ins, out, ctx, needs, mask=None, scoring="additive"):
        alpha, u = ctx
        hs = ins[0]
        query = hs[:, -1]
        dhs = alpha[:, :, None] * g[:, None, :]
        dalpha = np.einsum("bth,bh->bt", hs, g)
        ds = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
        if scoring == "dot":
            dhs += ds[:, :, None] * query[:, None, :]
            dhs[:, -1] += np.einsum("bt,bth->bh", ds, hs)
            return (dhs,)
        wq, wk, v = ins[1], ins[2], ins[3]
        dv = np.einsum("bta,bt->a", u, ds).reshape(-1, 1)
        dpre = ds[:, :, None] * v[:, 0] * (1.0 - u * u)
        dq = dpre.sum(axis=1)
        dwk = np.einsum("bta,bth->ah", dpre, hs)
        dhs += dpre @ wk
        dwq = dq.T @ query
        dhs[:, -1] += dq @ wq
        return dhs, dwq, dwk, dv
