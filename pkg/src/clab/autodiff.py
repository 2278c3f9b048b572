"""Primitive-level reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every primitive applied to tracked tensors. Leaves are
either named parameters (``tape.param``) or untracked constants
(``tape.constant``). :func:`backward` walks the tape once in reverse and
returns a gradient for every named parameter, zeros for unreached ones.

Only the primitives the toy transcription model needs are provided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

NEG_INF = -1e30


class ShapeError(ValueError):
    pass


class Tensor:
    """A value produced on (or outside of) a tape.

    ``index`` is ``None`` for constants and for values computed while the
    tape is not recording; such tensors never receive gradients.
    """

    __slots__ = ("data", "tape", "index")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None, index: int | None = None):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.index is not None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    input_values: tuple[np.ndarray, ...]
    ctx: Any
    attrs: dict


@dataclass
class Tape:
    """Append-only record of primitive applications."""

    record: bool = True
    nodes: list[_Node | None] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    names: dict[int, str] = field(default_factory=dict)

    def param(self, name: str, value: np.ndarray) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if not self.record:
            return Tensor(value)
        if name in self.names.values():
            raise ValueError(f"parameter {name!r} registered twice on tape")
        idx = len(self.nodes)
        self.nodes.append(None)
        self.values.append(value)
        self.names[idx] = name
        return Tensor(value, self, idx)

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64))

    def _push(self, op, inputs, input_values, ctx, attrs, out) -> Tensor:
        idx = len(self.nodes)
        self.nodes.append(_Node(op, inputs, input_values, ctx, attrs))
        self.values.append(out)
        return Tensor(out, self, idx)


# --------------------------------------------------------------------------
# primitives: name -> (forward(*arrays, **attrs) -> (out, ctx),
#                      backward(g, ctx, *arrays, **attrs) -> tuple of grads)
# --------------------------------------------------------------------------

_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def primitive(name: str):
    def register(pair):
        _PRIMITIVES[name] = pair
        return pair

    return register


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b, None


def _add_bwd(g, ctx, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b, None


def _sub_bwd(g, ctx, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b, None


def _mul_bwd(g, ctx, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(a, *, factor):
    return a * factor, None


def _scale_bwd(g, ctx, a, *, factor):
    return (g * factor,)


def _sum_fwd(a):
    return np.asarray(a.sum()), None


def _sum_bwd(g, ctx, a):
    return (np.broadcast_to(g, a.shape).copy(),)


def _matmul_fwd(a, b, *, trans_b=False):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    bt = np.swapaxes(b, -1, -2) if trans_b else b
    if a.shape[-1] != bt.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}"
                         + (" (b transposed)" if trans_b else ""))
    return a @ bt, None


def _matmul_bwd(g, ctx, a, b, *, trans_b=False, needs=(True, True)):
    bt = np.swapaxes(b, -1, -2) if trans_b else b
    ga = _unbroadcast(g @ np.swapaxes(bt, -1, -2), a.shape) if needs[0] else None
    if not needs[1]:
        return ga, None
    if a.ndim > 2 and b.ndim == 2:
        # weight shared across the batch: fold batch dims into rows
        gbt = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gbt = _unbroadcast(np.swapaxes(a, -1, -2) @ g, bt.shape)
    gb = np.swapaxes(gbt, -1, -2) if trans_b else gbt
    return ga, gb


def _softmax_fwd(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def _softmax_bwd(g, p, a):
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


LN_EPS = 1e-5


def _layernorm_fwd(x, gamma, beta):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gain {gamma.shape} / bias {beta.shape} do not match features {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layernorm_bwd(g, ctx, x, gamma, beta):
    xhat, inv = ctx
    gxhat = g * gamma
    gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    axes = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)


def _tanh_fwd(a):
    t = np.tanh(a)
    return t, t


def _tanh_bwd(g, t, a):
    return (g * (1.0 - t * t),)


def _embedding_fwd(table, *, ids):
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    return table[ids], None


def _embedding_bwd(g, ctx, table, *, ids):
    gt = np.zeros_like(table)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


def _concat_fwd(*parts, axis=1):
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]} along axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    return np.concatenate(parts, axis=axis), sizes


def _concat_bwd(g, sizes, *parts, axis=1):
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _expand_fwd(a, *, batch):
    return np.broadcast_to(a, (batch,) + a.shape).copy(), None


def _expand_bwd(g, ctx, a, *, batch):
    return (g.sum(axis=0),)


def _split_heads_fwd(x, *, heads):
    b, t, d = x.shape
    if d % heads:
        raise ShapeError(f"split_heads: width {d} not divisible by {heads} heads")
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3), None


def _split_heads_bwd(g, ctx, x, *, heads):
    return (g.transpose(0, 2, 1, 3).reshape(x.shape),)


def _merge_heads_fwd(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh), None


def _merge_heads_bwd(g, ctx, x):
    b, h, t, dh = x.shape
    return (g.reshape(b, t, h, dh).transpose(0, 2, 1, 3),)


def _attn_scores_fwd(q, k, *, mask):
    if q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attn_scores: query {q.shape} and key {k.shape} do not conform")
    s = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(q.shape[-1])
    return np.where(mask, s, NEG_INF), None


def _attn_scores_bwd(g, ctx, q, k, *, mask, needs=(True, True)):
    g = np.where(mask, g, 0.0) / math.sqrt(q.shape[-1])
    return (g @ k if needs[0] else None,
            np.swapaxes(g, -1, -2) @ q if needs[1] else None)


def _cross_entropy_fwd(logits, *, targets, weights):
    if logits.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}, "
                         f"weights {weights.shape} do not conform")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    total = weights.sum()
    return np.asarray((nll * weights).sum() / total), (logp, total)


def _cross_entropy_bwd(g, ctx, logits, *, targets, weights):
    logp, total = ctx
    d = np.exp(logp)
    np.put_along_axis(d, targets[..., None],
                      np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    return (d * (weights / total)[..., None] * g,)


def _weighted_sqdist_fwd(theta, *, anchor, weight):
    if theta.shape != anchor.shape or theta.shape != weight.shape:
        raise ShapeError(f"weighted_sqdist: theta {theta.shape}, anchor {anchor.shape}, "
                         f"weight {weight.shape} differ")
    diff = theta - anchor
    return np.asarray((weight * diff * diff).sum()), diff


def _weighted_sqdist_bwd(g, diff, theta, *, anchor, weight):
    return (2.0 * weight * diff * g,)


for _name, _pair in {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "layernorm": (_layernorm_fwd, _layernorm_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "embedding": (_embedding_fwd, _embedding_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "expand": (_expand_fwd, _expand_bwd),
    "split_heads": (_split_heads_fwd, _split_heads_bwd),
    "merge_heads": (_merge_heads_fwd, _merge_heads_bwd),
    "attn_scores": (_attn_scores_fwd, _attn_scores_bwd),
    "cross_entropy": (_cross_entropy_fwd, _cross_entropy_bwd),
    "weighted_sqdist": (_weighted_sqdist_fwd, _weighted_sqdist_bwd),
}.items():
    primitive(_name)(_pair)

PRIMITIVES = tuple(_PRIMITIVES)
# backward rules that can skip work for untracked inputs
_SPARSE_BWD = {"matmul", "attn_scores"}


def forward(op: str, inputs, tape: Tape | None = None, **attrs) -> Tensor:
    """Apply primitive ``op`` to ``inputs`` and record it on the tape if any input is tracked."""
    try:
        fwd, _ = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    tensors = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
    arrays = tuple(t.data for t in tensors)
    out, ctx = fwd(*arrays, **attrs)
    if tape is None:
        tape = next((t.tape for t in tensors if t.tracked), None)
    if tape is None or not tape.record or not any(t.tracked for t in tensors):
        return Tensor(out)
    return tape._push(op, tuple(t.index for t in tensors), arrays, ctx, attrs, out)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``loss`` for every named parameter on ``tape``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    if loss.tracked:
        if loss.tape is not tape:
            raise ValueError("loss was not recorded on this tape")
        grads[loss.index] = np.ones(())
        for idx in range(loss.index, -1, -1):
            node, g = tape.nodes[idx], grads[idx]
            if node is None or g is None:
                continue
            _, bwd = _PRIMITIVES[node.op]
            if node.op in _SPARSE_BWD:
                needs = tuple(src is not None for src in node.inputs)
                in_grads = bwd(g, node.ctx, *node.input_values, needs=needs, **node.attrs)
            else:
                in_grads = bwd(g, node.ctx, *node.input_values, **node.attrs)
            for src, gi in zip(node.inputs, in_grads):
                if src is None or gi is None:
                    continue
                grads[src] = gi if grads[src] is None else grads[src] + gi
    return {
        name: (grads[idx] if grads[idx] is not None else np.zeros_like(tape.values[idx]))
        for idx, name in tape.names.items()
    }


# convenience wrappers ------------------------------------------------------

def add(a, b):
    return forward("add", (a, b))


def sub(a, b):
    return forward("sub", (a, b))


def mul(a, b):
    return forward("mul", (a, b))


def scale(a, factor: float):
    return forward("scale", (a,), factor=float(factor))


def total(a):
    return forward("sum", (a,))


def matmul(a, b, trans_b: bool = False):
    return forward("matmul", (a, b), trans_b=trans_b)


def softmax(a):
    return forward("softmax", (a,))


def layernorm(x, gamma, beta):
    return forward("layernorm", (x, gamma, beta))


def tanh(a):
    return forward("tanh", (a,))


def embedding(table, ids: np.ndarray):
    return forward("embedding", (table,), ids=np.asarray(ids, dtype=np.int64))


def concat(parts, axis: int = 1):
    return forward("concat", tuple(parts), axis=axis)


def expand(a, batch: int):
    return forward("expand", (a,), batch=int(batch))


def split_heads(x, heads: int):
    return forward("split_heads", (x,), heads=heads)


def merge_heads(x):
    return forward("merge_heads", (x,))


def attn_scores(q, k, mask: np.ndarray):
    return forward("attn_scores", (q, k), mask=mask)


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray):
    return forward("cross_entropy", (logits,), targets=np.asarray(targets, dtype=np.int64),
                   weights=np.asarray(weights, dtype=np.float64))


def weighted_sqdist(theta, anchor: np.ndarray, weight: np.ndarray):
    return forward("weighted_sqdist", (theta,), anchor=anchor, weight=weight)


# gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: tuple[str, int] | None
    checked: int
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error < self.tolerance


def check_gradients(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-6,
    max_coords: int = 200,
    floor: float = 1e-6,
    seed: int = 0,
    grad_fn: Callable[[Mapping[str, np.ndarray]], Mapping[str, np.ndarray]] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` receives a mapping of named leaf tensors and returns a scalar tensor.
    Up to ``max_coords`` coordinates per parameter are probed, chosen by a
    seeded generator. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    ``grad_fn`` overrides the analytic route (used for negative controls).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(p) -> float:
        tape = Tape(record=False)
        return float(f({k: tape.param(k, v) for k, v in p.items()}).data)

    if grad_fn is None:
        tape = Tape()
        loss = f({k: tape.param(k, v) for k, v in params.items()})
        analytic = backward(tape, loss)
    else:
        analytic = grad_fn(params)

    rng = np.random.default_rng(seed)
    worst, worst_err, checked, failures = None, 0.0, 0, []
    for name, arr in params.items():
        flat = arr.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        agrad = np.asarray(analytic[name]).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = value(params)
            flat[i] = orig - step
            fm = value(params)
            flat[i] = orig
            checked += 1
            if not (math.isfinite(fp) and math.isfinite(fm)):
                failures.append(f"non-finite loss at {name}[{i}]")
                continue
            num = (fp - fm) / (2 * step)
            a = agrad[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            if err > worst_err or worst is None:
                worst_err, worst = err, (name, int(i))
    return GradCheckReport(worst_err, tolerance, worst, checked, failures)
