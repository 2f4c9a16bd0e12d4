"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every differentiable computation in peftlab goes through a :class:`Tape`.
A tape records primitive applications in execution order; ``backward``
walks them in reverse and accumulates vector-Jacobian products.

    tape = Tape()
    y = tape.matmul(x, w)
    loss = tape.sum(tape.mul(y, y))
    grads = tape.backward(loss)      # {uid: ndarray}
    grads[w.uid]
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DataError, DimensionError, NumericError

_uids = itertools.count(1)

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

PRIMITIVE_KINDS = (
    "matmul",
    "add",
    "elementwise_mul",
    "softmax_lastdim",
    "layernorm",
    "gelu",
    "embedding_lookup",
    "dropout",
    "cross_entropy",
    "transpose",
    "scale",
    "reshape",
    "sum",
)


class Tensor:
    """A row-major float64 array plus a ``requires_grad`` flag.

    The shape is fixed at construction. Optimizers update ``data`` in place.
    """

    __slots__ = ("data", "requires_grad", "uid", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict = field(default_factory=dict)


# -- primitive definitions ---------------------------------------------------
# forward(*arrays, **attrs) -> (out, ctx); vjp(g, ctx, *arrays) -> grads per input


def _check_lastdim_operand(kind, a, b):
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return True
    raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _sum_to_lastdim(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} and {b.shape}")
    return a @ b, {}


def _matmul_vjp(g, ctx, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


def _add_fwd(a, b):
    bias = _check_lastdim_operand("add", a, b)
    return a + b, {"bias": bias}


def _add_vjp(g, ctx, a, b):
    return g, (_sum_to_lastdim(g) if ctx["bias"] else g)


def _mul_fwd(a, b):
    vec = _check_lastdim_operand("elementwise_mul", a, b)
    return a * b, {"vec": vec}


def _mul_vjp(g, ctx, a, b):
    gb = g * a
    return g * b, (_sum_to_lastdim(gb) if ctx["vec"] else gb)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_fwd(x):
    if x.ndim < 1:
        raise DimensionError(f"softmax_lastdim: needs at least 1-D input, got {x.shape}")
    s = _softmax(x)
    return s, {"s": s}


def _softmax_vjp(g, ctx, x):
    s = ctx["s"]
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _layernorm_fwd(x, gamma, beta, eps=1e-12):
    n = x.shape[-1] if x.ndim else 0
    if x.ndim < 1 or gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(
            f"layernorm: input {x.shape} needs gamma/beta of shape ({n},), got {gamma.shape} and {beta.shape}"
        )
    # sum / n is what ndarray.mean computes, without its Python-level overhead
    mu = x.sum(axis=-1, keepdims=True) / n
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, {"xhat": xhat, "inv": inv}


def _layernorm_vjp(g, ctx, x, gamma, beta):
    xhat, inv = ctx["xhat"], ctx["inv"]
    gxhat = g * gamma
    n = xhat.shape[-1]
    gx = inv * (
        gxhat
        - gxhat.sum(axis=-1, keepdims=True) / n
        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n
    )
    return gx, _sum_to_lastdim(g * xhat), _sum_to_lastdim(g)


def _gelu_fwd(x):
    t = np.tanh(GELU_C * (x + GELU_K * x**3))
    return 0.5 * x * (1.0 + t), {"t": t}


def _gelu_vjp(g, ctx, x):
    t = ctx["t"]
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return (g * d,)


def _embedding_fwd(table, ids=None):
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError(f"embedding_lookup: ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    return table[ids], {"ids": ids}


def _embedding_vjp(g, ctx, table):
    gt = np.zeros_like(table)
    np.add.at(gt, ctx["ids"], g)
    return (gt,)


def _dropout_fwd(x, mask=None):
    if mask.shape != x.shape:
        raise DimensionError(f"dropout: mask shape {mask.shape} does not match input {x.shape}")
    return x * mask, {"mask": mask}


def _dropout_vjp(g, ctx, x):
    return (g * ctx["mask"],)


def _cross_entropy_fwd(logits, labels=None, ignore_index=-100):
    labels = np.asarray(labels)
    if logits.ndim < 1 or labels.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}"
        )
    c = logits.shape[-1]
    flat_logits = logits.reshape(-1, c)
    flat = labels.reshape(-1)
    keep = flat != ignore_index
    if not keep.any():
        raise DataError("cross_entropy: empty loss set (every position is ignored)")
    kept = flat[keep]
    if kept.min() < 0 or kept.max() >= c:
        raise DataError(f"cross_entropy: label out of range [0, {c}): {kept.min()}..{kept.max()}")
    z = flat_logits[keep]
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    nll = lse - z[np.arange(kept.size), kept]
    return np.asarray(nll.mean()), {"keep": keep, "kept": kept, "z": z}


def _cross_entropy_vjp(g, ctx, logits):
    keep, kept, z = ctx["keep"], ctx["kept"], ctx["z"]
    p = _softmax(z)
    p[np.arange(kept.size), kept] -= 1.0
    full = np.zeros((keep.size, logits.shape[-1]))
    full[keep] = p * (g / kept.size)
    return (full.reshape(logits.shape),)


def _transpose_fwd(x, axes=None):
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose: needs at least 2-D input, got {x.shape}")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} are not a permutation for shape {x.shape}")
    return np.ascontiguousarray(np.transpose(x, axes)), {"axes": axes}


def _transpose_vjp(g, ctx, x):
    return (np.transpose(g, np.argsort(ctx["axes"])),)


def _scale_fwd(x, factor=1.0):
    return x * factor, {"factor": factor}


def _scale_vjp(g, ctx, x):
    return (g * ctx["factor"],)


def _reshape_fwd(x, shape=None):
    shape = tuple(shape)
    try:
        out = x.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return out, {}


def _reshape_vjp(g, ctx, x):
    return (g.reshape(x.shape),)


def _sum_fwd(x):
    return np.asarray(x.sum()), {}


def _sum_vjp(g, ctx, x):
    return (np.full(x.shape, float(g)),)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (_add_fwd, _add_vjp),
    "elementwise_mul": (_mul_fwd, _mul_vjp),
    "softmax_lastdim": (_softmax_fwd, _softmax_vjp),
    "layernorm": (_layernorm_fwd, _layernorm_vjp),
    "gelu": (_gelu_fwd, _gelu_vjp),
    "embedding_lookup": (_embedding_fwd, _embedding_vjp),
    "dropout": (_dropout_fwd, _dropout_vjp),
    "cross_entropy": (_cross_entropy_fwd, _cross_entropy_vjp),
    "transpose": (_transpose_fwd, _transpose_vjp),
    "scale": (_scale_fwd, _scale_vjp),
    "reshape": (_reshape_fwd, _reshape_vjp),
    "sum": (_sum_fwd, _sum_vjp),
}


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted-dropout mask: kept entries carry ``1 / (1 - p)``, dropped ones 0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    ``Tape(record=False)`` evaluates primitives without keeping nodes, for
    forward-only passes that will never be differentiated.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self._producer: dict[int, int] = {}

    def __len__(self):
        return len(self.nodes)

    def forward(self, kind: str, *inputs: Tensor, **attrs) -> Tensor:
        entry = PRIMITIVES.get(kind)
        if entry is None:
            raise ContractError(f"unknown primitive kind {kind!r}")
        out, ctx = entry[0](*[t.data for t in inputs], **attrs)
        result = Tensor.__new__(Tensor)
        result.data = out
        result.uid = next(_uids)
        result.name = None
        if self.record:
            result.requires_grad = any(t.requires_grad for t in inputs)
            self._producer[result.uid] = len(self.nodes)
            self.nodes.append(Node(kind, inputs, result, ctx))
        else:
            result.requires_grad = False
        return result

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` for every requires_grad leaf on this tape.

        Leaves are tensors that were inputs to some node but not produced by
        this tape. Frozen leaves never appear in the result.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.record:
            raise ContractError("this tape was created with record=False and cannot run backward")
        if loss.uid not in self._producer:
            raise ContractError("loss tensor was not produced by this tape")
        last = self._producer[loss.uid]
        grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes[: last + 1]:
            for t in node.inputs:
                if t.requires_grad and t.uid not in self._producer:
                    leaves[t.uid] = t
        for node in reversed(self.nodes[: last + 1]):
            g = grads.pop(node.output.uid, None)
            if g is None or not node.output.requires_grad:
                continue
            _, vjp = PRIMITIVES[node.kind]
            parts = vjp(g, node.ctx, *(t.data for t in node.inputs))
            for t, gi in zip(node.inputs, parts):
                if not t.requires_grad:
                    continue
                if t.uid in grads:
                    grads[t.uid] = grads[t.uid] + gi
                else:
                    grads[t.uid] = gi
        out = {}
        for uid, leaf in leaves.items():
            g = grads.get(uid)
            out[uid] = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
        return out

    # convenience wrappers

    def matmul(self, a, b):
        return self.forward("matmul", a, b)

    def add(self, a, b):
        return self.forward("add", a, b)

    def mul(self, a, b):
        return self.forward("elementwise_mul", a, b)

    def softmax(self, x):
        return self.forward("softmax_lastdim", x)

    def layernorm(self, x, gamma, beta, eps=1e-12):
        return self.forward("layernorm", x, gamma, beta, eps=eps)

    def gelu(self, x):
        return self.forward("gelu", x)

    def embedding(self, table, ids):
        return self.forward("embedding_lookup", table, ids=ids)

    def dropout(self, x, p: float, rng: np.random.Generator | None):
        """Inverted dropout; identity (and no tape entry) when ``rng`` is None or p == 0."""
        if rng is None or p == 0.0:
            return x
        return self.forward("dropout", x, mask=dropout_mask(rng, x.shape, p))

    def cross_entropy(self, logits, labels, ignore_index=-100):
        return self.forward("cross_entropy", logits, labels=labels, ignore_index=ignore_index)

    def transpose(self, x, axes=None):
        return self.forward("transpose", x, axes=axes)

    def scale(self, x, factor: float):
        return self.forward("scale", x, factor=float(factor))

    def reshape(self, x, shape):
        return self.forward("reshape", x, shape=shape)

    def sum(self, x):
        return self.forward("sum", x)

    def mean(self, x):
        return self.scale(self.sum(x), 1.0 / x.size)


def finite_diff_check(
    f: Callable[[Tape, Tensor], Tensor], x: Tensor, eps: float = 1e-3
) -> float:
    """Max relative error between backprop and central differences for ``f`` at ``x``.

    ``f(tape, x)`` must build a scalar loss on ``tape`` deterministically
    (no dropout). Uses the fourth-order five-point stencil, whose
    truncation error is O(eps^4); the wider step keeps round-off small
    where a true gradient is near zero. The error per coordinate is
    ``|a - cd| / max(|a|, |cd|, 1e-12)``.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    was = x.requires_grad
    x.requires_grad = True
    try:
        tape = Tape()
        loss = f(tape, x)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"f(x) is not finite: {loss.data}")
        analytic = tape.backward(loss)[x.uid].reshape(-1)
        flat = x.data.reshape(-1)
        cd = np.empty_like(analytic)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for k in (2, 1, -1, -2):
                flat[i] = orig + k * eps
                vals.append(float(f(Tape(record=False), x).data))
            flat[i] = orig
            if not np.isfinite(vals).all():
                raise NumericError(f"f is not finite near coordinate {i}")
            p2, p1, m1, m2 = vals
            # paired differences cancel exactly when x_i has no effect on f
            cd[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
    finally:
        x.requires_grad = was
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(cd)), 1e-12)
    return float(np.max(np.abs(analytic - cd) / denom)) if cd.size else 0.0
