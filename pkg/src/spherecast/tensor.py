"""Dense tensor substrate with reverse-mode adjoints.

Values are immutable numpy buffers (float32 or float64, row-major). Every
differentiable operation records the parent tensors and a vjp closure, so a
scalar output can be pulled back to cotangents on any subset of leaves.
Contractions always accumulate in 64-bit, even when the stored dtype is
float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Immutable dense array, optionally carrying autodiff history."""

    __slots__ = ("data", "parents", "vjp")

    def __init__(self, data, parents=(), vjp=None):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        arr = arr.view()
        arr.setflags(write=False)
        self.data = arr
        self.parents = tuple(parents)
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # Operator sugar; every overload routes through the module-level ops so
    # the tape sees a single code path.
    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x) if dtype is None else np.asarray(x, dtype=dtype)
    return Tensor(arr)


def constant(x, dtype=None) -> Tensor:
    """Wrap an array as a leaf with no history."""
    return as_tensor(x, dtype)


# ---------------------------------------------------------------------------
# 64-bit accumulation helpers


def _acc_einsum(formula: str, arrays: Sequence[np.ndarray]) -> np.ndarray:
    """einsum with float64 accumulators; result keeps the promoted dtype."""
    out_dtype = np.result_type(*arrays)
    if out_dtype == np.float64:
        return np.einsum(formula, *arrays, optimize=True)
    ops64 = [a.astype(np.float64) for a in arrays]
    return np.einsum(formula, *ops64, optimize=True).astype(out_dtype)


def _acc_sum(a: np.ndarray, axis, keepdims=False) -> np.ndarray:
    res = a.sum(axis=axis, dtype=np.float64, keepdims=keepdims)
    return np.asarray(res, dtype=a.dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a cotangent back to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return np.ascontiguousarray(g)


# ---------------------------------------------------------------------------
# Primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g, needed):
        return (
            _unbroadcast(g, a.shape) if needed[0] else None,
            _unbroadcast(g, b.shape) if needed[1] else None,
        )

    return Tensor(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g, needed):
        return (
            _unbroadcast(g, a.shape) if needed[0] else None,
            _unbroadcast(-g, b.shape) if needed[1] else None,
        )

    return Tensor(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g, needed):
        return (
            _unbroadcast(g * b.data, a.shape) if needed[0] else None,
            _unbroadcast(g * a.data, b.shape) if needed[1] else None,
        )

    return Tensor(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.dtype.type(c)

    def vjp(g, needed):
        return (g * a.dtype.type(c),) if needed[0] else (None,)

    return Tensor(out, (a,), vjp)


def absval(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def vjp(g, needed):
        return (g * np.sign(a.data),) if needed[0] else (None,)

    return Tensor(out, (a,), vjp)


def sin(a: Tensor) -> Tensor:
    out = np.sin(a.data)

    def vjp(g, needed):
        return (g * np.cos(a.data),) if needed[0] else (None,)

    return Tensor(out, (a,), vjp)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def vjp(g, needed):
        return (g * (2.0 * a.data),) if needed[0] else (None,)

    return Tensor(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, 0.5*x*(1+erf(x/sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(a.dtype)

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf).astype(a.dtype),)

    return Tensor(out, (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data >= 0
    out = np.where(pos, a.data, a.dtype.type(slope) * a.data)

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        return (np.where(pos, g, a.dtype.type(slope) * g),)

    return Tensor(out, (a,), vjp)


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, dtype=np.float64, keepdims=True).astype(a.dtype)

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        inner = (g * s).sum(axis=-1, dtype=np.float64, keepdims=True).astype(a.dtype)
        return (s * (g - inner),)

    return Tensor(s, (a,), vjp)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learnable affine."""
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(a.dtype)
    out = xhat * gain.data + bias.data

    def vjp(g, needed):
        ga = None
        if needed[0]:
            d = a.shape[-1]
            gx = (g * gain.data).astype(np.float64)
            xh = xhat.astype(np.float64)
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xh).mean(axis=-1, keepdims=True)
            ga = (inv * (gx - m1 - xh * m2)).astype(a.dtype)
        gg = _unbroadcast(g * xhat, gain.shape) if needed[1] else None
        gb = _unbroadcast(g, bias.shape) if needed[2] else None
        return (ga, gg, gb)

    return Tensor(out, (a, gain, bias), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(g, needed):
        return (np.ascontiguousarray(g.reshape(a.shape)),) if needed[0] else (None,)

    return Tensor(out, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(g, needed):
        return (np.ascontiguousarray(g.transpose(inv)),) if needed[0] else (None,)

    return Tensor(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g, needed):
        grads = []
        for i in range(len(datas)):
            if needed[i]:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offsets[i], offsets[i + 1])
                grads.append(np.ascontiguousarray(g[tuple(idx)]))
            else:
                grads.append(None)
        return tuple(grads)

    return Tensor(out, tuple(tensors), vjp)


def pad_end(a: Tensor, pad_after) -> Tensor:
    """Zero-pad at the high-index end of each axis; pad_after is per-axis."""
    widths = [(0, int(p)) for p in pad_after]
    out = np.pad(a.data, widths)

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        idx = tuple(slice(0, s) for s in a.shape)
        return (np.ascontiguousarray(g[idx]),)

    return Tensor(out, (a,), vjp)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _acc_sum(a.data, axis, keepdims)

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        gg = g
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            for ax_i in sorted(a_mod(ax, a.ndim)):
                gg = np.expand_dims(gg, ax_i)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype),)

    return Tensor(out, (a,), vjp)


def a_mod(axes, ndim):
    return tuple(ax % ndim for ax in axes)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax_i in ax:
            n *= a.shape[ax_i]
    return scale(reduce_sum(a, axis, keepdims), 1.0 / n)


def _parse_formula(formula: str):
    lhs, rhs = formula.split("->")
    subs = lhs.split(",")
    return subs, rhs


def einsum(formula: str, *xs: Tensor) -> Tensor:
    """Einstein summation with an adjoint built by the operand/output swap.

    Requires that every index of each operand also appears in the output or
    another operand (no index may be summed over exclusively within one
    operand), which holds for all contractions used in this package.
    """
    subs, out_sub = _parse_formula(formula)
    if len(subs) != len(xs):
        raise ValueError(f"formula {formula!r} expects {len(subs)} operands, got {len(xs)}")
    for k, sk in enumerate(subs):
        visible = set(out_sub).union(*(set(s) for j, s in enumerate(subs) if j != k))
        if not set(sk) <= visible:
            raise ValueError(f"operand {k} of {formula!r} has an exclusive summed index")
    datas = [x.data for x in xs]
    out = _acc_einsum(formula, datas)

    def vjp(g, needed):
        grads = []
        for k in range(len(xs)):
            if not needed[k]:
                grads.append(None)
                continue
            others = [datas[j] for j in range(len(xs)) if j != k]
            other_subs = [subs[j] for j in range(len(xs)) if j != k]
            back = ",".join([out_sub] + other_subs) + "->" + subs[k]
            grads.append(_acc_einsum(back, [g] + others))
        return tuple(grads)

    return Tensor(out, tuple(xs), vjp)


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def contract(a: Tensor, b: Tensor, axes) -> Tensor:
    """Generalized tensor contraction over paired axes.

    ``axes`` is ``(axes_a, axes_b)``; the result carries the uncontracted
    axes of ``a`` followed by those of ``b``, in order.
    """
    axes_a = [ax % a.ndim for ax in axes[0]]
    axes_b = [ax % b.ndim for ax in axes[1]]
    if len(axes_a) != len(axes_b):
        raise ValueError("axes lists must pair up one-to-one")
    for ax_a, ax_b in zip(axes_a, axes_b):
        if a.shape[ax_a] != b.shape[ax_b]:
            raise ValueError(
                f"cannot contract shapes {a.shape} and {b.shape}: "
                f"axis {ax_a} (size {a.shape[ax_a]}) != axis {ax_b} (size {b.shape[ax_b]})"
            )
    if a.ndim + b.ndim > len(_LETTERS):
        raise ValueError("too many axes for contract")
    sub_a = list(_LETTERS[: a.ndim])
    sub_b = list(_LETTERS[a.ndim : a.ndim + b.ndim])
    for ax_a, ax_b in zip(axes_a, axes_b):
        sub_b[ax_b] = sub_a[ax_a]
    out_sub = [s for i, s in enumerate(sub_a) if i not in axes_a]
    out_sub += [s for i, s in enumerate(sub_b) if i not in axes_b]
    formula = f"{''.join(sub_a)},{''.join(sub_b)}->{''.join(out_sub)}"
    return einsum(formula, a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contraction of the last axis of ``a`` with the first of ``b``."""
    return contract(a, b, ([-1], [0]))


# ---------------------------------------------------------------------------
# Backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(out: Tensor, wrt: Sequence[Tensor], cotangent=None) -> list[np.ndarray]:
    """Cotangents of ``out`` with respect to each tensor in ``wrt``.

    ``cotangent`` defaults to ones (a scalar loss gets seed 1.0). Tensors in
    ``wrt`` that the output does not depend on get zero gradients.
    """
    order = _toposort(out)
    wrt_ids = {id(t) for t in wrt}
    # Mark every node that can reach a wrt leaf, to skip useless vjps.
    needed_ids: set[int] = set(wrt_ids)
    for node in order:  # order is children-after-parents
        if any(id(p) in needed_ids for p in node.parents):
            needed_ids.add(id(node))

    if cotangent is None:
        cotangent = np.ones(out.shape, dtype=out.dtype)
    cot: dict[int, np.ndarray] = {id(out): np.asarray(cotangent, dtype=out.dtype)}

    for node in reversed(order):
        g = cot.get(id(node))
        if g is None or node.vjp is None or not node.parents:
            continue
        needed = tuple(id(p) in needed_ids for p in node.parents)
        if not any(needed):
            continue
        parent_grads = node.vjp(g, needed)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            pid = id(p)
            if pid in cot:
                cot[pid] = cot[pid] + pg
            else:
                cot[pid] = pg
        if id(node) not in wrt_ids:
            del cot[id(node)]

    results = []
    for t in wrt:
        g = cot.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        results.append(np.asarray(g, dtype=t.dtype))
    return results


# ---------------------------------------------------------------------------
# Adjoint contract and the finite-difference check


@dataclass
class AdjointFn:
    """A forward map on tensors paired with its adjoint (vector-Jacobian)."""

    name: str
    forward: Callable[[Sequence[Tensor]], list[Tensor]]
    adjoint: Callable[[Sequence[Tensor], Sequence[np.ndarray]], list[np.ndarray]]


def tape_op(name: str, fn: Callable[..., Tensor | Sequence[Tensor]]) -> AdjointFn:
    """Build an AdjointFn from a tape-traced function of Tensor arguments."""

    def forward(inputs: Sequence[Tensor]) -> list[Tensor]:
        outs = fn(*inputs)
        if isinstance(outs, Tensor):
            outs = [outs]
        return list(outs)

    def adjoint(inputs: Sequence[Tensor], cotangents: Sequence[np.ndarray]) -> list[np.ndarray]:
        outs = forward(inputs)
        if len(outs) != len(cotangents):
            raise ValueError("one cotangent per output required")
        total: list[np.ndarray] | None = None
        for o, c in zip(outs, cotangents):
            gs = grad(o, inputs, cotangent=c)
            total = gs if total is None else [t + g for t, g in zip(total, gs)]
        assert total is not None
        return total

    return AdjointFn(name, forward, adjoint)


class NonDeterministicOpError(RuntimeError):
    pass


def gradcheck(op: AdjointFn, inputs: Sequence[Tensor], seed: int, h: float = 1e-5) -> float:
    """Max relative error between the adjoint and central finite differences.

    A random unit-scaled projection turns the outputs into a scalar; its
    adjoint gradient is compared elementwise against (f(x+h)-f(x-h))/(2h),
    with the relative-error denominator floored at 1e-8. Inputs must be
    64-bit and the op deterministic (two forward calls must agree bitwise).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError(f"gradcheck requires float64 inputs (op {op.name})")
    outs1 = op.forward(inputs)
    outs2 = op.forward(inputs)
    for o1, o2 in zip(outs1, outs2):
        if not np.array_equal(o1.data, o2.data):
            raise NonDeterministicOpError(f"op {op.name} produced differing forward results")

    rng = np.random.default_rng(seed)
    proj = [rng.standard_normal(o.shape) / math.sqrt(max(o.size, 1)) for o in outs1]

    def scalar(ts: Sequence[Tensor]) -> float:
        outs = op.forward(ts)
        return float(sum(np.vdot(p, o.data) for p, o in zip(proj, outs)))

    adj = op.adjoint(inputs, proj)

    max_rel = 0.0
    base = [t.data.copy() for t in inputs]
    for i, x0 in enumerate(base):
        flat = x0.reshape(-1)
        g_fd = np.empty_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = scalar([Tensor(b) for b in base])
            flat[j] = orig - h
            f_minus = scalar([Tensor(b) for b in base])
            flat[j] = orig
            g_fd[j] = (f_plus - f_minus) / (2.0 * h)
        g_ad = np.asarray(adj[i]).reshape(-1)
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
        rel = np.abs(g_ad - g_fd) / denom
        max_rel = max(max_rel, float(rel.max()) if rel.size else 0.0)
    return max_rel
