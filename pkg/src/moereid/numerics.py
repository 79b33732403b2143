"""Dense float64 tensors with reverse-mode differentiation.

Every learnable operation in the package is expressed through the small op
set below. Values are stored as contiguous row-major float64 ndarrays;
gradients accumulate into ``.grad`` (a plain ndarray) during ``backward()``.
Ops are pure: identical inputs yield bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _contiguous(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d inputs to shape (1,).
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr) if arr.ndim else arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array node in the reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _contiguous(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ----------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._result(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor(other) * self ** -1.0

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise ShapeError("only scalar exponents are supported")
        a = self

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

        return Tensor._result(a.data ** float(exponent), (a,), backward)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._result(a.data @ b.data, (a, b), backward)

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        value = np.exp(a.data)

        def backward(g):
            a._accumulate(g * value)

        return Tensor._result(value, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._result(np.log(a.data), (a,), backward)

    def sqrt(self) -> "Tensor":
        a = self
        value = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g * 0.5 / value)

        return Tensor._result(value, (a,), backward)

    def relu(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g * (a.data > 0.0))

        return Tensor._result(np.maximum(a.data, 0.0), (a,), backward)

    def gelu(self) -> "Tensor":
        """Exact Gaussian error linear unit, x * Phi(x)."""
        a = self
        cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

        def backward(g):
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
            a._accumulate(g * (cdf + a.data * pdf))

        return Tensor._result(a.data * cdf, (a,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        value = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
                return
            gx = g
            if not keepdims:
                gx = np.expand_dims(gx, axis)
            a._accumulate(np.broadcast_to(gx, a.shape).copy())

        return Tensor._result(np.asarray(value), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[ax] for ax in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def backward(g):
            a._accumulate(g.reshape(old))

        return Tensor._result(np.ascontiguousarray(a.data.reshape(shape)), (a,), backward)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        a = self
        inverse = np.argsort(axes)

        def backward(g):
            a._accumulate(np.ascontiguousarray(g.transpose(inverse)))

        return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError("T is defined for 2-D tensors only")
        return self.transpose((1, 0))

    def __getitem__(self, key) -> "Tensor":
        a = self

        def backward(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[key] += g

        return Tensor._result(_contiguous(a.data[key]), (a,), backward)

    # -- autodiff driver -----------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass seeded with ones at this (scalar) tensor."""
        if self.size != 1:
            raise ShapeError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(index)]))

    value = np.concatenate([t.data for t in parts], axis=axis)
    return Tensor._result(value, parts, backward)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Exp-normalize along ``axis``; slices sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        x._accumulate(value * (g - inner))

    return Tensor._result(value, (x,), backward)


@dataclass
class MhsaParams:
    """Projection weights for one multi-head attention block."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo,
                self.bq, self.bk, self.bv, self.bo]


def mhsa_forward(query: Tensor, key: Tensor, value: Tensor, heads: int,
                 params: MhsaParams) -> Tensor:
    """Scaled dot-product attention over unordered key/value tokens.

    ``query`` is [Nq x dm], ``key`` and ``value`` are [Nk x dm]; output is
    [Nq x dm]. Cross-attention falls out of passing distinct query tokens.
    """
    if query.ndim != 2 or key.ndim != 2 or value.ndim != 2:
        raise ShapeError("mhsa_forward expects 2-D token matrices")
    dm = query.shape[1]
    if key.shape[1] != dm or value.shape[1] != dm:
        raise ShapeError("query/key/value feature dims differ")
    if key.shape[0] != value.shape[0]:
        raise ShapeError("key and value token counts differ")
    if dm % heads != 0:
        raise ConfigError(f"model dim {dm} not divisible by {heads} heads")
    head_dim = dm // heads
    scale = 1.0 / math.sqrt(head_dim)

    q = query @ params.wq + params.bq
    k = key @ params.wk + params.bk
    v = value @ params.wv + params.bv

    outputs = []
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        attn = softmax_axis((qh @ kh.T) * scale, axis=1)
        outputs.append(attn @ vh)
    mixed = outputs[0] if heads == 1 else concat(outputs, axis=1)
    return mixed @ params.wo + params.bo


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                 fan_in: int) -> Tensor:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape: tuple[int, ...], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst_coord: tuple[int, ...]

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel. error {self.max_rel_error:.3e} "
                f"(tol {self.tol:.1e}) at coord {self.worst_coord}")


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor,
               eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` must map a tensor shaped like ``point`` to a scalar tensor. The
    relative error at each coordinate uses a floor of 1e-6 in the denominator
    so near-zero gradients are compared absolutely.
    """
    x = Tensor(point.data.copy(), requires_grad=True)
    out = fn(x)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is non-finite at the check point")
    out.backward()
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).copy()

    flat = point.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + eps
        hi = fn(Tensor(probe.reshape(point.shape))).data
        probe[i] = flat[i] - eps
        lo = fn(Tensor(probe.reshape(point.shape))).data
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            coord = np.unravel_index(i, point.shape)
            raise NumericError(f"non-finite function value near coordinate {coord}")
        fd[i] = (float(hi) - float(lo)) / (2.0 * eps)

    fd = fd.reshape(point.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    rel = np.abs(analytic - fd) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, tol, max_rel <= tol, tuple(int(c) for c in worst))
