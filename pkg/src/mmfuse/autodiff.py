"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and records the operations applied to
it; calling :meth:`Tensor.backward` on a scalar result accumulates gradients
into every upstream tensor created with ``requires_grad=True``. Only the
operations the model needs are implemented; all of them are verifiable
against central finite differences (see tests and ``training.grad_check``).

Shapes follow numpy broadcasting. Matrix products support arbitrary leading
batch axes, which is how per-frame token attention is batched.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = ["Tensor", "concat", "masked_attention_raw"]

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI_TWICE = 2.0 / float(np.sqrt(np.pi))  # d/dx erf(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"],
            backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # copy: the incoming buffer may be a view or reused by the caller
            self.grad = np.array(np.broadcast_to(grad, self.data.shape),
                                 dtype=self.data.dtype)
        else:
            self.grad += grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x))

    def __add__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            a = self

            def backward_s(g: np.ndarray) -> None:
                a._accum(g)

            return Tensor._op(a.data + other, (a,), backward_s)
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            a._accum(_unbroadcast(g, a.data.shape))
            b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._op(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            a._accum(-g)

        return Tensor._op(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            a = self

            def backward_s(g: np.ndarray) -> None:
                a._accum(g * other)

            return Tensor._op(a.data * other, (a,), backward_s)
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
            b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._op(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._op(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            a = self

            def backward_s(g: np.ndarray) -> None:
                a._accum(-g * other / (a.data * a.data))

            return Tensor._op(other / a.data, (a,), backward_s)
        return Tensor._lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        p = float(exponent)

        def backward(g: np.ndarray) -> None:
            a._accum(g * p * a.data ** (p - 1.0))

        return Tensor._op(a.data ** p, (a,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            # numpy promotes 1-D operands to row/column vectors; mirror that
            if a.data.ndim == 1 and b.data.ndim == 1:
                a._accum(g * b.data)
                b._accum(g * a.data)
            elif a.data.ndim == 1:
                a._accum(_unbroadcast((b.data * g[..., None, :]).sum(axis=-1),
                                      a.data.shape))
                b._accum(_unbroadcast(a.data[:, None] * g[..., None, :],
                                      b.data.shape))
            elif b.data.ndim == 1:
                a._accum(_unbroadcast(g[..., :, None] * b.data, a.data.shape))
                b._accum(_unbroadcast(a.data * g[..., :, None], b.data.shape))
            else:
                a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2),
                                      a.data.shape))
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g,
                                      b.data.shape))

        return Tensor._op(a.data @ b.data, (a, b), backward)

    # -- elementwise functions --------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def backward(g: np.ndarray) -> None:
            a._accum(g * out_data)

        return Tensor._op(out_data, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            a._accum(g / a.data)

        return Tensor._op(np.log(a.data), (a,), backward)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)

        def backward(g: np.ndarray) -> None:
            a._accum(g * 0.5 / out_data)

        return Tensor._op(out_data, (a,), backward)

    def erf(self) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            a._accum(g * _INV_SQRT_2PI_TWICE * np.exp(-a.data * a.data))

        return Tensor._op(_erf(a.data), (a,), backward)

    def gelu(self) -> "Tensor":
        """Gaussian-error linear unit, exact erf form."""
        return self * 0.5 * ((self / _SQRT2).erf() + 1.0)

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        a = self
        old_shape = a.data.shape

        def backward(g: np.ndarray) -> None:
            a._accum(g.reshape(old_shape))

        return Tensor._op(a.data.reshape(*shape), (a,), backward)

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            a._accum(np.swapaxes(g, ax1, ax2))

        return Tensor._op(np.swapaxes(a.data, ax1, ax2), (a,), backward)

    def __getitem__(self, index) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            if not a.requires_grad:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, index, g)

        return Tensor._op(a.data[index], (a,), backward)

    def take_rows(self, indices: np.ndarray) -> "Tensor":
        """Gather rows along axis 0 (embedding-table lookup)."""
        a = self
        idx = np.asarray(indices)

        def backward(g: np.ndarray) -> None:
            if not a.requires_grad:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

        return Tensor._op(a.data[idx], (a,), backward)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        in_shape = a.data.shape

        def backward(g: np.ndarray) -> None:
            if axis is None:
                a._accum(np.broadcast_to(g, in_shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, in_shape).copy())

        return Tensor._op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- graph traversal ------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None, free_graph: bool = True) -> None:
        """Accumulate gradients of ``self`` into every requires-grad ancestor.

        ``free_graph`` drops the recorded operations afterwards so the
        intermediate arrays can be reclaimed; parameter gradients survive.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that requires no grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free_graph:
                node._parents = ()
                node._backward = None


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; gradients split back at the seams."""
    parts = [Tensor._lift(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            part._accum(g[tuple(sl)])

    return Tensor._op(np.concatenate([p.data for p in parts], axis=axis),
                      tuple(parts), backward)


def masked_attention_raw(q: Tensor, k: Tensor, v: Tensor,
                         key_mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention with key masking, as one fused op.

    ``q``/``k``/``v`` have shape ``(..., T, d_h)`` and ``key_mask`` is a
    binary vector broadcastable to ``(..., T_k)``. Masked keys receive zero
    attention weight exactly (they are excluded before the softmax max, so
    their values cannot perturb unmasked rows even in float32). Query rows
    for which every key is masked produce a zero output row.

    Fusing keeps only the attention-weight matrix alive for the backward
    pass instead of the three softmax intermediates.
    """
    scale = 1.0 / float(np.sqrt(q.data.shape[-1]))
    mask = np.asarray(key_mask, dtype=bool)

    # the score matrix is the dominant allocation; mutate it in place
    scores = q.data @ np.swapaxes(k.data, -1, -2)
    scores *= scale
    if mask.all():
        row_max = scores.max(axis=-1, keepdims=True)
        np.subtract(scores, row_max, out=scores)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)  # >= 1: max term is e^0
    else:
        scores[..., ~mask] = -np.inf
        row_max = scores.max(axis=-1, keepdims=True)
        np.copyto(row_max, 0.0, where=~np.isfinite(row_max))
        np.subtract(scores, row_max, out=scores)
        np.exp(scores, out=scores)
        denom = scores.sum(axis=-1, keepdims=True)
        np.copyto(denom, 1.0, where=denom == 0.0)  # all-masked query: zero row
        scores /= denom
    attn = scores
    out_data = attn @ v.data

    def backward(g: np.ndarray) -> None:
        v._accum(_unbroadcast(np.swapaxes(attn, -1, -2) @ g, v.data.shape))
        d_attn = g @ np.swapaxes(v.data, -1, -2)
        row_dot = np.einsum("...ij,...ij->...i", d_attn, attn)[..., None]
        np.subtract(d_attn, row_dot, out=d_attn)
        np.multiply(d_attn, attn, out=d_attn)
        d_scores = d_attn
        q._accum(_unbroadcast((d_scores @ k.data) * scale, q.data.shape))
        k._accum(_unbroadcast((np.swapaxes(d_scores, -1, -2) @ q.data) * scale,
                              k.data.shape))

    return Tensor._op(out_data, (q, k, v), backward)
