"""Dense float32 tensors with reverse-mode automatic differentiation.

The op inventory is exactly what a plain ViT needs: matmul, layer norm,
softmax over the last axis, exact-erf GELU, elementwise arithmetic,
reductions, reshape/transpose/slice/concat. There is no general
broadcasting; the only shape mixing allowed is

  * python scalars against any tensor, and
  * a trailing-suffix operand (e.g. a [C] bias added to a [B,T,C] grid).

Gradients are recorded on an explicit per-forward-pass :class:`Tape`.
Ops record an entry only while a tape is active and at least one input
requires a gradient, so inference (and the frozen encoder inside a
training step) runs as plain numpy with zero bookkeeping.

Training math is float32. A float64 shadow mode exists purely for
gradient checking: build the inputs with dtype=float64 and every op
stays in float64, which is what :func:`grad_check` does internally.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import erf

REAL = np.float32
_ALLOWED = (np.float32, np.float64)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ids = itertools.count()

# The tape ops record onto, or None outside a `with Tape()` block.
_ACTIVE: "Tape | None" = None


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GradError(RuntimeError):
    """Raised on backward-pass contract violations (non-scalar seed etc.)."""


class Tensor:
    """A dense n-d array of 32-bit (or 64-bit in check mode) reals.

    ``requires_grad`` marks leaves the optimizer owns; tensors produced
    by ops get it set automatically while a tape is recording. ``grad``
    is populated (overwritten, not accumulated) by ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in _ALLOWED:
            arr = arr.astype(REAL)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise GradError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class TapeEntry:
    __slots__ = ("out_id", "in_ids", "inputs", "backward")

    def __init__(self, out_id, in_ids, inputs, backward):
        self.out_id = out_id
        self.in_ids = in_ids
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of one forward pass; topological by construction.

    Usage::

        with Tape() as tape:
            loss = ...          # ops record here
        tape.backward(loss)     # leaves now hold .grad

    ``backward`` may be called again on the same tape; it overwrites
    leaf gradients with bitwise-identical values (the traversal order
    is fixed by the recording order).
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.entries.append(
            TapeEntry(out._id, tuple(t._id for t in inputs), inputs, backward)
        )

    def backward(self, seed: Tensor) -> None:
        if seed.data.size != 1:
            raise GradError(f"backward seed must be scalar, got shape {seed.shape}")
        grads: dict[int, np.ndarray] = {seed._id: np.ones_like(seed.data)}
        produced = {e.out_id for e in self.entries}
        for entry in reversed(self.entries):
            dout = grads.get(entry.out_id)
            if dout is None:
                continue
            for tin, din in zip(entry.inputs, entry.backward(dout)):
                if din is None:
                    continue
                acc = grads.get(tin._id)
                grads[tin._id] = din if acc is None else acc + din
        for entry in self.entries:
            for tin in entry.inputs:
                if tin.requires_grad and tin._id not in produced:
                    g = grads.get(tin._id)
                    if g is not None:
                        tin.grad = g.astype(tin.data.dtype, copy=False)
        if seed.requires_grad and seed._id not in produced:
            seed.grad = grads[seed._id]


def _record(out_data, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _ACTIVE
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(out, inputs, backward)
    return out


def _check_dtypes(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes in one op: {sorted(d.name for d in dtypes)}")


def _suffix_axes(full: tuple[int, ...], suffix: tuple[int, ...]) -> tuple[int, ...]:
    """Leading axes to sum a broadcast-suffix gradient over."""
    return tuple(range(len(full) - len(suffix)))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary(a: Tensor, b, fwd, bwd_a, bwd_b, bwd_b_scalar=None):
    if not isinstance(b, Tensor):
        s = float(b)
        out = fwd(a.data, s)
        return _record(out, (a,), lambda dout, a=a, s=s: (bwd_a(dout, a.data, s, None),))
    _check_dtypes(a, b)
    if a.shape == b.shape:
        out = fwd(a.data, b.data)
        return _record(
            out,
            (a, b),
            lambda dout, a=a, b=b: (
                bwd_a(dout, a.data, None, b.data),
                bwd_b(dout, a.data, b.data),
            ),
        )
    if a.shape[len(a.shape) - len(b.shape):] == b.shape and len(b.shape) < len(a.shape):
        axes = _suffix_axes(a.shape, b.shape)
        out = fwd(a.data, b.data)
        return _record(
            out,
            (a, b),
            lambda dout, a=a, b=b, axes=axes: (
                bwd_a(dout, a.data, None, b.data),
                bwd_b(dout, a.data, b.data).sum(axis=axes),
            ),
        )
    raise ShapeError(f"operand shapes {a.shape} and {b.shape} do not align")


def add(a: Tensor, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x + y,
        lambda dout, x, s, y: dout,
        lambda dout, x, y: dout,
    )


def sub(a: Tensor, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x - y,
        lambda dout, x, s, y: dout,
        lambda dout, x, y: -dout,
    )


def rsub(a: Tensor, scalar) -> Tensor:
    """scalar - a (used for 1 - cosine)."""
    s = float(scalar)
    out = s - a.data
    return _record(out, (a,), lambda dout: (-dout,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _record(a.data * s, (a,), lambda dout, s=s: (dout * s,))
    return _binary(
        a, b,
        lambda x, y: x * y,
        lambda dout, x, s, y: dout * y,
        lambda dout, x, y: dout * x,
    )


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _record(a.data / s, (a,), lambda dout, s=s: (dout / s,))
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"div needs equal shapes, got {a.shape} and {b.shape}")
    out = a.data / b.data
    return _record(
        out,
        (a, b),
        lambda dout, a=a, b=b: (dout / b.data, -dout * a.data / (b.data * b.data)),
    )


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda dout, out=out: (dout * (0.5 / out),))


def absval(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    return _record(out, (x,), lambda dout, x=x: (dout * np.sign(x.data),))


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Accepted operand forms:
      * equal leading (batch) shapes: [..,m,k] @ [..,k,n]
      * a stacked left operand against a plain 2-d weight: [..,m,k] @ [k,n]

    Backward follows dA = dC.B^T, dB = A^T.dC, with the weight case
    summing dB over the stacked axes.
    """
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    if b.ndim == 2:
        out = np.matmul(a.data, b.data)

        def backward(dout, a=a, b=b):
            da = np.matmul(dout, b.data.T)
            k = a.shape[-1]
            n = b.shape[-1]
            db = np.matmul(
                a.data.reshape(-1, k).T, dout.reshape(-1, n)
            )
            return da, db

        return _record(out, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading extents differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(dout, a=a, b=b):
        da = np.matmul(dout, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), dout)
        return da, db

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(dout, x=x, axis=axis, keepdims=keepdims):
        if axis is None:
            return (np.broadcast_to(dout, x.shape).copy(),)
        d = dout if keepdims else np.expand_dims(dout, axis)
        return (np.broadcast_to(d, x.shape).copy(),)

    return _record(out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(dout, x=x, axis=axis, keepdims=keepdims, n=n):
        if axis is None:
            return (np.broadcast_to(dout / n, x.shape).copy(),)
        d = dout if keepdims else np.expand_dims(dout, axis)
        return (np.broadcast_to(d / n, x.shape).copy(),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda dout, x=x: (dout.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for ndim {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record(out, (x,), lambda dout, inv=inv: (dout.transpose(inv),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(
            f"slice [{start}:{stop}] out of range for axis {axis} of shape {x.shape}"
        )
    idx = tuple(
        slice(start, stop) if d == axis else slice(None) for d in range(x.ndim)
    )
    out = np.ascontiguousarray(x.data[idx])

    def backward(dout, x=x, idx=idx):
        dx = np.zeros_like(x.data)
        dx[idx] = dout
        return (dx,)

    return _record(out, (x,), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    _check_dtypes(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(dout, bounds=bounds, axis=axis, n=len(tensors)):
        ndim = dout.ndim
        outs = []
        for i in range(n):
            idx = tuple(
                slice(bounds[i], bounds[i + 1]) if d == axis else slice(None)
                for d in range(ndim)
            )
            outs.append(dout[idx])
        return tuple(outs)

    return _record(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# neural ops


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, not tanh)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi_cdf

    def backward(dout, x=x, phi_cdf=phi_cdf):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (dout * (phi_cdf + x.data * pdf),)

    return _record(out.astype(x.data.dtype, copy=False), (x,), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(dout, out=out):
        inner = (dout * out).sum(axis=-1, keepdims=True)
        return ((dout - inner) * out,)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-last-axis standardization, scaled by gamma and shifted by beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {d}"
        )
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    _check_dtypes(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(dout, gamma=gamma, xhat=xhat, inv=inv):
        lead = tuple(range(dout.ndim - 1))
        dgamma = (dout * xhat).sum(axis=lead)
        dbeta = dout.sum(axis=lead)
        dxhat = dout * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _record(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# checking utilities


def assert_finite(x: Tensor, label: str = "tensor") -> None:
    if not np.isfinite(x.data).all():
        bad = int(np.size(x.data) - np.isfinite(x.data).sum())
        raise GradError(f"{label} contains {bad} non-finite values")


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient of f and central differences.

    f must map a Tensor to a scalar Tensor. The check runs entirely in
    float64; pass x at any dtype and it is widened. Relative error uses
    |analytic - fd| / (|fd| + 1e-12) per element, maxed.
    """
    if h <= 0:
        raise GradError("grad_check step h must be positive")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x64)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise GradError("grad_check target must return a scalar Tensor")
    tape.backward(y)
    analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)

    flat = x64.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(x64.data)).item()
        flat[i] = orig - h
        down = f(Tensor(x64.data)).item()
        flat[i] = orig
        fd[i] = (up - down) / (2.0 * h)
    fd = fd.reshape(x64.data.shape)
    rel = np.abs(analytic - fd) / (np.abs(fd) + 1e-12)
    return float(rel.max())
