"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside of a tape every op is a plain
numpy computation, which is how frozen (teacher) forwards are run.

    >>> w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, w))
    >>> tape.backward(loss)
    >>> w.grad
    array([ 2., -4.])
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_TAPES: list["Tape"] = []


class Tensor:
    """An n-d array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ``backward`` replays the log in reverse and
    accumulates into ``.grad`` of every input that requires a gradient.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _push(self, rec: _Record) -> None:
        self.records.append(rec)
        self._produced.add(id(rec.output))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn,
           op: str = "op") -> Tensor:
    """Wrap ``out_data`` as a tensor and log ``backward_fn`` on the active tape.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    input.  This is the hook quantizers use to install custom gradients.
    """
    _check_finite(out_data, op)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._push(_Record(tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    if loss.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise StateError("loss was not produced on this tape; run the forward pass first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        g_ins = rec.backward(g_out)
        for inp, g in zip(rec.inputs, g_ins):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise DimensionError(f"gradient shape {g.shape} != input shape {inp.shape}")
            _check_finite(g, "backward")
            key = id(inp)
            if key in tape._produced:
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
            else:
                inp.grad = g.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + g


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_channel(x: Tensor, bias: Tensor) -> Tensor:
    """x[N,C,H,W] + bias[C], the only broadcast the core supports."""
    if x.data.ndim != 4 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_channel: {x.shape} + {bias.shape}")
    out = x.data + bias.data[None, :, None, None]
    return record(out, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))), "add_channel")


def abs_(x: Tensor) -> Tensor:
    return record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x: Tensor) -> Tensor:
    return record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                  lambda g: (g * mask,), "relu")


# ----------------------------------------------------------------- reductions

def sum_(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record(out, (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return record(np.asarray(x.data.mean()), (x,),
                  lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor; subgradient 0 at the origin."""
    if x.data.ndim != 2:
        raise DimensionError("row_norm expects a 2-D tensor")
    n = np.sqrt((x.data * x.data).sum(axis=1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return ((g / safe)[:, None] * x.data * (n > 0)[:, None],)

    return record(n, (x,), bw, "row_norm")


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) row-wise."""
    if x.data.ndim != 2:
        raise DimensionError("normalize_rows expects a 2-D tensor")
    n = np.sqrt((x.data * x.data).sum(axis=1))
    guarded = n > eps
    d = np.where(guarded, n, eps)
    y = x.data / d[:, None]

    def bw(g):
        # d/dx (x/||x||) = (g - y <g, y>) / ||x||; below eps the divisor is constant
        proj = (g * y).sum(axis=1) * guarded
        return ((g - y * proj[:, None]) / d[:, None],)

    return record(y, (x,), bw, "normalize_rows")


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[N, Hp, Wp, C] (NHWC, already padded) -> [N*Ho*Wo, kh*kw*C] in float64."""
    n, hp, wp, c = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _pad_nhwc(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """NCHW -> zero-padded NHWC."""
    n, c, h, w = x.shape
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    out[:, ph:ph + h, pw:pw + w, :] = x.transpose(0, 2, 3, 1)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, stride 1, NCHW.

    Products are accumulated in float64 whatever the storage dtype.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d: kernel dims must be odd")
    if padding < 0:
        raise DimensionError("conv2d: padding must be >= 0")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    _check_finite(x.data, "conv2d input")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError("conv2d: input smaller than kernel")

    cols = _im2col(_pad_nhwc(x.data, padding, padding), kh, kw)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(co, -1).astype(np.float64)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    with np.errstate(over="ignore"):  # overflow is reported by record()
        out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2), dtype=x.dtype)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co).astype(np.float64)
        gw = gx = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
            gw = np.ascontiguousarray(gw, dtype=weight.dtype)
        if x.requires_grad:
            # full correlation of g with the flipped kernel, channels swapped
            gcols = _im2col(_pad_nhwc(g, kh - 1, kw - 1), kh, kw)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
            gxp = (gcols @ wflip.T.astype(np.float64)).reshape(n, h + 2 * padding, w + 2 * padding, c)
            gxp = gxp[:, padding:padding + h, padding:padding + w, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2), dtype=x.dtype)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.dtype) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(out, inputs, bw, "conv2d")


# ------------------------------------------------------------------ rearrange

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[N, C*r*r, H, W] -> [N, C, H*r, W*r]."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise DimensionError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)
    return record(np.ascontiguousarray(out), (x,), lambda g: (pixel_unshuffle_array(g, r),),
                  "pixel_shuffle")


def pixel_unshuffle_array(y: np.ndarray, r: int) -> np.ndarray:
    """Inverse of the pixel_shuffle rearrangement on a raw array."""
    n, c, hr, wr = y.shape
    h, w = hr // r, wr // r
    return np.ascontiguousarray(
        y.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w))
