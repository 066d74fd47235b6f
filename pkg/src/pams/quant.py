"""Symmetric fake quantization with a learnable activation bound.

Every quantizer here is a quantize/dequantize round trip in floating point.
Gradients follow the straight-through estimator through the rounding and
the exact derivative of the clamp, so values outside the clipping range get
no input gradient but do push on the bound.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError, ParameterError
from .tensor import Tensor

WEIGHT = "weight"
PAMS = "activation_pams"
FIXED_MAX = "activation_fixed_max"
PACT = "activation_pact"
MODES = (WEIGHT, PAMS, FIXED_MAX, PACT)

DEFAULT_EMA_BETA = 0.9997
ALPHA_FLOOR = 1e-6

# number of quantizer invocations, for instrumentation in tests
call_count = 0
_surrogate = False


@contextlib.contextmanager
def ste_surrogate():
    """Replace rounding by the identity inside the block.

    The resulting network is the piecewise-smooth function whose exact
    gradient is the straight-through gradient; finite differences of it are
    therefore a valid oracle for the custom backward rules.
    """
    global _surrogate
    prev, _surrogate = _surrogate, True
    try:
        yield
    finally:
        _surrogate = prev


@dataclass
class QuantizerState:
    n_bits: int
    mode: str = PAMS
    alpha: Tensor = field(default_factory=lambda: Tensor(np.array(1.0)))
    ema_beta: float = DEFAULT_EMA_BETA
    step_count: int = 0

    def __post_init__(self):
        if not 2 <= self.n_bits <= 16:
            raise ParameterError(f"n_bits must be in [2, 16], got {self.n_bits}")
        if self.mode not in MODES:
            raise ParameterError(f"unknown quantizer mode {self.mode!r}")
        if not isinstance(self.alpha, Tensor):
            self.alpha = Tensor(np.asarray(self.alpha, dtype=np.float64))
        # only the PAMS and PACT bounds are trained by backprop
        self.alpha.requires_grad = self.mode in (PAMS, PACT)

    @property
    def alpha_value(self) -> float:
        return float(self.alpha.data)

    @alpha_value.setter
    def alpha_value(self, v: float) -> None:
        self.alpha.data = np.asarray(v, dtype=self.alpha.dtype)

    @property
    def alpha_grad(self) -> float:
        return 0.0 if self.alpha.grad is None else float(self.alpha.grad)

    def project(self) -> None:
        """Keep alpha strictly positive after an optimizer step."""
        if self.alpha_value < ALPHA_FLOOR:
            self.alpha_value = ALPHA_FLOOR


@dataclass
class QuantResult:
    values: Tensor
    saturation_low_mask: np.ndarray
    saturation_high_mask: np.ndarray


def quant_scale(n: int, a: float) -> float:
    """Step size of the n-bit symmetric grid on [-a, a]."""
    if n < 2:
        raise ParameterError(f"n must be >= 2, got {n}")
    if not a > 0:
        raise ParameterError(f"a must be positive, got {a}")
    return a / (2 ** (n - 1) - 1)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def symmetric_codes(x: np.ndarray, n: int, a) -> np.ndarray:
    """Integer codes in [-(2^(n-1)-1), 2^(n-1)-1] as floats."""
    levels = 2 ** (n - 1) - 1
    clamped = np.clip(x, -a, a)
    return round_half_away(clamped * levels / a)


def _fake_quant(x: np.ndarray, n: int, a) -> np.ndarray:
    if _surrogate:
        return np.clip(x, -a, a)
    levels = 2 ** (n - 1) - 1
    step = np.asarray(a / levels, dtype=x.dtype)
    out = (symmetric_codes(x, n, a) * step).astype(x.dtype, copy=False)
    # levels * (a / levels) can land one ulp outside [-a, a]
    return np.clip(out, -a, a)


def _check_input(x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise NumericError("quantizer input contains non-finite values")


def quantize_symmetric(x, n: int, a: float) -> QuantResult:
    """Clamp to [-a, a] and round to the n-bit grid; STE inside, zero outside."""
    global call_count
    call_count += 1
    quant_scale(n, a)
    x = T.as_tensor(x)
    _check_input(x.data)
    a = np.asarray(a, dtype=x.dtype)
    low, high = x.data <= -a, x.data >= a
    inside = ~(low | high)
    out = T.record(_fake_quant(x.data, n, a), (x,), lambda g: (g * inside,), "quantize_symmetric")
    return QuantResult(out, low, high)


def quantize_weights(w: Tensor, n: int) -> QuantResult:
    """Per-tensor symmetric quantization with a = max|w| and full STE."""
    global call_count
    call_count += 1
    if w.size == 0:
        raise ParameterError("cannot quantize an empty weight tensor")
    _check_input(w.data)
    a = np.abs(w.data).max()
    if a == 0:
        a = np.finfo(w.dtype).tiny
    a = np.asarray(a, dtype=w.dtype)
    out = T.record(_fake_quant(w.data, n, a), (w,), lambda g: (g,), "quantize_weights")
    return QuantResult(out, w.data <= -a, w.data >= a)


def pams_backward(upstream: np.ndarray, saved: QuantResult, state: QuantizerState):
    """Gradients w.r.t. the input and alpha.

    d x_q / d alpha is -1 on x <= -alpha, 0 inside, +1 on x >= alpha, so
    both tails contribute (unlike PACT).
    """
    low, high = saved.saturation_low_mask, saved.saturation_high_mask
    if upstream.shape != low.shape:
        raise DimensionError(f"upstream {upstream.shape} vs mask {low.shape}")
    inside = ~(low | high)
    grad_x = upstream * inside
    grad_alpha = float(upstream[high].sum(dtype=np.float64) - upstream[low].sum(dtype=np.float64))
    return grad_x, grad_alpha


def quantize_activation_pams(x, state: QuantizerState) -> QuantResult:
    global call_count
    if state.mode != PAMS:
        raise ParameterError(f"state mode is {state.mode!r}, expected {PAMS!r}")
    call_count += 1
    x = T.as_tensor(x)
    _check_input(x.data)
    alpha = state.alpha
    a = alpha.data.astype(x.dtype)
    if not a > 0:
        raise ParameterError(f"alpha must be positive, got {float(a)}")
    saved = QuantResult(None, x.data <= -a, x.data >= a)

    def bw(g):
        gx, ga = pams_backward(g, saved, state)
        return gx, np.asarray(ga, dtype=alpha.dtype)

    saved.values = T.record(_fake_quant(x.data, state.n_bits, a), (x, alpha), bw, "pams")
    return saved


def quantize_activation_fixed_max(x, n: int, running_max: float) -> QuantResult:
    """Baseline whose bound is a running max; the bound gets no gradient."""
    if not running_max > 0:
        raise ParameterError(f"running_max must be positive, got {running_max}")
    return quantize_symmetric(x, n, running_max)


def quantize_activation_pact(x, state: QuantizerState) -> QuantResult:
    """Clip to [0, alpha] and quantize with 2^n - 1 uniform steps.

    The bound is learned only from x >= alpha; x < 0 carries no gradient.
    """
    global call_count
    if state.mode != PACT:
        raise ParameterError(f"state mode is {state.mode!r}, expected {PACT!r}")
    call_count += 1
    x = T.as_tensor(x)
    _check_input(x.data)
    alpha = state.alpha
    a = alpha.data.astype(x.dtype)
    if not a > 0:
        raise ParameterError(f"alpha must be positive, got {float(a)}")
    low, high = x.data <= 0, x.data >= a
    inside = ~(low | high)
    y = np.clip(x.data, 0, a)
    if not _surrogate:
        levels = 2 ** state.n_bits - 1
        y = (round_half_away(y * levels / a) * np.asarray(a / levels, dtype=x.dtype)).astype(x.dtype)
        y = np.minimum(y, a)

    def bw(g):
        return g * inside, np.asarray(g[high].sum(dtype=np.float64), dtype=alpha.dtype)

    out = T.record(y, (x, alpha), bw, "pact")
    return QuantResult(out, low, high)


def quantize_activation(x, state: QuantizerState) -> QuantResult:
    """Dispatch on ``state.mode`` for the three activation schemes."""
    if state.mode == PAMS:
        return quantize_activation_pams(x, state)
    if state.mode == PACT:
        return quantize_activation_pact(x, state)
    if state.mode == FIXED_MAX:
        return quantize_activation_fixed_max(x, state.n_bits, state.alpha_value)
    raise ParameterError(f"{state.mode!r} is not an activation mode")


def ema_update_alpha(state: QuantizerState, batch_maxes: Sequence[float]) -> QuantizerState:
    """One exponential-moving-average step on alpha from per-sample maxima.

    The first update (step_count == 0) uses beta = 0, i.e. takes the mean.
    """
    maxes = np.asarray(batch_maxes, dtype=np.float64)
    if maxes.size == 0:
        raise ParameterError("batch_maxes is empty")
    m = maxes.mean()
    beta = 0.0 if state.step_count == 0 else state.ema_beta
    state.alpha_value = beta * state.alpha_value + (1.0 - beta) * m
    state.step_count += 1
    return state


def per_sample_absmax(x: np.ndarray) -> np.ndarray:
    """max |x| over all non-batch axes."""
    return np.abs(x.reshape(x.shape[0], -1)).max(axis=1)
