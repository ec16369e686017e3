"""Symmetric 4-bit fake quantization, straight-through composition, tanh soft clipping."""

from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, PoisonedInputError, ShapeError

LEVEL_MAX = 7
NUM_LEVELS = 2 * LEVEL_MAX + 1
DEGENERATE_STEP = 1e-8
TANH_CLIP_SCALE = 3.0

ROUNDING_MODES = ("half_away", "half_even")


@dataclass(frozen=True)
class QuantScale:
    """Clipping bound ``c`` and step ``s = c / 7``.

    ``c`` is always representable in the weight dtype (it is one of the
    weights, or a configured constant). ``s`` is kept in float64 so that
    ``levels * s`` reproduces ``+-c`` exactly after rounding to float32.
    """

    c: float
    s: float

    @classmethod
    def from_bound(cls, c):
        c = float(c)
        if c < 0:
            raise ValueError(f"clipping bound must be non-negative, got {c}")
        return cls(c, c / LEVEL_MAX if c > 0 else DEGENERATE_STEP)


@dataclass
class QuantResult:
    w_q: np.ndarray
    w_int: np.ndarray  # int8 levels in [-7, 7]
    scale: QuantScale


def round_levels(x, mode="half_away"):
    if mode == "half_away":
        return np.copysign(np.floor(np.abs(x) + 0.5), x)
    if mode == "half_even":
        return np.rint(x)
    raise ValueError(f"unknown rounding mode {mode!r}; expected one of {ROUNDING_MODES}")


def dequantize(w_int, scale, dtype=np.float32):
    return (w_int.astype(np.float64) * scale.s).astype(dtype)


def quantize_symmetric_4bit(w, clip_bound=None, rounding="half_away"):
    """Quantize ``w`` onto the 15-level grid {-7..7} * s.

    The bound defaults to ``max|w|`` (dynamic per-tensor scaling); passing a
    fixed ``clip_bound`` gives static-range quantization.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise ShapeError("cannot quantize an empty tensor")
    if not np.isfinite(w).all():
        raise PoisonedInputError("quantizer received NaN/Inf weights")
    dtype = w.dtype if w.dtype.kind == "f" else np.float32
    w64 = w.astype(np.float64)
    c = float(np.max(np.abs(w64))) if clip_bound is None else float(clip_bound)
    scale = QuantScale.from_bound(c)
    if c == 0.0:
        w_int = np.zeros(w.shape, dtype=np.int8)
        return QuantResult(np.zeros(w.shape, dtype=dtype), w_int, scale)
    clipped = np.clip(w64, -c, c)
    # w / s computed as 7 * (w / c): s underflows for subnormal c
    levels = round_levels(clipped / c * LEVEL_MAX, rounding)
    # The quotient can land on the wrong side of a tie by one ulp. The residual
    # 7w - k*c is exact in float64 for float32 inputs, so correct against it.
    resid = clipped * LEVEL_MAX - levels * c
    half = c / 2
    if rounding == "half_away":
        up_tie, down_tie = clipped > 0, clipped < 0
    else:
        odd = np.mod(levels, 2) == 1
        up_tie = down_tie = odd
    levels = levels + ((resid > half) | ((resid == half) & up_tie))
    levels = levels - ((resid < -half) | ((resid == -half) & down_tie))
    w_int = np.clip(levels, -LEVEL_MAX, LEVEL_MAX).astype(np.int8)
    return QuantResult(dequantize(w_int, scale, dtype), w_int, scale)


def ste_compose(w, w_q):
    """Forward value of ``w + stop_gradient(w_q - w)``.

    The value is ``w_q``; the gradient contract (identity onto ``w``) is
    realized by the layers, which deposit the ``w_q`` gradient on the master.
    """
    w = np.asarray(w)
    w_q = np.asarray(w_q)
    if w.shape != w_q.shape:
        raise ShapeError(f"shape mismatch {w.shape} vs {w_q.shape}")
    return w_q.copy()


def ste_backward(grad_w_q):
    return grad_w_q


def tanh_soft_clip(w, scale=TANH_CLIP_SCALE):
    """``scale * tanh(w / scale)``, kept strictly inside ``(-scale, scale)``."""
    w = np.asarray(w)
    dtype = w.dtype if w.dtype.kind == "f" else np.float64
    out = (scale * np.tanh(w.astype(np.float64) / scale)).astype(dtype)
    # tanh saturates to exactly 1.0 in finite precision
    edge = np.nextafter(dtype.type(scale), dtype.type(0))
    return np.clip(out, -edge, edge)


def level_histogram(w_int):
    w_int = np.asarray(w_int)
    if w_int.size and (np.any(w_int < -LEVEL_MAX) or np.any(w_int > LEVEL_MAX)
                       or np.any(w_int != np.round(w_int))):
        raise CorruptionError("levels must be integers in [-7, 7]")
    return np.bincount((w_int.astype(np.int64) + LEVEL_MAX).ravel(), minlength=NUM_LEVELS)


def count_unique_levels(w_int):
    return int(np.count_nonzero(level_histogram(w_int)))
