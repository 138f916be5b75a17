"""
Finite-precision number systems and the quantization map q.

A PrecisionSystem is one of:
    exact     -- q is the identity
    geom      -- the abstract (a0, eps, T) system S = {0} U {+-a0(1+eps)^i : 0 <= i <= T}, ties to the
                 smaller magnitude
    half      -- IEEE binary16, round to nearest even, overflow to signed infinity
    fp8clip   -- E5M2, round to nearest even, out-of-range values clipped to the largest finite value

All emulated arithmetic is "round after operation": compute in float64, then quantize.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)

FP8_E5M2_MAX = 57344.0
FP8_E5M2_MIN_EXP = -14  # smallest normal exponent
FP8_E5M2_MANTISSA_BITS = 2


class Kind(Enum):
    EXACT = "exact"
    GEOMETRIC = "geom"
    HALF = "half"
    FP8_CLIP = "fp8clip"


class NonFiniteError(FloatingPointError):
    """
    A computation produced inf/nan. `stage` names where it happened, `omega` the offending
    frequency (transforms) and `step` the offending contraction step, when known.
    """

    def __init__(self, stage, message=None, omega=None, step=None):
        self.stage = stage
        self.omega = None if omega is None else tuple(int(w) for w in omega)
        self.step = step
        if message is None:
            message = "non-finite value at stage '%s'" % stage
            if self.omega is not None:
                message += ", omega=%s" % (self.omega,)
            if step is not None:
                message += ", step=%i" % step
        super(NonFiniteError, self).__init__(message)


@dataclass(frozen=True)
class PrecisionSystem:
    kind: Kind
    a0: float = 0.0
    eps: float = 0.0
    T: int = 0

    def __post_init__(self):
        if self.kind is Kind.GEOMETRIC:
            if not (self.a0 > 0 and self.eps > 0 and self.T >= 0):
                raise ValueError("geometric system needs a0 > 0, eps > 0, T >= 0 (got %s, %s, %s)"
                                 % (self.a0, self.eps, self.T))
            # level table is derived data, kept out of eq/hash
            levels = self.a0 * (1.0 + self.eps) ** np.arange(self.T + 1)
            if not np.all(np.isfinite(levels)):
                raise ValueError("geometric system overflows float64: a0(1+eps)^T is not finite")
            object.__setattr__(self, "_levels", levels)

    @classmethod
    def exact(cls):
        return cls(Kind.EXACT)

    @classmethod
    def geometric(cls, a0, eps, T):
        return cls(Kind.GEOMETRIC, float(a0), float(eps), int(T))

    @classmethod
    def half(cls):
        return cls(Kind.HALF)

    @classmethod
    def fp8clip(cls):
        return cls(Kind.FP8_CLIP)

    @property
    def is_exact(self):
        return self.kind is Kind.EXACT

    @property
    def token(self):
        if self.kind is Kind.GEOMETRIC:
            return "geom:%r,%r,%i" % (self.a0, self.eps, self.T)
        return self.kind.value

    @property
    def itemsize(self):
        """Bytes per complex element when a tensor is stored in this format."""
        return {Kind.EXACT: 16, Kind.GEOMETRIC: 16, Kind.HALF: 4, Kind.FP8_CLIP: 2}[self.kind]

    @property
    def max_finite(self):
        if self.kind is Kind.GEOMETRIC:
            return float(self._levels[-1])
        if self.kind is Kind.HALF:
            return float(np.finfo(np.float16).max)
        if self.kind is Kind.FP8_CLIP:
            return FP8_E5M2_MAX
        return float(np.finfo(np.float64).max)

    def __str__(self):
        return self.token


def parse_token(token):
    """
    "exact" | "geom:a0,eps,T" | "half" | "fp8clip"  ->  PrecisionSystem
    """
    token = token.strip().lower()
    if token == "exact":
        return PrecisionSystem.exact()
    if token == "half":
        return PrecisionSystem.half()
    if token == "fp8clip":
        return PrecisionSystem.fp8clip()
    if token.startswith("geom:"):
        parts = token[len("geom:"):].split(",")
        if len(parts) != 3:
            raise ValueError("geometric token must be 'geom:a0,eps,T', got %r" % token)
        try:
            return PrecisionSystem.geometric(float(parts[0]), float(parts[1]), int(parts[2]))
        except ValueError as e:
            raise ValueError("invalid geometric token %r: %s" % (token, e))
    raise ValueError('Unknown precision token %r. Options are: "exact", "geom:a0,eps,T", "half", "fp8clip"'
                     % token)


def _quantize_geometric(sys, x):
    levels = np.concatenate(([0.0], sys._levels))
    ax = np.abs(x)
    idx = np.clip(np.searchsorted(levels, ax, side="left"), 1, len(levels) - 1)
    lo = levels[idx - 1]
    hi = levels[idx]
    # ties go to the smaller magnitude (and to 0 between -a0 and a0)
    mag = np.where((hi - ax) < (ax - lo), hi, lo)
    # saturate: beyond the top level the nearest element is the top level itself
    mag = np.where(ax >= levels[-1], levels[-1], mag)
    mag = np.where(ax == 0, 0.0, mag)
    return np.copysign(mag, x)


def _quantize_half(x):
    with np.errstate(over="ignore", invalid="ignore"):
        return x.astype(np.float16).astype(np.float64)


def _quantize_fp8(x):
    ax = np.abs(x)
    _, exp = np.frexp(ax)
    # ax = mant * 2**exp with mant in [0.5, 1), so the unbiased exponent is exp - 1
    e = np.maximum(exp - 1, FP8_E5M2_MIN_EXP)
    spacing = np.ldexp(1.0, e - FP8_E5M2_MANTISSA_BITS)
    with np.errstate(over="ignore", invalid="ignore"):
        q = np.rint(x / spacing) * spacing  # half to even, as in binary16
    return np.clip(q, -FP8_E5M2_MAX, FP8_E5M2_MAX)


def round_array(sys, x):
    """
    Elementwise q on a float64 array without the finiteness check; inf/nan pass through unchanged.
    This is the rounding step of the emulated kernels, which check finiteness once per stage.
    """
    x = np.asarray(x, dtype=np.float64)
    if sys.kind is Kind.EXACT:
        return x
    finite = np.isfinite(x)
    safe = np.where(finite, x, 0.0)
    if sys.kind is Kind.GEOMETRIC:
        out = _quantize_geometric(sys, safe)
    elif sys.kind is Kind.HALF:
        out = _quantize_half(safe)
    else:
        out = _quantize_fp8(safe)
    return np.where(finite, out, x)


def round_complex_array(sys, z):
    z = np.asarray(z, dtype=np.complex128)
    if sys.kind is Kind.EXACT:
        return z
    return round_array(sys, z.real) + 1j * round_array(sys, z.imag)


def quantize(sys, x):
    """
    q(x): nearest representable value of `sys`. Works on scalars and arrays (elementwise).
    Non-finite inputs are rejected.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("quantize expects finite input")
    out = round_array(sys, arr)
    return float(out) if np.ndim(x) == 0 else out


def quantize_complex(sys, z):
    """Applies q to the real and the imaginary part independently."""
    arr = np.asarray(z, dtype=np.complex128)
    out = quantize(sys, arr.real) + 1j * quantize(sys, arr.imag)
    return complex(out) if np.ndim(z) == 0 else out


def relative_epsilon(sys):
    """Worst-case relative rounding error on the interior of the system's range."""
    if sys.kind is Kind.EXACT:
        raise ValueError("no finite epsilon for the exact system")
    if sys.kind is Kind.GEOMETRIC:
        return sys.eps / 2.0
    if sys.kind is Kind.HALF:
        return 2.0 ** -11
    return 2.0 ** -(FP8_E5M2_MANTISSA_BITS + 1)


def underflow_gap(sys):
    """Largest absolute rounding error of values below the normal range."""
    if sys.kind is Kind.EXACT:
        return 0.0
    if sys.kind is Kind.GEOMETRIC:
        return sys.a0 / 2.0
    if sys.kind is Kind.HALF:
        return 2.0 ** -25  # half the subnormal spacing 2^-24
    return 2.0 ** (FP8_E5M2_MIN_EXP - FP8_E5M2_MANTISSA_BITS - 1)


def covers(sys, M):
    """
    True if every field value of magnitude <= M and every Fourier basis component in [-1, 1]
    rounds with error at most relative_epsilon * |x| plus an underflow term that is negligible
    (below 1e-3 * relative_epsilon * min(M, 1)).
    """
    if sys.kind is Kind.EXACT:
        return True
    if max(M, 1.0) > sys.max_finite:
        return False
    if M == 0:
        return True
    return underflow_gap(sys) <= 1e-3 * relative_epsilon(sys) * min(M, 1.0)


def representable_values(sys):
    """Sorted representable set S of a geometric system."""
    if sys.kind is not Kind.GEOMETRIC:
        raise ValueError("representable_values is only enumerable for geometric systems")
    pos = sys._levels
    return np.concatenate((-pos[::-1], [0.0], pos))


def _positive_values(sys, lo, hi):
    """Positive representable values covering [lo, hi], plus one neighbour on each side."""
    if sys.kind is Kind.GEOMETRIC:
        vals = sys._levels
    elif sys.kind is Kind.HALF:
        vals = np.arange(0x0001, 0x7c00, dtype=np.uint16).view(np.float16).astype(np.float64)
    elif sys.kind is Kind.FP8_CLIP:
        # E5M2 is the top byte of binary16
        bits = (np.arange(0x01, 0x7c, dtype=np.uint16) << np.uint16(8)).astype(np.uint16)
        vals = bits.view(np.float16).astype(np.float64)
    else:
        raise ValueError("the exact system has no rounding midpoints")
    i0 = max(int(np.searchsorted(vals, lo)) - 1, 0)
    i1 = min(int(np.searchsorted(vals, hi, side="right")) + 1, len(vals))
    return vals[i0:i1]


def worst_midpoint(sys, M):
    """
    Witness y in (M/2, M) maximizing |y - q(y)|, found by scanning midpoints of consecutive
    representable values. Returns (y, |y - q(y)|).
    """
    if not M > 0:
        raise ValueError("M must be positive, got %r" % M)
    vals = _positive_values(sys, M / 2.0, M)
    mids = (vals[:-1] + vals[1:]) / 2.0
    mids = mids[(mids > M / 2.0) & (mids < M)]
    if len(mids) == 0:
        # no rounding boundary strictly inside (M/2, M)
        mids = np.array([0.75 * M])
    errs = np.abs(mids - quantize(sys, mids))
    k = int(np.argmax(errs))
    return float(mids[k]), float(errs[k])


def complex_multiply(sys, a, b, lowered=False):
    """
    Round-after-operation complex product (broadcasting like numpy).

    lowered=False: native complex multiply, one rounding per output component.
    lowered=True: view-as-real, (ar + i ai)(br + i bi) = (ar br - ai bi) + i(ar bi + ai br), with
    each of the four real products and the final difference/sum rounded.
    Non-finite values propagate; callers check once per stage.
    """
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    with np.errstate(over="ignore", invalid="ignore"):
        if not lowered:
            return round_complex_array(sys, a * b)
        q = lambda x: round_array(sys, x)
        rr = q(a.real * b.real)
        ii = q(a.imag * b.imag)
        ri = q(a.real * b.imag)
        ir = q(a.imag * b.real)
        return q(rr - ii) + 1j * q(ri + ir)


def add(sys, a, b):
    """Rounded complex (or real) sum."""
    with np.errstate(over="ignore", invalid="ignore"):
        if np.iscomplexobj(a) or np.iscomplexobj(b):
            return round_complex_array(sys, np.asarray(a) + np.asarray(b))
        return round_array(sys, np.asarray(a) + np.asarray(b))


@dataclass(frozen=True)
class QuantizeStats:
    count: int = 0
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    overflow_count: int = 0

    def merge(self, other):
        return QuantizeStats(self.count + other.count,
                             max(self.max_abs_err, other.max_abs_err),
                             max(self.max_rel_err, other.max_rel_err),
                             self.overflow_count + other.overflow_count)


def quantize_with_stats(sys, x):
    """quantize plus an account of the rounding it performed: (q(x), QuantizeStats)."""
    arr = np.asarray(x, dtype=np.float64)
    q = np.asarray(quantize(sys, arr))
    finite = np.isfinite(q)
    overflow = ~finite | (np.abs(arr) > sys.max_finite)
    err = np.abs(arr[finite] - q[finite])
    rel_mask = arr[finite] != 0
    stats = QuantizeStats(count=int(arr.size),
                          max_abs_err=float(err.max()) if err.size else 0.0,
                          max_rel_err=float((err[rel_mask] / np.abs(arr[finite][rel_mask])).max())
                          if rel_mask.any() else 0.0,
                          overflow_count=int(overflow.sum()))
    if stats.overflow_count:
        logger.debug("%s: %i of %i values out of range", sys.token, stats.overflow_count, stats.count)
    return (float(q) if np.ndim(x) == 0 else q), stats
