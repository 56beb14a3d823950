"""Binary / ternary / fixed-point codecs and BN folding."""
from __future__ import annotations

import itertools
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

TERNARY_THRESHOLD_RATIO = 0.7
AFFINE_BITS = 24


class QuantizationError(ValueError):
    pass


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def exact_mean_abs(values: np.ndarray) -> float:
    """Correctly rounded mean of |values|; platform independent.

    Each fsum pass returns the rounded remainder of the exact sum, so the
    collected parts add up to it exactly (typically two or three passes).
    """
    a = np.abs(np.asarray(values, dtype=np.float64)).ravel().tolist()
    parts: list[float] = []
    while True:
        r = math.fsum(itertools.chain(a, (-p for p in parts)))
        if r == 0.0:
            break
        parts.append(r)
    return float(sum(map(Fraction, parts), Fraction(0)) / len(a))


@dataclass(frozen=True)
class FixedPointFormat:
    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self):
        if not 1 <= self.total_bits <= 32:
            raise QuantizationError(f"total_bits={self.total_bits} outside [1, 32]")
        if self.signed and self.total_bits < 2:
            raise QuantizationError("signed formats need at least 2 bits")

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_code(self) -> int:
        return (1 << (self.total_bits - 1)) - 1 if self.signed else (1 << self.total_bits) - 1

    @property
    def step(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def max_value(self) -> float:
        return self.max_code * self.step

    @property
    def min_value(self) -> float:
        return self.min_code * self.step

    def quantize(self, values, rounding: str = "half_away") -> np.ndarray:
        scaled = np.ldexp(np.asarray(values, dtype=np.float64), self.frac_bits)
        r = np.floor(scaled) if rounding == "floor" else round_half_away(scaled)
        return np.clip(r, self.min_code, self.max_code).astype(np.int64)

    def dequantize(self, codes) -> np.ndarray:
        return np.ldexp(np.asarray(codes, dtype=np.float64), -self.frac_bits)

    def as_tuple(self) -> tuple[int, int, bool]:
        return (self.total_bits, self.frac_bits, self.signed)


# keeps the step a normal float; smaller magnitudes quantize to zero
MAX_FRAC_BITS = 1022


def fit_format(max_abs: float, total_bits: int, signed: bool = True,
               min_frac: int | None = None) -> FixedPointFormat:
    """Largest-precision format of the given width whose range covers ``max_abs``."""
    probe = FixedPointFormat(total_bits, 0, signed)
    if not max_abs > 0 or not math.isfinite(max_abs):
        frac = total_bits - (1 if signed else 0)
    else:
        frac = min(math.floor(math.log2(probe.max_code) - math.log2(max_abs)), MAX_FRAC_BITS)
        # log2 rounding can be off by one either way
        while frac < MAX_FRAC_BITS and \
                round_half_away(math.ldexp(max_abs, frac + 1)) <= probe.max_code:
            frac += 1
        while frac > -64 and round_half_away(math.ldexp(max_abs, frac)) > probe.max_code:
            frac -= 1
    if min_frac is not None:
        frac = max(frac, min_frac)
    return FixedPointFormat(total_bits, frac, signed)


# ------------------------------------------------------------------- codecs

@dataclass(frozen=True)
class WeightCodec:
    """``binary`` / ``ternary`` carry a scale E; ``fixed`` carries a format."""

    variant: str
    scale: float = 1.0
    threshold: float = 0.0
    fmt: FixedPointFormat | None = None

    def __post_init__(self):
        if self.variant not in ("binary", "ternary", "fixed"):
            raise QuantizationError(f"unknown codec {self.variant!r}")
        if self.variant == "fixed" and self.fmt is None:
            raise QuantizationError("fixed codec needs a format")
        if self.variant != "fixed" and not self.scale > 0:
            raise QuantizationError("codec scale E must be > 0")
        if self.threshold < 0:
            raise QuantizationError("threshold must be ≥ 0")

    @property
    def bits(self) -> int:
        return {"binary": 1, "ternary": 2}.get(self.variant) or self.fmt.total_bits

    @property
    def step(self) -> float:
        """Real value of one integer code unit."""
        return self.fmt.step if self.variant == "fixed" else self.scale

    @property
    def max_code(self) -> int:
        return 1 if self.variant != "fixed" else self.fmt.max_code

    @property
    def multiplier_free(self) -> bool:
        return self.variant != "fixed"


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    codec: WeightCodec

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.codes.shape)

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.codec.step

    def check(self) -> None:
        c = self.codes
        if self.codec.variant == "binary":
            ok = np.isin(c, (-1, 1)).all()
        elif self.codec.variant == "ternary":
            ok = np.isin(c, (-1, 0, 1)).all()
        else:
            ok = (c >= self.codec.fmt.min_code).all() and (c <= self.codec.fmt.max_code).all()
        if not ok:
            raise QuantizationError(f"codes not representable in {self.codec.variant} codec")


def _as_nonempty(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise QuantizationError("cannot quantize an empty tensor")
    return w


def binarize(weights) -> QuantizedTensor:
    """codes = sign(w) (sign(0) = +1), E = mean |w| over the whole layer."""
    w = _as_nonempty(weights)
    scale = exact_mean_abs(w)
    if scale == 0.0:
        raise QuantizationError("all-zero tensor gives a degenerate binary codec (E = 0)")
    codes = np.where(w >= 0, 1, -1).astype(np.int64)
    return QuantizedTensor(codes, WeightCodec("binary", scale=scale))


def ternarize(weights) -> QuantizedTensor:
    """Zero the entries with |w| <= 0.7 mean|w|; E = mean |w| of the survivors."""
    w = _as_nonempty(weights)
    threshold = TERNARY_THRESHOLD_RATIO * exact_mean_abs(w)
    keep = np.abs(w) > threshold
    if not keep.any():
        raise QuantizationError("no weight exceeds the ternary threshold (degenerate codec)")
    scale = exact_mean_abs(w[keep])
    codes = np.where(keep, np.where(w > 0, 1, -1), 0).astype(np.int64)
    return QuantizedTensor(codes, WeightCodec("ternary", scale=scale, threshold=threshold))


def quantize_fixed(values, fmt: FixedPointFormat) -> QuantizedTensor:
    """Round half away from zero, then saturate to the format range."""
    return QuantizedTensor(fmt.quantize(values), WeightCodec("fixed", fmt=fmt))


def quantize_weights(weights, bits: int) -> QuantizedTensor:
    if bits == 1:
        return binarize(weights)
    if bits == 2:
        return ternarize(weights)
    w = _as_nonempty(weights)
    return quantize_fixed(w, fit_format(float(np.abs(w).max()), bits, signed=True))


# ---------------------------------------------------------------- BN folding

@dataclass(frozen=True)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    @classmethod
    def identity(cls, channels: int, eps: float = 0.0) -> "BNParams":
        one, zero = np.ones(channels), np.zeros(channels)
        return cls(one, zero, zero.copy(), one.copy(), eps)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Float BN over axis 0 (channels)."""
        shape = (-1,) + (1,) * (x.ndim - 1)
        inv = self.gamma / np.sqrt(self.var + self.eps)
        return (x - self.mean.reshape(shape)) * inv.reshape(shape) + self.beta.reshape(shape)


@dataclass
class AffineStage:
    """Per-output-channel ``scale * acc + bias`` after the CE dot product.

    ``scale``/``bias`` are real-valued (scale already includes E). Once
    realized, ``scale_codes``/``bias_codes`` map accumulator units straight
    to output codes in 24-bit signed formats.
    """

    scale: np.ndarray
    bias: np.ndarray
    scale_codes: np.ndarray | None = None
    bias_codes: np.ndarray | None = None
    scale_fmt: FixedPointFormat | None = None
    bias_fmt: FixedPointFormat | None = None
    meta: dict = field(default_factory=dict)

    @property
    def realized(self) -> bool:
        return self.scale_codes is not None


def fold_bn(bn: BNParams | None, codec_scale: float, channels: int | None = None,
            conv_bias: np.ndarray | None = None) -> AffineStage:
    """Collapse BN and the codec scale E into ``alpha*E*x + beta``."""
    if bn is None:
        if channels is None:
            raise ValueError("channels required when there is no BN")
        alpha = np.ones(channels)
        beta = np.zeros(channels)
    else:
        denom = np.asarray(bn.var, dtype=np.float64) + bn.eps
        if (denom <= 0).any():
            raise QuantizationError("BN variance + eps must be positive")
        alpha = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(denom)
        beta = np.asarray(bn.beta, dtype=np.float64) - alpha * np.asarray(bn.mean, dtype=np.float64)
    if conv_bias is not None:
        beta = beta + alpha * np.asarray(conv_bias, dtype=np.float64)
    return AffineStage(scale=alpha * codec_scale, bias=beta)


def realize_affine(affine: AffineStage, in_step: float, out_step: float,
                   bits: int = AFFINE_BITS) -> AffineStage:
    """Quantize the affine into code domain: out_code = s*acc + b."""
    s = affine.scale * (in_step / out_step)
    b = affine.bias / out_step
    # binary point placed per stage so the largest magnitude uses the full width
    s_fmt = fit_format(float(np.abs(s).max(initial=0.0)), bits, signed=True)
    b_fmt = fit_format(float(np.abs(b).max(initial=0.0)), bits, signed=True)
    return AffineStage(
        scale=affine.scale, bias=affine.bias,
        scale_codes=s_fmt.quantize(s), bias_codes=b_fmt.quantize(b),
        scale_fmt=s_fmt, bias_fmt=b_fmt,
        meta={"in_step": in_step, "out_step": out_step},
    )
