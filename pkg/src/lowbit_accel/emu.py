"""Bit-exact emulation of the computation-engine datapath, plus a float reference.

Integer convolutions are evaluated with float64 matrix products. Every
operand is an integer and every partial sum is bounded by the accumulator
width (checked to be at most 53 bits), so each floating-point operation is
exact and the result does not depend on summation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .netir import FusedStage, LayerKind, NetworkGraph, Position
from .parser import PrecisionScheme
from .quant import (
    AffineStage,
    BNParams,
    FixedPointFormat,
    QuantizedTensor,
    WeightCodec,
    fit_format,
    fold_bn,
    quantize_weights,
    realize_affine,
)

EXACT_FLOAT_BITS = 53
FloatWeights = dict  # layer name -> {"weight", "bias", "gamma", "beta", "mean", "var"}


class EmulationError(ValueError):
    pass


# ------------------------------------------------------------------ CE parts

def _select(code: int, x: int) -> int:
    # 3:1 mux: input, inverted input, or zero
    if code == 1:
        return x
    if code == -1:
        return -x
    if code == 0:
        return 0
    raise EmulationError(f"code {code} is not a binary/ternary code")


def adder_tree(terms: list[int]) -> int:
    """Balanced pairwise reduction, the order a hardware adder tree uses."""
    terms = list(terms)
    if not terms:
        return 0
    while len(terms) > 1:
        nxt = [terms[i] + terms[i + 1] for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0]


def ce_dot(acts, codes, codec: WeightCodec) -> int:
    """Multiplier-free dot product of an activation window with weight codes."""
    acts = [int(a) for a in np.ravel(acts)]
    codes = [int(c) for c in np.ravel(codes)]
    if len(acts) != len(codes):
        raise EmulationError(f"window length {len(acts)} != code length {len(codes)}")
    if codec.multiplier_free:
        return adder_tree([_select(c, a) for c, a in zip(codes, acts)])
    return adder_tree([c * a for c, a in zip(codes, acts)])


def _max_weight_code(bits: int) -> int:
    return 1 if bits <= 2 else (1 << (bits - 1)) - 1


def acc_bits_for(reduction: int, in_bits: int, weight_bits: int) -> int:
    bound = reduction * ((1 << in_bits) - 1) * _max_weight_code(weight_bits)
    return 1 + math.ceil(math.log2(bound + 1))


def stage_input_bits(stage: FusedStage, scheme: PrecisionScheme) -> int:
    return scheme.input_bits if stage.position is Position.FIRST else scheme.act_bits


def required_acc_bits(stage: FusedStage, scheme: PrecisionScheme,
                      in_bits: int | None = None) -> int:
    """Signed accumulator width that cannot overflow for any admissible input."""
    if in_bits is None:
        in_bits = stage_input_bits(stage, scheme)
    return acc_bits_for(stage.reduction_size, in_bits, scheme.weight_bits(stage))


def apply_affine_and_truncate(acc, affine: AffineStage, act_bits: int,
                              signed: bool = False, rounding: str = "half_away") -> np.ndarray:
    """Apply the realized per-channel affine to accumulator values and saturate.

    ``acc`` has output channels on axis 0. Unsigned outputs clamp at zero,
    which is where ReLU happens.
    """
    if not affine.realized:
        raise EmulationError("affine stage must be realized before integer application")
    acc = np.asarray(acc)
    shape = (-1,) + (1,) * (acc.ndim - 1)
    fs, fb = affine.scale_fmt.frac_bits, affine.bias_fmt.frac_bits
    F = max(fs, fb, 0)
    sc = np.asarray(affine.scale_codes).reshape(shape)
    bc = np.asarray(affine.bias_codes).reshape(shape)
    acc_mag = int(np.abs(acc).max(initial=0))
    need = max(acc_mag.bit_length() + affine.scale_fmt.total_bits + (F - fs),
               affine.bias_fmt.total_bits + (F - fb)) + 2
    if need < 63:
        num = acc.astype(np.int64) * (sc << (F - fs)) + (bc << (F - fb))
    else:
        num = (acc.astype(object) * (sc.astype(object) * (1 << (F - fs)))
               + bc.astype(object) * (1 << (F - fb)))
    if F == 0:
        q = num
    elif rounding == "half_away":
        half = 1 << (F - 1)
        mag = (abs(num) + half) >> F
        q = np.where(num < 0, -mag, mag)
    elif rounding == "floor":
        q = num >> F
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    if signed:
        lo, hi = -(1 << (act_bits - 1)), (1 << (act_bits - 1)) - 1
    else:
        lo, hi = 0, (1 << act_bits) - 1
    return np.clip(q, lo, hi).astype(np.int64)


# -------------------------------------------------------- quantized containers

@dataclass
class ActivationTensor:
    codes: np.ndarray
    fmt: FixedPointFormat

    def values(self) -> np.ndarray:
        return self.fmt.dequantize(self.codes)


@dataclass
class QuantizedStage:
    name: str
    weights: QuantizedTensor
    affine: AffineStage
    in_fmt: FixedPointFormat
    out_fmt: FixedPointFormat
    acc_bits: int


@dataclass
class QuantizedModel:
    scheme_tag: str
    input_fmt: FixedPointFormat
    stages: list[QuantizedStage]
    rounding: str = "half_away"
    meta: dict = field(default_factory=dict)

    def stage(self, name: str) -> QuantizedStage:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)


# ------------------------------------------------------------- loop nests

def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, fill=0) -> np.ndarray:
    """(C, H, W) -> (C, oh, ow, kh, kw) sliding windows."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv_matmul(x: np.ndarray, w: np.ndarray, stride: int, pad: int, group: int,
                dtype=np.float64) -> np.ndarray:
    """Grouped 2-D convolution by im2col; x (C,H,W), w (O, C/g, kh, kw)."""
    o, cg, kh, kw = w.shape
    win = _windows(x.astype(dtype, copy=False), kh, kw, stride, pad)
    _, oh, ow = win.shape[:3]
    og = o // group
    out = np.empty((o, oh, ow), dtype=dtype)
    for g in range(group):
        part = win[g * cg:(g + 1) * cg]  # (cg, oh, ow, kh, kw)
        cols = part.transpose(0, 3, 4, 1, 2).reshape(cg * kh * kw, oh * ow)
        wm = w[g * og:(g + 1) * og].reshape(og, cg * kh * kw).astype(dtype, copy=False)
        out[g * og:(g + 1) * og] = (wm @ cols).reshape(og, oh, ow)
    return out


def max_pool(x: np.ndarray, k: int, stride: int, pad: int = 0) -> np.ndarray:
    fill = np.iinfo(x.dtype).min if np.issubdtype(x.dtype, np.integer) else -np.inf
    return _windows(x, k, k, stride, pad, fill=fill).max(axis=(3, 4))


def _weight_array(stage: FusedStage, codes: np.ndarray) -> np.ndarray:
    c = stage.core
    return codes.reshape(c.out_channels, c.in_channels // c.group, c.kernel_h, c.kernel_w)


def _core_accumulate(stage: FusedStage, x: np.ndarray, w: np.ndarray, acc_bits: int) -> np.ndarray:
    c = stage.core
    if c.kind is LayerKind.FC:
        x = x.reshape(-1, 1, 1)
    if x.shape[0] != c.in_channels:
        raise EmulationError(f"{stage.name}: expected {c.in_channels} input channels, got {x.shape[0]}")
    if acc_bits <= EXACT_FLOAT_BITS:
        out = conv_matmul(x, w, c.stride, c.pad, c.group, dtype=np.float64)
        return out.astype(np.int64)
    return conv_matmul(x, w, c.stride, c.pad, c.group, dtype=object).astype(object)


def run_stage(stage: FusedStage, qstage: QuantizedStage, x: ActivationTensor,
              rounding: str = "half_away") -> ActivationTensor:
    """Conv/FC loop nest over CE dot products, affine + truncation, then max-pool."""
    if x.fmt != qstage.in_fmt:
        raise EmulationError(f"{stage.name}: input format {x.fmt} != expected {qstage.in_fmt}")
    codec = qstage.weights.codec
    if codec.variant == "fixed" and codec.fmt.total_bits <= 2:
        raise EmulationError(f"{stage.name}: fixed codec narrower than 3 bits")
    w = _weight_array(stage, qstage.weights.codes)
    acc = _core_accumulate(stage, np.asarray(x.codes), w, qstage.acc_bits)
    out_fmt = qstage.out_fmt
    y = apply_affine_and_truncate(acc, qstage.affine, out_fmt.total_bits,
                                  signed=out_fmt.signed, rounding=rounding)
    if stage.pool is not None:
        p = stage.pool
        y = max_pool(y, p.kernel_h, p.stride, p.pad)
    return ActivationTensor(y, out_fmt)


def run_network(graph: NetworkGraph, qmodel: QuantizedModel, image: np.ndarray,
                stats: list | None = None) -> np.ndarray:
    """Integer-only inference; returns signed 16-bit output codes.

    ``image`` is uint8 (C,H,W) or a batch (N,C,H,W); batch entries are
    independent.
    """
    image = np.asarray(image)
    if image.ndim == 4:
        return np.stack([run_network(graph, qmodel, im, stats) for im in image])
    if tuple(image.shape) != tuple(graph.input_shape):
        raise EmulationError(f"image shape {image.shape} != network input {graph.input_shape}")
    if image.min(initial=0) < 0 or image.max(initial=0) > qmodel.input_fmt.max_code:
        raise EmulationError("image codes outside the 8-bit input range")
    x = ActivationTensor(image.astype(np.int64), qmodel.input_fmt)
    for stage, qs in zip(graph.stages, qmodel.stages):
        x = run_stage(stage, qs, x, rounding=qmodel.rounding)
        if stats is not None:
            fmt = x.fmt
            sat = x.codes == fmt.max_code
            if fmt.signed:
                sat |= x.codes == fmt.min_code
            stats.append({
                "stage": stage.name,
                "min_code": int(x.codes.min()),
                "max_code": int(x.codes.max()),
                "saturated_fraction": float(sat.mean()),
            })
    dt = np.int16 if x.fmt.total_bits <= 16 else np.int64
    return x.codes.reshape(-1).astype(dt)


def dequantize_output(qmodel: QuantizedModel, codes: np.ndarray) -> np.ndarray:
    return qmodel.stages[-1].out_fmt.dequantize(codes)


# ----------------------------------------------------------- float reference

def bn_params(stage: FusedStage, weights: FloatWeights) -> BNParams | None:
    if stage.bn is None:
        return None
    p = weights.get(stage.bn.name) or weights[stage.name]
    return BNParams(p["gamma"], p["beta"], p["mean"], p["var"], stage.bn.eps)


def float_stage(stage: FusedStage, weights: FloatWeights, x: np.ndarray,
                pre_pool: list | None = None) -> np.ndarray:
    c = stage.core
    w = np.asarray(weights[stage.name]["weight"], dtype=np.float64)
    w = w.reshape(c.out_channels, c.in_channels // c.group, c.kernel_h, c.kernel_w)
    if c.kind is LayerKind.FC:
        x = x.reshape(-1, 1, 1)
    y = conv_matmul(x, w, c.stride, c.pad, c.group)
    bias = weights[stage.name].get("bias")
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64).reshape(-1, 1, 1)
    bn = bn_params(stage, weights)
    if bn is not None:
        y = bn.apply(y)
    if stage.act is not None:
        y = np.maximum(y, 0.0)
    if pre_pool is not None:
        pre_pool.append(y)
    if stage.pool is not None:
        y = max_pool(y, stage.pool.kernel_h, stage.pool.stride, stage.pool.pad)
    return y


def float_reference(graph: NetworkGraph, weights: FloatWeights, image: np.ndarray,
                    trace: list | None = None) -> np.ndarray:
    """Same fused graph in real arithmetic; image values are raw pixel values."""
    image = np.asarray(image)
    if image.ndim == 4:
        return np.stack([float_reference(graph, weights, im) for im in image])
    if tuple(image.shape) != tuple(graph.input_shape):
        raise EmulationError(f"image shape {image.shape} != network input {graph.input_shape}")
    x = image.astype(np.float64)
    for stage in graph.stages:
        x = float_stage(stage, weights, x, trace)
    return x.reshape(-1)


# ------------------------------------------------------------- compilation

def random_weights(graph: NetworkGraph, rng: np.random.Generator,
                   bias: bool = False) -> FloatWeights:
    """Synthetic He-initialised weights with non-trivial BN statistics."""
    out: FloatWeights = {}
    for s in graph.stages:
        c = s.core
        fan_in = s.reduction_size
        entry = {"weight": rng.standard_normal((c.out_channels, fan_in), dtype=np.float32)
                 * np.float32(math.sqrt(2.0 / fan_in))}
        if bias:
            entry["bias"] = (0.1 * rng.standard_normal(c.out_channels)).astype(np.float32)
        if s.bn is not None:
            n = c.out_channels
            entry.update(
                gamma=rng.uniform(0.5, 1.5, n).astype(np.float32),
                beta=rng.uniform(-0.5, 0.5, n).astype(np.float32),
                mean=rng.uniform(-0.2, 0.2, n).astype(np.float32),
                var=rng.uniform(0.5, 1.5, n).astype(np.float32),
            )
        out[s.name] = entry
    return out


def default_calibration_images(graph: NetworkGraph, n: int = 4, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, *graph.input_shape), dtype=np.uint8)


def _percentile(values: list[np.ndarray], q: float, absolute: bool) -> float:
    v = np.concatenate([np.ravel(a) for a in values])
    if absolute:
        v = np.abs(v)
    return float(np.percentile(v, q))


def quantize_model(graph: NetworkGraph, scheme: PrecisionScheme, weights: FloatWeights,
                   calib_images: np.ndarray | None = None, percentile: float = 99.9,
                   rounding: str = "half_away") -> QuantizedModel:
    """Quantize weights, fold BN + E, and calibrate activation binary points.

    Activation formats are unsigned ``act_bits`` wide with the binary point
    chosen so the given percentile of the float activations is representable;
    the last stage produces signed ``output_bits`` codes.
    """
    if not graph.fused:
        raise EmulationError("graph must be fused before quantization")
    if calib_images is None:
        calib_images = default_calibration_images(graph)
    calib_images = np.asarray(calib_images)
    if calib_images.ndim == 3:
        calib_images = calib_images[None]
    per_stage: list[list[np.ndarray]] = [[] for _ in graph.stages]
    for im in calib_images:
        trace: list[np.ndarray] = []
        float_reference(graph, weights, im, trace)
        for i, a in enumerate(trace):
            per_stage[i].append(a)

    input_fmt = FixedPointFormat(scheme.input_bits, 0, signed=False)
    in_fmt = input_fmt
    stages = []
    n = len(graph.stages)
    for i, stage in enumerate(graph.stages):
        bits = scheme.weight_bits(stage)
        qw = quantize_weights(np.asarray(weights[stage.name]["weight"]).reshape(
            stage.core.out_channels, -1), bits)
        if qw.codec.variant == "fixed":
            # symmetric code range keeps the accumulator bound tight
            qw.codes = np.clip(qw.codes, -qw.codec.fmt.max_code, qw.codec.fmt.max_code)
        affine = fold_bn(bn_params(stage, weights), qw.codec.step,
                         channels=stage.core.out_channels,
                         conv_bias=weights[stage.name].get("bias"))
        last = i == n - 1
        if last:
            peak = _percentile(per_stage[i], percentile, absolute=True)
            out_fmt = fit_format(peak, scheme.output_bits, signed=True)
        else:
            peak = _percentile(per_stage[i], percentile, absolute=False)
            out_fmt = fit_format(peak, scheme.act_bits, signed=False)
        affine = realize_affine(affine, in_fmt.step, out_fmt.step)
        acc = acc_bits_for(stage.reduction_size, in_fmt.total_bits, bits)
        stages.append(QuantizedStage(stage.name, qw, affine, in_fmt, out_fmt, acc))
        in_fmt = out_fmt
    return QuantizedModel(scheme.tag, input_fmt, stages, rounding=rounding)
