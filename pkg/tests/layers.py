"""Random single-stage layers with hand-built quantized parameters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lowbit_accel.emu import QuantizedStage, acc_bits_for
from lowbit_accel.netir import FusedStage, LayerKind
from lowbit_accel.quant import (AffineStage, FixedPointFormat, QuantizedTensor, WeightCodec)

import oracles
from nets import chain


@dataclass
class RandomLayer:
    stage: FusedStage
    qstage: QuantizedStage
    x: np.ndarray               # (C, H, W) int64 input codes
    w: np.ndarray               # (O, C/g, kh, kw) weight codes
    scale_frac: int
    bias_frac: int
    pool: tuple | None

    def reference(self):
        c = self.stage.core
        x, w = self.x, self.w
        stride, pad, group = c.stride, c.pad, c.group
        if c.kind is LayerKind.FC:
            x = x.reshape(-1, 1, 1)
            w = w.reshape(w.shape[0], -1, 1, 1)
            stride, pad, group = 1, 0, 1
        a = self.qstage.affine
        out = self.qstage.out_fmt
        y = oracles.run_stage_ref(x.tolist(), w.tolist(), stride, pad, group,
                                  [int(v) for v in a.scale_codes], self.scale_frac,
                                  [int(v) for v in a.bias_codes], self.bias_frac,
                                  out.total_bits, out.signed, self.pool)
        return np.array(y, dtype=np.int64)


def weight_codec(rng, bits: int) -> WeightCodec:
    if bits == 1:
        return WeightCodec("binary", scale=1.0)
    if bits == 2:
        return WeightCodec("ternary", scale=1.0, threshold=0.0)
    return WeightCodec("fixed", fmt=FixedPointFormat(bits, int(rng.integers(0, bits)), True))


def weight_codes(rng, codec: WeightCodec, shape) -> np.ndarray:
    if codec.variant == "binary":
        return rng.choice([-1, 1], size=shape).astype(np.int64)
    if codec.variant == "ternary":
        return rng.integers(-1, 2, size=shape).astype(np.int64)
    m = codec.fmt.max_code
    return rng.integers(-m, m + 1, size=shape).astype(np.int64)


def random_layer(rng: np.random.Generator, act_bits: int | None = None,
                 weight_bits: int | None = None, group: int | None = None,
                 fc: bool | None = None, max_ch: int = 16, max_hw: int = 8) -> RandomLayer:
    act_bits = act_bits or int(rng.choice([2, 4, 8]))
    weight_bits = weight_bits or int(rng.choice([1, 2, 3, 4, 8]))
    group = group or int(rng.choice([1, 2]))
    fc = bool(rng.random() < 0.15) if fc is None else fc
    if fc:
        group = 1
    cin = int(rng.integers(1, max_ch // group + 1)) * group
    cout = int(rng.integers(1, max_ch // group + 1)) * group
    h, w = (int(v) for v in rng.integers(1, max_hw + 1, 2))
    if fc:
        k, stride, pad, pool = 1, 1, 0, None
        spec = (LayerKind.FC, dict(out_channels=cout, relu=False))
    else:
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2))
        k = min(k, h + 2 * pad, w + 2 * pad)
        stride = int(rng.integers(1, 3))
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        pool = (2, 2) if min(oh, ow) >= 2 and rng.random() < 0.3 else None
        spec = (LayerKind.CONV, dict(out_channels=cout, kernel_h=k, kernel_w=k, stride=stride,
                                     pad=pad, group=group, pool=pool))
    stage = chain((cin, h, w), [spec]).stages[0]

    codec = weight_codec(rng, weight_bits)
    wshape = (cout, cin // group if not fc else cin * h * w, k, k)
    wc = weight_codes(rng, codec, wshape)
    x = rng.integers(0, 1 << act_bits, size=(cin, h, w)).astype(np.int64)

    signed = bool(rng.random() < 0.3)
    out_bits = int(rng.choice([act_bits, 16])) if signed else act_bits
    reduction = wshape[1] * k * k
    # scale so a typical accumulator lands near the middle of the output range
    typical = max(1.0, np.sqrt(reduction) * (1 << act_bits) * max(1, codec.max_code) / 2)
    scale_frac = int(rng.integers(8, 24))
    target = (1 << out_bits) / typical
    scale_codes = np.round(rng.uniform(-0.5, 1.5, cout) * target * 2.0 ** scale_frac)
    scale_codes = np.clip(scale_codes, -(1 << 23) + 1, (1 << 23) - 1).astype(np.int64)
    bias_frac = int(rng.integers(0, 12))
    bias_codes = rng.integers(-(1 << (out_bits + bias_frac - 1)), 1 << (out_bits + bias_frac - 1),
                              cout).astype(np.int64)
    bias_codes = np.clip(bias_codes, -(1 << 23) + 1, (1 << 23) - 1)
    affine = AffineStage(scale=scale_codes * 2.0 ** -scale_frac, bias=bias_codes * 2.0 ** -bias_frac,
                         scale_codes=scale_codes, bias_codes=bias_codes,
                         scale_fmt=FixedPointFormat(24, scale_frac, True),
                         bias_fmt=FixedPointFormat(24, bias_frac, True))
    qstage = QuantizedStage(
        stage.name, QuantizedTensor(wc.reshape(cout, -1), codec), affine,
        FixedPointFormat(act_bits, 0, False), FixedPointFormat(out_bits, 0, signed),
        acc_bits_for(reduction, act_bits, weight_bits))
    return RandomLayer(stage, qstage, x, wc, scale_frac, bias_frac, pool)
