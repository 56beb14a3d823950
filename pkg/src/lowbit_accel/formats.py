"""Binary file formats: float weights (.elbw), quantized models (.elbq), raw images.

All integers are little-endian. Both weight formats share one framing::

    magic[4]  u32 version  u32 count
    count x { u16 name_len  name  u8 kind  u8 ndims  u32 dims[ndims]  payload }

``.elbw`` payloads are float32, row-major. ``.elbq`` records carry codec
metadata (f64 E, f64 threshold, u8 total_bits, i16 frac_bits, u8 signed)
followed by bit-packed codes, least significant bit first. Codes are
two's complement at the declared width; a binary code is one bit with
1 = +1 and 0 = -1, and a ternary code is 2-bit two's complement, so
00 = 0, 01 = +1, 11 = -1. One JSON record holds the activation formats,
accumulator widths and scheme tag.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .emu import FloatWeights, QuantizedModel, QuantizedStage
from .quant import AffineStage, FixedPointFormat, QuantizedTensor, WeightCodec

VERSION = 1
WEIGHTS_MAGIC = b"ELBW"
QMODEL_MAGIC = b"ELBQ"

KIND_FLOAT32 = 0
KIND_BINARY = 1
KIND_TERNARY = 2
KIND_FIXED = 3
KIND_JSON = 4

_CODEC_KIND = {"binary": KIND_BINARY, "ternary": KIND_TERNARY, "fixed": KIND_FIXED}
_KIND_CODEC = {v: k for k, v in _CODEC_KIND.items()}
_META = struct.Struct("<ddBhB")


class FormatError(ValueError):
    pass


# ------------------------------------------------------------- bit packing

def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Two's-complement ``bits``-wide codes packed LSB first."""
    c = np.asarray(codes, dtype=np.int64).ravel()
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if bits == 1:
        if not np.isin(c, (-1, 1)).all():
            raise FormatError("binary codes must be +1/-1")
        u = (c > 0).astype(np.uint64)
    else:
        if c.size and (c.min() < lo or c.max() > hi):
            raise FormatError(f"codes outside {bits}-bit two's complement range")
        u = (c & ((1 << bits) - 1)).astype(np.uint64)
    planes = (u[:, None] >> np.arange(bits, dtype=np.uint64)) & 1
    return np.packbits(planes.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    flat = flat[: count * bits].reshape(count, bits).astype(np.int64)
    u = (flat << np.arange(bits, dtype=np.int64)).sum(axis=1)
    if bits == 1:
        return np.where(u == 1, 1, -1).astype(np.int64)
    return np.where(u >= 1 << (bits - 1), u - (1 << bits), u)


def packed_size(bits: int, count: int) -> int:
    return -(-bits * count // 8)


# ------------------------------------------------------------- framing

def _write_header(f: BinaryIO, name: str, kind: int, dims: tuple[int, ...]) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"record name too long: {name[:40]}...")
    f.write(struct.pack("<H", len(raw)) + raw)
    f.write(struct.pack("<BB", kind, len(dims)))
    f.write(struct.pack(f"<{len(dims)}I", *dims))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("unexpected end of file")
    return b


def _read_header(f: BinaryIO) -> tuple[str, int, tuple[int, ...]]:
    (n,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, n).decode("utf-8")
    kind, nd = struct.unpack("<BB", _read_exact(f, 2))
    dims = struct.unpack(f"<{nd}I", _read_exact(f, 4 * nd))
    return name, kind, dims


def _open_file(f: BinaryIO, magic: bytes) -> int:
    head = _read_exact(f, 12)
    if head[:4] != magic:
        raise FormatError(f"bad magic {head[:4]!r}, expected {magic!r}")
    version, count = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    return count


# ------------------------------------------------------------- .elbw

def dump_weights(weights: FloatWeights) -> bytes:
    """Serialize ``{stage: {param: array}}`` with records named ``stage.param``."""
    records = [(f"{stage}.{param}", arr) for stage in weights for param, arr in weights[stage].items()]
    f = io.BytesIO()
    f.write(WEIGHTS_MAGIC + struct.pack("<II", VERSION, len(records)))
    for name, arr in records:
        a = np.ascontiguousarray(arr, dtype="<f4")
        _write_header(f, name, KIND_FLOAT32, a.shape)
        f.write(a.tobytes())
    return f.getvalue()


def load_weights(data: bytes) -> FloatWeights:
    f = io.BytesIO(data)
    count = _open_file(f, WEIGHTS_MAGIC)
    out: FloatWeights = {}
    for _ in range(count):
        name, kind, dims = _read_header(f)
        if kind != KIND_FLOAT32:
            raise FormatError(f"{name}: .elbw holds float32 tensors only (kind {kind})")
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        stage, _, param = name.rpartition(".")
        if not stage:
            raise FormatError(f"record name {name!r} is not <stage>.<param>")
        out.setdefault(stage, {})[param] = arr
    if f.read(1):
        raise FormatError("trailing bytes after last record")
    return out


def write_weights(path, weights: FloatWeights) -> None:
    Path(path).write_bytes(dump_weights(weights))


def read_weights(path) -> FloatWeights:
    return load_weights(Path(path).read_bytes())


# ------------------------------------------------------------- .elbq

def _fmt_triple(fmt: FixedPointFormat | None) -> tuple[int, int, int]:
    return (fmt.total_bits, fmt.frac_bits, int(fmt.signed)) if fmt else (0, 0, 0)


def _write_codes(f: BinaryIO, name: str, variant: str, codes: np.ndarray, scale: float,
                 threshold: float, fmt: FixedPointFormat | None) -> None:
    bits = {"binary": 1, "ternary": 2}.get(variant) or fmt.total_bits
    _write_header(f, name, _CODEC_KIND[variant], tuple(int(d) for d in codes.shape))
    f.write(_META.pack(scale, threshold, *_fmt_triple(fmt)))
    f.write(pack_codes(codes, bits))


def _read_codes(f: BinaryIO, kind: int, dims: tuple[int, ...]):
    scale, threshold, total, frac, signed = _META.unpack(_read_exact(f, _META.size))
    variant = _KIND_CODEC[kind]
    fmt = FixedPointFormat(total, frac, bool(signed)) if variant == "fixed" else None
    bits = {"binary": 1, "ternary": 2}.get(variant) or total
    n = int(np.prod(dims, dtype=np.int64))
    codes = unpack_codes(_read_exact(f, packed_size(bits, n)), bits, n).reshape(dims)
    return variant, scale, threshold, fmt, codes


def _fmt_json(fmt: FixedPointFormat) -> list:
    return [fmt.total_bits, fmt.frac_bits, fmt.signed]


def _fmt_from_json(v) -> FixedPointFormat:
    return FixedPointFormat(int(v[0]), int(v[1]), bool(v[2]))


def dump_qmodel(qm: QuantizedModel) -> bytes:
    meta = {
        "scheme": qm.scheme_tag,
        "rounding": qm.rounding,
        "input_format": _fmt_json(qm.input_fmt),
        "stages": [{"name": s.name, "in_format": _fmt_json(s.in_fmt),
                    "out_format": _fmt_json(s.out_fmt), "acc_bits": s.acc_bits}
                   for s in qm.stages],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    f = io.BytesIO()
    f.write(QMODEL_MAGIC + struct.pack("<II", VERSION, 1 + 3 * len(qm.stages)))
    _write_header(f, "model", KIND_JSON, (len(blob),))
    f.write(blob)
    for s in qm.stages:
        c = s.weights.codec
        _write_codes(f, f"{s.name}.weight", c.variant, s.weights.codes, c.scale, c.threshold, c.fmt)
        a = s.affine
        _write_codes(f, f"{s.name}.scale", "fixed", a.scale_codes, 0.0, 0.0, a.scale_fmt)
        _write_codes(f, f"{s.name}.bias", "fixed", a.bias_codes, 0.0, 0.0, a.bias_fmt)
    return f.getvalue()


def load_qmodel(data: bytes) -> QuantizedModel:
    f = io.BytesIO(data)
    count = _open_file(f, QMODEL_MAGIC)
    meta = None
    recs: dict[str, tuple] = {}
    for _ in range(count):
        name, kind, dims = _read_header(f)
        if kind == KIND_JSON:
            meta = json.loads(_read_exact(f, dims[0]).decode("utf-8"))
        elif kind in _KIND_CODEC:
            recs[name] = _read_codes(f, kind, dims)
        else:
            raise FormatError(f"{name}: unknown record kind {kind}")
    if f.read(1):
        raise FormatError("trailing bytes after last record")
    if meta is None:
        raise FormatError("missing model metadata record")
    stages = []
    for sm in meta["stages"]:
        name = sm["name"]
        try:
            variant, scale, threshold, fmt, codes = recs[f"{name}.weight"]
            _, _, _, s_fmt, s_codes = recs[f"{name}.scale"]
            _, _, _, b_fmt, b_codes = recs[f"{name}.bias"]
        except KeyError as e:
            raise FormatError(f"missing record {e.args[0]}") from None
        codec = WeightCodec(variant, scale=scale if variant != "fixed" else 1.0,
                            threshold=threshold, fmt=fmt)
        affine = AffineStage(scale=s_fmt.dequantize(s_codes), bias=b_fmt.dequantize(b_codes),
                             scale_codes=s_codes, bias_codes=b_codes,
                             scale_fmt=s_fmt, bias_fmt=b_fmt)
        stages.append(QuantizedStage(name, QuantizedTensor(codes, codec), affine,
                                     _fmt_from_json(sm["in_format"]),
                                     _fmt_from_json(sm["out_format"]), int(sm["acc_bits"])))
    return QuantizedModel(meta["scheme"], _fmt_from_json(meta["input_format"]), stages,
                          rounding=meta["rounding"])


def write_qmodel(path, qm: QuantizedModel) -> None:
    Path(path).write_bytes(dump_qmodel(qm))


def read_qmodel(path) -> QuantizedModel:
    return load_qmodel(Path(path).read_bytes())


def sniff(path) -> bytes:
    with open(path, "rb") as f:
        return f.read(4)


# ------------------------------------------------------------- images / logits

def dump_image(image: np.ndarray) -> bytes:
    a = np.asarray(image)
    if a.ndim != 3:
        raise FormatError("image must be (C, H, W)")
    if a.size and (a.min() < 0 or a.max() > 255):
        raise FormatError("image values must fit in 8 bits")
    return struct.pack("<III", *a.shape) + a.astype(np.uint8).tobytes()


def load_image(data: bytes) -> np.ndarray:
    if len(data) < 12:
        raise FormatError("image file too short for its header")
    c, h, w = struct.unpack("<III", data[:12])
    if len(data) != 12 + c * h * w:
        raise FormatError(f"image payload is {len(data) - 12} bytes, header says {c * h * w}")
    return np.frombuffer(data[12:], dtype=np.uint8).reshape(c, h, w).copy()


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(dump_image(image))


def read_image(path) -> np.ndarray:
    return load_image(Path(path).read_bytes())


def dump_logits(codes: np.ndarray) -> bytes:
    return np.asarray(codes, dtype="<i2").tobytes()


def load_logits(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype="<i2").astype(np.int16)
