"""Chain-structured network IR, shape inference and a small model zoo."""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field


class LayerKind(str, enum.Enum):
    INPUT = "Input"
    CONV = "Conv"
    FC = "FC"
    BN = "BN"
    RELU = "ReLU"
    MAXPOOL = "MaxPool"


class Position(str, enum.Enum):
    FIRST = "First"
    MID = "Mid"
    LAST = "Last"


class GraphError(ValueError):
    """Raised for malformed graphs (shape mismatch, bad hyperparameters)."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    out_channels: int = 0
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    pad: int = 0
    group: int = 1
    eps: float = 1e-5
    # per-layer weight bit-width override (None -> take it from the scheme)
    weight_bits: int | None = None
    # filled in by shape inference
    in_channels: int = 0
    in_h: int = 0
    in_w: int = 0
    out_h: int = 0
    out_w: int = 0

    @property
    def has_weights(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.FC)

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.in_h, self.in_w)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.out_h, self.out_w)

    def validate(self) -> None:
        if self.stride < 1:
            raise GraphError(f"{self.name}: stride must be ≥ 1")
        if self.pad < 0:
            raise GraphError(f"{self.name}: pad must be ≥ 0")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise GraphError(f"{self.name}: kernel dims must be ≥ 1")
        if self.group < 1:
            raise GraphError(f"{self.name}: group must be ≥ 1")
        if self.has_weights and self.out_channels < 1:
            raise GraphError(f"{self.name}: num_output must be ≥ 1")
        if self.kind is LayerKind.BN and self.eps < 0:
            raise GraphError(f"{self.name}: eps must be ≥ 0")


@dataclass(frozen=True)
class FusedStage:
    """One pipeline stage: core -> BN -> ReLU -> pool."""

    core: LayerSpec
    bn: LayerSpec | None = None
    act: LayerSpec | None = None
    pool: LayerSpec | None = None
    position: Position = Position.MID

    @property
    def name(self) -> str:
        return self.core.name

    @property
    def is_conv(self) -> bool:
        return self.core.kind is LayerKind.CONV

    def layers(self) -> list[LayerSpec]:
        return [l for l in (self.core, self.bn, self.act, self.pool) if l is not None]

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return self.core.in_shape

    @property
    def out_shape(self) -> tuple[int, int, int]:
        last = self.pool if self.pool is not None else self.core
        return last.out_shape

    @property
    def reduction_size(self) -> int:
        """Number of terms summed into one output (kh*kw*in_channels/group)."""
        c = self.core
        return c.kernel_h * c.kernel_w * (c.in_channels // c.group)

    @property
    def macs(self) -> int:
        c = self.core
        return c.out_channels * c.out_h * c.out_w * self.reduction_size

    @property
    def n_weights(self) -> int:
        return self.core.out_channels * self.reduction_size


@dataclass(frozen=True)
class NetworkGraph:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    stages: tuple[FusedStage, ...] = field(default=())

    @property
    def fused(self) -> bool:
        return len(self.stages) > 0

    @property
    def output_classes(self) -> int:
        return self.layers[-1].out_channels

    def stage(self, name: str) -> FusedStage:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def weighted_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.has_weights]


def conv_out_dim(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _infer_layer(layer: LayerSpec, shape: tuple[int, int, int]) -> LayerSpec:
    c, h, w = shape
    layer.validate()
    kind = layer.kind
    if kind is LayerKind.CONV:
        if c % layer.group or layer.out_channels % layer.group:
            raise GraphError(
                f"{layer.name}: group {layer.group} must divide in_channels {c} "
                f"and out_channels {layer.out_channels}"
            )
        oh = conv_out_dim(h, layer.kernel_h, layer.stride, layer.pad)
        ow = conv_out_dim(w, layer.kernel_w, layer.stride, layer.pad)
        if oh < 1 or ow < 1:
            raise GraphError(f"{layer.name}: non-positive output size {oh}x{ow}")
        return dataclasses.replace(
            layer, in_channels=c, in_h=h, in_w=w, out_h=oh, out_w=ow
        )
    if kind is LayerKind.FC:
        if layer.group != 1:
            raise GraphError(f"{layer.name}: FC layers do not support group")
        # FC flattens its input; expressed as a full-size kernel
        return dataclasses.replace(
            layer, in_channels=c * h * w, in_h=1, in_w=1, out_h=1, out_w=1,
            kernel_h=1, kernel_w=1, stride=1, pad=0,
        )
    if kind is LayerKind.MAXPOOL:
        oh = conv_out_dim(h, layer.kernel_h, layer.stride, layer.pad)
        ow = conv_out_dim(w, layer.kernel_w, layer.stride, layer.pad)
        if oh < 1 or ow < 1:
            raise GraphError(f"{layer.name}: non-positive output size {oh}x{ow}")
        return dataclasses.replace(
            layer, in_channels=c, out_channels=c, in_h=h, in_w=w, out_h=oh, out_w=ow
        )
    # BN / ReLU / Input keep the shape
    return dataclasses.replace(
        layer, in_channels=c, out_channels=c, in_h=h, in_w=w, out_h=h, out_w=w
    )


def infer_shapes(graph: NetworkGraph) -> NetworkGraph:
    """Resolve every layer's input/output feature-map dims.

    Idempotent: running it on an annotated graph returns an equal graph.
    """
    if len(graph.input_shape) != 3 or min(graph.input_shape) < 1:
        raise GraphError(f"invalid input shape {graph.input_shape}")
    shape = tuple(graph.input_shape)
    layers = []
    for layer in graph.layers:
        if layer.kind is LayerKind.INPUT:
            layer = dataclasses.replace(
                layer, in_channels=shape[0], out_channels=shape[0],
                in_h=shape[1], in_w=shape[2], out_h=shape[1], out_w=shape[2],
            )
        else:
            layer = _infer_layer(layer, shape)
        layers.append(layer)
        shape = layer.out_shape
    by_name = {l.name: l for l in layers}
    stages = tuple(
        dataclasses.replace(
            s,
            core=by_name[s.core.name],
            bn=by_name[s.bn.name] if s.bn else None,
            act=by_name[s.act.name] if s.act else None,
            pool=by_name[s.pool.name] if s.pool else None,
        )
        for s in graph.stages
    )
    return dataclasses.replace(graph, layers=tuple(layers), stages=stages)


def unfuse(graph: NetworkGraph) -> list[LayerSpec]:
    """Flatten fused stages back to the ordered layer sequence (Input excluded)."""
    out: list[LayerSpec] = []
    for s in graph.stages:
        out.extend(s.layers())
    return out


# ---------------------------------------------------------------- model zoo

def _conv(name, n, k, stride=1, pad=0, group=1):
    return LayerSpec(name, LayerKind.CONV, out_channels=n, kernel_h=k, kernel_w=k,
                     stride=stride, pad=pad, group=group)


def _fc(name, n):
    return LayerSpec(name, LayerKind.FC, out_channels=n)


def _pool(name, k, stride):
    return LayerSpec(name, LayerKind.MAXPOOL, kernel_h=k, kernel_w=k, stride=stride)


def _block(core: LayerSpec, relu: bool = True, pool: LayerSpec | None = None):
    seq = [core, LayerSpec(core.name + "_bn", LayerKind.BN)]
    if relu:
        seq.append(LayerSpec(core.name + "_relu", LayerKind.RELU))
    if pool is not None:
        seq.append(pool)
    return seq


def _alexnet(name: str, kernels: tuple[int, ...], group: int) -> list[LayerSpec]:
    k1, k2, k3, k4, k5 = kernels
    layers = [LayerSpec("data", LayerKind.INPUT)]
    layers += _block(_conv("conv1", k1, 11, stride=4), pool=_pool("pool1", 3, 2))
    layers += _block(_conv("conv2", k2, 5, pad=2, group=group), pool=_pool("pool2", 3, 2))
    layers += _block(_conv("conv3", k3, 3, pad=1))
    layers += _block(_conv("conv4", k4, 3, pad=1, group=group))
    layers += _block(_conv("conv5", k5, 3, pad=1, group=group), pool=_pool("pool5", 3, 2))
    layers += _block(_fc("fc6", 4096))
    layers += _block(_fc("fc7", 4096))
    layers += _block(_fc("fc8", 1000), relu=False)
    return layers


def _vgg16() -> list[LayerSpec]:
    layers = [LayerSpec("data", LayerKind.INPUT)]
    cfg = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]
    for b, (n, reps) in enumerate(cfg, start=1):
        for r in range(1, reps + 1):
            pool = _pool(f"pool{b}", 2, 2) if r == reps else None
            layers += _block(_conv(f"conv{b}_{r}", n, 3, pad=1), pool=pool)
    layers += _block(_fc("fc6", 4096))
    layers += _block(_fc("fc7", 4096))
    layers += _block(_fc("fc8", 1000), relu=False)
    return layers


ZOO = {
    "AlexNet": lambda: ("AlexNet", (3, 227, 227), _alexnet("AlexNet", (96, 256, 384, 384, 256), 2)),
    "AlexNetNoGroup": lambda: ("AlexNetNoGroup", (3, 227, 227),
                               _alexnet("AlexNetNoGroup", (96, 256, 384, 384, 256), 1)),
    "AlexNetExtended": lambda: ("AlexNetExtended", (3, 227, 227),
                                _alexnet("AlexNetExtended", (128, 384, 512, 512, 384), 1)),
    "VGG16": lambda: ("VGG16", (3, 224, 224), _vgg16()),
}

_ALIASES = {k.lower(): k for k in ZOO}
_ALIASES.update({"alexnet-nogroup": "AlexNetNoGroup", "alexnet-extended": "AlexNetExtended",
                 "vgg": "VGG16"})


def zoo_model(name: str, fused: bool = True) -> NetworkGraph:
    """Return a canonical zoo network, shape-inferred and (by default) fused."""
    key = _ALIASES.get(name.lower())
    if key is None:
        raise KeyError(f"unknown zoo model {name!r}; choose from {sorted(ZOO)}")
    gname, shape, layers = ZOO[key]()
    graph = infer_shapes(NetworkGraph(gname, shape, tuple(layers)))
    if fused:
        from .parser import fuse
        graph = fuse(graph)
    return graph
