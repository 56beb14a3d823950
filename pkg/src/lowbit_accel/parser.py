"""Model-text parsing, hybrid precision tags and the CONV/FC+BN+ReLU+pool fusion pass."""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field

from .netir import (
    FusedStage,
    GraphError,
    LayerKind,
    LayerSpec,
    NetworkGraph,
    Position,
    infer_shapes,
)


class ModelSyntaxError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class PrecisionError(ValueError):
    pass


# ------------------------------------------------------------- precision tags

@dataclass(frozen=True)
class PrecisionScheme:
    """Hybrid bit-width assignment.

    Weight bits: 1 selects the binary codec, 2 the ternary codec and 3+ a
    two's-complement fixed-point codec of that width.
    """

    name: str
    act_bits: int
    w_first: int
    w_midconv: int
    w_midfc: int
    w_last: int
    input_bits: int = 8
    output_bits: int = 16
    overrides: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for label, v in [("act_bits", self.act_bits), ("w_first", self.w_first),
                         ("w_midconv", self.w_midconv), ("w_midfc", self.w_midfc),
                         ("w_last", self.w_last), ("input_bits", self.input_bits),
                         ("output_bits", self.output_bits),
                         *self.overrides.items()]:
            if not 1 <= int(v) <= 16:
                raise PrecisionError(f"{label}={v} outside [1, 16]")

    @property
    def tag(self) -> str:
        return format_precision_tag(self)

    def weight_bits(self, stage: FusedStage) -> int:
        if stage.name in self.overrides:
            return self.overrides[stage.name]
        if stage.core.weight_bits is not None:
            return stage.core.weight_bits
        if stage.position is Position.FIRST:
            return self.w_first
        if stage.position is Position.LAST:
            return self.w_last
        return self.w_midconv if stage.is_conv else self.w_midfc

    def input_act_bits(self, graph: NetworkGraph, index: int) -> int:
        return self.input_bits if index == 0 else self.act_bits

    def output_act_bits(self, graph: NetworkGraph, index: int) -> int:
        return self.output_bits if index == len(graph.stages) - 1 else self.act_bits

    def with_overrides(self, **bits: int) -> "PrecisionScheme":
        return dataclasses.replace(self, overrides={**self.overrides, **bits})


_TAG_RE = re.compile(r"^(?P<name>.+)-(?P<act>\d)-(?P<w>\d{4})$")


def parse_precision_tag(tag: str) -> PrecisionScheme:
    """Parse ``<name>-<A>-<WXYZ>``, e.g. ``Alexnet-4-8218``."""
    m = _TAG_RE.match(tag.strip())
    if m is None:
        raise PrecisionError(f"malformed precision tag {tag!r}; expected <name>-<A>-<WXYZ>")
    digits = [int(m["act"])] + [int(d) for d in m["w"]]
    if 0 in digits:
        raise PrecisionError(f"precision tag {tag!r} contains a zero bit-width")
    a, w1, w2, w3, w4 = digits
    return PrecisionScheme(m["name"], a, w1, w2, w3, w4)


def format_precision_tag(scheme: PrecisionScheme) -> str:
    parts = (scheme.act_bits, scheme.w_first, scheme.w_midconv, scheme.w_midfc, scheme.w_last)
    if any(p > 9 for p in parts):
        raise PrecisionError("bit-widths above 9 cannot be written as a tag")
    a, *w = parts
    return f"{scheme.name}-{a}-{''.join(map(str, w))}"


# -------------------------------------------------------------- model format

_TYPES = {
    "Input": LayerKind.INPUT,
    "Conv": LayerKind.CONV,
    "FC": LayerKind.FC,
    "BN": LayerKind.BN,
    "ReLU": LayerKind.RELU,
    "MaxPool": LayerKind.MAXPOOL,
}

_COMMON = {"name", "type", "bottom"}
_KEYS = {
    LayerKind.INPUT: {"channels", "height", "width"},
    LayerKind.CONV: {"num_output", "kernel_size", "kernel_h", "kernel_w", "stride",
                     "pad", "group", "weight_bits"},
    LayerKind.FC: {"num_output", "weight_bits"},
    LayerKind.BN: {"eps"},
    LayerKind.RELU: set(),
    LayerKind.MAXPOOL: {"kernel_size", "kernel_h", "kernel_w", "stride", "pad"},
}
_REQUIRED = {
    LayerKind.INPUT: {"channels", "height", "width"},
    LayerKind.CONV: {"num_output"},
    LayerKind.FC: {"num_output"},
    LayerKind.BN: set(),
    LayerKind.RELU: set(),
    LayerKind.MAXPOOL: set(),
}

_TOKEN_RE = re.compile(
    r'\s*(?:(?P<comment>#[^\n]*)|(?P<str>"[^"\n]*")|(?P<lbrace>\{)|(?P<rbrace>\})'
    r'|(?P<key>[A-Za-z_][A-Za-z0-9_]*)\s*:|(?P<word>[^\s{}#"]+)|(?P<nl>\n))'
)


def _tokenize(text: str):
    line = 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise ModelSyntaxError(f"unexpected character {text[pos]!r}", line)
        line += text.count("\n", pos, m.start(m.lastgroup))
        kind = m.lastgroup
        value = m.group(kind)
        pos = m.end()
        if kind == "nl":
            line += 1
            continue
        if kind == "comment":
            continue
        yield kind, value, line


def _convert(key: str, raw: str, quoted: bool, line: int):
    if key in ("name", "bottom"):
        return raw
    if key == "type":
        if raw not in _TYPES:
            raise ModelSyntaxError(f"unknown layer type {raw!r}", line)
        return _TYPES[raw]
    if quoted:
        raise ModelSyntaxError(f"{key} expects a number, got string {raw!r}", line)
    try:
        return float(raw) if key == "eps" else int(raw)
    except ValueError:
        raise ModelSyntaxError(f"{key}: cannot parse {raw!r} as a number", line) from None


def _parse_blocks(text: str) -> list[tuple[int, dict]]:
    tokens = list(_tokenize(text))
    blocks = []
    i = 0
    while i < len(tokens):
        kind, value, line = tokens[i]
        if kind != "word" or value != "layer":
            raise ModelSyntaxError(f"expected 'layer', got {value!r}", line)
        if i + 1 >= len(tokens) or tokens[i + 1][0] != "lbrace":
            raise ModelSyntaxError("expected '{' after 'layer'", line)
        i += 2
        fields: dict = {}
        start = line
        while True:
            if i >= len(tokens):
                raise ModelSyntaxError("unterminated layer block", start)
            kind, value, line = tokens[i]
            if kind == "rbrace":
                i += 1
                break
            if kind != "key":
                raise ModelSyntaxError(f"expected 'key:', got {value!r}", line)
            if i + 1 >= len(tokens) or tokens[i + 1][0] not in ("str", "word"):
                raise ModelSyntaxError(f"missing value for {value!r}", line)
            vkind, raw, _ = tokens[i + 1]
            quoted = vkind == "str"
            if quoted:
                raw = raw[1:-1]
            if value in fields:
                raise ModelSyntaxError(f"duplicate key {value!r}", line)
            fields[value] = (_convert(value, raw, quoted, line), line)
            i += 2
        blocks.append((start, fields))
    return blocks


def _layer_from_block(start: int, fields: dict) -> LayerSpec:
    if "name" not in fields:
        raise ModelSyntaxError("layer is missing required field 'name'", start)
    if "type" not in fields:
        raise ModelSyntaxError("layer is missing required field 'type'", start)
    kind = fields["type"][0]
    allowed = _COMMON | _KEYS[kind]
    for key, (_, line) in fields.items():
        if key not in allowed:
            raise ModelSyntaxError(f"unknown key {key!r} for {kind.value} layer", line)
    for key in _REQUIRED[kind]:
        if key not in fields:
            raise ModelSyntaxError(f"{kind.value} layer is missing required field {key!r}", start)
    v = {k: val for k, (val, _) in fields.items()}
    k = v.get("kernel_size", 1)
    if kind is LayerKind.INPUT:
        layer = LayerSpec(v["name"], kind, out_channels=v["channels"],
                          in_channels=v["channels"], in_h=v["height"], in_w=v["width"],
                          out_h=v["height"], out_w=v["width"])
    else:
        layer = LayerSpec(
            v["name"], kind,
            out_channels=v.get("num_output", 0),
            kernel_h=v.get("kernel_h", k), kernel_w=v.get("kernel_w", k),
            stride=v.get("stride", 1), pad=v.get("pad", 0), group=v.get("group", 1),
            eps=v.get("eps", 1e-5), weight_bits=v.get("weight_bits"),
        )
    try:
        layer.validate()
    except GraphError as exc:
        raise ModelSyntaxError(str(exc).split(": ", 1)[-1], start) from None
    if layer.weight_bits is not None and not 1 <= layer.weight_bits <= 16:
        raise ModelSyntaxError("weight_bits must be in [1, 16]", start)
    return layer


def parse_model(text: str, name: str = "model") -> NetworkGraph:
    """Parse ``.elbm`` text into an un-fused, shape-inferred chain graph."""
    blocks = _parse_blocks(text)
    if not blocks:
        raise ModelSyntaxError("model contains no layers")
    layers: list[LayerSpec] = []
    seen: set[str] = set()
    for start, fields in blocks:
        layer = _layer_from_block(start, fields)
        if layer.name in seen:
            raise ModelSyntaxError(f"duplicate layer name {layer.name!r}", start)
        if "bottom" in fields:
            bottom, line = fields["bottom"]
            if bottom not in seen:
                raise ModelSyntaxError(f"dangling layer reference {bottom!r}", line)
            if bottom != layers[-1].name:
                raise ModelSyntaxError(
                    f"branching is not supported: {layer.name!r} reads {bottom!r} "
                    f"but the previous layer is {layers[-1].name!r}", line)
        if layer.kind is LayerKind.INPUT and layers:
            raise ModelSyntaxError("Input layer must come first", start)
        if not layers and layer.kind is not LayerKind.INPUT:
            raise ModelSyntaxError("model must start with an Input layer", start)
        seen.add(layer.name)
        layers.append(layer)
    inp = layers[0]
    graph = NetworkGraph(name, (inp.in_channels, inp.in_h, inp.in_w), tuple(layers))
    try:
        return infer_shapes(graph)
    except GraphError as exc:
        raise ModelSyntaxError(str(exc)) from None


def fuse(graph: NetworkGraph) -> NetworkGraph:
    """Group each Conv/FC with the BN, ReLU and MaxPool that directly follow it.

    The first stage is tagged First and the final stage Last; a single-stage
    network is tagged Last because it produces the network output.
    """
    if not graph.layers or graph.layers[0].in_h == 0:
        graph = infer_shapes(graph)
    groups: list[dict] = []
    order = ("bn", "act", "pool")
    role = {LayerKind.BN: "bn", LayerKind.RELU: "act", LayerKind.MAXPOOL: "pool"}
    for layer in graph.layers:
        if layer.kind is LayerKind.INPUT:
            continue
        if layer.has_weights:
            groups.append({"core": layer})
            continue
        r = role[layer.kind]
        if not groups:
            raise GraphError(f"{layer.name}: {layer.kind.value} is not preceded by Conv/FC")
        cur = groups[-1]
        filled = [k for k in order if k in cur]
        if r in cur or (filled and order.index(filled[-1]) > order.index(r)):
            raise GraphError(
                f"{layer.name}: {layer.kind.value} cannot be fused after "
                f"{', '.join(cur[k].kind.value for k in filled)}")
        cur[r] = layer
    if not groups:
        raise GraphError("graph has no Conv/FC layers")
    stages = []
    for i, g in enumerate(groups):
        if i == len(groups) - 1:
            pos = Position.LAST
        elif i == 0:
            pos = Position.FIRST
        else:
            pos = Position.MID
        stages.append(FusedStage(g["core"], g.get("bn"), g.get("act"), g.get("pool"), pos))
    return dataclasses.replace(graph, stages=tuple(stages))


def format_model(graph: NetworkGraph) -> str:
    """Serialize a graph back to ``.elbm`` text."""
    out = []
    for layer in graph.layers:
        lines = [f'  name: "{layer.name}"', f"  type: {layer.kind.value}"]
        if layer.kind is LayerKind.INPUT:
            lines += [f"  channels: {layer.out_channels}", f"  height: {layer.out_h}",
                      f"  width: {layer.out_w}"]
        elif layer.kind is LayerKind.CONV:
            lines.append(f"  num_output: {layer.out_channels}")
            if layer.kernel_h == layer.kernel_w:
                lines.append(f"  kernel_size: {layer.kernel_h}")
            else:
                lines += [f"  kernel_h: {layer.kernel_h}", f"  kernel_w: {layer.kernel_w}"]
            lines += [f"  stride: {layer.stride}", f"  pad: {layer.pad}"]
            if layer.group != 1:
                lines.append(f"  group: {layer.group}")
        elif layer.kind is LayerKind.FC:
            lines.append(f"  num_output: {layer.out_channels}")
        elif layer.kind is LayerKind.BN:
            lines.append(f"  eps: {layer.eps!r}")
        elif layer.kind is LayerKind.MAXPOOL:
            lines += [f"  kernel_size: {layer.kernel_h}", f"  stride: {layer.stride}"]
            if layer.pad:
                lines.append(f"  pad: {layer.pad}")
        if layer.weight_bits is not None:
            lines.append(f"  weight_bits: {layer.weight_bits}")
        out.append("layer {\n" + "\n".join(lines) + "\n}\n")
    return "".join(out)


def load_model(spec: str) -> NetworkGraph:
    """Resolve ``zoo:<name>``, a bare zoo name or an ``.elbm`` path to a fused graph."""
    from pathlib import Path

    from .netir import zoo_model

    if spec.startswith("zoo:"):
        return zoo_model(spec[4:])
    p = Path(spec)
    if p.exists():
        return fuse(parse_model(p.read_text(encoding="utf-8"), name=p.stem))
    return zoo_model(spec)
