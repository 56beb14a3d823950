"""Accelerator configuration: the per-stage hardware-library settings as canonical JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .dse import (Calibration, DeviceBudget, PipelinePlan, buffer_shapes, estimate,
                  make_plan, stage_bits)
from .emu import QuantizedModel
from .netir import NetworkGraph
from .parser import PrecisionScheme, format_model, fuse, parse_model, parse_precision_tag

CONFIG_FORMAT = "lowbit-accel-config"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class AcceleratorConfig:
    network: str
    precision: str
    batch: int
    clock_mhz: float
    device: dict
    calibration: dict
    rounding: str
    input_format: list
    model: str  # .elbm text of the network
    stages: list = field(default_factory=list)
    interfaces: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = CONFIG_FORMAT
        d["version"] = CONFIG_VERSION
        return d

    def dumps(self) -> str:
        """Canonical text: sorted keys, two-space indent, shortest float repr."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=True,
                          allow_nan=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "AcceleratorConfig":
        d = json.loads(text)
        if d.pop("format", None) != CONFIG_FORMAT:
            raise ConfigError("not an accelerator config")
        if d.pop("version", None) != CONFIG_VERSION:
            raise ConfigError("unsupported config version")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    # ---- replay helpers
    def graph(self) -> NetworkGraph:
        g = fuse(parse_model(self.model, name=self.network))
        return g

    def scheme(self) -> PrecisionScheme:
        return parse_precision_tag(self.precision)

    def budget(self) -> DeviceBudget:
        return DeviceBudget(**self.device)

    def calib(self) -> Calibration:
        return Calibration.from_dict(self.calibration)

    def plan(self) -> PipelinePlan:
        par = [(s["p_in"], s["p_out"]) for s in self.stages]
        return make_plan(self.graph(), self.scheme(), par, self.batch, self.calib(),
                         binding=self.interfaces.get("binding", ""))

    def estimate(self):
        return estimate(self.plan(), self.graph(), self.scheme(), self.budget(), self.calib())


def _fmt(fmt) -> list:
    return [fmt.total_bits, fmt.frac_bits, fmt.signed]


def emit_config(plan: PipelinePlan, graph: NetworkGraph, scheme: PrecisionScheme,
                qmodel: QuantizedModel, budget: DeviceBudget, calib: Calibration) -> AcceleratorConfig:
    if qmodel.scheme_tag != scheme.tag:
        raise ConfigError(f"quantized model is {qmodel.scheme_tag}, plan is {scheme.tag}")
    names = [s.name for s in graph.stages]
    if [s.name for s in qmodel.stages] != names or [s.name for s in plan.stages] != names:
        raise ConfigError("plan, graph and quantized model disagree on the stage list")
    stages = []
    for i, (st, sp, qs) in enumerate(zip(graph.stages, plan.stages, qmodel.stages)):
        in_bits, wb, _ = stage_bits(graph, scheme, i)
        if qs.in_fmt.total_bits != in_bits or qs.weights.codec.bits != wb:
            raise ConfigError(f"{st.name}: quantized widths do not match {scheme.tag}")
        codec = qs.weights.codec
        buf = buffer_shapes(st, sp.p_in, sp.p_out, in_bits, wb, calib)
        cost = plan.costs[i]
        stages.append({
            "index": i,
            "name": st.name,
            "position": st.position.value,
            "fused_ops": [l.kind.value for l in st.layers()],
            "codec": {
                "variant": codec.variant,
                "bits": codec.bits,
                "E": codec.scale if codec.variant != "fixed" else None,
                "threshold": codec.threshold if codec.variant == "ternary" else None,
                "format": _fmt(codec.fmt) if codec.fmt else None,
            },
            "act_in": _fmt(qs.in_fmt),
            "act_out": _fmt(qs.out_fmt),
            "affine_formats": {"scale": _fmt(qs.affine.scale_fmt), "bias": _fmt(qs.affine.bias_fmt)},
            "acc_bits": qs.acc_bits,
            "p_in": sp.p_in,
            "p_out": sp.p_out,
            "cycles": plan.cycles[i],
            "ce_dsp": cost.dsp,
            "buffers": {
                "reshape": {"banks": buf.reshape_banks, "depth": buf.reshape_depth,
                            "width": buf.reshape_width},
                "pingpong": {"depth": buf.pingpong_depth, "width": buf.pingpong_width},
            },
            # every weight streams from DRAM; FC weights are shared by the batch lanes
            "streams": {"weights": "dram_per_frame" if st.is_conv else "dram_per_batch",
                        "weight_bits": st.n_weights * wb},
        })
    out_bits = scheme.output_bits
    interfaces = {
        "input": {"width_bits": scheme.input_bits, "shape": list(graph.input_shape)},
        "output": {"width_bits": out_bits, "count": graph.stages[-1].core.out_channels},
        "binding": plan.binding,
    }
    return AcceleratorConfig(
        network=graph.name, precision=scheme.tag, batch=plan.batch, clock_mhz=budget.clock,
        device=asdict(budget), calibration=calib.to_dict(), rounding=qmodel.rounding,
        input_format=_fmt(qmodel.input_fmt), model=format_model(graph), stages=stages,
        interfaces=interfaces,
    )
