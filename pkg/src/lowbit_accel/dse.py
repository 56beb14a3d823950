"""Accelerator cost model and pipeline design-space exploration.

A design is one fused stage per pipeline stage, each with ``p_out`` CEs of
``p_in`` inputs, replicated ``batch`` times as image lanes that share the
weight buffers and the weight stream from DRAM.
"""
from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

from .emu import acc_bits_for
from .netir import FusedStage, LayerKind, NetworkGraph, Position
from .parser import PrecisionScheme


class InfeasibleDesign(RuntimeError):
    pass


class ParallelismError(ValueError):
    pass


# ------------------------------------------------------------- budgets

@dataclass(frozen=True)
class DeviceBudget:
    name: str
    lut: int
    ff: int
    bram36: int
    dsp: int
    bandwidth: float  # GB/s
    clock: float  # MHz

    def __post_init__(self):
        for k in ("lut", "ff", "bram36", "dsp", "bandwidth", "clock"):
            if not getattr(self, k) > 0:
                raise ValueError(f"device budget {k} must be positive")

    def scaled(self, **factors: float) -> "DeviceBudget":
        vals = {k: type(getattr(self, k))(getattr(self, k) * f) for k, f in factors.items()}
        return replace(self, **vals)


def _data_path(name: str):
    return resources.files("lowbit_accel") / "data" / name


def load_devices(path: str | Path | None = None) -> dict[str, DeviceBudget]:
    cp = configparser.ConfigParser()
    text = Path(path).read_text() if path else _data_path("devices.cfg").read_text()
    cp.read_string(text)
    out = {}
    for sec in cp.sections():
        s = cp[sec]
        out[sec] = DeviceBudget(
            sec, int(s["lut"]), int(s["ff"]), int(s["bram36"]), int(s["dsp"]),
            float(s["bandwidth"]), float(s["clock"]),
        )
    return out


def load_device(name: str, path: str | Path | None = None) -> DeviceBudget:
    devices = load_devices(path)
    try:
        return devices[name.lower()]
    except KeyError:
        raise KeyError(f"unknown device {name!r}; presets: {sorted(devices)}") from None


@dataclass(frozen=True)
class Calibration:
    """Cost-model constants; fitted by ``lowbit_accel.fitting``."""

    version: str = "uncalibrated"
    lut_per_input: float = 1.0
    codec_lut_factor: dict = field(default_factory=lambda: {"binary": 1.0, "ternary": 1.0,
                                                            "fixed": 1.0})
    lut_per_acc_bit: float = 0.0
    lut_per_ce: float = 0.0
    lut_per_stage: float = 0.0
    ff_per_lut: float = 1.0
    dsp_per_stage: int = 0
    multipliers_per_dsp: int = 2
    fill_cycles: int = 0
    bandwidth_overhead: float = 1.0
    bram_bits: int = 36864
    bram_port_bits: int = 72
    sdk_reserve: float = 0.0
    max_batch: int = 16
    max_ce_inputs: int = 4096
    reshape_rows: int = 1  # output rows of lookahead held by each input line buffer
    max_p_out: int = 4096  # CEs per stage, bounded by the affine/activation units

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


def load_calibration(path: str | Path | None = None) -> Calibration:
    text = Path(path).read_text() if path else _data_path("calibration.json").read_text()
    return Calibration.from_dict(json.loads(text))


# -------------------------------------------------------- complexity / volume

def stage_ops(stage: FusedStage) -> int:
    """Multiply and add counted separately."""
    return 2 * stage.macs


def network_gop(graph: NetworkGraph) -> tuple[float, list[int]]:
    per_stage = [stage_ops(s) for s in graph.stages]
    return sum(per_stage) / 1e9, per_stage


@dataclass
class DataVolume:
    weight_bits: int
    feature_bits: int
    conv_weight_bits: int
    conv_feature_bits: int
    fc_weight_bits: int
    input_bits: int
    traffic_bits: float  # DRAM bits per frame

    @property
    def feature_share(self) -> float:
        return self.feature_bits / (self.feature_bits + self.weight_bits)

    @property
    def conv_feature_share(self) -> float:
        return self.conv_feature_bits / (self.conv_feature_bits + self.conv_weight_bits)

    @property
    def traffic_bytes(self) -> float:
        return self.traffic_bits / 8


def stage_bits(graph: NetworkGraph, scheme: PrecisionScheme, i: int) -> tuple[int, int, int]:
    """(input activation bits, weight bits, output activation bits) of stage ``i``."""
    n = len(graph.stages)
    in_bits = scheme.input_bits if i == 0 else scheme.act_bits
    out_bits = scheme.output_bits if i == n - 1 else scheme.act_bits
    return in_bits, scheme.weight_bits(graph.stages[i]), out_bits


def data_volume(graph: NetworkGraph, scheme: PrecisionScheme, batch: int | float = 1) -> DataVolume:
    """Weight vs feature-map bit counts and the per-frame DRAM traffic.

    Feature maps stay on chip; conv weights are fetched once per frame and
    FC weights once per batch of lanes.
    """
    if batch <= 0:
        raise ValueError("batch must be positive")
    c, h, w = graph.input_shape
    input_bits = c * h * w * scheme.input_bits
    wbits = fbits = cw = cf = fcw = 0
    cf = fbits = input_bits
    for i, s in enumerate(graph.stages):
        _, wb, ob = stage_bits(graph, scheme, i)
        sw = s.n_weights * wb
        co, oh, ow = s.core.out_shape
        sf = co * oh * ow * ob
        wbits += sw
        fbits += sf
        if s.is_conv:
            cw += sw
            cf += sf
        else:
            fcw += sw
    traffic = cw + (fcw / batch if math.isfinite(batch) else 0.0) + input_bits
    return DataVolume(wbits, fbits, cw, cf, fcw, input_bits, traffic)


# --------------------------------------------------------------- stage model

def is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


@dataclass(frozen=True)
class StageGeometry:
    groups: int
    cin: int  # per group
    cout: int  # per group
    spatial: int  # kh*kw*oh*ow
    kh: int
    kw: int
    in_w: int
    pad: int
    stride: int
    is_conv: bool

    @classmethod
    def of(cls, stage: FusedStage) -> "StageGeometry":
        c = stage.core
        g = c.group
        return cls(g, c.in_channels // g, c.out_channels // g,
                   c.kernel_h * c.kernel_w * c.out_h * c.out_w,
                   c.kernel_h, c.kernel_w, c.in_w, c.pad, c.stride,
                   c.kind is LayerKind.CONV)

    def max_parallelism(self) -> tuple[int, int]:
        return next_pow2(self.cin), next_pow2(self.cout)


def compute_cycles(geo: StageGeometry, p_in: int, p_out: int) -> int:
    return geo.groups * -(-geo.cin // p_in) * -(-geo.cout // p_out) * geo.spatial


def _check_parallelism(geo: StageGeometry, p_in: int, p_out: int) -> None:
    if not (is_pow2(p_in) and is_pow2(p_out)):
        raise ParallelismError(f"parallelism ({p_in}, {p_out}) must be powers of 2")
    mi, mo = geo.max_parallelism()
    if p_in > mi or p_out > mo:
        raise ParallelismError(
            f"parallelism ({p_in}, {p_out}) exceeds channel extents ({geo.cin}, {geo.cout})")


def stage_latency(stage: FusedStage, p_in: int, p_out: int, clock_mhz: float,
                  fill: int = 0) -> tuple[int, float]:
    """Cycles per frame (compute + pipeline fill) and the matching seconds."""
    geo = StageGeometry.of(stage)
    _check_parallelism(geo, p_in, p_out)
    cycles = compute_cycles(geo, p_in, p_out) + fill
    return cycles, cycles / (clock_mhz * 1e6)


@dataclass(frozen=True)
class StageCost:
    """Resources of one stage. ``lane`` fields are per image lane."""

    lut: float
    ff: float
    dsp: int  # CE multipliers
    dsp_ctrl: int  # address-generation multipliers
    bram_lane: float  # reshape / input buffers
    bram_shared: float  # weight ping-pong buffers, shared by all lanes

    def vector(self) -> tuple:
        return (self.lut, self.dsp + self.dsp_ctrl, self.bram_lane, self.bram_shared)


# (width, depth) configurations of a 36Kb block RAM; each also splits into two 18Kb halves
_BRAM_ASPECTS = ((1, 32768), (2, 16384), (4, 8192), (9, 4096), (18, 2048), (36, 1024), (72, 512))
_BRAM18_ASPECTS = ((1, 16384), (2, 8192), (4, 4096), (9, 2048), (18, 1024), (36, 512))


def bram_blocks(depth: int, width: int, calib: Calibration) -> float:
    """36Kb-equivalent blocks for a depth x width memory, in steps of one half block."""
    if depth <= 0 or width <= 0:
        return 0.0
    best = math.inf
    for aspects, size in ((_BRAM_ASPECTS, 1.0), (_BRAM18_ASPECTS, 0.5)):
        for w, d in aspects:
            if w > calib.bram_port_bits:
                break
            best = min(best, size * -(-width // w) * -(-depth // d))
    return best


def ce_lut(p_in: int, p_out: int, codec: str, in_bits: int, acc_width: int,
           calib: Calibration) -> float:
    f = calib.codec_lut_factor[codec] * in_bits
    per_ce = calib.lut_per_input * p_in * f + calib.lut_per_acc_bit * acc_width + calib.lut_per_ce
    return p_out * per_ce


def dsp_blocks(multipliers: int, weight_bits: int, in_bits: int, calib: Calibration) -> int:
    """DSP slices for fixed-point multipliers; two narrow (<= 8-bit) products share one slice."""
    pack = calib.multipliers_per_dsp if (weight_bits <= 8 and in_bits <= 8) else 1
    return -(-multipliers // pack)


def codec_name(bits: int) -> str:
    return "binary" if bits == 1 else "ternary" if bits == 2 else "fixed"


@dataclass(frozen=True)
class BufferShapes:
    """On-chip memories of one stage lane: reshape banks and the weight ping-pong cache."""

    reshape_banks: int
    reshape_depth: int
    reshape_width: int
    pingpong_depth: int
    pingpong_width: int


def buffer_shapes(stage: FusedStage, p_in: int, p_out: int, in_bits: int, weight_bits: int,
                  calib: Calibration) -> BufferShapes:
    geo = StageGeometry.of(stage)
    if geo.is_conv:
        # one bank per buffered row so rows rotate without moving data;
        # the first stage is fed by DMA and needs no lookahead rows
        ahead = 1 if stage.position is Position.FIRST else calib.reshape_rows
        banks = geo.kh + ahead * geo.stride
        depth = (geo.in_w + 2 * geo.pad) * -(-geo.cin * geo.groups // p_in)
    else:
        banks, depth = 1, 2 * -(-geo.cin // p_in)
    # double-buffered kernels of the CEs in flight
    w_depth = 2 * -(-geo.cin // p_in) * geo.kh * geo.kw
    return BufferShapes(banks, depth, p_in * in_bits, w_depth, p_in * p_out * weight_bits)


def resource_cost(stage: FusedStage, p_in: int, p_out: int, scheme: PrecisionScheme,
                  calib: Calibration | None = None, in_bits: int | None = None) -> StageCost:
    calib = calib or load_calibration()
    geo = StageGeometry.of(stage)
    _check_parallelism(geo, p_in, p_out)
    if in_bits is None:
        from .emu import stage_input_bits
        in_bits = stage_input_bits(stage, scheme)
    wb = scheme.weight_bits(stage)
    codec = codec_name(wb)
    acc = acc_bits_for(stage.reduction_size, in_bits, wb)
    lut = ce_lut(p_in, p_out, codec, in_bits, acc, calib) + calib.lut_per_stage
    dsp = dsp_blocks(p_in * p_out, wb, in_bits, calib) if codec == "fixed" else 0
    buf = buffer_shapes(stage, p_in, p_out, in_bits, wb, calib)
    bram_lane = buf.reshape_banks * bram_blocks(buf.reshape_depth, buf.reshape_width, calib)
    bram_shared = bram_blocks(buf.pingpong_depth, buf.pingpong_width, calib)
    return StageCost(lut=lut, ff=lut * calib.ff_per_lut, dsp=dsp, dsp_ctrl=calib.dsp_per_stage,
                     bram_lane=bram_lane, bram_shared=bram_shared)


# --------------------------------------------------------------- plans

@dataclass(frozen=True)
class StagePlan:
    name: str
    p_in: int
    p_out: int


@dataclass
class PipelinePlan:
    stages: list[StagePlan]
    batch: int
    overhead: float = 0.0
    cycles: list[int] = field(default_factory=list)
    costs: list[StageCost] = field(default_factory=list)
    binding: str = ""

    @property
    def parallelism(self) -> tuple[tuple[int, int], ...]:
        return tuple((s.p_in, s.p_out) for s in self.stages)

    @property
    def bottleneck(self) -> int:
        return max(range(len(self.cycles)), key=lambda i: (self.cycles[i], -i))


@dataclass
class Totals:
    lut: float
    ff: float
    dsp: int
    bram: float


def plan_totals(costs: list[StageCost], batch: int) -> Totals:
    lut = sum(c.lut for c in costs) * batch
    ff = sum(c.ff for c in costs) * batch
    dsp = sum(c.dsp + c.dsp_ctrl for c in costs) * batch
    bram = sum(c.bram_shared for c in costs) + batch * sum(c.bram_lane for c in costs)
    return Totals(lut, ff, dsp, bram)


class _Problem:
    """Cached per-stage options and costs for one (graph, scheme, budget)."""

    def __init__(self, graph: NetworkGraph, scheme: PrecisionScheme, budget: DeviceBudget,
                 calib: Calibration, max_batch: int | None = None,
                 max_parallel: int | None = None):
        if not graph.fused:
            raise ValueError("graph must be fused")
        self.graph, self.scheme, self.budget, self.calib = graph, scheme, budget, calib
        self.max_batch = max_batch or calib.max_batch
        self.geos = [StageGeometry.of(s) for s in graph.stages]
        self.in_bits = [stage_bits(graph, scheme, i)[0] for i in range(len(graph.stages))]
        self.clock = budget.clock * 1e6
        self.avail = {
            "lut": budget.lut * (1 - calib.sdk_reserve),
            "ff": budget.ff,
            "dsp": budget.dsp,
            "bram": budget.bram36 * (1 - calib.sdk_reserve),
        }
        self.volume_fixed = data_volume(graph, scheme, 1)
        cap = max_parallel or calib.max_ce_inputs
        self.options = []
        for geo in self.geos:
            mi, mo = geo.max_parallelism()
            opts = [(1 << a, 1 << b) for a in range(mi.bit_length()) for b in range(mo.bit_length())
                    if (1 << a) * (1 << b) <= cap and (1 << b) <= calib.max_p_out]
            self.options.append(opts)
        self._cost: dict = {}

    def cost(self, i: int, p: tuple[int, int]) -> StageCost:
        key = (i, p)
        c = self._cost.get(key)
        if c is None:
            c = resource_cost(self.graph.stages[i], p[0], p[1], self.scheme, self.calib,
                              in_bits=self.in_bits[i])
            self._cost[key] = c
        return c

    def cycles(self, i: int, p: tuple[int, int]) -> int:
        return compute_cycles(self.geos[i], *p) + self.calib.fill_cycles

    def bandwidth(self, batch: int, speed: float) -> float:
        v = self.volume_fixed
        traffic = v.conv_weight_bits + v.fc_weight_bits / batch + v.input_bits
        return traffic / 8 * speed * self.calib.bandwidth_overhead / 1e9

    def usage(self, costs: list[StageCost], batch: int) -> dict[str, float]:
        t = plan_totals(costs, batch)
        return {"lut": t.lut, "ff": t.ff, "dsp": t.dsp, "bram": t.bram}

    def fits(self, costs: list[StageCost], batch: int) -> str | None:
        """Name of the first violated resource, or None."""
        use = self.usage(costs, batch)
        worst, ratio = None, 1.0
        for k, v in use.items():
            r = v / self.avail[k]
            if r > ratio + 1e-12:
                worst, ratio = k, r
        return worst

    def best_batch(self, ps) -> tuple[int, float, str] | None:
        """(batch, images/s, binding constraint) for a per-lane configuration."""
        costs = [self.cost(i, p) for i, p in enumerate(ps)]
        T = max(self.cycles(i, p) for i, p in enumerate(ps))
        if self.fits(costs, 1) is not None:
            return None
        b = 1
        binding = "batch_limit"
        while True:
            if b + 1 > self.max_batch:
                break
            over = self.fits(costs, b + 1)
            if over is None and self.bandwidth(b + 1, (b + 1) * self.clock / T) > self.budget.bandwidth:
                over = "bandwidth"
            if over is not None:
                binding = over
                break
            b += 1
        speed = b * self.clock / T
        if self.bandwidth(b, speed) > self.budget.bandwidth:
            return None
        return b, speed, binding

    def key(self, ps, result) -> tuple:
        b, speed, _ = result
        lut = sum(self.cost(i, p).lut for i, p in enumerate(ps)) * b
        return (-speed, lut, b, tuple(p[0] * p[1] for p in ps))


def _doublings(prob: _Problem, ps: list, i: int):
    mi, mo = prob.geos[i].max_parallelism()
    p_in, p_out = ps[i]
    cap = prob.calib.max_ce_inputs
    for cand in ((p_in * 2, p_out), (p_in, p_out * 2)):
        if (cand[0] <= mi and cand[1] <= min(mo, prob.calib.max_p_out)
                and cand[0] * cand[1] <= cap):
            yield cand


def _greedy(prob: _Problem) -> list[tuple]:
    """Repeatedly double the parallelism of the bottleneck stage."""
    ps = [(1, 1)] * len(prob.geos)
    visited = []
    while True:
        visited.append(list(ps))
        cyc = [prob.cycles(i, p) for i, p in enumerate(ps)]
        i = max(range(len(ps)), key=lambda j: (cyc[j], -j))
        cands = list(_doublings(prob, ps, i))
        if not cands:
            break
        nxt = min(cands, key=lambda c: (prob.cycles(i, c), prob.cost(i, c).lut, c))
        ps = list(ps)
        ps[i] = nxt
        if prob.fits([prob.cost(j, p) for j, p in enumerate(ps)], 1) is not None:
            break
    return visited


def _cheapest_under(prob: _Problem, i: int, T: int):
    ok = [p for p in prob.options[i] if prob.cycles(i, p) <= T]
    if not ok:
        return None
    return min(ok, key=lambda p: (prob.cost(i, p).vector()[1], prob.cost(i, p).bram_lane,
                                  prob.cost(i, p).lut, prob.cost(i, p).bram_shared, p))


def _refine(prob: _Problem, ps: list) -> list:
    """Re-pick every stage as the cheapest option that keeps the bottleneck."""
    T = max(prob.cycles(i, p) for i, p in enumerate(ps))
    out = []
    for i, p in enumerate(ps):
        q = _cheapest_under(prob, i, T)
        out.append(q if q is not None else p)
    return out


def _pareto(items: list[tuple[tuple, object]]) -> list[tuple[tuple, object]]:
    items = sorted(items, key=lambda t: t[0])
    front: list[tuple[tuple, object]] = []
    for vec, obj in items:
        if any(all(a <= b for a, b in zip(f, vec)) for f, _ in front):
            continue
        front.append((vec, obj))
    return front


def _exhaustive(prob: _Problem, limit: int = 200_000):
    """Exact search: for every bottleneck threshold combine per-stage Pareto fronts."""
    thresholds = sorted({prob.cycles(i, p) for i in range(len(prob.geos)) for p in prob.options[i]})
    best = None
    for T in thresholds:
        fronts = []
        for i in range(len(prob.geos)):
            opts = [(prob.cost(i, p).vector(), p) for p in prob.options[i] if prob.cycles(i, p) <= T]
            if not opts:
                break
            fronts.append(_pareto(opts))
        else:
            # merge stage by stage keeping only undominated partial sums
            partial = [((0, 0, 0, 0), ())]
            for front in fronts:
                merged = [(tuple(a + b for a, b in zip(v, fv)), ps + (p,))
                          for v, ps in partial for fv, p in front]
                partial = _pareto(merged)
                if len(partial) > limit:
                    return None
            for _, ps in partial:
                r = prob.best_batch(ps)
                if r is not None:
                    k = prob.key(ps, r)
                    if best is None or k < best[0]:
                        best = (k, list(ps), r)
    return best if best is not None else False


def _local_search(prob: _Problem, ps: list, result) -> tuple[list, tuple]:
    """Accept any single-stage doubling that is feasible and strictly faster."""
    improved = True
    while improved:
        improved = False
        for i in range(len(ps)):
            for cand in _doublings(prob, ps, i):
                trial = list(ps)
                trial[i] = cand
                r = prob.best_batch(trial)
                if r is not None and r[1] > result[1] * (1 + 1e-12):
                    ps, result, improved = trial, r, True
    return ps, result


def balance_pipeline(graph: NetworkGraph, scheme: PrecisionScheme, budget: DeviceBudget,
                     calib: Calibration | None = None, max_batch: int | None = None,
                     exhaustive_stages: int = 6, max_parallel: int | None = None) -> PipelinePlan:
    """Pick power-of-2 CE parallelism per stage and a lane count maximizing images/s."""
    calib = calib or load_calibration()
    prob = _Problem(graph, scheme, budget, calib, max_batch, max_parallel)
    best = None
    if len(graph.stages) <= exhaustive_stages:
        ex = _exhaustive(prob)
        if ex is False:
            raise InfeasibleDesign("even the minimal plan exceeds the device budget")
        if ex is not None:
            best = (ex[0], ex[1], ex[2])
    if best is None:
        for ps in _greedy(prob):
            for cand in (ps, _refine(prob, ps)):
                r = prob.best_batch(cand)
                if r is None:
                    continue
                k = prob.key(cand, r)
                if best is None or k < best[0]:
                    best = (k, list(cand), r)
        if best is None:
            raise InfeasibleDesign("even the minimal plan exceeds the device budget")
        ps, r = _local_search(prob, best[1], best[2])
        best = (prob.key(ps, r), ps, r)
    _, ps, (batch, _, binding) = best
    return make_plan(graph, scheme, ps, batch, calib, binding=binding)


def make_plan(graph: NetworkGraph, scheme: PrecisionScheme, parallelism, batch: int,
              calib: Calibration | None = None, binding: str = "") -> PipelinePlan:
    calib = calib or load_calibration()
    stages, cycles, costs = [], [], []
    for i, (s, (pi, po)) in enumerate(zip(graph.stages, parallelism)):
        in_bits = stage_bits(graph, scheme, i)[0]
        stages.append(StagePlan(s.name, pi, po))
        cycles.append(stage_latency(s, pi, po, 1.0, calib.fill_cycles)[0])
        costs.append(resource_cost(s, pi, po, scheme, calib, in_bits=in_bits))
    return PipelinePlan(stages, batch, calib.sdk_reserve, cycles, costs, binding)


# --------------------------------------------------------------- estimate

@dataclass
class EstimateReport:
    network: str
    scheme: str
    gop: float
    speed: float  # images/s
    perf: float  # TOPS
    bandwidth: float  # GB/s
    lut: float
    ff: float
    bram: float
    dsp: int
    batch: int
    bottleneck: str
    binding: str
    utilization: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def estimate(plan: PipelinePlan, graph: NetworkGraph, scheme: PrecisionScheme,
             budget: DeviceBudget, calib: Calibration | None = None,
             speed: float | None = None, include_sdk: bool = True) -> EstimateReport:
    """Throughput, performance, bandwidth and resources of a plan.

    ``speed`` overrides the modeled images/s (e.g. with a measured value);
    performance and bandwidth are then derived from it.
    """
    calib = calib or load_calibration()
    gop, per_stage = network_gop(graph)
    bott = plan.bottleneck
    if speed is None:
        speed = plan.batch * budget.clock * 1e6 / plan.cycles[bott]
    vol = data_volume(graph, scheme, plan.batch)
    bw = vol.traffic_bytes * speed * calib.bandwidth_overhead / 1e9
    t = plan_totals(plan.costs, plan.batch)
    lut, bram = t.lut, t.bram
    if include_sdk:
        lut += budget.lut * calib.sdk_reserve
        bram += budget.bram36 * calib.sdk_reserve
    rows = []
    for i, (sp, s) in enumerate(zip(plan.stages, graph.stages)):
        c = plan.costs[i]
        rows.append({"stage": sp.name, "p_in": sp.p_in, "p_out": sp.p_out,
                     "cycles": plan.cycles[i], "ops": per_stage[i],
                     "weight_bits": scheme.weight_bits(s), "lut_per_lane": round(c.lut, 1),
                     "dsp_per_lane": c.dsp + c.dsp_ctrl, "bram_lane": c.bram_lane,
                     "bram_shared": c.bram_shared})
    util = {"lut": lut / budget.lut, "ff": t.ff / budget.ff, "bram": bram / budget.bram36,
            "dsp": t.dsp / budget.dsp, "bandwidth": bw / budget.bandwidth}
    return EstimateReport(
        network=graph.name, scheme=scheme.tag, gop=gop, speed=speed,
        perf=speed * gop / 1e3, bandwidth=bw, lut=lut, ff=t.ff, bram=bram, dsp=t.dsp,
        batch=plan.batch, bottleneck=plan.stages[bott].name, binding=plan.binding,
        utilization=util, stages=rows,
    )
