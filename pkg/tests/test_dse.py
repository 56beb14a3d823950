import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lowbit_accel.dse import (Calibration, DeviceBudget, InfeasibleDesign, ParallelismError,
                              StageGeometry, balance_pipeline, bram_blocks, compute_cycles,
                              data_volume, dsp_blocks, estimate, load_calibration,
                              load_device, load_devices, make_plan, network_gop, plan_totals,
                              resource_cost, stage_latency)
from lowbit_accel.fitting import ce_efficiency_ratio
from lowbit_accel.netir import LayerKind, zoo_model
from lowbit_accel.parser import PrecisionScheme, parse_precision_tag

import oracles
from dse_cases import exhaustive_best, loop_cycles, random_case
from nets import chain

CALIB = load_calibration()
ZC706 = load_device("zc706")


@pytest.fixture(scope="module")
def alexnet():
    return zoo_model("AlexNet")


# ---------------------------------------------------------------- presets

def test_zc706_preset():
    assert (ZC706.lut, ZC706.ff, ZC706.bram36, ZC706.dsp, ZC706.clock) == \
        (218600, 437200, 545, 900, 200.0)


def test_unknown_device():
    with pytest.raises(KeyError):
        load_device("vu9p")


def test_device_file(tmp_path):
    p = tmp_path / "d.cfg"
    p.write_text("[tiny]\nlut = 10\nff = 20\nbram36 = 3\ndsp = 4\nbandwidth = 1.5\nclock = 100\n")
    assert load_devices(p)["tiny"] == DeviceBudget("tiny", 10, 20, 3, 4, 1.5, 100.0)


def test_calibration_round_trip():
    assert Calibration.from_dict(CALIB.to_dict()) == CALIB
    assert CALIB.sdk_reserve == 0.11


# ---------------------------------------------------------------- complexity

def test_gop_values():
    assert network_gop(zoo_model("AlexNet"))[0] == pytest.approx(1.45, rel=0.03)
    assert network_gop(zoo_model("VGG16"))[0] == pytest.approx(31.0, rel=0.03)
    assert network_gop(zoo_model("AlexNetExtended"))[0] == pytest.approx(4.22, rel=0.05)


def test_gop_sums_stage_ops(alexnet):
    gop, per = network_gop(alexnet)
    assert per == oracles.alexnet_ops_ref()
    assert gop == sum(per) / 1e9


def test_first_conv_share(alexnet):
    _, per = network_gop(alexnet)
    assert 100 * per[0] / sum(per) == pytest.approx(14.5, abs=0.5)


def test_feature_shares():
    t = PrecisionScheme("x", 8, 2, 2, 2, 2)
    a = data_volume(zoo_model("AlexNet"), t)
    v = data_volume(zoo_model("VGG16"), t)
    assert 100 * a.conv_feature_share == pytest.approx(60, abs=7)
    assert 100 * v.conv_feature_share == pytest.approx(80, abs=5)


def test_feature_bits_by_hand():
    g = chain((2, 4, 4), [(LayerKind.CONV, dict(out_channels=3, kernel_h=3, kernel_w=3, pad=1)),
                          (LayerKind.FC, dict(out_channels=5, relu=False))])
    v = data_volume(g, PrecisionScheme("x", 4, 8, 2, 1, 8))
    assert v.input_bits == 2 * 16 * 8
    assert v.conv_weight_bits == 3 * 2 * 9 * 8
    assert v.fc_weight_bits == 5 * 48 * 8
    assert v.feature_bits == 2 * 16 * 8 + 3 * 16 * 4 + 5 * 16
    assert v.traffic_bits == v.conv_weight_bits + v.fc_weight_bits + v.input_bits


def test_fc_traffic_vanishes_with_batch(alexnet):
    s = parse_precision_tag("Alexnet-8-8218")
    vols = [data_volume(alexnet, s, b) for b in (1, 2, 4, 16, 1024, math.inf)]
    traffic = [v.traffic_bits for v in vols]
    assert all(a > b for a, b in zip(traffic, traffic[1:]))
    assert traffic[-1] == vols[0].conv_weight_bits + vols[0].input_bits
    assert len({v.conv_weight_bits for v in vols}) == 1


@given(st.lists(st.integers(1, 8), min_size=5, max_size=5), st.integers(0, 4),
       st.sampled_from([1, 4, 16]))
def test_fewer_bits_never_more_traffic(bits, field, batch):
    g = zoo_model("AlexNet")
    s = PrecisionScheme("x", *bits)
    names = ["act_bits", "w_first", "w_midconv", "w_midfc", "w_last"]
    cur = getattr(s, names[field])
    if cur == 1:
        return
    lower = dataclasses.replace(s, **{names[field]: cur - 1})
    assert data_volume(g, lower, batch).traffic_bits <= data_volume(g, s, batch).traffic_bits


# ---------------------------------------------------------------- cycles

def test_cycles_exact_division():
    g = chain((64, 1, 1), [(LayerKind.FC, dict(out_channels=16, relu=False))])
    cycles, secs = stage_latency(g.stages[0], 4, 4, 200.0, fill=CALIB.fill_cycles)
    assert cycles == 64 + CALIB.fill_cycles
    assert secs == pytest.approx(cycles / 200e6)


@given(cin=st.integers(1, 64), cout=st.integers(1, 64), a=st.integers(0, 5), b=st.integers(0, 4))
def test_doubling_p_out_halves_cycles(cin, cout, a, b):
    g = chain((cin, 3, 3), [(LayerKind.CONV, dict(out_channels=cout, kernel_h=3, kernel_w=3,
                                                  pad=1))])
    geo = StageGeometry.of(g.stages[0])
    p_in, p_out = 1 << a, 1 << b
    base = compute_cycles(geo, p_in, p_out)
    doubled = compute_cycles(geo, p_in, 2 * p_out)
    per_tile = base // -(-cout // p_out)
    assert doubled == per_tile * -(-cout // (2 * p_out))
    assert base == loop_cycles(g.stages[0], p_in, p_out)


def test_parallelism_must_be_pow2(alexnet):
    with pytest.raises(ParallelismError):
        stage_latency(alexnet.stages[0], 3, 4, 200.0)
    with pytest.raises(ParallelismError):
        stage_latency(alexnet.stages[0], 8, 4, 200.0)  # conv1 has 3 input channels


# ---------------------------------------------------------------- resources

def test_dsp_blocks_example():
    assert dsp_blocks(90, 8, 8, CALIB) == 45
    assert dsp_blocks(90, 16, 8, CALIB) == 90


def test_multiplier_free_stages_use_no_ce_dsp(alexnet):
    s = parse_precision_tag("Alexnet-8-8218")
    for st_ in alexnet.stages:
        c = resource_cost(st_, 1, 1, s, CALIB)
        assert (c.dsp == 0) == (s.weight_bits(st_) <= 2)
        assert c.dsp_ctrl == CALIB.dsp_per_stage


def test_ce_efficiency_ratio():
    assert ce_efficiency_ratio(CALIB, 64, 16) == pytest.approx(1.4, abs=0.05)


@pytest.mark.parametrize("depth,width,blocks", [(512, 72, 1), (1024, 36, 1), (1024, 72, 2),
                                                 (512, 36, 0.5), (100, 8, 0.5), (0, 8, 0),
                                                 (4096, 9, 1), (4097, 9, 1.5)])
def test_bram_blocks(depth, width, blocks):
    assert bram_blocks(depth, width, CALIB) == blocks


@given(st.integers(1, 20000), st.integers(1, 300))
def test_bram_blocks_hold_the_bits(depth, width):
    assert bram_blocks(depth, width, CALIB) * CALIB.bram_bits >= depth * width


def test_cost_grows_with_parallelism(alexnet):
    s = parse_precision_tag("Alexnet-8-8218")
    st_ = alexnet.stage("conv3")
    a = resource_cost(st_, 4, 4, s, CALIB)
    b = resource_cost(st_, 8, 4, s, CALIB)
    c = resource_cost(st_, 4, 8, s, CALIB)
    assert b.lut > a.lut and c.lut > a.lut


# ---------------------------------------------------------------- search

def toy_setup():
    # cost = p_in * p_out LUTs per stage, nothing else binds
    g = chain((64, 1, 1), [(LayerKind.FC, dict(out_channels=16)),
                           (LayerKind.FC, dict(out_channels=16, relu=False))])
    s = PrecisionScheme("toy", 1, 1, 1, 1, 1, input_bits=1, output_bits=1)
    calib = Calibration(lut_per_input=1.0, max_batch=1)
    budget = DeviceBudget("toy", lut=20, ff=10**6, bram36=10**6, dsp=10**6, bandwidth=1e6,
                          clock=1.0)
    return g, s, calib, budget


def test_two_stage_toy_plan():
    g, s, calib, budget = toy_setup()
    assert [st_.macs for st_ in g.stages] == [1024, 256]
    plan = balance_pipeline(g, s, budget, calib)
    assert [p.p_in * p.p_out for p in plan.stages] == [16, 4]
    assert plan.cycles == [64, 64]


@pytest.mark.parametrize("seed", range(25))
def test_search_matches_brute_force(seed):
    graph, scheme, budget = random_case(seed, max_stages=3)
    want, combo, lanes = exhaustive_best(graph, scheme, budget, CALIB)
    if combo is None:
        with pytest.raises(InfeasibleDesign):
            balance_pipeline(graph, scheme, budget, CALIB, max_parallel=64)
        return
    plan = balance_pipeline(graph, scheme, budget, CALIB, max_parallel=64)
    got = estimate(plan, graph, scheme, budget, CALIB).speed
    assert got == pytest.approx(want, rel=1e-12)


def test_infeasible_budget(alexnet):
    tiny = DeviceBudget("tiny", 1000, 1000, 2, 2, 1.0, 100.0)
    with pytest.raises(InfeasibleDesign):
        balance_pipeline(alexnet, parse_precision_tag("Alexnet-8-8218"), tiny, CALIB)


def _lanes(costs, budget, calib):
    b = 0
    for n in range(1, calib.max_batch + 1):
        t = plan_totals(costs, n)
        if (t.lut <= budget.lut * (1 - calib.sdk_reserve) and t.dsp <= budget.dsp
                and t.ff <= budget.ff and t.bram <= budget.bram36 * (1 - calib.sdk_reserve)):
            b = n
        else:
            break
    return b


def assert_no_improving_doubling(graph, scheme, budget, plan, calib):
    speed = plan.batch / max(plan.cycles)
    par = list(plan.parallelism)
    for i, st_ in enumerate(graph.stages):
        c = st_.core
        for cand in ((par[i][0] * 2, par[i][1]), (par[i][0], par[i][1] * 2)):
            try:
                cost = resource_cost(st_, *cand, scheme, calib,
                                     in_bits=scheme.input_bits if i == 0 else scheme.act_bits)
            except Exception:
                continue
            if cand[1] > calib.max_p_out or cand[0] * cand[1] > calib.max_ce_inputs:
                continue
            costs = list(plan.costs)
            costs[i] = cost
            cyc = list(plan.cycles)
            cyc[i] = loop_cycles(st_, *cand) + calib.fill_cycles
            b = _lanes(costs, budget, calib)
            bw = data_volume(graph, scheme, max(b, 1)).traffic_bytes * calib.bandwidth_overhead \
                * b * budget.clock * 1e6 / max(cyc) / 1e9
            if b and bw <= budget.bandwidth:
                assert b / max(cyc) <= speed * (1 + 1e-12), (c.name, cand)


@pytest.mark.parametrize("tag", ["Alexnet-8-8218", "Alexnet-4-8218", "Alexnet-8-8888"])
def test_alexnet_plan_is_pareto_undominated(alexnet, tag):
    s = parse_precision_tag(tag)
    plan = balance_pipeline(alexnet, s, ZC706, CALIB)
    assert_no_improving_doubling(alexnet, s, ZC706, plan, CALIB)


@pytest.mark.parametrize("seed", range(10))
def test_random_plan_is_pareto_undominated(seed):
    graph, scheme, budget = random_case(100 + seed, max_stages=4)
    try:
        plan = balance_pipeline(graph, scheme, budget, CALIB)
    except InfeasibleDesign:
        return
    assert_no_improving_doubling(graph, scheme, budget, plan, CALIB)


def test_plan_invariants(alexnet):
    s = parse_precision_tag("Alexnet-8-8218")
    plan = balance_pipeline(alexnet, s, ZC706, CALIB)
    assert plan.batch >= 1
    for p in plan.stages:
        assert p.p_in & (p.p_in - 1) == 0 and p.p_out & (p.p_out - 1) == 0
    r = estimate(plan, alexnet, s, ZC706, CALIB)
    assert r.lut <= ZC706.lut and r.bram <= ZC706.bram36 and r.dsp <= ZC706.dsp
    assert r.ff <= ZC706.ff and r.bandwidth <= ZC706.bandwidth
    assert plan.cycles[plan.bottleneck] == max(plan.cycles)
    assert r.bottleneck == plan.stages[plan.bottleneck].name


@pytest.mark.parametrize("tag,batch,binding", [("Alexnet-8-8218", 5, "bram"),
                                               ("Alexnet-4-8218", 8, "dsp")])
def test_alexnet_batch_and_binding(alexnet, tag, batch, binding):
    plan = balance_pipeline(alexnet, parse_precision_tag(tag), ZC706, CALIB)
    assert (plan.batch, plan.binding) == (batch, binding)


def test_single_lane_throughput(alexnet):
    plan = balance_pipeline(alexnet, parse_precision_tag("Alexnet-8-8218"), ZC706, CALIB)
    per_lane = ZC706.clock * 1e6 / max(plan.cycles)
    assert per_lane == pytest.approx(171.2, rel=0.15)


@pytest.mark.parametrize("field", ["lut", "bram36", "dsp"])
@pytest.mark.parametrize("seed", range(6))
def test_speed_monotone_in_budget(field, seed):
    graph, scheme, budget = random_case(200 + seed, max_stages=3)
    speeds = []
    for f in (1.0, 1.5, 3.0):
        b = budget.scaled(**{field: f})
        try:
            p = balance_pipeline(graph, scheme, b, CALIB)
            speeds.append(estimate(p, graph, scheme, b, CALIB).speed)
        except InfeasibleDesign:
            speeds.append(0.0)
    assert speeds == sorted(speeds)


@pytest.mark.parametrize("field", ["lut", "bram36", "dsp", "bandwidth"])
def test_alexnet_speed_monotone_in_budget(alexnet, field):
    s = parse_precision_tag("Alexnet-8-8218")
    speeds = []
    for f in (0.8, 1.0, 1.25, 1.5):
        b = ZC706.scaled(**{field: f})
        p = balance_pipeline(alexnet, s, b, CALIB)
        speeds.append(estimate(p, alexnet, s, b, CALIB).speed)
    assert speeds == sorted(speeds)


# ---------------------------------------------------------------- estimate

def test_perf_identity_with_given_speed(alexnet):
    s = parse_precision_tag("Alexnet-8-8218")
    plan = balance_pipeline(alexnet, s, ZC706, CALIB)
    r = estimate(plan, alexnet, s, ZC706, CALIB, speed=856.1)
    assert r.perf == 856.1 * r.gop / 1e3
    assert round(r.perf, 2) == 1.24


def test_batch_linearity(alexnet):
    s = parse_precision_tag("Alexnet-4-8218")
    plan = balance_pipeline(alexnet, s, ZC706, CALIB)
    one = estimate(make_plan(alexnet, s, plan.parallelism, 1, CALIB), alexnet, s, ZC706, CALIB)
    eight = estimate(make_plan(alexnet, s, plan.parallelism, 8, CALIB), alexnet, s, ZC706, CALIB)
    assert eight.speed == 8 * one.speed


def test_report_serializes(alexnet):
    s = parse_precision_tag("Alexnet-8-8218")
    r = estimate(balance_pipeline(alexnet, s, ZC706, CALIB), alexnet, s, ZC706, CALIB)
    d = r.to_dict()
    assert d["batch"] == 5 and len(d["stages"]) == 8
    assert set(d["utilization"]) == {"lut", "ff", "bram", "dsp", "bandwidth"}
