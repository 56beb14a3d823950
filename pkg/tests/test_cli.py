import json
import subprocess
import sys

import numpy as np
import pytest

from lowbit_accel import formats
from lowbit_accel.cli import EXIT_INFEASIBLE, EXIT_IO, EXIT_OK, EXIT_PARSE, EXIT_USAGE, main
from lowbit_accel.emit import AcceleratorConfig

from nets import TINY_TEXT, identity_1x1_text


@pytest.fixture
def tiny_files(tmp_path):
    model = tmp_path / "tiny.elbm"
    model.write_text(TINY_TEXT)
    img = tmp_path / "img.raw"
    formats.write_image(img, np.random.default_rng(0).integers(0, 256, (3, 12, 12),
                                                                dtype=np.uint8))
    return tmp_path, model, img


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_parse(capsys, tiny_files):
    _, model, _ = tiny_files
    code, out, _ = run(capsys, "parse", "--model", model, "--json")
    assert code == EXIT_OK
    d = json.loads(out)
    assert [s["name"] for s in d["stages"]] == ["c1", "c2", "fc"]
    assert d["stages"][0]["position"] == "First"


def test_parse_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.elbm"
    bad.write_text(identity_1x1_text().replace("kernel_size: 1", "kernel_size: 1 stride: 0"))
    code, _, err = run(capsys, "parse", "--model", bad, "--json")
    assert code == EXIT_PARSE
    e = json.loads(err)
    assert e["exit_code"] == EXIT_PARSE and "stride" in e["message"]


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE
    assert run(capsys, "explore", "--model", "zoo:AlexNet")[0] == EXIT_USAGE  # no scheme
    assert run(capsys, "explore", "--model", "zoo:AlexNet", "--scheme", "Alexnet-8-8218",
               "--device", "nosuch")[0] == EXIT_USAGE
    assert run(capsys, "parse", "--model", "zoo:NoSuchNet")[0] == EXIT_USAGE


def test_bad_tag_is_parse_error(capsys):
    assert run(capsys, "analyze", "--model", "zoo:AlexNet", "--scheme", "Alexnet-8-821")[0] \
        == EXIT_PARSE


def test_missing_file_is_io_error(capsys, tmp_path):
    code, _, _ = run(capsys, "infer", "--model", "zoo:AlexNet", "--weights",
                     tmp_path / "none.elbq", "--image", tmp_path / "none.raw",
                     "--out", tmp_path / "o")
    assert code == EXIT_IO


def test_infeasible_exit_code(capsys, tmp_path):
    dev = tmp_path / "d.cfg"
    dev.write_text("[tiny]\nlut = 100\nff = 100\nbram36 = 1\ndsp = 1\nbandwidth = 1\nclock = 100\n")
    code, _, _ = run(capsys, "explore", "--model", "zoo:AlexNet", "--scheme", "Alexnet-8-8218",
                     "--device", "tiny", "--devices", dev)
    assert code == EXIT_INFEASIBLE


def test_explore_alexnet(capsys):
    code, out, _ = run(capsys, "explore", "--model", "alexnet", "--scheme", "Alexnet-8-8218",
                       "--device", "zc706")
    assert code == EXIT_OK
    assert "batch 5" in out and "GB/s" in out
    code, out, _ = run(capsys, "explore", "--model", "alexnet", "--scheme", "Alexnet-8-8218",
                       "--json")
    d = json.loads(out)
    assert d["batch"] == 5 and d["bandwidth"] > 0
    assert d["perf"] == d["speed"] * d["gop"] / 1e3


def test_analyze(capsys):
    code, out, _ = run(capsys, "analyze", "--model", "zoo:AlexNet", "--scheme", "Alexnet-8-8888",
                       "--json")
    d = json.loads(out)
    assert code == EXIT_OK
    assert d["gop"] == pytest.approx(1.45, rel=0.03)
    assert d["acc_bits"]["conv1"] == 25


def test_report_rows(capsys):
    code, out, _ = run(capsys, "report", "--json")
    assert code == EXIT_OK
    rows = json.loads(out)["rows"]
    assert len(rows) == 5
    for r in rows:
        rep = r["report"]
        assert rep["perf"] == rep["speed"] * rep["gop"] / 1e3
        assert r["reference"] is not None
    code, out, _ = run(capsys, "report")
    assert len(out.strip().splitlines()) == 6


def test_report_custom_schemes(capsys):
    code, out, _ = run(capsys, "report", "--model", "zoo:AlexNet", "--schemes",
                       "Alexnet-8-8218,Alexnet-2-8218", "--json")
    rows = json.loads(out)["rows"]
    assert [r["report"]["scheme"] for r in rows] == ["Alexnet-8-8218", "Alexnet-2-8218"]


def test_identity_quantize_infer(capsys, tmp_path):
    c, h, w = 2, 4, 4
    model = tmp_path / "id.elbm"
    model.write_text(identity_1x1_text(c, h, w))
    formats.write_weights(tmp_path / "id.elbw", {"id": {"weight": np.eye(c, dtype=np.float32)}})
    image = np.random.default_rng(2).integers(0, 256, (c, h, w), dtype=np.uint8)
    image.flat[0] = 255
    formats.write_image(tmp_path / "img.raw", image)
    q = tmp_path / "id.elbq"
    assert run(capsys, "quantize", "--model", model, "--weights", tmp_path / "id.elbw",
               "--scheme", "id-8-8888", "--image", tmp_path / "img.raw", "--out", q)[0] == 0
    out = tmp_path / "logits.bin"
    assert run(capsys, "infer", "--model", model, "--weights", q, "--image",
               tmp_path / "img.raw", "--out", out)[0] == 0
    qm = formats.read_qmodel(q)
    logits = formats.load_logits(out.read_bytes())
    np.testing.assert_array_equal(qm.stages[-1].out_fmt.dequantize(logits), image.reshape(-1))


def test_quantize_emit_infer_replay(capsys, tiny_files):
    tmp, model, img = tiny_files
    q, cfg = tmp / "m.elbq", tmp / "cfg.json"
    assert run(capsys, "quantize", "--model", model, "--random-weights", 4, "--scheme",
               "tiny-4-8218", "--out", q)[0] == 0
    assert run(capsys, "emit", "--model", model, "--weights", q, "--scheme", "tiny-4-8218",
               "--out", cfg)[0] == 0
    a, b = tmp / "a.bin", tmp / "b.bin"
    assert run(capsys, "infer", "--config", cfg, "--weights", q, "--image", img, "--out", a)[0] == 0
    assert run(capsys, "infer", "--model", model, "--weights", q, "--image", img,
               "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    side = json.loads((tmp / "a.bin.json").read_text())
    assert side["argmax"] == int(np.argmax(formats.load_logits(a.read_bytes())))
    conf = AcceleratorConfig.loads(cfg.read_text())
    assert conf.precision == "tiny-4-8218"


def test_scheme_mismatch_with_elbq(capsys, tiny_files):
    tmp, model, img = tiny_files
    q = tmp / "m.elbq"
    run(capsys, "quantize", "--model", model, "--random-weights", 4, "--scheme", "tiny-4-8218",
        "--out", q)
    code, _, _ = run(capsys, "emit", "--model", model, "--weights", q, "--scheme",
                     "tiny-4-8228", "--out", tmp / "c.json")
    assert code == EXIT_PARSE


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "lowbit_accel.cli", "analyze", "--model",
                        "zoo:VGG16"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "VGG16" in r.stdout
