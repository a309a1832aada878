import subprocess
import sys

import numpy as np
import pytest

from qweight.bench import parse_bench_csv
from qweight.cli import main
from qweight.container import HEADER_BYTES, read_packed_layer, save_f32, section_lengths
from qweight.synth import gaussian_weights


@pytest.fixture
def weights(tmp_path):
    path = tmp_path / "w.f32"
    save_f32(path, gaussian_weights(512, 1024, seed=0))
    return path


def quantize(tmp_path, weights, *extra, rows=512, cols=1024):
    out = tmp_path / "layer.qwl"
    code = main(["quantize", "--rows", str(rows), "--cols", str(cols), "--weights", str(weights),
                 "--out", str(out), *extra])
    return code, out


def test_quantize_then_verify(tmp_path, weights, capsys):
    code, out = quantize(tmp_path, weights)
    text = capsys.readouterr().out
    assert code == 0 and out.exists()
    assert "identity" in text  # no calibration given
    assert "formula_mixed             2.839844" in text
    assert main(["verify", "--rows", "512", "--cols", "1024", "--packed", str(out),
                 "--weights", str(weights)]) == 0
    report = capsys.readouterr().out
    assert report.count("PASS") == 5 and "FAIL" not in report


def test_alpha_zero_is_pure_two_bit(tmp_path, weights):
    code, out = quantize(tmp_path, weights, "--alpha", "0")
    layer = read_packed_layer(out)
    assert code == 0 and layer.plan.n4 == 0 and len(layer.secondary) == 0


def test_calibration_file(tmp_path, weights, capsys):
    calib = tmp_path / "h.f32"
    save_f32(calib, np.linspace(0.5, 2, 1024))
    code, _ = quantize(tmp_path, weights, "--calib", str(calib))
    assert code == 0 and "identity" not in capsys.readouterr().out


def test_flipped_bit_fails_naming_section(tmp_path, weights, capsys):
    _, out = quantize(tmp_path, weights)
    blob = bytearray(out.read_bytes())
    lengths = section_lengths(bytes(blob))
    blob[HEADER_BYTES + lengths["plan_bits"] + lengths["plan_perm"] + 100] ^= 0x04
    out.write_bytes(bytes(blob))
    capsys.readouterr()
    code = main(["verify", "--rows", "512", "--cols", "1024", "--packed", str(out), "--weights", str(weights)])
    assert code == 1
    assert "FAIL container [main]" in capsys.readouterr().out


def test_dimension_mismatch(tmp_path, weights, capsys):
    _, out = quantize(tmp_path, weights)
    code = main(["verify", "--rows", "256", "--cols", "1024", "--packed", str(out), "--weights", str(weights)])
    assert code == 2 and "dimension" in capsys.readouterr().err


def test_bad_flags_are_usage_errors(tmp_path, weights):
    assert quantize(tmp_path, weights, "--g1", "32")[0] == 2
    assert quantize(tmp_path, weights, rows=500)[0] == 2
    with pytest.raises(SystemExit) as e:
        main(["quantize", "--rows", "4"])
    assert e.value.code == 2


def test_matvec_outputs(tmp_path, weights):
    _, out = quantize(tmp_path, weights)
    zero = tmp_path / "zero.f32"
    save_f32(zero, np.zeros(1024))
    assert main(["matvec", "--packed", str(out), "--activation", str(zero), "--out", str(tmp_path / "y0")]) == 0
    assert not np.any(np.fromfile(tmp_path / "y0", "<f4"))
    act = tmp_path / "x.f32"
    save_f32(act, np.random.default_rng(1).standard_normal(1024))
    for workers in ("1", "8"):
        main(["matvec", "--packed", str(out), "--activation", str(act), "--workers", workers,
              "--out", str(tmp_path / f"y{workers}")])
    assert (tmp_path / "y1").read_bytes() == (tmp_path / "y8").read_bytes()
    assert len((tmp_path / "y1").read_bytes()) == 512 * 4


def test_bench_csv(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--rows", "64", "--cols", "256", "--repetitions", "2", "--workers", "2",
                 "--out", str(out)]) == 0
    rows = parse_bench_csv(out.read_text())
    assert len(rows) == 2 and rows[0].rows == 64
    assert capsys.readouterr().out.startswith("rows,cols,avg_bit,workers,mode,wall_ns,")


def test_bench_needs_a_layer():
    with pytest.raises(SystemExit) as e:
        main(["bench"])
    assert e.value.code == 2


def test_report(tmp_path, weights, capsys):
    _, out = quantize(tmp_path, weights)
    rep = tmp_path / "rep"
    assert main(["report", "--rows", "512", "--cols", "1024", "--packed", str(out), "--weights", str(weights),
                 "--bins", "8", "--out", str(rep)]) == 0
    for name in ("group_range.csv", "error_stats.csv", "bits.csv"):
        assert (rep / name).exists()


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        main(["synth", "--rows", "8", "--cols", "64", "--seed", "5", "--planted-ratio", "0.01",
              "--out", str(tmp_path / name)])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_console_script_exit_code(tmp_path):
    res = subprocess.run([sys.executable, "-m", "qweight.cli", "verify", "--rows", "1", "--cols", "1",
                          "--packed", str(tmp_path / "missing"), "--weights", "x"],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "error" in res.stderr
