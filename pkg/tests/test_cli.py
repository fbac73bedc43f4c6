import csv
import io

import numpy as np
import pytest

from cutiesim.cli import main
from cutiesim.network import (
    BatchNorm, LayerDesc, LayerKind, NetworkDesc, load_trits, save_network, save_tensor,
)
from cutiesim.trits import PackedTritTensor


def cli(capsys, *args):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def table(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def cifar_prog(tmp_path_factory):
    d = tmp_path_factory.mktemp("prog")
    assert main(["compile", "--cifar10", "-o", str(d / "cifar10.ctprog"),
                 "--write-manifest", str(d / "cifar10.ctnet")]) == 0
    return d


def test_compile_cifar10(capsys, tmp_path):
    code, out, err = cli(capsys, "compile", "--cifar10", "-o", tmp_path / "p.ctprog",
                         "--dump-thresholds", tmp_path / "thr.csv")
    assert code == 0
    rows = table(out)
    assert len(rows) == 9
    assert [int(r["ops"]) for r in rows[:3]] == [297_271_296, 301_989_888, 301_989_888]
    assert "total ops" in err
    thr = table((tmp_path / "thr.csv").read_text())
    assert len(thr) == sum(int(r["out_dims"].split("x")[-1]) for r in rows)
    assert all(int(t["t_lo"]) <= int(t["t_hi"]) for t in thr)


def test_compile_manifest_roundtrip(capsys, cifar_prog, tmp_path):
    code, out, _ = cli(capsys, "compile", cifar_prog / "cifar10.ctnet", "--max-layers", 9)
    assert code == 0 and len(table(out)) == 9
    code, _, err = cli(capsys, "compile", cifar_prog / "cifar10.ctnet")   # 9 layers, limit 8
    assert code == 2 and "exceed" in err


def test_compile_invalid_manifest(capsys, tmp_path):
    w = np.zeros((4, 5, 5, 4), np.int8)
    bn = BatchNorm(np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), np.zeros(4))
    net = NetworkDesc((LayerDesc(LayerKind.CONV, 4, 4, (5, 5), weights=w, bn=bn),), (8, 8, 4))
    save_network(net, tmp_path / "bad.ctnet")
    code, out, err = cli(capsys, "compile", tmp_path / "bad.ctnet")
    assert code == 2 and "violation" in err and out == ""
    code, _, err = cli(capsys, "compile")
    assert code == 2


def test_run_check_match(capsys, cifar_prog):
    code, out, _ = cli(capsys, "run", cifar_prog / "cifar10.ctprog", "--check", "--seed", 0)
    assert code == 0 and out.strip() == "MATCH"


def test_run_outputs_and_trace(capsys, cifar_prog, tmp_path):
    code, out, err = cli(capsys, "run", cifar_prog / "cifar10.ctprog", "--trace", tmp_path / "t.trc")
    assert code == 0
    assert len(out.split()) == 10 and set(out.split()) <= {"-1", "0", "1"}
    cycles = int(err.split(":")[1].split()[0])
    assert (tmp_path / "t.trc").stat().st_size == cycles * 781
    code, ref, _ = cli(capsys, "run", cifar_prog / "cifar10.ctprog", "--reference")
    assert ref == out
    cli(capsys, "run", cifar_prog / "cifar10.ctprog", "-o", tmp_path / "y.cttensor")
    assert " ".join(map(str, load_trits((tmp_path / "y.cttensor")).reshape(-1))) == out.strip()


def test_run_mismatch_exit_3(capsys, tmp_path, monkeypatch):
    from cutiesim import golden
    assert main(["compile", "--cifar10", "-o", str(tmp_path / "p.ctprog")]) == 0
    capsys.readouterr()

    exact = golden.run_program

    def flipped(prog, x):
        out = exact(prog, x)
        flat = out.reshape(-1)
        flat[0] = -flat[0] if flat[0] else 1
        return out

    monkeypatch.setattr(golden, "run_program", flipped)
    code, out, _ = cli(capsys, "run", tmp_path / "p.ctprog", "--check")
    assert code == 3 and out.startswith("MISMATCH at (0, 0, 0)")


def test_run_errors(capsys, cifar_prog, tmp_path):
    assert cli(capsys, "run", tmp_path / "missing.ctprog")[0] == 2
    assert cli(capsys, "run", cifar_prog / "cifar10.ctprog", tmp_path / "missing.cttensor")[0] == 2
    code, _, err = cli(capsys, "run", cifar_prog / "cifar10.ctprog", "--max-layers", 8)
    assert code == 4 and "capacity" in err
    code, _, _ = cli(capsys, "run", cifar_prog / "cifar10.ctprog", "--fm-width", 16, "--fm-height", 16)
    assert code == 4


def test_run_explicit_input(capsys, cifar_prog, tmp_path):
    x = np.random.default_rng(5).integers(-1, 2, (32, 32, 126)).astype(np.int8)
    save_tensor(tmp_path / "x.cttensor", PackedTritTensor.from_array(x))
    code, out, _ = cli(capsys, "run", cifar_prog / "cifar10.ctprog", tmp_path / "x.cttensor", "--check")
    assert code == 0 and out.strip() == "MATCH"


def test_encode(capsys, tmp_path):
    (tmp_path / "px.txt").write_text("110\n")
    code, out, _ = cli(capsys, "encode", tmp_path / "px.txt", "-m", 128)
    assert out.split() == ["-1"] * 18 + ["0"] * 110
    (tmp_path / "z.txt").write_text("0")
    code, out, _ = cli(capsys, "encode", tmp_path / "z.txt", "--kind", "binary", "-m", 4)
    assert out.split() == ["-1"] * 4
    img = np.random.default_rng(0).integers(0, 85, (4, 4, 3))
    np.save(tmp_path / "img.npy", img)
    code, _, _ = cli(capsys, "encode", tmp_path / "img.npy", "--channels", 128, "-o", tmp_path / "e.cttensor")
    t = load_trits((tmp_path / "e.cttensor"))
    assert code == 0 and t.shape == (4, 4, 128) and not t[..., 126:].any()
    img8 = np.random.default_rng(1).integers(0, 256, (4, 4, 3))
    np.save(tmp_path / "img8.npy", img8)
    assert cli(capsys, "encode", tmp_path / "img8.npy")[0] == 2
    code, out, _ = cli(capsys, "encode", tmp_path / "img8.npy", "--from-8bit")
    from cutiesim.workloads import encode_image
    assert code == 0 and out.split() == [str(v) for v in encode_image(img8, "ternary").reshape(-1)]
    (tmp_path / "bad.txt").write_text("300")
    assert cli(capsys, "encode", tmp_path / "bad.txt", "-m", 128)[0] == 2
    assert cli(capsys, "encode", tmp_path / "nope.txt")[0] == 2


def test_report(capsys, cifar_prog, tmp_path):
    code, out, _ = cli(capsys, "report", cifar_prog / "cifar10.ctprog", "--activity", "--iterative", 2)
    rows = table(out)
    assert code == 0 and [r["mode"] for r in rows] == ["unrolled", "iterative(2)"]
    assert int(rows[1]["adder_bits"]) > int(rows[0]["adder_bits"])

    code, out, _ = cli(capsys, "report", cifar_prog / "cifar10.ctprog", "--energy",
                       "--binary-discount", "--output-dir", tmp_path / "rep", "--plot")
    assert code == 0 and out == ""
    energy = table((tmp_path / "rep" / "energy.csv").read_text())
    items = ["compute_multiplier", "compute_popcount", "fm_memory", "weight_memory", "codec", "io", "static"]
    body, total = energy[:-1], energy[-1]
    assert len(body) == 9 and total["layer"] == "total"
    assert float(total["total"]) == pytest.approx(sum(float(r["total"]) for r in body), rel=1e-5)
    for r in energy:
        assert float(r["total"]) == pytest.approx(sum(float(r[k]) for k in items), rel=1e-5)
    disc = table((tmp_path / "rep" / "energy_binary_discount.csv").read_text())
    assert float(disc[-1]["total"]) < float(total["total"])
    assert float(disc[-1]["codec"]) == 0.0
    assert (tmp_path / "rep" / "energy.png").stat().st_size > 0


def test_report_cost_model_precedence(capsys, cifar_prog, tmp_path, monkeypatch):
    (tmp_path / "zero.cost").write_text("static_pj_per_cycle = 0\n")
    (tmp_path / "cfg.txt").write_text(f"cost_model = {tmp_path / 'zero.cost'}\n")
    monkeypatch.setenv("CUTIE_COST_MODEL", str(tmp_path / "zero.cost"))
    _, out, _ = cli(capsys, "report", cifar_prog / "cifar10.ctprog", "--energy")
    assert float(table(out)[-1]["static"]) == 0.0
    monkeypatch.delenv("CUTIE_COST_MODEL")
    _, out, _ = cli(capsys, "report", cifar_prog / "cifar10.ctprog", "--energy")
    assert float(table(out)[-1]["static"]) > 0.0
    _, out, _ = cli(capsys, "report", cifar_prog / "cifar10.ctprog", "--energy", "--config", tmp_path / "cfg.txt")
    assert float(table(out)[-1]["static"]) == 0.0
    from cutiesim.activity import DEFAULT_COST_FILE
    _, out, _ = cli(capsys, "report", cifar_prog / "cifar10.ctprog", "--energy", "--config", tmp_path / "cfg.txt",
                    "--cost-model", DEFAULT_COST_FILE)
    assert float(table(out)[-1]["static"]) > 0.0


def test_config_precedence(capsys, cifar_prog, tmp_path):
    (tmp_path / "cfg.txt").write_text("max_layers = 8\nseed = 3\n")
    assert cli(capsys, "run", cifar_prog / "cifar10.ctprog", "--config", tmp_path / "cfg.txt")[0] == 4
    code, out, _ = cli(capsys, "run", cifar_prog / "cifar10.ctprog", "--config", tmp_path / "cfg.txt",
                       "--max-layers", 9)
    assert code == 0
    _, seed3, _ = cli(capsys, "run", cifar_prog / "cifar10.ctprog", "--seed", 3)
    assert out == seed3
    (tmp_path / "bad.txt").write_text("colour = red\n")
    assert cli(capsys, "run", cifar_prog / "cifar10.ctprog", "--config", tmp_path / "bad.txt")[0] == 2


def test_tiling(capsys, tmp_path):
    code, out, _ = cli(capsys, "tiling", "--fm", "32x32", "64x64", "96x96")
    rows = table(out)
    assert code == 0 and len(rows) == 6
    r32 = [r for r in rows if r["fm"] == "32x32"]
    assert all(float(r["feature_energy_uj"]) == pytest.approx(4.19, abs=0.01) for r in r32)
    for fm in ("64x64", "96x96"):
        by = {r["strategy"]: float(r["total_energy_uj"]) for r in rows if r["fm"] == fm}
        assert by["depth_first"] < by["layer_first"]
    assert cli(capsys, "tiling", "--tile", "64x64")[0] == 2
    code, _, _ = cli(capsys, "tiling", "--output-dir", tmp_path, "--plot", "--plot-format", "svg")
    assert code == 0 and (tmp_path / "tiling.csv").exists() and (tmp_path / "tiling.svg").exists()


def test_quantize(capsys, tmp_path):
    code, out, _ = cli(capsys, "quantize", "--gaussian", "64x3x3x64", "--layers", 2,
                       "--strategy", "magnitude,magnitude_inverse", "--schedule", "0.2,0.6,1.0")
    rows = table(out)
    assert code == 0 and len(rows) == 2 * 2 * 3
    for layer in ("gaussian0", "gaussian1"):
        step1 = {r["strategy"]: float(r["sparsity"]) for r in rows if r["layer"] == layer and r["step"] == "1"}
        assert step1["magnitude_inverse"] > step1["magnitude"]
    assert cli(capsys, "quantize", "--gaussian", "4x4", "--strategy", "random")[0] == 2
    assert cli(capsys, "quantize", "--gaussian", "4x4", "--schedule", "0.5,0.2,1.0")[0] == 2
    assert cli(capsys, "quantize")[0] == 2


def test_quantize_files(capsys, tmp_path):
    w = np.random.default_rng(1).normal(size=(8, 3, 3, 8))
    save_tensor(tmp_path / "w.cttensor", w)
    code, _, _ = cli(capsys, "quantize", tmp_path / "w.cttensor", "--output-dir", tmp_path / "q", "--plot")
    assert code == 0
    t = load_trits((tmp_path / "q" / "w.magnitude_inverse.cttensor"))
    assert t.shape == w.shape and set(np.unique(t)) <= {-1, 0, 1}
    assert len(table((tmp_path / "q" / "quantize.csv").read_text())) == 8
    assert (tmp_path / "q" / "quantize.png").exists()


@pytest.mark.parametrize("argv", [
    ["tiling", "--fm", "64x64"],
    ["quantize", "--gaussian", "16x16", "--seed", "4"],
    ["run", "{prog}", "--seed", "7"],
    ["report", "{prog}", "--iterative", "4"],
])
def test_deterministic(capsys, cifar_prog, argv):
    argv = [a.format(prog=cifar_prog / "cifar10.ctprog") for a in argv]
    first = cli(capsys, *argv)
    assert first[0] == 0
    assert cli(capsys, *argv) == first


def test_bad_subcommand(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
