import hashlib

import numpy as np
import pytest

from vmamba.analysis import write_ppm
from vmamba.cli import BENCH_COLUMNS, linear_fit, main
from vmamba.tensor import load_bundle

MICRO = "dims = 4, 8, 16, 32\nlayers = 1, 0, 0, 0\nnum_classes = 2\n"
ERF_GOLDEN_SHA256 = "fe9bd865e291e2302727a0457cf76c1a8349a38e51031f6ae4b6d7a20282ebc0"


@pytest.fixture
def micro(tmp_path):
    cfg = tmp_path / "micro.cfg"
    cfg.write_text(MICRO)
    img = tmp_path / "img.ppm"
    write_ppm(np.random.default_rng(0).uniform(size=(3, 32, 32)), img)
    w = tmp_path / "w.vmtb"
    assert main(["export", "--config", str(cfg), "--seed", "1", "--dtype", "f64", "--out", str(w)]) == 0
    return tmp_path, cfg, img, w


def test_verify_scan_equivalence(capsys):
    assert main(["verify", "--suite", "scan-equivalence", "--dtype", "f64", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_verify_counts_reports_target(capsys):
    assert main(["verify", "--suite", "counts"]) == 0
    out = capsys.readouterr().out
    assert "VMamba-T params 30.26M vs 30.2M" in out


def test_verify_unknown_suite(capsys):
    assert main(["verify", "--suite", "nonsense"]) == 2
    assert "unknown suite" in capsys.readouterr().err


def test_verify_failure_exit_code(monkeypatch, capsys):
    from vmamba import verify

    def failing(seed=0, dtype="f64"):
        r = verify.Report("counts")
        r.add("forced", False, 1.0, "== 0")
        return r

    monkeypatch.setitem(verify.SUITES, "counts", failing)
    assert main(["verify", "--suite", "counts"]) == 1
    assert "FAIL  forced" in capsys.readouterr().out


def test_verify_report_to_file(tmp_path, capsys):
    out = tmp_path / "r.txt"
    assert main(["verify", "--suite", "zoh", "--seed", "3", "--out", str(out)]) == 0
    assert out.read_text() == capsys.readouterr().out


def test_verify_same_seed_same_report(capsys):
    main(["verify", "--suite", "gradients", "--seed", "11"])
    a = capsys.readouterr().out
    main(["verify", "--suite", "gradients", "--seed", "11"])
    assert capsys.readouterr().out == a


@pytest.mark.parametrize("argv", [["verify"], ["bench"], ["frobnicate"], ["verify", "--suite", "zoh", "--dtype", "f16"]])
def test_argparse_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_bench_csv(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--config", str(_toy(tmp_path)), "--resolutions", "224,288,384,512", "--reps", "5",
                 "--threads", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(BENCH_COLUMNS)
    rows = [l.split(",") for l in lines[1:] if not l.startswith("#")]
    assert [int(r[0]) for r in rows] == [224, 288, 384, 512]
    assert [int(r[1]) for r in rows] == [56 * 56, 72 * 72, 96 * 96, 128 * 128]
    assert all(float(r[2]) > 0 for r in rows)
    assert int(rows[1][4]) / int(rows[0][4]) == pytest.approx((288 / 224) ** 2, rel=1e-3)
    assert any(l.startswith("# r2 = ") for l in lines)
    assert any(l.startswith("# median_ns") for l in lines)


def _toy(tmp_path):
    p = tmp_path / "toy.cfg"
    p.write_text("dims = 4, 8, 16, 32\nlayers = 1, 1, 0, 0\nnum_classes = 2\n")
    return p


@pytest.mark.parametrize("extra", [["--reps", "4"], ["--resolutions", "100"], ["--resolutions", "a,b"],
                                   ["--threads", "0"]])
def test_bench_usage_errors(tmp_path, extra, capsys):
    assert main(["bench", "--config", str(_toy(tmp_path)), "--resolutions", "64"] + extra) == 2


def test_linear_fit():
    slope, icpt, r2 = linear_fit([1, 2, 3], [3, 5, 7])
    assert slope == pytest.approx(2) and icpt == pytest.approx(1) and r2 == pytest.approx(1)


@pytest.mark.parametrize("name,target", [("vmamba-t", 30.2), ("vmamba-s", 50.1), ("vanilla-t", 22.9)])
def test_count(name, target, capsys):
    assert main(["count", "--config", name]) == 0
    out = capsys.readouterr().out
    total = [l for l in out.splitlines() if l.startswith("total,")][0]
    params = int(total.split(",")[1])
    assert abs(params / 1e6 - target) / target < 0.02
    assert "stage2" in out


def test_count_config_file(tmp_path, capsys):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("dims=96,192,384,768\nlayers=2,2,8,2\n")
    csv = tmp_path / "c.csv"
    assert main(["count", "--config", str(cfg), "--out", str(csv)]) == 0
    assert csv.read_text().splitlines()[0] == "component,params,flops"


@pytest.mark.parametrize("text", ["dims = 1,2\n", "nonsense\n"])
def test_count_bad_config(tmp_path, text, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert main(["count", "--config", str(cfg)]) == 2
    assert main(["count", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_export_deterministic(tmp_path):
    cfg = _toy(tmp_path)
    a, b = tmp_path / "a.vmtb", tmp_path / "b.vmtb"
    for p in (a, b):
        assert main(["export", "--config", str(cfg), "--seed", "4", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_export_zero_scheme_a_log(tmp_path):
    out = tmp_path / "z.vmtb"
    assert main(["export", "--config", str(_toy(tmp_path)), "--scheme", "zero", "--out", str(out)]) == 0
    b = load_bundle(out)
    a_logs = [n for n in b.names() if n.endswith("A_log")]
    assert a_logs and all((b[n] == 0).all() for n in a_logs)
    assert all((b[n] == 1).all() for n in b.names() if n.endswith(".D"))


def test_export_rand_vs_zero_differ_only_in_a_log(tmp_path):
    cfg = _toy(tmp_path)
    paths = {}
    for scheme in ("rand", "zero"):
        paths[scheme] = tmp_path / f"{scheme}.vmtb"
        main(["export", "--config", str(cfg), "--scheme", scheme, "--seed", "2", "--out", str(paths[scheme])])
    r, z = load_bundle(paths["rand"]), load_bundle(paths["zero"])
    assert r.names() == z.names()
    differ = [n for n in r.names() if r[n].tobytes() != z[n].tobytes()]
    assert differ and all(n.endswith("A_log") for n in differ)


def test_export_bad_path(tmp_path):
    assert main(["export", "--config", str(_toy(tmp_path)), "--out", str(tmp_path / "no" / "x.vmtb")]) == 2


def test_analyze_erf_golden(micro):
    tmp, cfg, img, w = micro
    runs = []
    for k in range(2):
        out = tmp / f"o{k}"
        assert main(["analyze", "--config", str(cfg), "--weights", str(w), "--image", str(img), "--kind", "erf",
                     "--out", str(out)]) == 0
        runs.append((out / "erf.pgm").read_bytes())
    assert runs[0] == runs[1]
    assert hashlib.sha256(runs[0]).hexdigest() == ERF_GOLDEN_SHA256


def test_analyze_activation_first_token(micro):
    tmp, cfg, img, w = micro
    out = tmp / "act"
    assert main(["analyze", "--config", str(cfg), "--weights", str(w), "--image", str(img), "--kind", "activation",
                 "--layer", "0", "--query", "0,0", "--out", str(out)]) == 0
    path0 = np.loadtxt(out / "activation_L0_q0x0_path0.csv", delimiter=",")
    assert np.count_nonzero(path0) == 1 and path0[0, 0] > 0
    assert (out / "activation_L0_q0x0.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")


def test_analyze_diagonal(micro):
    tmp, cfg, img, w = micro
    out = tmp / "diag"
    assert main(["analyze", "--config", str(cfg), "--weights", str(w), "--image", str(img), "--kind", "diagonal",
                 "--matrix", "qk", "--out", str(out)]) == 0
    vals = np.loadtxt(out / "diagonal_L0.csv", delimiter=",")
    assert vals.shape == (8, 8) and vals.max() == 1.0


@pytest.mark.parametrize("extra", [["--kind", "activation", "--query", "8,0"], ["--kind", "activation", "--query", "1"],
                                   ["--kind", "diagonal", "--layer", "3"], ["--kind", "erf", "--epsilon", "0"]])
def test_analyze_usage_errors(micro, extra):
    tmp, cfg, img, w = micro
    assert main(["analyze", "--config", str(cfg), "--weights", str(w), "--image", str(img),
                 "--out", str(tmp / "x")] + extra) == 2


def test_analyze_bad_files(micro):
    tmp, cfg, img, w = micro
    bad = tmp / "bad.vmtb"
    bad.write_bytes(w.read_bytes()[:-1] + b"\0")
    base = ["analyze", "--config", str(cfg), "--kind", "diagonal", "--out", str(tmp / "x")]
    assert main(base + ["--weights", str(bad), "--image", str(img)]) == 2
    assert main(base + ["--weights", str(tmp / "nope"), "--image", str(img)]) == 2
    assert main(base + ["--weights", str(w), "--image", str(tmp / "nope.ppm")]) == 2
    (tmp / "txt.ppm").write_bytes(b"hello")
    assert main(base + ["--weights", str(w), "--image", str(tmp / "txt.ppm")]) == 2
    other = tmp / "other.cfg"
    other.write_text(MICRO.replace("num_classes = 2", "num_classes = 3"))
    assert main(["analyze", "--config", str(other), "--kind", "diagonal", "--weights", str(w), "--image", str(img),
                 "--out", str(tmp / "x")]) == 2
