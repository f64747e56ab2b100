import json
import subprocess
import sys

import numpy as np
import pytest

from decentsim import cli
from decentsim import topology as topo
from decentsim.metrics import MetricsTrace


def call(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, json.loads(out.out) if out.out.strip() else None, out.err


# -- spectrum -------------------------------------------------------------------


@pytest.mark.parametrize("n,want", [(32, 78.0652), (64, 311.5088)])
def test_spectrum_cycles(capsys, n, want):
    code, data, _ = call(capsys, "spectrum", "--topo", "cycle", "--n", str(n))
    assert code == 0 and data["inv_gap"] == pytest.approx(want, abs=1e-3)


def test_spectrum_convex_target(capsys):
    code, data, _ = call(capsys, "spectrum", "--topo", "convex", "--n", "4", "--beta", "0.9")
    assert code == 0 and data["beta"] == pytest.approx(0.9, abs=1e-9)


def test_spectrum_from_matrix(capsys, tmp_path):
    path = tmp_path / "w.csv"
    np.savetxt(path, topo.build_cycle(6).w, delimiter=",")
    code, data, _ = call(capsys, "spectrum", "--matrix", str(path))
    assert code == 0 and data["n"] == 6


# -- run ------------------------------------------------------------------------


def test_run_writes_trace_and_manifest(capsys, tmp_path):
    code, data, err = call(capsys, "run", "--topo", "cycle", "--n", "8", "--alg", "mg_d2ed", "--T", "200",
                           "--gamma", "0.005", "--d", "3", "--M", "20", "--sigma-h", "1", "--out", str(tmp_path))
    assert code == 0 and "final mse" in err
    trace = MetricsTrace.from_csv(data["trace"])
    manifest = json.loads(open(data["manifest"]).read())
    R = topo.multi_gossip_rounds(8, topo.build_cycle(8).beta)
    assert manifest["resolved"]["R"] == R
    assert trace.comm[-1] == (200 // R) * R


def test_run_zero_budget(capsys, tmp_path):
    code, data, _ = call(capsys, "run", "--n", "4", "--T", "0", "--d", "3", "--M", "10", "--out", str(tmp_path))
    assert code == 0 and data["records"] == 1


def test_run_divergence_exit_code(capsys, tmp_path):
    code, data, _ = call(capsys, "run", "--n", "4", "--alg", "dsgd", "--gamma", "1e4", "--T", "500",
                         "--d", "3", "--M", "10", "--sigma-h", "1", "--out", str(tmp_path))
    assert code == cli.EXIT_DIVERGED and data["diverged"]
    assert len(MetricsTrace.from_csv(data["trace"])) >= 1


def test_run_output_env_and_plot(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    code, data, _ = call(capsys, "run", "--n", "4", "--T", "50", "--d", "3", "--M", "10", "--plot",
                         "--name", "demo")
    assert code == 0
    assert (tmp_path / "envout" / "demo.csv").exists()
    png = tmp_path / "envout" / "demo.png"
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_run_is_byte_reproducible(capsys, tmp_path):
    argv = ["run", "--n", "6", "--alg", "d2ed", "--T", "100", "--d", "3", "--M", "20", "--sigma-h", "1",
            "--sigma-s", "0.5", "--seed", "4"]
    call(capsys, *argv, "--out", str(tmp_path / "a"))
    call(capsys, *argv, "--out", str(tmp_path / "b"))
    for suffix in ("csv", "json"):
        a = next((tmp_path / "a").glob(f"*.{suffix}")).read_bytes()
        b = next((tmp_path / "b").glob(f"*.{suffix}")).read_bytes()
        assert a == b


def test_variance_flag_equals_std_flag(capsys, tmp_path):
    common = ["run", "--n", "4", "--T", "20", "--d", "3", "--M", "10"]
    call(capsys, *common, "--sigma-h2", "0.25", "--out", str(tmp_path / "v"), "--name", "x")
    call(capsys, *common, "--sigma-h", "0.5", "--out", str(tmp_path / "s"), "--name", "x")
    assert (tmp_path / "v" / "x.csv").read_bytes() == (tmp_path / "s" / "x.csv").read_bytes()


def test_gen_then_load(capsys, tmp_path):
    code, data, _ = call(capsys, "gen", "--n", "4", "--d", "3", "--M", "10", "--sigma-h", "1", "--out", str(tmp_path))
    assert code == 0
    code, run_data, _ = call(capsys, "run", "--n", "4", "--load", data["path"], "--T", "10", "--out", str(tmp_path))
    assert code == 0
    manifest = json.loads(open(run_data["manifest"]).read())
    assert manifest["problem"]["hash"] == data["digest"]


# -- usage errors -----------------------------------------------------------------


def test_unknown_flag_exits_64(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--bogus"])
    assert exc.value.code == cli.EXIT_USAGE


def test_missing_n_exits_64(capsys):
    assert cli.main(["spectrum", "--topo", "cycle"]) == cli.EXIT_USAGE


def test_unknown_algorithm_exits_64(capsys, tmp_path):
    assert cli.main(["run", "--n", "4", "--alg", "adam", "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_negative_variance_exits_64(capsys, tmp_path):
    assert cli.main(["run", "--n", "4", "--sigma-h2", "-1", "--out", str(tmp_path)]) == cli.EXIT_USAGE


# -- verify ---------------------------------------------------------------------


def test_verify_complete_graph_passes(capsys):
    code, data, _ = call(capsys, "verify", "--topo", "complete", "--n", "4")
    assert code == 0 and data["passed"]


def test_verify_default_suite_fails_only_on_contraction(capsys):
    code, data, _ = call(capsys, "verify")
    assert code == cli.EXIT_VERIFY
    failing = {c["check"] for c in data["checks"] if not c["passed"]}
    assert failing == {"contraction"}


def test_verify_subset_passes(capsys):
    code, data, _ = call(capsys, "verify", "--checks", "decomposition,optimality,clamp")
    assert code == 0 and data["passed"]


def test_verify_corrupt_matrix(capsys, tmp_path):
    w = topo.build_cycle(6).w.copy()
    w[0, 1] += 0.05
    path = tmp_path / "bad.csv"
    np.savetxt(path, w, delimiter=",")
    code, data, _ = call(capsys, "verify", "--matrix", str(path))
    assert code == cli.EXIT_VERIFY
    assert data["checks"][0]["check"] == "mixing_invariants" and not data["checks"][0]["passed"]


def test_verify_unknown_check(capsys):
    assert cli.main(["verify", "--checks", "nope"]) == cli.EXIT_USAGE


# -- sweep ------------------------------------------------------------------------


def test_sweep_summary_and_plots(capsys, tmp_path):
    code, data, _ = call(capsys, "sweep", "--algs", "psgd,d2ed", "--ns", "4,6", "--T", "40", "--d", "3",
                         "--M", "10", "--sigma-h", "1", "--seeds", "2", "--plot", "--out", str(tmp_path))
    assert code == 0
    lines = (tmp_path / "sweep" / "summary.csv").read_text().splitlines()
    assert lines[0] == "alg,n,topo,inv_gap,final_mse,t_trans" and len(lines) == 5
    assert (tmp_path / "sweep" / "summary.png").exists()
    assert len(list((tmp_path / "sweep").glob("traces_*.png"))) == 2


def test_sweep_requires_sizes(capsys, tmp_path):
    assert cli.main(["sweep", "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "decentsim.cli", "spectrum", "--n", "32"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["inv_gap"] == pytest.approx(78.0652, abs=1e-3)
    proc = subprocess.run([sys.executable, "-m", "decentsim.cli", "spectrum", "--wat"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 64
