import json
import subprocess
import sys

import pytest

from permfl import config as cfgmod
from permfl.cli import main
from permfl.config import ConfigError, ExperimentConfig


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_config_roundtrip():
    cfg = ExperimentConfig()
    cfg.run.k = 7
    cfg.sweep.gammas = [0.1, 0.01]
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "[run]\nrounds = 0\n",
    "[run]\ngamma = -1\n",
    "[run]\nalgorithm = bogus\n",
    "[problem]\nd = abc\n",
    "[nosuch]\nx = 1\n",
    "[run]\nnosuch = 1\n",
    "[run]\nalgorithm = dcgd_randk\n",
    "[schedule]\nn = 3\n",
    "[schedule]\nbandwidth_unit = furlongs\n",
])
def test_bad_configs_exit_3(tmp_path, text):
    path = write(tmp_path, text)
    assert main(["run", "--config", path, "--out-dir", str(tmp_path / "o")]) == 3


def test_bad_config_raises():
    with pytest.raises(ConfigError):
        cfgmod.loads("[run]\nrounds = 1.5\n").run_config()


def test_run_outputs_and_reproducible(tmp_path):
    path = write(tmp_path, "[run]\nalgorithm = dcgd_permk_aes\ngamma = 0.02\nrounds = 20\n"
                           "[output]\nrecord_iterates = true\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", path, "--out-dir", str(a)]) == 0
    # re-run from the emitted config
    assert main(["run", "--config", str(a / "config.ini"), "--out-dir", str(b)]) == 0
    assert (a / "iterates.csv").read_bytes() == (b / "iterates.csv").read_bytes()

    def strip_wall(p):
        return [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]

    assert strip_wall(a / "metrics.csv") == strip_wall(b / "metrics.csv")
    header = (a / "metrics.csv").read_text().splitlines()[0].split(",")
    for col in ("round", "fx", "grad_norm_sq", "up_bytes_total", "down_bytes_total",
                "up_bytes_per_client", "down_bytes_per_client", "wall_ms"):
        assert col in header
    s = json.loads((a / "summary.json").read_text())
    assert s["rounds_completed"] == 20 and not s["diverged"]


def test_divergence_exit_code(tmp_path):
    path = write(tmp_path, "[run]\ngamma = 1.0\nrounds = 300\n")
    assert main(["run", "--config", path, "--out-dir", str(tmp_path / "o")]) == 4


def test_fig1_style_gd_and_gd_aes(tmp_path):
    base = "[problem]\nd = 1000\nn = 50\nn_i = 12\n[run]\ngamma = 0.1\nrounds = 400\nstop_below = 1e-20\n"
    assert main(["run", "--config", write(tmp_path, base), "--out-dir", str(tmp_path / "gd")]) == 0
    gd = json.loads((tmp_path / "gd" / "summary.json").read_text())
    assert gd["final_grad_norm_sq"] <= 1e-20
    # every client opens 50 envelopes per round, so compare a 20-round prefix
    short = base.replace("rounds = 400", "rounds = 20")
    aes = short.replace("[run]\n", "[run]\nalgorithm = gd_aes\n")
    assert main(["run", "--config", write(tmp_path, short, "s.ini"), "--out-dir", str(tmp_path / "gd20")]) == 0
    assert main(["run", "--config", write(tmp_path, aes, "a.ini"), "--out-dir", str(tmp_path / "aes")]) == 0

    def column(d, i):
        return [line.split(",")[i] for line in (tmp_path / d / "metrics.csv").read_text().splitlines()[1:]]

    assert column("aes", 2) == column("gd20", 2)
    full = [line.split(",")[2] for line in (tmp_path / "gd" / "metrics.csv").read_text().splitlines()[1:21]]
    assert column("aes", 2) == full
    ratio = int(column("aes", 4)[0]) / int(column("gd20", 4)[0])
    assert 49 < ratio < 51


def test_tune_command(tmp_path):
    path = write(tmp_path, "[run]\nalgorithm = gd\n[sweep]\ngammas = 0.3, 0.1\nseeds = 0, 1\ntune_rounds = 200\n")
    assert main(["tune", "--config", path, "--out-dir", str(tmp_path / "t")]) == 0
    s = json.loads((tmp_path / "t" / "tune.json").read_text())
    assert s["best_gamma"] == 0.1 and s["diverged"]["0.3"]
    bad = write(tmp_path, "[sweep]\ngammas = 2.0\nseeds = 0\ntune_rounds = 200\n", "bad.ini")
    assert main(["tune", "--config", bad, "--out-dir", str(tmp_path / "t2")]) == 6


def test_sweep_dim(tmp_path):
    path = write(tmp_path, "[problem]\nn = 50\nn_i = 2\n[run]\ngamma = 0.02\nrounds = 2\n"
                           "[sweep]\nalgorithms = gd, dcgd_permk_aes\n")
    assert main(["sweep-dim", "--config", path, "--dims", "1000,100000", "--out-dir", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    header = rows[0].split(",")
    recs = [dict(zip(header, r.split(","))) for r in rows[1:]]
    assert len(recs) == 4
    pk = {int(r["d"]): float(r["aes_overhead_fraction"]) for r in recs if r["algorithm"] == "dcgd_permk_aes"}
    assert pk[1000] > 0.1 and pk[100000] < 0.01
    ckks = {(r["d"], r["ckks_up_bytes"]) for r in recs}
    assert len(ckks) == 2  # same model columns for sparse and dense variants at each d
    for r in recs:
        lines = (tmp_path / "s" / f"d{r['d']}" / f"{r['algorithm']}_fp64" / "metrics.csv").read_text().splitlines()
        assert len(lines) - 1 == 2


def test_schedule_command(tmp_path):
    assert main(["schedule", "--out-dir", str(tmp_path)]) == 0
    for alg in ("gd", "dcgd_permk_aes"):
        assert (tmp_path / f"{alg}_naive.dot").exists() and (tmp_path / f"{alg}_refined.dot").exists()
        assert (tmp_path / f"{alg}_makespan.csv").read_text().startswith("iteration,makespan_s\n")
    s = json.loads((tmp_path / "schedule.json").read_text())
    assert s["dcgd_permk_aes"]["speedup"] > s["gd"]["speedup"] > 1


def test_ckks_model_command(tmp_path, capsys):
    assert main(["ckks-model", "--dims", "1000", "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "1000,16384,210,860160,860160,430080,8032" in out
    assert (tmp_path / "ckks.csv").read_text() == out


def test_keygen_and_client_flags(tmp_path):
    key = tmp_path / "k"
    assert main(["keygen", "--out", str(key)]) == 0
    assert len(bytes.fromhex(key.read_text().strip())) == 16
    assert main(["run", "--connect", "127.0.0.1:1", "--out-dir", str(tmp_path / "o")]) == 3


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "permfl", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep-dim" in r.stdout
