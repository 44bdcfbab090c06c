import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fracpoisson.experiments import fit_loglog
from fracpoisson.cli import SEED_ENV, ConfigError, load_config, main, study_config
from fracpoisson.noise import read_noise_csv


def write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def only_dir(parent: Path) -> Path:
    (d,) = [p for p in parent.iterdir() if p.is_dir()]
    return d


SMALL_STUDY = """study = "convergence"
h = "0.75"
k = 1
resolutions = [8, 16, 32]
reference_resolution = 64
replicates = 5
seed = 3
f1 = "scaled_tanh"
g = "sin_product"
"""


class TestRates:
    def test_k1(self, capsys):
        assert main(["rates", "--h", "0.75", "--k", "1"]) == 0
        out = capsys.readouterr().out
        assert "lambda = 1\n" in out and "nu = 0.5\n" in out and "hypothesis (H): ok" in out

    def test_gate(self, capsys):
        assert main(["rates", "--h", "0.5,0.5,0.5,0.5"]) == 1
        assert "hypothesis (H) fails" in capsys.readouterr().out

    def test_k4_smoothing(self, capsys):
        assert main(["rates", "--h", "0.8,0.8,0.8,0.8", "--delta", "1"]) == 0
        out = capsys.readouterr().out
        assert "nu = 0.25\n" in out
        assert "mu = 0.49" in out

    @pytest.mark.parametrize("h", ["0.8,abc", "1.2", ""])
    def test_malformed(self, h, capsys):
        assert main(["rates", "--h", h]) == 1
        assert "usage error" in capsys.readouterr().err


class TestConfig:
    def test_unknown_key_has_line(self, tmp_path, capsys):
        path = write(tmp_path, SMALL_STUDY + "replicas = 4\n")
        assert main(["study", path, "--output-dir", str(tmp_path / "out")]) == 1
        err = capsys.readouterr().err
        assert "unknown key 'replicas'" in err and "line 10" in err

    def test_wrong_type(self, tmp_path):
        path = write(tmp_path, SMALL_STUDY.replace("replicates = 5", 'replicates = "five"'))
        with pytest.raises(ConfigError, match="line 6"):
            load_config(path)

    def test_replicates_zero(self, tmp_path, capsys):
        path = write(tmp_path, SMALL_STUDY.replace("replicates = 5", "replicates = 0"))
        assert main(["study", path, "--output-dir", str(tmp_path / "out")]) == 1
        err = capsys.readouterr().err
        assert "replicates" in err and "line 6" in err

    def test_bad_toml(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "study = \n"))

    def test_missing_file(self, capsys):
        assert main(["study", "no_such_config"]) == 1

    def test_bundled_config(self):
        cfg = study_config(load_config("k1_convergence", env={}))
        assert cfg.resolutions == (8, 16, 32, 64, 128) and cfg.reference_resolution == 512
        assert cfg.replicates == 100 and cfg.slope_threshold == -0.4

    def test_seed_override(self, tmp_path):
        path = write(tmp_path, SMALL_STUDY)
        assert load_config(path, env={SEED_ENV: "99"}).seed == 99
        assert load_config(path, env={}).seed == 3
        with pytest.raises(ConfigError):
            load_config(path, env={SEED_ENV: "x"})


class TestStudy:
    def test_deterministic_outputs(self, tmp_path):
        path = write(tmp_path, SMALL_STUDY)
        outs = []
        for i in range(2):
            parent = tmp_path / f"out{i}"
            assert main(["study", path, "--output-dir", str(parent)]) in (0, 1)
            outs.append(only_dir(parent))
        for name in ("convergence.csv", "convergence_summary.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_csv_round_trip(self, tmp_path):
        path = write(tmp_path, SMALL_STUDY)
        main(["study", path, "--output-dir", str(tmp_path / "o")])
        d = only_dir(tmp_path / "o")
        lines = [ln for ln in (d / "convergence.csv").read_text().splitlines() if not ln.startswith("#")]
        rows = list(csv.DictReader(lines))
        summary = json.loads((d / "convergence_summary.json").read_text())
        slope = fit_loglog([float(r["n"]) for r in rows], [float(r["error_mean"]) for r in rows])[0]
        assert slope == summary["slope"]

    def test_seed_env_header(self, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "41")
        path = write(tmp_path, SMALL_STUDY)
        main(["study", path, "--output-dir", str(tmp_path / "o")])
        text = (only_dir(tmp_path / "o") / "convergence.csv").read_text()
        assert text.startswith(f"# seed=41\n# seed_override={SEED_ENV}\n")

    def test_workers_flag(self, tmp_path, capsys):
        path = write(tmp_path, SMALL_STUDY)
        main(["study", path, "--output-dir", str(tmp_path / "a")])
        main(["study", path, "--output-dir", str(tmp_path / "b"), "--workers", "2"])
        a = (only_dir(tmp_path / "a") / "convergence.csv").read_bytes()
        b = (only_dir(tmp_path / "b") / "convergence.csv").read_bytes()
        assert a == b

    def test_bundled_pass(self, tmp_path, capsys):
        assert main(["study", "k1_convergence", "--output-dir", str(tmp_path)]) == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert line.startswith("convergence slope=") and line.endswith("PASS")
        assert float(line.split("slope=")[1].split("±")[0]) <= -0.4

    def test_holder_and_isometry_configs(self, tmp_path, capsys):
        holder = write(tmp_path, 'study = "holder"\nh = 0.75\nk = 1\nholder_resolution = 256\n'
                                 "slope_threshold = 1.8\n", "holder.toml")
        assert main(["study", holder, "--output-dir", str(tmp_path / "h")]) == 0
        iso = write(tmp_path, 'study = "isometry"\nh = [0.75, 0.6]\nresolutions = [8]\nreplicates = 4000\n',
                    "iso.toml")
        assert main(["study", iso, "--output-dir", str(tmp_path / "i")]) == 0
        assert (only_dir(tmp_path / "i") / "isometry.csv").exists()

    def test_numeric_failure_exit(self, tmp_path, capsys):
        path = write(tmp_path, SMALL_STUDY + "max_iter = 1\n")
        assert main(["study", path, "--output-dir", str(tmp_path / "o")]) == 2
        assert "did not converge" in capsys.readouterr().err


class TestSampleSolve:
    CFG = 'h = [0.7, 0.6]\nn = 8\nseed = 12\nreplicates = 2\nf1 = "scaled_tanh"\ng = "linear"\n'

    def test_sample(self, tmp_path):
        path = write(tmp_path, self.CFG)
        assert main(["sample", path, "--output-dir", str(tmp_path / "o")]) == 0
        d = only_dir(tmp_path / "o")
        s = read_noise_csv(d / "noise_r1.csv")
        assert s.grid.n == 8 and s.replicate == 1 and s.seed == 12

    def test_solve(self, tmp_path, capsys):
        path = write(tmp_path, self.CFG)
        assert main(["solve", path, "--output-dir", str(tmp_path / "o")]) == 0
        d = only_dir(tmp_path / "o")
        report = (d / "report.txt").read_text()
        assert "converged = true" in report and "mild_residual = " in report
        data = np.loadtxt(d / "solution.csv", delimiter=",", comments="#", skiprows=4)
        assert data.shape == (49, 3)

    def test_solve_k4_plain_rejected(self, tmp_path):
        path = write(tmp_path, 'h = 0.8\nk = 4\nn = 4\nscheme = "plain"\n')
        assert main(["solve", path, "--output-dir", str(tmp_path / "o")]) == 1


class TestChecks:
    def test_isometry_check(self, capsys):
        assert main(["isometry-check", "--h", "0.75,0.6", "--replicates", "4000"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_kernel_check_k2(self, capsys):
        code = main(["kernel-check", "--h", "0.75,0.75", "--resolutions", "4,8,16", "--threshold", "-0.35"])
        assert code == 0
        assert capsys.readouterr().out.strip().endswith("PASS")


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fracpoisson.cli", "rates", "--h", "0.6,0.6,0.6"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "nu = 0.25" in proc.stdout
