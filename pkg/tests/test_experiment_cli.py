import subprocess
import sys

import numpy as np
import pytest

from implicit_sampling import cli, experiment
from implicit_sampling.errors import ConfigError
from implicit_sampling.experiment import ExperimentConfig, config_from_manifest

from conftest import SMALL_INI


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_INI)
    return path


def run_cli(*args):
    return cli.main([str(a) for a in args])


def manifest(path):
    out = {}
    for line in (path / "manifest.txt").read_text().splitlines():
        if line == "config:":
            break
        k, _, v = line.partition(": ")
        out[k] = v
    return out


class TestConfig:
    def test_defaults_are_reference_configuration(self):
        c = ExperimentConfig()
        assert c.sizes == (16, 32, 64)
        assert c.modes == 30 and c.samples == 10_000
        assert c.stride == 4 and c.margin == 19 and c.noise_fraction == 0.3
        assert c.source_amplitude == 200.0
        assert c.tracked == (1, 2, 5)
        assert c.l_x == pytest.approx(np.sqrt(0.5))

    def test_round_trip(self, small_config):
        again = ExperimentConfig.from_ini(small_config.to_ini())
        assert again == small_config

    @pytest.mark.parametrize(
        "text",
        [
            "[grid]\nsizes = 16, 8\n",
            "[grid]\nsizes = 8, 16\ngtols = 1e-4\n",
            "[prior]\nl_x = -1\n",
            "[prior]\nmodes = 0\n",
            "[problem]\nstride = 0\n",
            "[problem]\nnoise_model = gamma\n",
            "[sampler]\nmethod = cubic\n",
            "[sampler]\nsamples = 0\n",
            "[mcmc]\ntarget_low = 0.5\ntarget_high = 0.4\n",
            "[mcmc]\nburn_in = 20000\n",
            "[run]\nworkers = 0\n",
            "[run]\ntracked = 1, 31\n",
            "[run]\nbudget = 0\n",
            "[run]\nseeds = 3\n",
            "[extras]\nx = 1\n",
            "[grid]\nmax_iter = many\n",
            "not an ini file",
        ],
    )
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_ini(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "nope.ini")


class TestPipeline:
    def test_reference_field_independent_of_sampling_seed(self, small_config):
        a = experiment.build_problem(small_config)
        from dataclasses import replace

        b = experiment.build_problem(replace(small_config, seed=99))
        np.testing.assert_array_equal(a.data.z, b.data.z)

    def test_single_grid_map_agrees(self, small_problem):
        casc = experiment.find_map(small_problem)
        single = experiment.find_map(small_problem, single_grid=16)
        np.testing.assert_allclose(casc.mu, single.mu, atol=1e-4)
        assert [r.level for r in single.levels] == [16]


class TestCli:
    def test_map_deterministic(self, cfg_file, tmp_path):
        assert run_cli("map", "--config", cfg_file, "--out", tmp_path / "a") == 0
        assert run_cli("map", "--config", cfg_file, "--out", tmp_path / "b") == 0
        assert (tmp_path / "a/map.csv").read_bytes() == (tmp_path / "b/map.csv").read_bytes()
        man = manifest(tmp_path / "a")
        assert man["command"] == "map"
        assert man["outputs"] == "map.csv, map_trace.csv, manifest.txt"
        assert int(man["solves.total"]) == int(man["solves.map"])

    def test_single_grid(self, cfg_file, tmp_path, capsys):
        assert run_cli("map", "--config", cfg_file, "--single-grid", 16, "--out", tmp_path) == 0
        assert "grid 16" in capsys.readouterr().out
        assert manifest(tmp_path)["map.iterations"].count(",") == 0

    @pytest.mark.parametrize("method", ["linear", "random", "symmetric"])
    def test_sample(self, cfg_file, tmp_path, method):
        assert run_cli("sample", "--config", cfg_file, "--method", method, "-M", 50, "--out", tmp_path) == 0
        lines = (tmp_path / "ensemble.csv").read_text().splitlines()
        assert len(lines) == 51
        assert lines[0].startswith("sample_id,theta_1,")
        man = manifest(tmp_path)
        for name in ("ensemble.csv", "quality.txt", "stats.txt", "histograms.csv", "resampled.csv"):
            assert (tmp_path / name).exists()
            assert name in man["outputs"]
        assert float(man["R_hat"]) >= 1.0
        stages = [int(v) for k, v in man.items() if k.startswith("solves.") and k != "solves.total"]
        assert sum(stages) == int(man["solves.total"])
        quality = (tmp_path / "quality.txt").read_text()
        assert "R_hat:" in quality and "ess:" in quality

    def test_every_written_file_is_listed(self, cfg_file, tmp_path):
        out = tmp_path / "run"
        run_cli("sample", "--config", cfg_file, "-M", 20, "--dump-hessian", "--out", out)
        listed = set(manifest(out)["outputs"].split(", "))
        assert listed == {p.name for p in out.iterdir()}

    def test_manifest_config_reproduces_run(self, cfg_file, tmp_path):
        run_cli("sample", "--config", cfg_file, "-M", 20, "--seed", 7, "--out", tmp_path / "a")
        cfg = config_from_manifest(tmp_path / "a/manifest.txt")
        assert cfg.seed == 7 and cfg.samples == 20
        (tmp_path / "echo.ini").write_text(cfg.to_ini())
        run_cli("sample", "--config", tmp_path / "echo.ini", "--out", tmp_path / "b")
        assert (tmp_path / "a/ensemble.csv").read_bytes() == (tmp_path / "b/ensemble.csv").read_bytes()

    def test_single_sample_warns(self, cfg_file, tmp_path, caplog):
        assert run_cli("sample", "--config", cfg_file, "-M", 1, "--out", tmp_path) == 0
        assert "single sample" in caplog.text
        assert "reliable: false" in (tmp_path / "stats.txt").read_text()

    @pytest.mark.parametrize("method", ["rwm", "ismap"])
    def test_mcmc(self, cfg_file, tmp_path, method):
        assert run_cli("mcmc", "--config", cfg_file, "--method", method, "--steps", 200, "--out", tmp_path) == 0
        chain = (tmp_path / f"{method}_chain.csv").read_text().splitlines()
        assert len(chain) == 201
        assert (tmp_path / f"{method}_trace.csv").read_text().startswith("index,cum_solves,theta_1,theta_2,theta_5")
        assert int(manifest(tmp_path)[f"solves.{method}"]) == 200

    def test_mcmc_fixed_proposal_and_burn_in(self, cfg_file, tmp_path):
        code = run_cli(
            "mcmc", "--config", cfg_file, "--proposal-std", 0.05, "--steps", 100, "--burn-in", 10, "--out", tmp_path
        )
        assert code == 0
        man = manifest(tmp_path)
        assert float(man["rwm.proposal_std"]) == 0.05
        assert int(man["solves.rwm_tuning"]) == 0
        assert run_cli("mcmc", "--config", cfg_file, "--steps", 100, "--burn-in", 100, "--out", tmp_path) == 2

    def test_lmap(self, cfg_file, tmp_path):
        assert run_cli("lmap", "--config", cfg_file, "--out", tmp_path) == 0
        rows = (tmp_path / "lmap.csv").read_text().splitlines()
        assert rows[0] == "index,mean,std" and len(rows) == 7

    def test_compare(self, cfg_file, tmp_path):
        assert run_cli("compare", "--config", cfg_file, "-M", 40, "--steps", 150, "--out", tmp_path) == 0
        for key in ("linear_gn", "random_gn", "linear_fd", "random_fd", "rwm", "ismap"):
            assert (tmp_path / f"trace_{key}.csv").exists()
        table = (tmp_path / "std_table.csv").read_text().splitlines()
        assert table[0] == "method,coordinate,mean,std"
        assert {r.split(",")[0] for r in table[1:]} == {
            "lmap", "linear_gn", "random_gn", "linear_fd", "random_fd", "rwm", "ismap"
        }
        assert manifest(tmp_path)["partial"] == "false"

    def test_compare_budget(self, cfg_file, tmp_path):
        assert run_cli("compare", "--config", cfg_file, "-M", 40, "--steps", 150, "--budget", 200, "--out", tmp_path) == 0
        man = manifest(tmp_path)
        assert man["partial"] == "true"
        assert int(man["solves.total"]) <= 200
        assert (tmp_path / "std_table.csv").exists()

    def test_budget_exhausted_in_sample_is_numerical_failure(self, cfg_file, tmp_path, capsys):
        code = run_cli("sample", "--config", cfg_file, "--budget", 5, "--out", tmp_path)
        assert code == 3
        assert "numerical failure" in capsys.readouterr().err

    def test_spectrum(self, cfg_file, tmp_path, capsys):
        assert run_cli("spectrum", "--config", cfg_file, "--out", tmp_path) == 0
        assert "m = 6" in capsys.readouterr().out
        assert (tmp_path / "spectrum.csv").exists()

    def test_gradcheck(self, cfg_file, tmp_path, capsys):
        assert run_cli("gradcheck", "--config", cfg_file, "--grid", 8, "--count", 2, "--out", tmp_path) == 0
        assert "max relative error" in capsys.readouterr().out
        assert run_cli("gradcheck", "--config", cfg_file, "--grid", 8, "--count", 1, "--tol", 1e-30,
                       "--out", tmp_path) == 3

    def test_config_errors_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[grid]\nsizes = 32, 16\n")
        assert run_cli("map", "--config", bad) == 2
        assert "configuration error" in capsys.readouterr().err
        assert run_cli("map", "--config", tmp_path / "missing.ini") == 2

    def test_usage_errors_exit_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("sample", "--method", "cubic")
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            run_cli()
        assert exc.value.code == 2

    def test_unwritable_output(self, cfg_file, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert run_cli("spectrum", "--config", cfg_file, "--out", blocker / "sub") == 2

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "implicit_sampling.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for cmd in ("map", "sample", "mcmc", "lmap", "compare", "spectrum", "gradcheck"):
            assert cmd in res.stdout
