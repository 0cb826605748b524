"""Config file parsing, effective-config round trips, builders, and the
command-line interface (exit codes and artifacts)."""

import csv
import json
import subprocess
from importlib.resources import files

import numpy as np
import pytest

from ccmcontrol.cli import main
from ccmcontrol.config import ScenarioConfig
from ccmcontrol.errors import ConfigError

CONFIG_DIR = files("ccmcontrol") / "configs"

EQUILIBRIUM_CFG = """\
# nothing to do: start at the setpoint
x0 = [0, 0, 0]
sim.T = 0.1
"""

DIVERGING_CFG = """\
x0 = [1, 1, 1]
theta0_m = [0, -0.5]
theta0_em = [1]
controller.adapt_m = false
controller.adapt_em = false
sim.T = 3.0
sim.blowup_radius = 5.0
"""

QUICK_VERIFY_CFG = """\
verify.x_min = [-3, 0, 0]
verify.x_max = [3, 0, 0]
verify.x_count = [7, 1, 1]
verify.theta_min = [-2]
verify.theta_max = [2]
verify.theta_count = [5]
verify.rate_max = 2.0
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestConfigParsing:
    def test_shipped_configs_parse_and_build(self):
        for name in ("baseline.cfg", "adaptive.cfg", "projection.cfg",
                     "robust.cfg", "deadzone.cfg"):
            cfg = ScenarioConfig.from_file(str(CONFIG_DIR / name))
            cfg.build_model()
            cfg.build_metric()
            cfg.build_controller()
            cfg.build_setpoint()
            cfg.sim_kwargs()

    def test_adaptive_scenario_values(self):
        cfg = ScenarioConfig.from_file(str(CONFIG_DIR / "adaptive.cfg"))
        v = cfg.values
        assert v["system"] == "builtin.underactuated3"
        assert v["controller.gamma_m"] == [15.0, 15.0]
        assert v["sim.T"] == 20.0
        assert v["x0"] == [1.0, 1.0, 1.0]
        assert v["theta_true_em"] == [-1.0]

    def test_defaults_materialize(self):
        cfg = ScenarioConfig.from_text("")
        v = cfg.values
        assert v["system"] == "builtin.underactuated3"
        assert v["controller.lambda"] == 0.1
        assert v["theta_true_m"] == [-0.5, -1.5]
        assert v["theta0_m"] == [0.0, 0.0]
        assert v["verify.x_count"] == [61, 1, 1]
        assert v["verify.theta_count"] == [41]
        assert len(v["verify.theta_m_samples"]) == 3
        assert v["sim.log_period"] == v["sim.control_period"]

    def test_comments_and_blank_lines_ignored(self):
        cfg = ScenarioConfig.from_text("\n# note\nx0 = [1, 0, 0]  # inline\n\n")
        assert cfg.values["x0"] == [1.0, 0.0, 0.0]

    def test_unknown_key_rejected_with_location(self):
        with pytest.raises(ConfigError, match="<config>:2: unknown key"):
            ScenarioConfig.from_text("sim.T = 1.0\nsim.bogus = 3\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate key"):
            ScenarioConfig.from_text("sim.T = 1.0\nsim.T = 2.0\n")

    def test_malformed_lines_rejected(self):
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            ScenarioConfig.from_text("just some words\n")
        with pytest.raises(ConfigError, match="not a number"):
            ScenarioConfig.from_text("sim.T = fast\n")
        with pytest.raises(ConfigError, match="bracket"):
            ScenarioConfig.from_text("x0 = [1, 2, 3\n")
        with pytest.raises(ConfigError, match="true or false"):
            ScenarioConfig.from_text("controller.robust = yes\n")

    def test_overrides_win_and_are_validated(self):
        cfg = ScenarioConfig.from_text("sim.T = 1.0\n",
                                       overrides=["sim.T=2.5", "x0=[0,0,0]"])
        assert cfg.values["sim.T"] == 2.5
        with pytest.raises(ConfigError, match="unknown key"):
            ScenarioConfig.from_text("", overrides=["nope=1"])
        with pytest.raises(ConfigError, match="key=value"):
            ScenarioConfig.from_text("", overrides=["sim.T:2"])

    def test_size_validation(self):
        with pytest.raises(ConfigError, match="x0"):
            ScenarioConfig.from_text("x0 = [1, 2]\n")
        with pytest.raises(ConfigError, match="given together"):
            ScenarioConfig.from_text("controller.theta_min_m = [-1, -1]\n")
        with pytest.raises(ConfigError, match="lambda"):
            ScenarioConfig.from_text("controller.lambda = -0.5\n")
        with pytest.raises(ConfigError, match="nodes"):
            ScenarioConfig.from_text("solver.nodes = 2\n")
        with pytest.raises(ConfigError, match="dt"):
            ScenarioConfig.from_text("sim.dt = 0.1\nsim.control_period = 0.01\n")

    def test_unknown_builtin_rejected(self):
        with pytest.raises(ConfigError, match="unknown system"):
            ScenarioConfig.from_text("system = builtin.nonexistent\n")

    def test_effective_text_round_trips(self):
        cfg = ScenarioConfig.from_file(str(CONFIG_DIR / "projection.cfg"))
        text = cfg.effective_text()
        again = ScenarioConfig.from_text(text)
        assert again.effective_text() == text
        assert again.values == cfg.values


class TestBuilders:
    def test_controller_bounds_columns(self):
        cfg = ScenarioConfig.from_text(
            "controller.theta_min_m = [-2, -1]\n"
            "controller.theta_max_m = [2, 1]\n")
        ctl = cfg.build_controller()
        assert np.allclose(ctl.theta_bounds_m, [[-2, 2], [-1, 1]])

    def test_solver_settings_forwarded(self):
        cfg = ScenarioConfig.from_text(
            "solver.nodes = 11\nsolver.quad_order = 21\n"
            "solver.tol = 1e-9\nsolver.max_iter = 50\nsolver.warm_start = false\n")
        s = cfg.build_solver(cfg.build_metric())
        assert (s.num_nodes, s.quad_order, s.tol, s.max_iter, s.warm_start) == \
            (11, 21, 1e-9, 50, False)

    def test_grid_from_keys(self):
        cfg = ScenarioConfig.from_text(QUICK_VERIFY_CFG)
        g = cfg.build_grid()
        assert [a.size for a in g.x_axes()] == [7, 1, 1]
        assert g.theta_axes()[0].size == 5

    def test_sim_requires_x0(self):
        cfg = ScenarioConfig.from_text("")
        with pytest.raises(ConfigError, match="x0"):
            cfg.sim_kwargs()

    def test_inline_system_and_metric(self):
        cfg = ScenarioConfig.from_text(
            "system = inline\n"
            "system.n = 2\nsystem.m = 1\nsystem.p_m = 1\nsystem.p_em = 1\n"
            "system.f = [x2, -sin(x1)]\n"
            "system.B = [[0], [1]]\n"
            "system.phi = [[x1]]\n"
            "system.varrho = [[x1, 0]]\n"
            "metric = inline\n"
            "metric.params = 0\n"
            "metric.W = [[2, 0], [0, 1 + x1^2]]\n")
        model = cfg.build_model()
        assert (model.n, model.m, model.p_m, model.p_em) == (2, 1, 1, 1)
        xdot = model.dynamics(np.array([0.5, 0.2]), np.zeros(1),
                              np.array([2.0]), np.array([1.0]))
        # x2 - x1*1, -sin(x1) + (0 - 2*x1)
        assert np.allclose(xdot, [0.2 - 0.5, -np.sin(0.5) - 1.0])
        metric = cfg.build_metric()
        W = metric.dual(np.array([0.5, 0.0]))
        assert np.allclose(W, [[2.0, 0.0], [0.0, 1.25]])
        Wx = metric.eval_dual_dx(np.array([0.5, 0.0]), np.zeros(0))
        assert np.isclose(Wx[0][1, 1], 1.0, atol=1e-5)

    def test_inline_system_missing_pieces(self):
        with pytest.raises(ConfigError, match="system.n"):
            ScenarioConfig.from_text("system = inline\n")
        cfg = ScenarioConfig.from_text(
            "system = inline\nsystem.n = 2\nsystem.m = 1\n"
            "system.p_m = 0\nsystem.p_em = 0\n")
        with pytest.raises(ConfigError, match="system.f"):
            cfg.build_model()
        cfg2 = ScenarioConfig.from_text("metric = inline\n")
        with pytest.raises(ConfigError, match="metric.W"):
            cfg2.build_metric()


class TestCLI:
    def test_simulate_equilibrium_exits_clean(self, tmp_path):
        path = write(tmp_path, "equil.cfg", EQUILIBRIUM_CFG)
        rc = main(["simulate", path, "--out", str(tmp_path), "--quiet",
                   "--plot-data"])
        assert rc == 0
        with open(tmp_path / "equil.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 12   # header + 11 log rows
        assert (tmp_path / "equil_plot.json").exists()

    def test_simulate_divergence_exit_code(self, tmp_path):
        path = write(tmp_path, "runaway.cfg", DIVERGING_CFG)
        rc = main(["simulate", path, "--out", str(tmp_path), "--quiet"])
        assert rc == 2
        assert (tmp_path / "runaway.csv").exists()

    def test_set_override_changes_run_length(self, tmp_path):
        path = write(tmp_path, "equil.cfg", EQUILIBRIUM_CFG)
        rc = main(["simulate", path, "--out", str(tmp_path), "--quiet",
                   "--set", "sim.T=0.05"])
        assert rc == 0
        with open(tmp_path / "equil.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 7

    def test_output_prefix_honored(self, tmp_path):
        path = write(tmp_path, "equil.cfg",
                     EQUILIBRIUM_CFG + "output.prefix = renamed\n")
        rc = main(["simulate", path, "--out", str(tmp_path), "--quiet"])
        assert rc == 0
        assert (tmp_path / "renamed.csv").exists()

    def test_dump_effective_config_round_trips(self, tmp_path, capsys):
        path = write(tmp_path, "equil.cfg", EQUILIBRIUM_CFG)
        rc = main(["simulate", path, "--out", str(tmp_path), "--quiet",
                   "--dump-effective-config"])
        assert rc == 0
        dumped = capsys.readouterr().out
        again = ScenarioConfig.from_text(dumped)
        assert again.effective_text() == dumped

    def test_missing_config_file_is_config_error(self, tmp_path, capsys):
        rc = main(["simulate", str(tmp_path / "absent.cfg"), "--quiet"])
        assert rc == 1
        assert "config error" in capsys.readouterr().err

    def test_bad_key_in_file_is_config_error(self, tmp_path):
        path = write(tmp_path, "bad.cfg", "sim.speed = 9\n")
        assert main(["simulate", path, "--quiet"]) == 1

    def test_verify_metric_passes_on_benchmark(self, tmp_path, capsys):
        path = write(tmp_path, "verify.cfg", QUICK_VERIFY_CFG)
        rc = main(["verify-metric", path, "--out", str(tmp_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "overall            : pass" in out
        with open(tmp_path / "verify_verify.json") as fh:
            payload = json.load(fh)
        assert payload["all_passed"] is True
        assert payload["killing_residual_max"] == 0.0
        assert payload["lambda_certified"] is not None

    def test_verify_metric_fails_at_excess_rate(self, tmp_path):
        path = write(tmp_path, "verify.cfg", QUICK_VERIFY_CFG)
        rc = main(["verify-metric", path, "--out", str(tmp_path), "--quiet",
                   "--set", "verify.lambda=2.0"])
        assert rc == 3
        with open(tmp_path / "verify_verify.json") as fh:
            assert json.load(fh)["all_passed"] is False

    def test_geodesic_prints_reference_energy(self, tmp_path, capsys):
        path = write(tmp_path, "geo.cfg", "")
        rc = main(["geodesic", path, "1,1,1", "0,0,0", "--theta", "1",
                   "--quiet"])
        assert rc == 0
        out = capsys.readouterr().out
        energy = float(out.split("energy")[1].split(":")[1].split()[0])
        assert np.isclose(energy, 1.2010395552254667, rtol=1e-9)
        assert "nodes" not in out   # --quiet drops the node table

    def test_geodesic_coincident_endpoints(self, tmp_path, capsys):
        path = write(tmp_path, "geo.cfg", "")
        rc = main(["geodesic", path, "1,1,1", "1,1,1", "--quiet"])
        assert rc == 0
        energy = float(capsys.readouterr().out.split("energy")[1]
                       .split(":")[1].split()[0])
        assert energy == 0.0

    def test_geodesic_dimension_mismatch(self, tmp_path, capsys):
        path = write(tmp_path, "geo.cfg", "")
        assert main(["geodesic", path, "1,1", "0,0", "--quiet"]) == 1

    def test_batch_aggregates_worst_exit_code(self, tmp_path):
        ok = write(tmp_path, "ok.cfg", EQUILIBRIUM_CFG)
        bad = write(tmp_path, "runaway.cfg", DIVERGING_CFG)
        rc = main(["batch", ok, bad, "--out", str(tmp_path / "batch"),
                   "--workers", "1", "--quiet"])
        assert rc == 2
        assert (tmp_path / "batch" / "ok" / "ok.csv").exists()
        assert (tmp_path / "batch" / "runaway" / "runaway.csv").exists()

    def test_console_script_installed(self, tmp_path):
        path = write(tmp_path, "geo.cfg", "")
        proc = subprocess.run(
            ["ccmctl", "geodesic", path, "0,0,0", "1,0,0", "--quiet"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert "energy" in proc.stdout
