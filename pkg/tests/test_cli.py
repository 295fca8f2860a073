import json
from pathlib import Path

import numpy as np
import pytest

from branchenv import cli


BASE = """
experiment = simulate
run.seed = 4242
run.output = {out}
system.d = 1
system.n = 20
system.m = 2
system.T = 1/4
system.replicas = 3
kernel.h = box
kernel.kappa = gauss
init.density = uniform
init.width = 1.0
output.positions = full
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestDeriveSeed:
    def test_deterministic(self):
        assert cli.derive_seed(7, ["a", 3]) == cli.derive_seed(7, ["a", 3])

    def test_label_order_sensitivity(self):
        assert cli.derive_seed(7, ["a", "b"]) != cli.derive_seed(7, ["b", "a"])

    def test_boundary_sensitivity(self):
        assert cli.derive_seed(7, ["ab", "c"]) != cli.derive_seed(7, ["a", "bc"])

    def test_no_collisions_over_many_ids(self):
        seen = {cli.derive_seed(1, ["replica", i]) for i in range(1_000_000)}
        assert len(seen) == 1_000_000


class TestConfig:
    def test_round_trip_bit_exact(self, tmp_path):
        text = BASE.format(out=tmp_path / "o")
        cfg = cli.parse_config(text)
        again = cli.parse_config(cfg.to_text())
        assert again.to_text() == cfg.to_text()
        assert again.content_hash() == cfg.content_hash()

    def test_unknown_key_named_in_error(self):
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config("experiment = simulate\nrun.seed = 1\nbogus.key = 2\n")
        assert "bogus.key" in str(err.value)

    def test_invalid_choice_rejected(self):
        with pytest.raises(cli.ConfigError):
            cli.parse_config("experiment = fly\nrun.seed = 1\n")

    def test_nT_integrality_enforced(self):
        with pytest.raises(cli.ConfigError):
            cli.parse_config("experiment = simulate\nrun.seed = 1\n"
                             "system.n = 3\nsystem.T = 1/4\n")

    def test_decimals_parsed_from_strings(self):
        cfg = cli.parse_config("experiment = simulate\nrun.seed = 1\n"
                               "kernel.h_scale = 0.5\n")
        assert cfg.decimal("kernel.h_scale") == 0.5


class TestSimulateExperiment:
    def test_unit_branching_constant_atom_count(self, tmp_path):
        out = tmp_path / "o"
        text = ("experiment = simulate\nrun.seed = 9\n"
                f"run.output = {out}\n"
                "system.d = 1\nsystem.n = 1\nsystem.m = 2\nsystem.T = 1\n"
                "system.replicas = 1\nkernel.h = box\n"
                "kernel.kappa = const\nkernel.kappa_amplitude = 0.0\n")
        assert cli.main([str(write_cfg(tmp_path, text))]) == 0
        lines = (out / "trajectory_0000.csv").read_text().splitlines()
        counts = {line.split(",")[1] for line in lines[1:]}
        assert counts == {"1"}

    def test_byte_identical_rerun(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            text = BASE.format(out=out)
            assert cli.main([str(write_cfg(tmp_path, text, f"{out.name}.cfg"))]) == 0
        for name in ("trajectory_0000.csv", "trajectory_0001.csv",
                     "trajectory_0002.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_worker_count_does_not_change_outputs(self, tmp_path):
        out1, out2 = tmp_path / "w1", tmp_path / "w2"
        for out, workers in ((out1, 1), (out2, 2)):
            text = BASE.format(out=out) + f"run.workers = {workers}\n"
            assert cli.main([str(write_cfg(tmp_path, text, f"{out.name}.cfg"))]) == 0
        for r in range(3):
            name = f"trajectory_{r:04d}.csv"
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_metadata_written(self, tmp_path):
        out = tmp_path / "o"
        assert cli.main([str(write_cfg(tmp_path, BASE.format(out=out)))]) == 0
        meta = json.loads((out / "metadata.json").read_text())
        assert meta["schema"] == 1
        assert meta["seed"] == 4242
        assert len(meta["config_hash"]) == 40

    def test_histogram_mode(self, tmp_path):
        out = tmp_path / "h"
        text = BASE.format(out=out).replace("output.positions = full",
                                            "output.positions = hist\noutput.bins = 16")
        assert cli.main([str(write_cfg(tmp_path, text))]) == 0
        header = (out / "trajectory_0000.csv").read_text().splitlines()[0]
        assert header.split(",")[2] == "bin_0"
        assert header.split(",")[-1] == "bin_15"


class TestMomentsExperiment:
    def test_constant_kappa_report(self, tmp_path):
        out = tmp_path / "m"
        text = ("experiment = moments\nrun.seed = 31\n"
                f"run.output = {out}\n"
                "system.d = 1\nsystem.n = 40\nsystem.m = 2\nsystem.T = 1/4\n"
                "system.replicas = 120\nkernel.h = box\nkernel.kappa = const\n"
                "kernel.kappa_amplitude = 1.0\ninit.density = uniform\n"
                "moments.jump_replicas = 400\nmoments.grid_nodes = 65\n")
        assert cli.main([str(write_cfg(tmp_path, text))]) == 0
        rep = json.loads((out / "moments.json").read_text())
        assert rep["test_mode"] is True
        # ODE reduction: pde_value must be e^{1/4}
        assert rep["pde_value"] == pytest.approx(1.2840254166877414, rel=2e-3)
        assert abs(rep["mc_value"] - 1.0) <= 4 * rep["mc_se"] + 1e-9
        names = {r["statistic"] for r in rep["report"]}
        assert {"mass_mean_vs_one", "second_moment_vs_pde", "jump_vs_pde"} <= names
        for row in rep["report"]:
            assert set(row) == {"statistic", "value", "stderr_or_tolerance", "pass"}


class TestMildAndHolderExperiments:
    def test_mild_artifacts(self, tmp_path):
        out = tmp_path / "mild"
        text = ("experiment = mild\nrun.seed = 77\n"
                f"run.output = {out}\n"
                "system.d = 1\nsystem.T = 1/4\nsystem.n = 4\n"
                "kernel.h = box\nkernel.kappa = gauss\n"
                "mild.grid_nodes = 65\nmild.grid_halfwidth = 2.5\n"
                "mild.time_steps = 8\nmild.paths = 1000\nmild.iterations = 5\n")
        assert cli.main([str(write_cfg(tmp_path, text))]) == 0
        assert (out / "field.csv").exists()
        assert (out / "picard_diffs.csv").exists()
        header = json.loads((out / "environment.json").read_text())
        blob = np.fromfile(out / "environment.bin", dtype=header["dtype"])
        assert blob.size == int(np.prod(header["shape"]))
        diffs = (out / "picard_diffs.csv").read_text().splitlines()[1:]
        assert len(diffs) == 5

    def test_holder_report_bands(self, tmp_path):
        out = tmp_path / "hold"
        text = ("experiment = holder\nrun.seed = 13\n"
                f"run.output = {out}\n"
                "system.d = 1\nsystem.T = 1/4\nsystem.n = 4\n"
                "kernel.h = box\nkernel.kappa = gauss\n"
                "mild.grid_nodes = 65\nmild.grid_halfwidth = 2.5\n"
                "mild.time_steps = 8\nmild.paths = 1000\nmild.iterations = 4\n"
                "holder.replicas = 3\n")
        assert cli.main([str(write_cfg(tmp_path, text))]) == 0
        rep = json.loads((out / "holder.json").read_text())
        assert (out / "space_moments.csv").exists()
        assert (out / "time_moments.csv").exists()
        assert np.isfinite(rep["space_exponent"])
        assert np.isfinite(rep["time_exponent"])


class TestValidateExperiment:
    def test_validate_passes_and_reports(self, tmp_path):
        out = tmp_path / "v"
        text = f"experiment = validate\nrun.seed = 3\nrun.output = {out}\n"
        code = cli.main([str(write_cfg(tmp_path, text))])
        rep = json.loads((out / "validate.json").read_text())
        for row in rep["report"]:
            assert set(row) == {"statistic", "value", "stderr_or_tolerance", "pass"}
        assert code == 0, [r for r in rep["report"] if not r["pass"]]
        assert rep["all_pass"] is True


class TestExitCodes:
    def test_config_error_exit_2(self, tmp_path):
        cfg = write_cfg(tmp_path, "experiment = simulate\nrun.seed = 1\nbad.key = 1\n")
        assert cli.main([str(cfg)]) == 2

    def test_missing_file_exit_2(self):
        assert cli.main(["/nonexistent/path.cfg"]) == 2

    def test_budget_error_exit_4(self, tmp_path):
        out = tmp_path / "b"
        text = ("experiment = simulate\nrun.seed = 5\n"
                f"run.output = {out}\n"
                "system.d = 1\nsystem.n = 2\nsystem.m = 1\nsystem.T = 4\n"
                "system.replicas = 40\nsystem.cap = 3\n"
                "kernel.h = zero\nkernel.kappa = const\n"
                "kernel.kappa_amplitude = 16.0\n")
        assert cli.main([str(write_cfg(tmp_path, text))]) == 4
