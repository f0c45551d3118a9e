import numpy as np
import pandas as pd
import pytest

from ddlod.cli import main
from ddlod.cli.experiments import SWEEP_COLUMNS, basis_cache, basis_path, make_field, run_single, run_sweep
from ddlod.config.experiment import build_config
from ddlod.core.assembly import assemble
from ddlod.core.grid import build_hierarchy
from ddlod.exceptions import EXIT_CONFIG, EXIT_IO, EXIT_OK, BasisFormatError, ConfigError, StaleCacheError


def small_config(tmp_path, **overrides):
    values = {
        "name": "small",
        "nh": "16",
        "nH": "4",
        "coeff.kind": "heterogeneous",
        "coeff.blocks": "4",
        "coeff.lo": "1",
        "coeff.hi": "10",
        "phi1": "-0.001,0.002,0",
        "phi2": "0.002,0,0.003",
        "output": str(tmp_path / "out"),
        "cache": str(tmp_path / "cache"),
    }
    values.update({key.replace("__", "."): str(value) for key, value in overrides.items()})
    return build_config(overrides=values)


def small_argv(tmp_path, *extra):
    return [
        "solve", "--nh", "16", "--nH", "4", "--kind", "heterogeneous", "--blocks", "4",
        "--lo", "1", "--hi", "10", "--phi1=-0.001,0.002,0", "--phi2=0.002,0,0.003",
        "--output", str(tmp_path / "out"), "--cache", str(tmp_path / "cache"), *extra,
    ]


def build_ops(config):
    field = make_field(config.coeff, config.nh)
    hier = build_hierarchy(config.nH, config.nh, config.nrho)
    return hier, assemble(hier.fine, field, hier.control), field


class TestBasisCache:
    def test_miss_then_hit(self, tmp_path):
        config = small_config(tmp_path)
        hier, ops, field = build_ops(config)
        first = basis_cache(config, hier, ops, field)
        second = basis_cache(config, hier, ops, field)
        assert not first.hit and second.hit
        assert first.path == second.path == basis_path(config)
        assert (first.basis.columns != second.basis.columns).nnz == 0
        assert second.basis.meta.support_radius == first.basis.meta.support_radius

    def test_new_seed_is_a_new_file(self, tmp_path):
        assert basis_path(small_config(tmp_path)) != basis_path(small_config(tmp_path, coeff__seed=2))

    def test_stale_file_is_refused(self, tmp_path):
        config = small_config(tmp_path)
        basis_cache(config, *build_ops(config))
        changed = small_config(tmp_path, coeff__lo=2)
        assert basis_path(changed) == basis_path(config)
        with pytest.raises(StaleCacheError):
            basis_cache(changed, *build_ops(changed))
        rebuilt = basis_cache(small_config(tmp_path, coeff__lo=2, rebuild="true"), *build_ops(changed))
        assert not rebuilt.hit

    def test_corrupt_file(self, tmp_path):
        config = small_config(tmp_path)
        path = basis_path(config)
        path.parent.mkdir(parents=True)
        path.write_bytes(b"not a basis")
        with pytest.raises(BasisFormatError):
            basis_cache(config, *build_ops(config))
        assert not basis_cache(small_config(tmp_path, rebuild="true"), *build_ops(config)).hit
        assert basis_cache(config, *build_ops(config)).hit


class TestRunSingle:
    def test_outputs(self, tmp_path):
        result = run_single(small_config(tmp_path))
        table = pd.read_csv(tmp_path / "out" / "result.csv")
        assert list(table.columns) == ["quantity", "value"]
        values = dict(zip(table["quantity"], table["value"].astype(str)))
        assert values["converged"] == "1"
        assert float(values["jtilde"]) == pytest.approx(result.solution.j_tilde, rel=1e-11)
        assert (tmp_path / "out" / "timings.csv").exists()
        grid = np.loadtxt(tmp_path / "out" / "active_lo.csv", delimiter=",", ndmin=2)
        assert grid.shape == (4, 4)
        assert int(grid.sum()) == result.solution.active_lo.size
        u = np.loadtxt(tmp_path / "out" / "u.csv", delimiter=",", ndmin=2)
        assert u.shape == (4, 4)
        assert np.allclose(u, result.solution.u.grid(), rtol=1e-11, atol=0)
        y = np.loadtxt(tmp_path / "out" / "y.csv", delimiter=",", ndmin=2)
        assert y.shape == (17, 17)
        assert not y[0].any() and not y[-1].any() and not y[:, 0].any() and not y[:, -1].any()
        assert np.abs(y).max() > 0

    def test_result_csv_is_deterministic(self, tmp_path):
        first = run_single(small_config(tmp_path, output=tmp_path / "a"))
        second = run_single(small_config(tmp_path, output=tmp_path / "b"))
        assert first.solution.j_tilde == second.solution.j_tilde
        assert (tmp_path / "a" / "result.csv").read_bytes() == (tmp_path / "b" / "result.csv").read_bytes()

    def test_zero_target(self, tmp_path):
        result = run_single(small_config(tmp_path, y_d=0, phi1=-0.01, phi2=0.01), write=False)
        assert result.solution.j_tilde == 0.0
        assert not result.solution.u.values.any()
        assert result.output_dir is None

    def test_fine_space_with_reference(self, tmp_path):
        result = run_single(small_config(tmp_path, space="fine", nrho=16, reference="true"), write=False)
        names = dict(result.quantities)
        assert float(names["jtilde_fine"]) == pytest.approx(result.solution.j_tilde, rel=1e-10)
        assert result.errors.rel_l2_u <= 1e-8
        assert float(names["ritz_gap"]) <= 1e-9

    def test_multiscale_with_reference(self, tmp_path):
        result = run_single(small_config(tmp_path, reference="true", method="projected_gradient", max_iter=5000))
        assert result.solution.method == "projected_gradient"
        assert 0 < result.errors.rel_l2_u < 1
        assert np.isfinite(result.errors.rel_energy_y)


class TestSweep:
    def test_single_point(self, tmp_path):
        config = small_config(tmp_path, sweep__values="4")
        result = run_sweep(config)
        assert len(result.table) == 1
        assert all(np.isnan(value) for value in result.slopes.values())
        lines = result.path.read_text().splitlines()
        assert lines[0] == ",".join(SWEEP_COLUMNS)
        assert lines[2].startswith("reference,")
        assert lines[3].startswith("slope,")

    def test_two_points(self, tmp_path):
        result = run_sweep(small_config(tmp_path, sweep__values="2,4"))
        assert list(result.table["k"]) == [3, 5]
        assert np.isfinite(result.slopes["rel_l2_u"])
        assert result.table["param"].tolist() == [0.5, 0.25]

    def test_ritz_gap_is_bounded_by_the_solution_errors(self, tmp_path):
        result = run_sweep(small_config(tmp_path, sweep__values="2,4"))
        gaps = result.table["ritz_gap"].to_numpy(dtype=float)
        ratios = result.table["ritz_ratio"].to_numpy(dtype=float)
        assert np.all(gaps > 0)
        assert np.all((ratios > 0) & (ratios <= 1.0 + 1e-9))
        assert gaps[1] < gaps[0]
        assert np.isfinite(result.slopes["ritz_gap"])

    def test_rho_sweep_improves_the_cost(self, tmp_path):
        config = small_config(tmp_path, gamma=0.001, phi1=-1, phi2=20, sweep__param="rho", sweep__values="4,8,16")
        result = run_sweep(config)
        jtilde = result.table["jtilde"].to_numpy(dtype=float)
        assert result.table["param"].tolist() == [0.25, 0.125, 0.0625]
        assert np.all(np.diff(jtilde) <= 1e-9 * np.abs(jtilde[:-1]))
        assert jtilde[-1] < jtilde[0]
        assert set(result.table["k"]) == {5}

    @pytest.mark.parametrize("values", ["1", "8"])
    def test_invalid_point_is_a_config_error(self, tmp_path, values):
        with pytest.raises(ConfigError, match="sweep.values"):
            run_sweep(small_config(tmp_path, sweep__values=values))

    def test_elliptic_mode(self, tmp_path):
        result = run_sweep(small_config(tmp_path, sweep__values="2,4", sweep__mode="elliptic"))
        assert result.jtilde_fine is None
        assert result.table["rel_energy_y"].iloc[1] < result.table["rel_energy_y"].iloc[0]

    def test_elliptic_rho_is_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            run_sweep(small_config(tmp_path, sweep__values="2", sweep__mode="elliptic", sweep__param="rho"))

    def test_bad_value_flushes_partial_table(self, tmp_path):
        config = small_config(tmp_path, sweep__values="4,3")
        with pytest.raises(ConfigError):
            run_sweep(config)
        table = pd.read_csv(tmp_path / "out" / "sweep.csv")
        assert float(table["param"].iloc[0]) == 0.25


class TestCommands:
    def test_field_gen_and_show(self, tmp_path, capsys):
        path = tmp_path / "field.bin"
        argv = ["field", "gen", "--n", "16", "--kind", "heterogeneous", "--blocks", "4", "--seed", "3",
                "--out", str(path)]
        assert main(argv) == EXIT_OK
        assert path.exists()
        assert main(["field", "show", str(path), "--blocks", "4"]) == EXIT_OK
        assert "contrast" in capsys.readouterr().out

    def test_solve(self, tmp_path, capsys):
        assert main(small_argv(tmp_path)) == EXIT_OK
        assert "jtilde" in capsys.readouterr().out
        assert (tmp_path / "out" / "result.csv").exists()

    def test_solve_with_field_file(self, tmp_path):
        path = tmp_path / "field.bin"
        main(["field", "gen", "--n", "16", "--kind", "oscillatory", "--eps", "0.25", "--out", str(path)])
        argv = ["solve", "--nh", "16", "--nH", "4", "--kind", "file", "--field", str(path),
                "--output", str(tmp_path / "out"), "--cache", str(tmp_path / "cache")]
        assert main(argv) == EXIT_OK
        assert (tmp_path / "cache" / "file-field-H4-h16-k5.bin").exists()

    def test_basis_build_and_info(self, tmp_path, capsys):
        out = tmp_path / "basis.bin"
        argv = ["basis", "build", "--nh", "16", "--nH", "4", "--k", "2", "--cache", str(tmp_path / "cache"),
                "--out", str(out)]
        assert main(argv) == EXIT_OK
        assert main(["basis", "info", str(out)]) == EXIT_OK
        assert "fingerprint" in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path):
        assert main(["solve", "--nh", "15", "--nH", "4", "--output", str(tmp_path)]) == EXIT_CONFIG
        assert main(["solve", "--set", "gamma=0", "--output", str(tmp_path)]) == EXIT_CONFIG
        assert main(["solve", "--nh", "16", "--nH", "8", "--output", str(tmp_path)]) == EXIT_CONFIG

    def test_corrupt_cache_exit_code(self, tmp_path):
        config = small_config(tmp_path)
        path = basis_path(config)
        path.parent.mkdir(parents=True)
        path.write_bytes(b"\0" * 3)
        assert main(small_argv(tmp_path)) == EXIT_IO
        assert main(small_argv(tmp_path, "--rebuild")) == EXIT_OK

    def test_missing_field_file(self, tmp_path):
        argv = ["solve", "--nh", "16", "--nH", "4", "--kind", "file", "--field", str(tmp_path / "none.bin"),
                "--output", str(tmp_path)]
        assert main(argv) == EXIT_IO

    def test_validate_structure(self, capsys):
        assert main(["validate", "--suite", "structure"]) == EXIT_OK
        assert "csv_determinism" in capsys.readouterr().out

    def test_validate_oracles(self):
        assert main(["validate", "--suite", "oracles", "--instances", "3", "--seed", "5"]) == EXIT_OK
