import numpy as np
import pytest

from ddlod.config import Settings
from ddlod.config.experiment import (
    PRESETS,
    ExperimentConfig,
    SpaceKind,
    SweepParam,
    build_config,
    parse_assignments,
    parse_lines,
)
from ddlod.core.assembly import AffineFunction
from ddlod.exceptions import ConfigError


def test_defaults():
    config = build_config()
    assert config.nrho == config.nH == 8
    assert config.space is SpaceKind.MULTISCALE
    assert config.phi1 == AffineFunction(-1.0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_are_valid(name):
    config = build_config(preset=name)
    assert config.nh == 320
    assert config.nH == 10
    assert config.coeff.kind == name


def test_oscillatory_preset_bounds():
    config = build_config(preset="oscillatory")
    assert config.phi1 == AffineFunction(-0.005, -0.01, 0.0)
    assert config.phi2 == AffineFunction(-0.005, 0.0, 0.0007)
    assert config.y_d == -1.0


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# small heterogeneous run\n"
        "nh = 32\n"
        "\n"
        "nH=4   # coarse\n"
        "coeff.kind=heterogeneous\n"
        "coeff.blocks=8\n"
        "coeff.seed=7\n"
        "phi1=-0.01\n"
        "phi2=0.01\n",
        encoding="utf-8",
    )
    config = build_config(path=path, overrides={"coeff.seed": "9", "gamma": "0.5", "nrho": None})
    assert config.nh == 32
    assert config.coeff.seed == 9
    assert config.gamma == 0.5
    assert config.nrho == 4


def test_preset_then_flags():
    config = build_config(preset="heterogeneous", overrides={"nh": "40", "nH": "4", "coeff.blocks": "8"})
    assert (config.nh, config.nH, config.coeff.blocks) == (40, 4, 8)
    assert config.coeff.hi == 1350.0


def test_sweep_values():
    config = build_config(overrides={"sweep.values": "8, 16,32", "sweep.param": "rho", "nh": "32", "nH": "4"})
    assert config.sweep.values == [8, 16, 32]
    assert config.sweep.param is SweepParam.RHO


def test_flat_round_trip():
    config = build_config(preset="oscillatory", overrides={"k": "4", "reference": "true", "sweep.values": "10,20"})
    assert build_config(overrides=config.to_flat()) == config


class TestErrors:
    def test_line_without_assignment(self):
        with pytest.raises(ConfigError, match=":2:"):
            parse_lines(["nh=8", "oops"])

    def test_empty_key(self):
        with pytest.raises(ConfigError):
            parse_assignments(["=3"])

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="bogus"):
            build_config(overrides={"bogus": "1"})

    def test_unknown_section_key_is_named(self):
        with pytest.raises(ConfigError, match="coeff.colour"):
            build_config(overrides={"coeff.colour": "red"})

    def test_indivisible_meshes(self):
        with pytest.raises(ConfigError, match="nH"):
            build_config(overrides={"nh": "30", "nH": "8"})
        with pytest.raises(ConfigError, match="nrho"):
            build_config(overrides={"nh": "32", "nH": "4", "nrho": "5"})

    def test_multiscale_needs_refinement_ratio_three(self):
        with pytest.raises(ConfigError, match="nH=8 is too fine"):
            build_config(overrides={"nh": "16", "nH": "8"})
        assert build_config(overrides={"nh": "24", "nH": "8"}).nH == 8
        assert build_config(overrides={"nh": "16", "nH": "8", "space": "fine"}).space == SpaceKind.FINE

    def test_updates_are_validated(self):
        config = build_config(overrides={"nh": "32", "nH": "4"})
        point = config.with_updates(nH=8, nrho=8)
        assert (point.nH, point.nrho, point.nh) == (8, 8, 32)
        assert point.phi1 == config.phi1
        for update in ({"nH": 1}, {"nrho": 5}, {"nH": 16, "nrho": 16}):
            with pytest.raises(ConfigError):
                config.with_updates(**update)

    def test_blocks_must_divide(self):
        with pytest.raises(ConfigError, match="blocks"):
            build_config(overrides={"nh": "32", "nH": "4", "coeff.kind": "heterogeneous", "coeff.blocks": "5"})

    def test_crossed_bounds(self):
        with pytest.raises(ConfigError, match="phi1/phi2"):
            build_config(overrides={"phi1": "1", "phi2": "0"})

    def test_bad_affine(self):
        with pytest.raises(ConfigError, match="phi2"):
            build_config(overrides={"phi2": "1,x"})

    def test_bad_values(self):
        with pytest.raises(ConfigError, match="gamma"):
            build_config(overrides={"gamma": "-1"})
        with pytest.raises(ConfigError, match="method"):
            build_config(overrides={"method": "newton"})
        with pytest.raises(ConfigError, match="coeff.kind"):
            build_config(overrides={"coeff.kind": "marble"})

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            build_config(preset="nope")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            build_config(path=tmp_path / "missing.cfg")


class TestTarget:
    def test_constant(self):
        assert build_config(overrides={"y_d": "-2"}).target_values(81) == -2.0

    def test_npy_file(self, tmp_path):
        path = tmp_path / "yd.npy"
        np.save(path, np.arange(81.0))
        config = build_config(overrides={"y_d": str(path), "nh": "8", "nH": "2"})
        assert np.array_equal(config.target_values(81), np.arange(81.0))
        with pytest.raises(ConfigError):
            config.target_values(25)


def test_settings_read_environment(monkeypatch):
    monkeypatch.setenv("DDLOD_THREADS", "4")
    monkeypatch.setenv("DDLOD_PDAS_MAX_ITER", "7")
    settings = Settings()
    assert settings.threads == 4
    assert settings.pdas_max_iter == 7
    assert settings.cache_dir == ".ddlod-cache"
