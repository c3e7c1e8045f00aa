import json
from pathlib import Path

import pytest

from discount_kernel.core.config import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_RIDGE, AppConfig, RunConfig
from discount_kernel.core.errors import ConfigError
from main import main, parse_run_config


@pytest.fixture
def clean_env(monkeypatch):
    for name in ("DISCOUNT_KERNEL_LOG", "DISCOUNT_KERNEL_LOG_FILE", "DISCOUNT_KERNEL_JOBS"):
        monkeypatch.delenv(name, raising=False)
    return monkeypatch


def test_app_config_defaults(clean_env):
    config = AppConfig.from_env()
    assert config.log_level == "info"
    assert config.log_file is None
    assert config.jobs == 1
    config.validate()


def test_app_config_from_env(clean_env, tmp_path):
    clean_env.setenv("DISCOUNT_KERNEL_LOG", " DEBUG ")
    clean_env.setenv("DISCOUNT_KERNEL_LOG_FILE", str(tmp_path / "run.log"))
    clean_env.setenv("DISCOUNT_KERNEL_JOBS", "4")

    config = AppConfig.from_env()
    assert config.log_level == "debug"
    assert config.log_file == tmp_path / "run.log"
    assert config.jobs == 4


def test_app_config_validation(clean_env):
    clean_env.setenv("DISCOUNT_KERNEL_LOG", "verbose")
    clean_env.setenv("DISCOUNT_KERNEL_JOBS", "many")

    with pytest.raises(ConfigError) as exc:
        AppConfig.from_env().validate()
    assert len(exc.value.errors) == 2
    assert "DISCOUNT_KERNEL_JOBS" in str(exc.value)


def test_run_config_defaults(tmp_path):
    config = RunConfig(subcommand="fit", out=tmp_path / "out")
    assert (config.alpha, config.beta, config.ridge) == (DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_RIDGE)
    config.validate()
    assert (tmp_path / "out").is_dir()


@pytest.mark.parametrize(
    "kwargs,message",
    [
        ({"ridge": 0.0}, "--ridge"),
        ({"beta": -0.1}, "--beta"),
        ({"alpha": -0.1}, "--alpha"),
        ({"poly": (0.0, 0.0)}, "--poly"),
        ({"terminal_weight": -1.0}, "--terminal-weight"),
        ({"d_min": 3, "d_max": 2}, "--d-min"),
        ({"d_max": 64}, "--d-max"),
        ({"init_rates": [-0.1, -0.1]}, "--init"),
        ({"dt": 2.0, "horizon": 1.0}, "--dt"),
        ({"noise_bp": -1.0}, "--noise-bp"),
    ],
)
def test_run_config_validation(tmp_path, kwargs, message):
    config = RunConfig(subcommand="fit", out=tmp_path, **kwargs)
    with pytest.raises(ConfigError, match=message):
        config.validate()


def test_run_config_checks_maturities_only_for_simulate(tmp_path):
    RunConfig(subcommand="fit", out=tmp_path, maturities=[5.0]).validate()
    with pytest.raises(ConfigError, match="--maturities"):
        RunConfig(subcommand="simulate", out=tmp_path, maturities=[5.0]).validate()


def test_run_config_checks_inputs_exist(tmp_path):
    config = RunConfig(subcommand="fit", out=tmp_path, systems_dir=tmp_path / "missing")
    with pytest.raises(ConfigError, match="does not exist"):
        config.validate()


def test_parse_run_config(tmp_path):
    config = parse_run_config(
        ["fit", "--out", str(tmp_path), "--systems", str(tmp_path), "--poly", "1,0.5", "--ridge", "0.01"], default_jobs=3
    )
    assert config.subcommand == "fit"
    assert config.systems_dir == tmp_path
    assert config.poly == (1.0, 0.5)
    assert config.ridge == 0.01
    assert config.jobs == 3

    simulate = parse_run_config(["simulate", "--out", str(tmp_path), "--model", str(tmp_path), "--d", "2"])
    assert (simulate.d_min, simulate.d_max) == (0, 2)
    assert simulate.pin_terminal


def test_parser_rejects_bad_values(tmp_path):
    with pytest.raises(SystemExit) as exc:
        parse_run_config(["crossval", "--out", str(tmp_path), "--systems", str(tmp_path), "--folds", "1"])
    assert exc.value.code == 2

    with pytest.raises(SystemExit):
        parse_run_config(["fit", "--out", str(tmp_path), "--systems", str(tmp_path), "--poly", "1,x"])

    with pytest.raises(SystemExit):
        parse_run_config(["fit", "--out", str(tmp_path)])


def test_main_reports_missing_input(clean_env, tmp_path, capsys):
    code = main(["fit", "--out", str(tmp_path / "out"), "--systems", str(tmp_path / "missing")])
    assert code == 2
    assert "does not exist" in capsys.readouterr().err


def test_main_runs_a_command(clean_env, tmp_path):
    out = tmp_path / "synth"
    assert main(["synthesize", "--out", str(out), "--n-days", "1", "--contracts", "4", "--seed", "3"]) == 0
    assert (out / "quotes.csv").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["parameters"]["seed"] == 3
    assert Path(manifest["parameters"]["out"]) == out
