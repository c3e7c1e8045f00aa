import json
from unittest.mock import patch

import pandas as pd
import pytest

from discount_kernel.core.config import RunConfig
from discount_kernel.core.errors import DiagnosticInvalidError, IllPosedFitError
from discount_kernel.handlers import EXIT_DIAGNOSTIC, EXIT_INPUT, EXIT_OK, EXIT_STRICT, CommandHandlers
from discount_kernel.services.curve_service import FittedCurve, fit_curve
from discount_kernel.services.dynamics_service import AffineModelSpec
from discount_kernel.services.reduction_service import ReducedModel
from discount_kernel.services.storage_service import load_artifacts


async def run(tmp_path, subcommand, **kwargs):
    config = RunConfig(subcommand=subcommand, out=tmp_path / subcommand, **kwargs)
    config.validate()
    return config.out, await CommandHandlers(config).run()


async def systems_bundle(tmp_path, n_days=3, contracts_per_day=10, **kwargs):
    synth_out, code = await run(tmp_path, "synthesize", n_days=n_days, contracts_per_day=contracts_per_day, **kwargs)
    assert code == EXIT_OK
    ingest_out, code = await run(tmp_path, "ingest", csv_path=synth_out / "quotes.csv")
    assert code == EXIT_OK
    return ingest_out / "systems"


async def curves_bundle(tmp_path):
    systems = await systems_bundle(tmp_path)
    out, code = await run(tmp_path, "fit", systems_dir=systems)
    assert code == EXIT_OK
    return out / "curves"


async def test_synthesize_writes_quotes_and_truth(tmp_path):
    out, code = await run(tmp_path, "synthesize", n_days=2, contracts_per_day=5)
    assert code == EXIT_OK

    quotes = pd.read_csv(out / "quotes.csv")
    assert list(quotes.columns) == ["quote_date", "maturity_date", "coupon_rate", "frequency", "clean_price", "face"]
    assert len(quotes) == 10

    truth = load_artifacts(out / "truth")
    assert isinstance(truth.objects["true_model"], ReducedModel)
    assert isinstance(truth.objects["true_dynamics"], AffineModelSpec)
    assert truth.objects["true_model"].n_days == 2

    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["subcommand"] == "synthesize"
    assert manifest["exit_code"] == EXIT_OK


async def test_ingest_reports_malformed_rows(tmp_path):
    csv = tmp_path / "quotes.csv"
    csv.write_text(
        "quote_date,maturity_date,coupon_rate,frequency,clean_price,face\n"
        "2021-01-15,2021-07-15,0,2,99.8,100\n"
        "not-a-date,2021-07-15,0,2,99.8,100\n"
    )
    out, code = await run(tmp_path, "ingest", csv_path=csv)
    assert code == EXIT_OK
    rejects = pd.read_csv(out / "rejects.csv")
    assert rejects["line"].tolist() == [3]
    assert len(load_artifacts(out / "systems").objects) == 1


async def test_empty_file_is_an_input_error(tmp_path, capsys):
    csv = tmp_path / "empty.csv"
    csv.write_text("")
    out, code = await run(tmp_path, "ingest", csv_path=csv)
    assert code == EXIT_INPUT
    assert "Input error" in capsys.readouterr().out
    assert not (out / "run_manifest.json").exists()


async def test_missing_input_flag(tmp_path):
    _, code = await run(tmp_path, "fit")
    assert code == EXIT_INPUT


async def test_fit_writes_curves_and_rmse(tmp_path):
    systems = await systems_bundle(tmp_path)
    out, code = await run(tmp_path, "fit", systems_dir=systems, ridge=1e-6)
    assert code == EXIT_OK

    bundle = load_artifacts(out / "curves")
    assert len(bundle.of_type(FittedCurve)) == 3
    rmse = pd.read_csv(out / "fit_rmse.csv")
    assert list(rmse.columns) == ["date", "rmse_yield", "n_contracts"]
    assert rmse["rmse_yield"].max() < 1e-4

    grid = pd.read_csv(out / "curve_grid.csv")
    assert list(grid.columns) == ["date", "tenor", "price", "yield"]

    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["parameters"]["alpha"] == 0.2
    assert manifest["parameters"]["beta"] == 0.04
    assert manifest["fit_failures"] == 0


async def test_fit_strict_fails_on_a_bad_day(tmp_path):
    systems = await systems_bundle(tmp_path)
    first_day = sorted(load_artifacts(systems).objects)[0].removeprefix("system_")

    def fit_or_fail(system, config):
        if system.quote_date == first_day:
            raise IllPosedFitError("ridge system is singular", 1e20)
        return fit_curve(system, config)

    with patch("discount_kernel.services.curve_service.fit_curve", side_effect=fit_or_fail):
        out, code = await run(tmp_path, "fit", systems_dir=systems, strict=True)

    assert code == EXIT_STRICT
    failures = pd.read_csv(out / "failures.csv")
    assert failures["date"].tolist() == [first_day]
    assert len(load_artifacts(out / "curves").of_type(FittedCurve)) == 2


async def test_crossval_singleton_grid(tmp_path):
    systems = await systems_bundle(tmp_path)
    out, code = await run(tmp_path, "crossval", systems_dir=systems, folds=3, xlsx=True)
    assert code == EXIT_OK

    best = json.loads((out / "best_params.json").read_text())
    assert (best["alpha"], best["beta"], best["ridge"]) == (0.2, 0.04, 0.001)
    assert len(pd.read_csv(out / "cv_scores.csv")) == 1
    assert (out / "crossval.xlsx").exists()


async def test_crossval_reports_invalid_grid_entries(tmp_path, capsys):
    systems = await systems_bundle(tmp_path)
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"alpha": [0.2, -1.0], "beta": [0.04], "ridge": [1e-3, 1e-2]}))
    out, code = await run(tmp_path, "crossval", systems_dir=systems, grid_path=grid, folds=3)

    assert code == EXIT_OK
    assert "alpha=-1.0" in capsys.readouterr().out
    assert len(pd.read_csv(out / "cv_scores.csv")) == 2
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["invalid_grid_entries"] == ["alpha=-1.0 violates the kernel invariants"]


async def test_reduce_and_simulate(tmp_path):
    curves = await curves_bundle(tmp_path)
    out, code = await run(tmp_path, "reduce", curves_dir=curves, d_min=0, d_max=1, starts=2, max_iter=300)
    assert code == EXIT_OK

    sweep = pd.read_csv(out / "reduce_sweep.csv")
    assert sweep["d"].tolist() == [0, 1]
    assert sweep["total_loss"].iloc[1] <= sweep["total_loss"].iloc[0] * (1 + 1e-9)
    models = load_artifacts(out / "models")
    assert sorted(models.objects) == ["reduced_d0", "reduced_d1"]

    sim_out, code = await run(
        tmp_path,
        "simulate",
        model_path=out / "models",
        d_max=1,
        n_paths=64,
        dt=1.0 / 52,
        horizon=0.5,
        maturities=[0.25, 0.5],
    )
    assert code == EXIT_OK
    paths = pd.read_csv(sim_out / "paths.csv")
    assert list(paths.columns) == ["path_id", "time", "z_0", "z_1", "exploded"]
    assert paths["path_id"].nunique() == 64
    martingale = pd.read_csv(sim_out / "martingale.csv")
    assert set(martingale["maturity"]) == {0.25, 0.5}
    assert isinstance(load_artifacts(sim_out / "simulation").objects["dynamics"], AffineModelSpec)


async def test_simulate_with_invalid_diagnostic(tmp_path):
    curves = await curves_bundle(tmp_path)
    out, _ = await run(tmp_path, "reduce", curves_dir=curves, d_min=0, d_max=0, starts=1, max_iter=200)

    with patch("discount_kernel.handlers.martingale_diagnostic", side_effect=DiagnosticInvalidError(0.8)):
        sim_out, code = await run(tmp_path, "simulate", model_path=out / "models", d_max=0, n_paths=8, horizon=0.1, dt=0.05, maturities=[0.1])

    assert code == EXIT_DIAGNOSTIC
    manifest = json.loads((sim_out / "run_manifest.json").read_text())
    assert manifest["exit_code"] == EXIT_DIAGNOSTIC


async def test_compare_naive(tmp_path):
    systems = await systems_bundle(tmp_path)
    out, code = await run(
        tmp_path, "compare-naive", systems_dir=systems, init_rates=[-0.02, -0.15], starts=1, max_iter=200
    )
    assert code == EXIT_OK

    frame = pd.read_csv(out / "compare_naive.csv")
    assert {"rmse_kernel", "rmse_reduced_1", "rmse_naive", "seconds_kernel", "seconds_naive"} <= set(frame.columns)
    assert (frame["seconds_kernel"] > 0).all()
    assert (frame["seconds_naive"] > 0).all()

    fit_out, _ = await run(tmp_path, "fit", systems_dir=systems)
    fit_rmse = pd.read_csv(fit_out / "fit_rmse.csv")
    pd.testing.assert_series_equal(frame["rmse_kernel"], fit_rmse["rmse_yield"], check_names=False)


async def test_sensitivity(tmp_path):
    systems = await systems_bundle(tmp_path)
    out, code = await run(tmp_path, "sensitivity", systems_dir=systems, steps=2)
    assert code == EXIT_OK
    frame = pd.read_csv(out / "sensitivity.csv")
    assert len(frame) == 27
    assert set(frame["slice"]) == {"alpha-beta", "alpha-ridge", "beta-ridge"}


@pytest.mark.slow
async def test_noiseless_pipeline_reduces_to_the_true_dimension(tmp_path):
    systems = await systems_bundle(tmp_path, contracts_per_day=40)
    fit_out, code = await run(tmp_path, "fit", systems_dir=systems, ridge=1e-6)
    assert code == EXIT_OK
    assert pd.read_csv(fit_out / "fit_rmse.csv")["rmse_yield"].max() <= 1e-6

    out, code = await run(tmp_path, "reduce", curves_dir=fit_out / "curves", d_min=1, d_max=2, max_iter=4000)
    assert code == EXIT_OK
    sweep = pd.read_csv(out / "reduce_sweep.csv").set_index("d")
    assert sweep.loc[2, "total_loss"] <= 1e-8
    assert sweep.loc[2, "avg_rmse"] <= 1e-6
    assert sweep.loc[1, "total_loss"] > sweep.loc[2, "total_loss"]


@pytest.mark.slow
async def test_naive_regression_is_slower_at_comparable_accuracy(tmp_path):
    systems = await systems_bundle(tmp_path, n_days=5, contracts_per_day=40, noise_bp=5.0)
    out, code = await run(
        tmp_path, "compare-naive", systems_dir=systems, init_rates=[-0.02, -0.06, -0.15], starts=1
    )
    assert code == EXIT_OK

    frame = pd.read_csv(out / "compare_naive.csv")
    assert frame["price_rmse_naive"].mean() <= 2.0 * frame["price_rmse_kernel"].mean()
    assert frame["seconds_naive"].iloc[0] > frame["seconds_kernel"].iloc[0]
