import asyncio
import json
import logging
import math
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from .core.config import RunConfig
from .core.errors import (
    DiagnosticInvalidError,
    DiscountKernelError,
    InputError,
)
from .resources.templates import MessageTemplates
from .services.curve_service import (
    CashflowSystem,
    CurveService,
    FitConfig,
    FittedCurve,
    cross_validate,
    curve_grid_frame,
    expand_grid,
    model_prices,
    rmse_yield_report,
    sensitivity_grid,
    yield_rmse,
)
from .services.data_service import SyntheticSpec, generate_synthetic, ingest_csv, write_quotes_csv
from .services.dynamics_service import (
    AffineModelSpec,
    DiffusionSpec,
    estimate_covariance,
    martingale_diagnostic,
    pin_terminal,
    simulate,
)
from .services.kernel_service import KernelSpec
from .services.reduction_service import ReducedModel, ReductionConfig, naive_fit, optimize_rates, sweep_dimensions
from .services.report_service import ReportService
from .services.storage_service import load_artifacts, save_artifacts

logger = logging.getLogger("discount_kernel.handlers")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_STRICT = 3
EXIT_DIAGNOSTIC = 4

GRID_STEP = 0.25


def _price_rmse(system: CashflowSystem, curve: Callable[[Any], Any]) -> float:
    if not system.n_contracts:
        return 0.0
    return float(np.sqrt(np.mean((system.prices - model_prices(system, curve)) ** 2)))


def _safe_yield_rmse(system: CashflowSystem, curve: Callable[[Any], Any]) -> float:
    try:
        return yield_rmse(system, curve)
    except DiscountKernelError:
        return math.nan


class CommandHandlers:
    """One method per subcommand; each returns a process exit code"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.reports = ReportService(config.out, xlsx=config.xlsx)
        self.extra: Dict[str, Any] = {}

    # ========================================================================
    # DISPATCH
    # ========================================================================

    async def run(self) -> int:
        command = getattr(self, "cmd_" + self.config.subcommand.replace("-", "_"), None)
        if command is None:
            print(MessageTemplates.INPUT_ERROR.format(error=f"unknown subcommand {self.config.subcommand}"))
            return EXIT_INPUT

        try:
            code = await command()
        except DiagnosticInvalidError as e:
            logger.error(f"Simulation diagnostic invalid: {e}")
            print(MessageTemplates.DIAGNOSTIC_INVALID.format(error=e))
            code = EXIT_DIAGNOSTIC
        except (DiscountKernelError, ValueError) as e:
            logger.error(f"{self.config.subcommand} failed: {e}")
            print(MessageTemplates.INPUT_ERROR.format(error=e))
            return EXIT_INPUT

        self.reports.write_workbook(self.config.subcommand)
        self.reports.write_manifest(self.config.subcommand, self.config, {"exit_code": code, **self.extra})
        return code

    # ========================================================================
    # HELPERS
    # ========================================================================

    def _require(self, name: str, flag: str) -> Path:
        path = getattr(self.config, name)
        if path is None:
            raise InputError(MessageTemplates.MISSING_INPUT.format(flag=flag, command=self.config.subcommand))
        return Path(path)

    def _load_systems(self, name: str = "systems_dir", flag: str = "--systems") -> List[CashflowSystem]:
        systems = load_artifacts(self._require(name, flag)).of_type(CashflowSystem)
        if not systems:
            raise InputError(f"no cashflow systems in {getattr(self.config, name)}")
        return systems

    def _fit_config(self, kernel: Optional[KernelSpec] = None) -> FitConfig:
        kernel = kernel or KernelSpec(self.config.alpha, self.config.beta, tuple(self.config.poly))
        weight = self.config.terminal_weight if self.config.terminal_weight is not None else "auto"
        return FitConfig(kernel=kernel, ridge=self.config.ridge, terminal_weight=weight)

    def _reduction_config(self) -> ReductionConfig:
        return ReductionConfig(starts=self.config.starts, max_iter=self.config.max_iter, seed=self.config.seed)

    # ========================================================================
    # COMMANDS
    # ========================================================================

    async def cmd_ingest(self) -> int:
        result = await asyncio.to_thread(ingest_csv, self._require("csv_path", "--csv"))
        out = self.config.out / "systems"
        objects = {f"system_{s.quote_date}": s for s in result.systems}
        save_artifacts(out, objects, {"source": str(self.config.csv_path), "n_quotes": len(result.quotes)})
        self.reports.write_csv(result.rejects, "rejects")

        print(
            MessageTemplates.INGESTED.format(
                quotes=len(result.quotes), days=len(result.systems), rejects=len(result.rejects), out=out
            )
        )
        return EXIT_OK

    async def cmd_synthesize(self) -> int:
        spec = SyntheticSpec(
            n_days=self.config.n_days,
            contracts_per_day=self.config.contracts_per_day,
            price_noise_sd=self.config.noise_bp / 100.0,
            seed=self.config.seed,
        )
        dataset = await asyncio.to_thread(generate_synthetic, spec)
        path = write_quotes_csv(dataset.quotes, self.config.out / "quotes.csv")

        truth = ReducedModel(
            rates=dataset.model.rates,
            daily_coefs=dataset.daily_coefs,
            kernel=KernelSpec(self.config.alpha, self.config.beta),
            loss=0.0,
            dates=[d.isoformat() for d in dataset.days],
        )
        save_artifacts(self.config.out / "truth", {"true_model": truth, "true_dynamics": dataset.model})

        print(MessageTemplates.SYNTHESIZED.format(quotes=len(dataset.quotes), days=len(dataset.days), out=path))
        return EXIT_OK

    async def cmd_fit(self) -> int:
        systems = self._load_systems()
        config = self._fit_config()
        fits = await CurveService(config, jobs=self.config.jobs).fit_days(systems)

        fitted = [f for f in fits if f.curve is not None]
        failed = [f for f in fits if f.curve is None]

        objects: Dict[str, Any] = {}
        for f in fitted:
            objects[f"system_{f.quote_date or f.index}"] = systems[f.index]
            objects[f"curve_{f.quote_date or f.index}"] = f.curve
        out = self.config.out / "curves"
        save_artifacts(out, objects, {"alpha": config.kernel.alpha, "beta": config.kernel.beta, "ridge": config.ridge})

        report = rmse_yield_report([systems[f.index] for f in fitted], [f.curve for f in fitted])
        self.reports.write_csv(report.table, "fit_rmse")

        grids = []
        for f in fitted:
            horizon = float(systems[f.index].tenors.max()) if systems[f.index].n_tenors else 0.0
            grid = curve_grid_frame(f.curve, np.arange(0.0, horizon + GRID_STEP / 2, GRID_STEP))
            grid.insert(0, "date", f.quote_date or str(f.index))
            grids.append(grid)
        if grids:
            self.reports.write_csv(pd.concat(grids, ignore_index=True), "curve_grid")

        print(MessageTemplates.FITTED.format(fitted=len(fitted), days=len(fits), rmse=report.average, out=out))
        self.extra["fit_failures"] = len(failed)
        if failed:
            frame = pd.DataFrame([{"date": f.quote_date or str(f.index), "error": f.error} for f in failed])
            path = self.reports.write_csv(frame, "failures")
            print(MessageTemplates.FIT_FAILURES.format(count=len(failed), path=path))
            if self.config.strict:
                print(MessageTemplates.STRICT_FAILURE.format(count=len(failed)))
                return EXIT_STRICT
        return EXIT_OK

    async def cmd_crossval(self) -> int:
        systems = self._load_systems()
        if self.config.grid_path is not None:
            grid = json.loads(Path(self.config.grid_path).read_text(encoding="utf-8"))
        else:
            grid = {"alpha": [self.config.alpha], "beta": [self.config.beta], "ridge": [self.config.ridge]}

        cells, rejected = expand_grid(grid)
        if rejected:
            print(MessageTemplates.INVALID_GRID.format(entries="\n".join(f"- {r}" for r in rejected)))
            self.extra["invalid_grid_entries"] = rejected
        if not cells:
            raise InputError("no valid grid cells")
        valid = {
            "alpha": sorted({c[0] for c in cells}),
            "beta": sorted({c[1] for c in cells}),
            "ridge": sorted({c[2] for c in cells}),
        }

        weight = self.config.terminal_weight if self.config.terminal_weight is not None else "auto"
        result = await asyncio.to_thread(
            cross_validate,
            systems,
            valid,
            self.config.folds,
            tuple(self.config.poly),
            weight,
            self.config.seed,
            self.config.jobs,
        )
        self.reports.write_csv(result.scores, "cv_scores")
        best_path = self.config.out / "best_params.json"
        best_path.write_text(json.dumps(result.best, indent=2), encoding="utf-8")

        print(MessageTemplates.CROSSVAL.format(out=best_path, **result.best))
        return EXIT_OK

    async def cmd_reduce(self) -> int:
        bundle = load_artifacts(self._require("curves_dir", "--curves"))
        fits = bundle.of_type(FittedCurve)
        systems = bundle.of_type(CashflowSystem)
        if not fits:
            raise InputError(f"no fitted curves in {self.config.curves_dir}")

        results = await asyncio.to_thread(
            sweep_dimensions, fits, self.config.d_min, self.config.d_max, self._reduction_config(), self.config.jobs
        )

        rows = []
        models = {}
        for model, report in results:
            rmse = [_safe_yield_rmse(s, model.curve(t)) for t, s in enumerate(systems[: model.n_days])]
            price = [_price_rmse(s, model.curve(t)) for t, s in enumerate(systems[: model.n_days])]
            avg = float(np.nanmean(rmse)) if rmse and not np.all(np.isnan(rmse)) else math.nan
            rows.append(
                {
                    "d": model.d,
                    "total_loss": report.total,
                    "avg_rmse": avg,
                    "avg_price_rmse": float(np.mean(price)) if price else math.nan,
                    "converged": report.converged,
                }
            )
            models[f"reduced_d{model.d}"] = model
            flag = "" if report.converged else MessageTemplates.NOT_CONVERGED
            print(MessageTemplates.REDUCED.format(d=model.d, loss=report.total, rmse=avg, flag=flag))

        save_artifacts(self.config.out / "models", models, {"d_min": self.config.d_min, "d_max": self.config.d_max})
        self.reports.write_csv(pd.DataFrame(rows), "reduce_sweep")
        return EXIT_OK

    async def cmd_simulate(self) -> int:
        path = self._require("model_path", "--model")
        models = load_artifacts(path).of_type(ReducedModel)
        chosen = [m for m in models if m.d == self.config.d_max] or models[-1:]
        if not chosen:
            raise InputError(MessageTemplates.NO_MODEL.format(d=self.config.d_max, path=path))
        model = chosen[0]

        sigma = estimate_covariance(model.daily_coefs)
        if self.config.pin_terminal:
            sigma = pin_terminal(sigma)
        spec = AffineModelSpec(z0=model.daily_coefs[-1], rates=model.rates)
        diff = DiffusionSpec(
            sigma=sigma,
            dt=self.config.dt,
            horizon=self.config.horizon,
            n_paths=self.config.n_paths,
            seed=self.config.seed,
            record_every=self.config.record_every,
        )
        result = await asyncio.to_thread(simulate, spec, diff, None, None, self.config.jobs)
        self.reports.write_csv(result.to_frame(), "paths")
        save_artifacts(self.config.out / "simulation", {"dynamics": spec, "diffusion": diff})

        report = martingale_diagnostic(spec, diff, self.config.maturities, result=result)
        self.reports.write_csv(report.table, "martingale")
        self.extra["martingale_passed"] = report.passed

        print(
            MessageTemplates.SIMULATED.format(
                paths=diff.n_paths,
                horizon=diff.horizon,
                exploded=int(result.exploded.sum()),
                status="passed" if report.passed else "failed",
                out=self.config.out,
            )
        )
        return EXIT_OK

    async def cmd_compare_naive(self) -> int:
        systems = self._load_systems()
        init = np.asarray(self.config.init_rates, dtype=float)

        start = time.perf_counter()
        fits = await CurveService(self._fit_config(), jobs=self.config.jobs).fit_days(systems)
        kernel_seconds = time.perf_counter() - start
        if any(f.curve is None for f in fits):
            raise InputError("kernel fit failed on some days; compare on a cleaned bundle")
        curves = [f.curve for f in fits]

        start = time.perf_counter()
        model, _ = await asyncio.to_thread(
            optimize_rates, curves, init.size - 1, self._reduction_config(), init, self.config.jobs
        )
        reduce_seconds = time.perf_counter() - start

        start = time.perf_counter()
        naive = await asyncio.to_thread(naive_fit, systems, init, self.config.max_iter)
        naive_seconds = time.perf_counter() - start
        self.extra["naive_converged"] = naive.converged

        frame = pd.DataFrame(
            {
                "date": [s.quote_date for s in systems],
                "rmse_kernel": [_safe_yield_rmse(s, c) for s, c in zip(systems, curves)],
                f"rmse_reduced_{model.d}": [_safe_yield_rmse(s, model.curve(t)) for t, s in enumerate(systems)],
                "rmse_naive": [_safe_yield_rmse(s, naive.curve(t)) for t, s in enumerate(systems)],
                "price_rmse_kernel": [_price_rmse(s, c) for s, c in zip(systems, curves)],
                "price_rmse_naive": naive.price_rmse,
                "seconds_kernel": kernel_seconds,
                "seconds_reduce": reduce_seconds,
                "seconds_naive": naive_seconds,
            }
        )
        path = self.reports.write_csv(frame, "compare_naive")
        print(
            MessageTemplates.COMPARED.format(
                kernel=float(frame["rmse_kernel"].mean()),
                kernel_s=kernel_seconds,
                naive=float(frame["rmse_naive"].mean()),
                naive_s=naive_seconds,
                out=path,
            )
        )
        return EXIT_OK

    async def cmd_sensitivity(self) -> int:
        systems = self._load_systems()
        weight = self.config.terminal_weight if self.config.terminal_weight is not None else "auto"
        base = {"alpha": self.config.alpha, "beta": self.config.beta, "ridge": self.config.ridge}
        frame = await asyncio.to_thread(
            sensitivity_grid,
            base,
            systems,
            0.2,
            5.0,
            self.config.steps,
            tuple(self.config.poly),
            weight,
            self.config.jobs,
        )
        path = self.reports.write_csv(frame, "sensitivity")
        print(MessageTemplates.SENSITIVITY.format(cells=len(frame), out=path))
        return EXIT_OK
