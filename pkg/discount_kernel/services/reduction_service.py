from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from ..core.concurrency import map_in_threads
from ..core.errors import InputError, SingularBasisError
from .curve_service import CashflowSystem, FittedCurve, add_terminal_constraint, resolve_terminal_weight
from .kernel_service import DUPLICATE_TENOR_TOL, KernelSpec, gram_matrix

logger = logging.getLogger("discount_kernel.reduction")

RATE_GAP_TOL = 1e-8
MAX_CONDITION = 1e12
MAX_RATES = 64


@dataclass(frozen=True, eq=False)
class ReducedModel:
    """h_t(x) = sum_i Z_{t,i} e^{rates_i x} with rates sorted decreasing"""

    rates: np.ndarray
    daily_coefs: np.ndarray
    kernel: KernelSpec
    loss: float = math.nan
    dates: Optional[List[str]] = None

    def __post_init__(self) -> None:
        rates = np.asarray(self.rates, dtype=float).reshape(-1)
        coefs = np.asarray(self.daily_coefs, dtype=float).reshape(-1, rates.size)
        order = np.argsort(-rates, kind="stable")
        object.__setattr__(self, "rates", rates[order])
        object.__setattr__(self, "daily_coefs", coefs[:, order])
        object.__setattr__(self, "loss", float(self.loss))

    @property
    def d(self) -> int:
        return int(self.rates.size) - 1

    @property
    def n_days(self) -> int:
        return int(self.daily_coefs.shape[0])

    def curve(self, day: int) -> Callable[[Any], Any]:
        return lambda x: reduced_price(self, day, x)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rates": self.rates.tolist(),
            "daily_coefs": self.daily_coefs.tolist(),
            "kernel": self.kernel.to_dict(),
            "loss": self.loss,
            "dates": self.dates,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> ReducedModel:
        return cls(
            rates=data["rates"],
            daily_coefs=data["daily_coefs"],
            kernel=KernelSpec.from_dict(data["kernel"]),
            loss=data.get("loss", math.nan),
            dates=data.get("dates"),
        )


@dataclass
class ReductionLossReport:
    per_day: np.ndarray
    total: float
    converged: bool = True
    trace: List[Dict[str, Any]] = field(default_factory=list)


@dataclass(frozen=True)
class ReductionConfig:
    starts: int = 8
    max_iter: int = 2000
    tol: float = 1e-10
    rate_lo: float = -0.5
    rate_hi: float = 0.05
    seed: int = 0


def _require_exponential(kernel: Any) -> KernelSpec:
    if not isinstance(kernel, KernelSpec) or not kernel.is_exponential:
        raise InputError("reduction needs a pure exponential kernel")
    return kernel


def _rate_diagnostics(rates: np.ndarray, gram: np.ndarray) -> List[Dict[str, float]]:
    rows = []
    for i, rate in enumerate(rates):
        others = np.delete(rates, i)
        rows.append(
            {
                "rate": float(rate),
                "min_gap": float(np.min(np.abs(others - rate))) if others.size else math.inf,
                "gram_diagonal": float(gram[i, i]),
            }
        )
    return rows


def _check_distinct(rates: np.ndarray) -> None:
    if rates.size > 1 and np.min(np.diff(np.sort(rates))) < RATE_GAP_TOL:
        raise SingularBasisError("duplicate rates", rates.tolist())


def basis_gram(rates: Sequence[float], kernel: KernelSpec) -> np.ndarray:
    """K''_ij = <e^{rate_i .}, e^{rate_j .}> = e^{(rate_i + alpha)(rate_j + alpha)/beta} / a_0"""
    kernel = _require_exponential(kernel)
    rates = np.asarray(rates, dtype=float).reshape(-1)
    _check_distinct(rates)
    shifted = rates + kernel.alpha
    return np.exp(np.outer(shifted, shifted) / kernel.beta) / kernel.poly[0]


def cross_gram(tenors: Sequence[float], rates: Sequence[float]) -> np.ndarray:
    """K'_ij = e^{rate_j x_i} = <k(., x_i), e^{rate_j .}>"""
    return np.exp(np.outer(np.asarray(tenors, dtype=float), np.asarray(rates, dtype=float)))


def _equilibrated(rates: np.ndarray, kernel: KernelSpec) -> Tuple[np.ndarray, np.ndarray]:
    """K'' = D G D with unit-diagonal G_ij = e^{-(rate_i - rate_j)^2 / (2 beta)}"""
    shifted = rates + kernel.alpha
    scale = np.exp(shifted**2 / (2.0 * kernel.beta)) / math.sqrt(kernel.poly[0])
    G = np.exp(-np.subtract.outer(rates, rates) ** 2 / (2.0 * kernel.beta))
    return G, scale


def _solve_projection(rates: np.ndarray, kernel: KernelSpec, rhs: np.ndarray) -> np.ndarray:
    """Z = K''^-1 rhs for rhs of shape (d+1,) or (d+1, n)"""
    _check_distinct(rates)
    G, scale = _equilibrated(rates, kernel)
    condition = float(np.linalg.cond(G))
    if not condition < MAX_CONDITION:
        raise SingularBasisError(
            "basis Gram matrix is ill-conditioned",
            rates.tolist(),
            condition,
            _rate_diagnostics(rates, basis_gram(rates, kernel)),
        )
    scaled_rhs = rhs / (scale if rhs.ndim == 1 else scale[:, None])
    solved = np.linalg.solve(G, scaled_rhs)
    return solved / (scale if rhs.ndim == 1 else scale[:, None])


def reduce_day(full: FittedCurve, rates: Sequence[float]) -> np.ndarray:
    """Z = K''^-1 K'^T c, the RKHS projection of one day's fit onto span{e^{rate_i .}}"""
    kernel = _require_exponential(full.kernel)
    rates = np.asarray(rates, dtype=float).reshape(-1)
    rhs = cross_gram(full.tenors, rates).T @ full.coef
    return _solve_projection(rates, kernel, rhs)


def reduction_loss(full: FittedCurve, rates: Sequence[float], Z: Sequence[float]) -> float:
    """||h_full - h_Z||^2 = c^T K c - 2 c^T K' Z + Z^T K'' Z, clipped at 0"""
    kernel = _require_exponential(full.kernel)
    rates = np.asarray(rates, dtype=float).reshape(-1)
    Z = np.asarray(Z, dtype=float).reshape(-1)
    c = full.coef
    K = gram_matrix(kernel, full.tenors) if c.size else np.zeros((0, 0))
    value = c @ K @ c - 2.0 * c @ cross_gram(full.tenors, rates) @ Z + Z @ basis_gram(rates, kernel) @ Z
    return max(float(value), 0.0)


class _ProjectionProblem:
    """Variable-projection objective over rates for a fixed set of daily fits"""

    def __init__(self, fits: Sequence[FittedCurve]):
        if not fits:
            raise InputError("reduction needs at least one daily fit")
        self.kernel = _require_exponential(fits[0].kernel)
        if any(f.kernel != self.kernel for f in fits):
            raise InputError("all daily fits must share one kernel")

        tenors = np.unique(np.concatenate([f.tenors for f in fits]))
        if tenors.size > 1:
            keep = np.concatenate([[True], np.diff(tenors) > DUPLICATE_TENOR_TOL])
            tenors = tenors[keep]
        self.tenors = tenors
        self.coefs = np.zeros((len(fits), tenors.size))
        for t, fit in enumerate(fits):
            if not fit.coef.size:
                continue
            columns = np.searchsorted(tenors, fit.tenors)
            columns = np.clip(columns, 0, tenors.size - 1)
            near_left = np.abs(tenors[np.clip(columns - 1, 0, None)] - fit.tenors) <= DUPLICATE_TENOR_TOL
            columns = np.where(near_left, np.clip(columns - 1, 0, None), columns)
            np.add.at(self.coefs[t], columns, fit.coef)
        self.norms = np.array([f.rkhs_norm**2 for f in fits])
        self.penalty = float(self.norms.sum()) + 1.0

    def projections(self, rates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        B = self.coefs @ cross_gram(self.tenors, rates)
        Z = _solve_projection(rates, self.kernel, B.T).T
        return B, Z

    def per_day_loss(self, rates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        B, Z = self.projections(rates)
        return np.clip(self.norms - np.sum(B * Z, axis=1), 0.0, None), Z

    def objective(self, rates: np.ndarray) -> float:
        if not np.all(np.isfinite(rates)):
            return self.penalty
        try:
            losses, _ = self.per_day_loss(np.asarray(rates, dtype=float))
        except SingularBasisError:
            return self.penalty
        return float(np.sum(losses))


def initial_rates(d: int, config: ReductionConfig, horizon: float, start: int) -> np.ndarray:
    """Log-spaced negative rates scaled to the data horizon, jittered for start > 0"""
    scale = 30.0 / max(horizon, 1.0)
    rates = -np.geomspace(0.005, 0.5, d + 1) * scale
    if start > 0:
        rng = np.random.default_rng([config.seed, d, start])
        rates = rates * np.exp(rng.normal(0.0, 0.5, d + 1))
    return np.sort(np.clip(rates, config.rate_lo * scale, config.rate_hi))[::-1]


def _augment(rates: np.ndarray, config: ReductionConfig) -> np.ndarray:
    """Add one rate at the middle of the widest gap of [rate_lo, rates..., rate_hi]"""
    points = np.sort(np.concatenate([[config.rate_lo], rates, [config.rate_hi]]))
    i = int(np.argmax(np.diff(points)))
    return np.sort(np.append(rates, 0.5 * (points[i] + points[i + 1])))[::-1]


def optimize_rates(
    daily_fits: Sequence[FittedCurve],
    d: int,
    config: Optional[ReductionConfig] = None,
    init: Optional[Sequence[float]] = None,
    jobs: int = 1,
) -> Tuple[ReducedModel, ReductionLossReport]:
    """
    Shared rates minimizing sum_t ||h_t - proj_t||^2 with the per-day
    coefficients solved in closed form. Multi-start Nelder-Mead; the
    result is a local minimizer.
    """
    config = config or ReductionConfig()
    if d < 0 or d + 1 > MAX_RATES:
        raise InputError(f"d must satisfy 0 <= d and d + 1 <= {MAX_RATES}")
    problem = _ProjectionProblem(daily_fits)
    horizon = float(problem.tenors.max()) if problem.tenors.size else 1.0

    starts = []
    if init is not None:
        init = np.asarray(init, dtype=float).reshape(-1)
        if init.size != d + 1:
            raise InputError(f"initial rates must have length d + 1 = {d + 1}")
        starts.append(np.sort(init)[::-1])
    while len(starts) < config.starts:
        starts.append(initial_rates(d, config, horizon, len(starts)))

    fatol = config.tol * max(problem.penalty - 1.0, 1e-300)

    def run(item: Tuple[int, np.ndarray]) -> Dict[str, Any]:
        index, x0 = item
        result = minimize(
            problem.objective,
            x0,
            method="Nelder-Mead",
            options={"maxiter": config.max_iter, "xatol": 1e-10, "fatol": fatol},
        )
        return {
            "start": index,
            "loss": float(result.fun),
            "iterations": int(result.nit),
            "success": bool(result.success),
            "rates": np.asarray(result.x, dtype=float),
        }

    runs = map_in_threads(run, list(enumerate(starts)), jobs)
    best = min(runs, key=lambda r: (r["loss"], r["start"]))
    rates = np.sort(best["rates"])[::-1]
    if best["loss"] >= problem.penalty:
        raise SingularBasisError("no start reached a well-conditioned basis", rates.tolist())

    per_day, Z = problem.per_day_loss(rates)
    total = float(np.sum(per_day))
    if not best["success"]:
        logger.warning(f"Rate search for d={d} did not converge in {config.max_iter} iterations; keeping best found")

    dates = [f.diagnostics.get("quote_date") for f in daily_fits]
    model = ReducedModel(
        rates=rates,
        daily_coefs=Z,
        kernel=problem.kernel,
        loss=total,
        dates=dates if any(dates) else None,
    )
    trace = [{k: v for k, v in r.items() if k != "rates"} for r in runs]
    logger.info(f"Reduced to d={d}: rates {np.round(rates, 6).tolist()}, loss {total:.3e}")
    return model, ReductionLossReport(per_day=per_day, total=total, converged=best["success"], trace=trace)


def sweep_dimensions(
    daily_fits: Sequence[FittedCurve],
    d_min: int,
    d_max: int,
    config: Optional[ReductionConfig] = None,
    jobs: int = 1,
) -> List[Tuple[ReducedModel, ReductionLossReport]]:
    """Run optimize_rates for d_min..d_max, seeding each d + 1 search with the d-result plus one new rate"""
    config = config or ReductionConfig()
    if d_min < 0 or d_min > d_max:
        raise InputError("d range must satisfy 0 <= d_min <= d_max")

    results = []
    previous: Optional[np.ndarray] = None
    for d in range(d_min, d_max + 1):
        init = None if previous is None else _augment(previous, config)
        model, report = optimize_rates(daily_fits, d, config, init=init, jobs=jobs)
        if results and report.total > results[-1][1].total:
            logger.warning(f"d={d} loss {report.total:.3e} exceeds d={d - 1} loss {results[-1][1].total:.3e}")
        results.append((model, report))
        previous = model.rates
    return results


def reduced_price(model: ReducedModel, day: int, x: Any) -> Any:
    """Discount price h_t(x) = sum_i Z_{t,i} e^{rate_i x} of day t"""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InputError("tenors must be nonnegative")
    values = np.exp(x[..., None] * model.rates) @ model.daily_coefs[day]
    return float(values) if np.ndim(values) == 0 else values


@dataclass
class NaiveFitResult:
    rates: np.ndarray
    daily_coefs: np.ndarray
    price_rmse: np.ndarray
    loss: float
    converged: bool
    rank_deficient: bool = False

    def curve(self, day: int) -> Callable[[Any], Any]:
        def h(x: Any) -> Any:
            x = np.asarray(x, dtype=float)
            return np.exp(x[..., None] * self.rates) @ self.daily_coefs[day]

        return h


class _NaiveProblem:
    def __init__(self, systems: Sequence[CashflowSystem]):
        if not systems:
            raise InputError("naive fit needs at least one day")
        self.observed = list(systems)
        self.augmented = [add_terminal_constraint(s, resolve_terminal_weight(s, "auto")) for s in systems]
        self.rank_deficient = False

    def day_fit(self, system: CashflowSystem, rates: np.ndarray) -> Tuple[np.ndarray, float]:
        root_w = np.sqrt(system.obs_weights)
        design = system.cashflows @ cross_gram(system.tenors, rates)
        coef, _, rank, _ = np.linalg.lstsq(design * root_w[:, None], system.prices * root_w, rcond=None)
        if rank < rates.size:
            self.rank_deficient = True
        residual = (system.prices - design @ coef) * root_w
        return coef, float(np.mean(residual**2))

    def objective(self, rates: np.ndarray) -> float:
        if not np.all(np.isfinite(rates)) or np.any(np.abs(rates) > 50.0):
            return math.inf
        return float(np.mean([self.day_fit(s, rates)[1] for s in self.augmented]))


def naive_fit(
    systems: Sequence[CashflowSystem],
    init: Sequence[float],
    max_iter: int = 2000,
    tol: float = 1e-12,
) -> NaiveFitResult:
    """
    Direct regression of prices on len(init) shared exponentials: per-day
    weighted least squares for the coefficients (with the synthetic h(0) = 1
    contract), Nelder-Mead over the rates.

    The model dimension is read from the initial rates: len(init) = d + 1,
    so init carries one rate per exponential λ_0..λ_d. There is no separate
    d argument to disagree with it.
    """
    init = np.asarray(init, dtype=float).reshape(-1)
    if not init.size:
        raise InputError("naive fit needs at least one initial rate")
    problem = _NaiveProblem(systems)

    result = minimize(
        problem.objective,
        init,
        method="Nelder-Mead",
        options={"maxiter": max_iter, "xatol": 1e-10, "fatol": tol},
    )
    rates = np.sort(np.asarray(result.x, dtype=float))[::-1]
    problem.rank_deficient = False
    coefs = np.array([problem.day_fit(s, rates)[0] for s in problem.augmented])
    rmse = np.array(
        [
            float(np.sqrt(np.mean((s.prices - s.cashflows @ cross_gram(s.tenors, rates) @ c) ** 2)))
            for s, c in zip(problem.observed, coefs)
        ]
    )
    if problem.rank_deficient:
        logger.warning("Naive design is rank deficient on some days; using least-norm coefficients")
    if not result.success:
        logger.warning(f"Naive fit did not converge: {result.message}")
    return NaiveFitResult(
        rates=rates,
        daily_coefs=coefs,
        price_rmse=rmse,
        loss=float(result.fun),
        converged=bool(result.success),
        rank_deficient=problem.rank_deficient,
    )
