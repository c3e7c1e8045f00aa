from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.linalg import LinAlgError
from sklearn.model_selection import KFold

from ..core.concurrency import gather_in_threads, map_in_threads
from ..core.config import DEFAULT_RIDGE
from ..core.errors import DiscountKernelError, IllPosedFitError, InputError, NegativeDiscountError
from ..core.linalg import cholesky_solve
from .kernel_service import DUPLICATE_TENOR_TOL, Kernel, KernelSpec, gram_matrix, kernel_from_dict

logger = logging.getLogger("discount_kernel.curve")

TERMINAL_WEIGHT_FACTOR = 1e4
TerminalWeight = Union[None, float, str]


def _frozen(values: Any, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CashflowSystem:
    """
    One observation day: prices P (M), cashflow matrix C (M x N) on a
    strictly increasing tenor grid (N), and observation weights in (0, inf].
    An infinite weight makes the contract a hard constraint.
    """

    prices: np.ndarray
    cashflows: np.ndarray
    tenors: np.ndarray
    obs_weights: Optional[np.ndarray] = None
    quote_date: Optional[str] = None

    def __post_init__(self) -> None:
        prices = np.asarray(self.prices, dtype=float).reshape(-1)
        tenors = np.asarray(self.tenors, dtype=float).reshape(-1)
        cashflows = np.asarray(self.cashflows, dtype=float).reshape(prices.size, tenors.size)
        weights = np.ones(prices.size) if self.obs_weights is None else np.asarray(self.obs_weights, dtype=float)

        if weights.shape != prices.shape:
            raise InputError(f"{weights.size} weights for {prices.size} contracts")
        if np.any(~np.isfinite(prices)) or np.any(~np.isfinite(cashflows)):
            raise InputError("prices and cashflows must be finite")
        if np.any(tenors < 0) or np.any(~np.isfinite(tenors)):
            raise InputError("tenors must be finite and nonnegative")
        if tenors.size > 1 and np.any(np.diff(tenors) <= 0):
            raise InputError("tenors must be strictly increasing")
        if np.any(np.isnan(weights)) or np.any(weights <= 0):
            raise InputError("observation weights must lie in (0, inf]")
        if prices.size and np.any(~np.any(cashflows != 0, axis=1)):
            raise InputError("every contract needs at least one nonzero cashflow")

        object.__setattr__(self, "prices", _frozen(prices))
        object.__setattr__(self, "cashflows", _frozen(cashflows))
        object.__setattr__(self, "tenors", _frozen(tenors))
        object.__setattr__(self, "obs_weights", _frozen(weights))

    @property
    def n_contracts(self) -> int:
        return int(self.prices.size)

    @property
    def n_tenors(self) -> int:
        return int(self.tenors.size)

    @property
    def maturities(self) -> np.ndarray:
        """Tenor of the last nonzero cashflow of every contract"""
        if not self.n_contracts:
            return np.zeros(0)
        last = self.cashflows.shape[1] - 1 - np.argmax((self.cashflows != 0)[:, ::-1], axis=1)
        return self.tenors[last]

    def subset(self, rows: Sequence[int]) -> CashflowSystem:
        """Keep the given contracts and only the tenors they pay on"""
        rows = np.asarray(rows, dtype=int)
        cashflows = self.cashflows[rows]
        used = np.any(cashflows != 0, axis=0)
        return CashflowSystem(
            prices=self.prices[rows],
            cashflows=cashflows[:, used],
            tenors=self.tenors[used],
            obs_weights=self.obs_weights[rows],
            quote_date=self.quote_date,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "quote_date": self.quote_date,
            "prices": self.prices.tolist(),
            "cashflows": self.cashflows.tolist(),
            "tenors": self.tenors.tolist(),
            "obs_weights": self.obs_weights.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> CashflowSystem:
        tenors = data["tenors"]
        prices = data["prices"]
        return cls(
            prices=prices,
            cashflows=np.asarray(data["cashflows"], dtype=float).reshape(len(prices), len(tenors)),
            tenors=tenors,
            obs_weights=data.get("obs_weights"),
            quote_date=data.get("quote_date"),
        )


@dataclass(frozen=True)
class FitConfig:
    """
    Kernel, ridge penalty and weight of the synthetic h(0) = 1 contract.

    terminal_weight: None skips the contract, a float is its weight, inf
    makes it a hard constraint and "auto" uses 1e4 times the median weight.
    """

    kernel: Kernel
    ridge: float = DEFAULT_RIDGE
    terminal_weight: TerminalWeight = "auto"

    def __post_init__(self) -> None:
        if not self.ridge > 0 or not math.isfinite(self.ridge):
            raise InputError(f"ridge must be positive and finite, got {self.ridge}")
        tw = self.terminal_weight
        if isinstance(tw, str):
            if tw != "auto":
                raise InputError(f"unknown terminal weight {tw!r}")
        elif tw is not None and not tw > 0:
            raise InputError(f"terminal weight must be positive, got {tw}")


@dataclass(frozen=True, eq=False)
class FittedCurve:
    """Zero-coupon price curve h(x) = sum_j coef_j k(x, x_j)"""

    kernel: Kernel
    tenors: np.ndarray
    coef: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        tenors = np.asarray(self.tenors, dtype=float).reshape(-1)
        coef = np.asarray(self.coef, dtype=float).reshape(-1)
        if tenors.shape != coef.shape:
            raise InputError(f"{coef.size} coefficients for {tenors.size} tenors")
        object.__setattr__(self, "tenors", _frozen(tenors))
        object.__setattr__(self, "coef", _frozen(coef))

    def __call__(self, x: Any) -> Any:
        return evaluate_curve(self, x)

    @property
    def rkhs_norm(self) -> float:
        if not self.coef.size:
            return 0.0
        K = gram_matrix(self.kernel, self.tenors)
        return math.sqrt(max(float(self.coef @ K @ self.coef), 0.0))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kernel": self.kernel.to_dict(),
            "tenors": self.tenors.tolist(),
            "coef": self.coef.tolist(),
            "diagnostics": dict(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> FittedCurve:
        return cls(
            kernel=kernel_from_dict(data["kernel"]),
            tenors=data["tenors"],
            coef=data["coef"],
            diagnostics=data.get("diagnostics", {}),
        )


def resolve_terminal_weight(system: CashflowSystem, weight: TerminalWeight) -> Optional[float]:
    if weight != "auto":
        return None if weight is None else float(weight)
    finite = system.obs_weights[np.isfinite(system.obs_weights)]
    base = float(np.median(finite)) if finite.size else 1.0
    return TERMINAL_WEIGHT_FACTOR * base


def add_terminal_constraint(system: CashflowSystem, weight: float = math.inf) -> CashflowSystem:
    """Append a contract of price 1 paying 1 at tenor 0, inserting tenor 0 if absent"""
    tenors = system.tenors
    cashflows = system.cashflows
    if not (tenors.size and tenors[0] <= DUPLICATE_TENOR_TOL):
        tenors = np.concatenate([[0.0], tenors])
        cashflows = np.hstack([np.zeros((system.n_contracts, 1)), cashflows])

    row = np.zeros((1, tenors.size))
    row[0, 0] = 1.0
    return CashflowSystem(
        prices=np.append(system.prices, 1.0),
        cashflows=np.vstack([cashflows, row]),
        tenors=tenors,
        obs_weights=np.append(system.obs_weights, float(weight)),
        quote_date=system.quote_date,
    )


def _solve_or_raise(matrix: np.ndarray, rhs: np.ndarray, label: str):
    try:
        return cholesky_solve(matrix, rhs, label=label)
    except LinAlgError as e:
        raise IllPosedFitError(f"{label} is singular ({e})", float(np.linalg.cond(matrix))) from e


def fit_curve(system: CashflowSystem, config: FitConfig) -> FittedCurve:
    """
    Kernel ridge fit coef = C^T (C K C^T + Lambda)^-1 P with Lambda_i = ridge / w_i.

    Hard contracts (w_i = inf) are solved exactly by block elimination: the
    soft block enters through the Schur complement of the hard block.
    """
    weight = resolve_terminal_weight(system, config.terminal_weight)
    if weight is not None:
        system = add_terminal_constraint(system, weight)
    if not system.n_contracts:
        raise InputError("cannot fit a curve without contracts")

    C = system.cashflows
    K = gram_matrix(config.kernel, system.tenors)
    A = C @ K @ C.T
    A = 0.5 * (A + A.T)
    P = system.prices
    hard = np.isinf(system.obs_weights)
    soft = ~hard
    penalty = np.zeros(system.n_contracts)
    penalty[soft] = config.ridge / system.obs_weights[soft]

    jitter = 0.0
    if not hard.any():
        matrix = A + np.diag(penalty)
        u, diag = _solve_or_raise(matrix, P, "ridge system")
        jitter = diag.jitter
    else:
        A_hh = A[np.ix_(hard, hard)]
        A_hs = A[np.ix_(hard, soft)]
        rhs = np.column_stack([P[hard], A_hs])
        solved, diag_h = _solve_or_raise(A_hh, rhs, "hard-constraint block")
        y, X = solved[:, 0], solved[:, 1:]
        matrix = A_hh
        u = np.zeros(system.n_contracts)
        if soft.any():
            S = A[np.ix_(soft, soft)] + np.diag(penalty[soft]) - A_hs.T @ X
            S = 0.5 * (S + S.T)
            u_s, diag_s = _solve_or_raise(S, P[soft] - A_hs.T @ y, "soft-constraint Schur complement")
            u[soft] = u_s
            u[hard] = y - X @ u_s
            jitter = max(diag_h.jitter, diag_s.jitter)
            matrix = S
        else:
            u[hard] = y
            jitter = diag_h.jitter

    diagnostics = {
        "quote_date": system.quote_date,
        "n_contracts": system.n_contracts,
        "n_hard": int(hard.sum()),
        "jitter": jitter,
        "condition_number": float(np.linalg.cond(matrix)),
    }
    logger.debug(f"Fitted {system.quote_date or 'curve'}: {diagnostics}")
    return FittedCurve(kernel=config.kernel, tenors=system.tenors, coef=C.T @ u, diagnostics=diagnostics)


def evaluate_curve(curve: FittedCurve, x: Any) -> Any:
    """h(x) = sum_j coef_j k(x, x_j); broadcasts over x"""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InputError("tenors must be nonnegative")
    if not curve.coef.size:
        values = np.zeros_like(x)
    else:
        values = curve.kernel(x[..., None], curve.tenors) @ curve.coef
    return float(values) if values.ndim == 0 else values


def curve_derivative_at_zero(curve: FittedCurve) -> float:
    """Short rate r = -h'(0) = -sum_j coef_j d/dx k(0, x_j)"""
    if not curve.coef.size:
        return 0.0
    return -float(curve.kernel.derivative_x(0.0, curve.tenors) @ curve.coef)


def yield_from_price(price: float, tenor: float) -> float:
    """Continuously compounded yield -ln(price) / tenor"""
    if not price > 0:
        raise NegativeDiscountError(f"negative discount: price {price} has no yield")
    if not tenor > 0:
        raise InputError(f"yield needs a positive tenor, got {tenor}")
    return -math.log(price) / tenor


def contract_yields(system: CashflowSystem, prices: Sequence[float]) -> np.ndarray:
    """Yield of each contract's price per unit of total notional over its maturity; tenor-0 contracts dropped"""
    maturities = system.maturities
    notional = system.cashflows.sum(axis=1)
    keep = maturities > 0
    return np.array(
        [yield_from_price(p / n, T) for p, n, T in zip(np.asarray(prices)[keep], notional[keep], maturities[keep])]
    )


def model_prices(system: CashflowSystem, curve: Any) -> np.ndarray:
    """C h(tenors) for any callable curve"""
    if not system.n_contracts:
        return np.zeros(0)
    return system.cashflows @ np.asarray(curve(system.tenors), dtype=float)


def yield_rmse(system: CashflowSystem, curve: Any) -> float:
    observed = contract_yields(system, system.prices)
    fitted = contract_yields(system, model_prices(system, curve))
    if not observed.size:
        return 0.0
    return float(np.sqrt(np.mean((observed - fitted) ** 2)))


@dataclass
class YieldErrorReport:
    table: pd.DataFrame
    average: float


def rmse_yield_report(systems: Sequence[CashflowSystem], curves: Sequence[Any]) -> YieldErrorReport:
    """Per-day RMSE of contract yields (observed vs model) plus the dataset average"""
    if len(systems) != len(curves):
        raise InputError(f"{len(systems)} systems but {len(curves)} curves")

    rows = []
    for i, (system, curve) in enumerate(zip(systems, curves)):
        rows.append(
            {
                "date": system.quote_date or str(i),
                "rmse_yield": yield_rmse(system, curve),
                "n_contracts": int(np.sum(system.maturities > 0)),
            }
        )
    table = pd.DataFrame(rows, columns=["date", "rmse_yield", "n_contracts"])
    average = float(table["rmse_yield"].mean()) if rows else 0.0
    return YieldErrorReport(table=table, average=average)


def curve_grid_frame(curve: Any, tenors: Sequence[float]) -> pd.DataFrame:
    """(tenor, price, yield) samples of a curve for plotting; yield is NaN at tenor 0 and for nonpositive prices"""
    tenors = np.asarray(tenors, dtype=float)
    prices = np.asarray(curve(tenors), dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        yields = np.where((tenors > 0) & (prices > 0), -np.log(np.where(prices > 0, prices, 1.0)) / tenors, np.nan)
    return pd.DataFrame({"tenor": tenors, "price": prices, "yield": yields})


def theta_check(alpha: float, beta: float, tenors: Sequence[float]) -> bool:
    """True iff alpha / beta exceeds the longest tenor, so every kernel section decays"""
    y_max = float(np.max(tenors)) if len(tenors) else 0.0
    return alpha / beta > y_max


GridCell = Tuple[float, float, float]


def expand_grid(grid: Dict[str, Sequence[float]]) -> Tuple[List[GridCell], List[str]]:
    """Cartesian (alpha, beta, ridge) cells; invalid entries are returned as messages"""
    rejected = []
    valid: Dict[str, List[float]] = {}
    checks = {
        "alpha": lambda v: v >= 0,
        "beta": lambda v: v > 0,
        "ridge": lambda v: v > 0,
    }
    for name, ok in checks.items():
        values = list(grid.get(name, []))
        if not values:
            rejected.append(f"{name}: no candidates")
        valid[name] = []
        for v in values:
            v = float(v)
            if math.isfinite(v) and ok(v):
                valid[name].append(v)
            else:
                rejected.append(f"{name}={v} violates the kernel invariants")
    cells = [(a, b, r) for a in valid["alpha"] for b in valid["beta"] for r in valid["ridge"]]
    return cells, rejected


@dataclass
class CrossValidationResult:
    best: Dict[str, float]
    scores: pd.DataFrame


def _held_out_errors(system: CashflowSystem, config: FitConfig, folds: int, seed: int) -> np.ndarray:
    splits = KFold(n_splits=min(folds, system.n_contracts), shuffle=True, random_state=seed)
    errors = np.empty(system.n_contracts)
    for train, test in splits.split(np.arange(system.n_contracts)):
        curve = fit_curve(system.subset(train), config)
        held_out = system.subset(test)
        errors[test] = held_out.prices - model_prices(held_out, curve)
    return errors**2


def cross_validate(
    systems: Sequence[CashflowSystem],
    grid: Dict[str, Sequence[float]],
    folds: int = 5,
    poly: Sequence[float] = (1.0,),
    terminal_weight: TerminalWeight = "auto",
    seed: int = 0,
    jobs: int = 1,
) -> CrossValidationResult:
    """
    K-fold cross-validation over contracts within each day, averaged across
    days. Score is the mean squared held-out price residual; ties go to the
    larger ridge.
    """
    if folds < 2:
        raise InputError("cross-validation needs at least 2 folds")
    cells, rejected = expand_grid(grid)
    if rejected:
        raise InputError("invalid grid: " + "; ".join(rejected))
    usable = [s for s in systems if s.n_contracts >= 2]
    if not usable:
        raise InputError("cross-validation needs a day with at least 2 contracts")

    def score(cell: GridCell) -> float:
        alpha, beta, ridge = cell
        config = FitConfig(KernelSpec(alpha, beta, tuple(poly)), ridge, terminal_weight)
        try:
            return float(np.mean([_held_out_errors(s, config, folds, seed).mean() for s in usable]))
        except DiscountKernelError as e:
            logger.warning(f"CV cell alpha={alpha}, beta={beta}, ridge={ridge} failed: {e}")
            return math.inf

    values = map_in_threads(score, cells, jobs)
    scores = pd.DataFrame(cells, columns=["alpha", "beta", "ridge"])
    scores["score"] = values
    scores["n_days"] = len(usable)

    best_score = min(values)
    tied = scores[scores["score"] <= best_score * (1 + 1e-12)] if math.isfinite(best_score) else scores
    best_row = tied.sort_values("ridge", ascending=False, kind="stable").iloc[0]
    best = {k: float(best_row[k]) for k in ("alpha", "beta", "ridge", "score")}
    logger.info(f"Cross-validation best: {best}")
    return CrossValidationResult(best=best, scores=scores)


SENSITIVITY_SLICES = (("alpha", "beta"), ("alpha", "ridge"), ("beta", "ridge"))


def sensitivity_multipliers(lo: float, hi: float, steps: int) -> np.ndarray:
    mults = np.geomspace(lo, hi, steps)
    if not np.any(np.isclose(mults, 1.0)) and lo <= 1.0 <= hi:
        mults = np.sort(np.append(mults, 1.0))
    return mults


def sensitivity_grid(
    base: Dict[str, float],
    systems: Sequence[CashflowSystem],
    lo: float = 0.2,
    hi: float = 5.0,
    steps: int = 5,
    poly: Sequence[float] = (1.0,),
    terminal_weight: TerminalWeight = "auto",
    jobs: int = 1,
) -> pd.DataFrame:
    """
    Three slices around base {alpha, beta, ridge}: one parameter fixed, the
    other two scaled by multipliers in [lo, hi]. Each cell records the
    average yield RMSE and average RKHS norm of the daily fits.
    """
    if steps < 2:
        raise InputError("sensitivity grid needs at least 2 steps")
    mults = sensitivity_multipliers(lo, hi, steps)

    cells = []
    for a, b in SENSITIVITY_SLICES:
        for ma in mults:
            for mb in mults:
                cells.append((a, b, float(ma), float(mb)))

    def run(cell: Tuple[str, str, float, float]) -> Dict[str, Any]:
        a, b, ma, mb = cell
        params = dict(base)
        params[a] = base[a] * ma
        params[b] = base[b] * mb
        row = {
            "slice": f"{a}-{b}",
            "param_a": params[a],
            "param_b": params[b],
            "mult_a": ma,
            "mult_b": mb,
        }
        try:
            config = FitConfig(KernelSpec(params["alpha"], params["beta"], tuple(poly)), params["ridge"], terminal_weight)
            curves = [fit_curve(s, config) for s in systems]
            row["rmse"] = rmse_yield_report(systems, curves).average
            row["rkhs_norm"] = float(np.mean([c.rkhs_norm for c in curves]))
        except DiscountKernelError as e:
            logger.warning(f"Sensitivity cell {row} failed: {e}")
            row["rmse"] = math.nan
            row["rkhs_norm"] = math.nan
        return row

    return pd.DataFrame(map_in_threads(run, cells, jobs))


@dataclass
class DayFit:
    index: int
    quote_date: Optional[str]
    curve: Optional[FittedCurve] = None
    error: Optional[str] = None


class CurveService:
    """Fits independent days concurrently"""

    def __init__(self, config: FitConfig, jobs: int = 1):
        self.config = config
        self.jobs = jobs

    def fit_day(self, item: Tuple[int, CashflowSystem]) -> DayFit:
        index, system = item
        try:
            return DayFit(index, system.quote_date, curve=fit_curve(system, self.config))
        except (IllPosedFitError, InputError) as e:
            logger.warning(f"Day {system.quote_date or index} skipped: {e}")
            return DayFit(index, system.quote_date, error=str(e))

    async def fit_days(self, systems: Sequence[CashflowSystem]) -> List[DayFit]:
        return await gather_in_threads(self.fit_day, list(enumerate(systems)), self.jobs)
