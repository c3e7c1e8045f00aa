from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dateutil.relativedelta import relativedelta

from ..core.errors import InputError
from .curve_service import CashflowSystem
from .dynamics_service import TRADING_DAYS, AffineModelSpec, DiffusionSpec, pin_terminal, simulate
from .kernel_service import DUPLICATE_TENOR_TOL

logger = logging.getLogger("discount_kernel.data")

CSV_COLUMNS = ["quote_date", "maturity_date", "coupon_rate", "frequency", "clean_price", "face"]
DAY_COUNTS = {"ACT/365": 365.0}
MAX_MATURITY_YEARS = 40


@dataclass(frozen=True)
class BondQuote:
    """Clean price per 100 face of a fixed-coupon bond on one quote date"""

    quote_date: date
    maturity_date: date
    coupon_rate: float
    frequency: int
    clean_price: float
    face: float = 100.0

    def __post_init__(self) -> None:
        errors = []
        if not self.maturity_date > self.quote_date:
            errors.append("maturity must be after the quote date")
        elif self.maturity_date > self.quote_date + relativedelta(years=MAX_MATURITY_YEARS):
            errors.append(f"maturity beyond {MAX_MATURITY_YEARS} years")
        if self.frequency not in (1, 2):
            errors.append(f"frequency must be 1 or 2, got {self.frequency}")
        if not (self.clean_price > 0 and math.isfinite(self.clean_price)):
            errors.append("nonpositive price")
        if not (self.face > 0 and math.isfinite(self.face)):
            errors.append("nonpositive face")
        if not (self.coupon_rate >= 0 and math.isfinite(self.coupon_rate)):
            errors.append("negative coupon rate")
        if errors:
            raise InputError("; ".join(errors))

    @property
    def coupon(self) -> float:
        return self.face * self.coupon_rate / self.frequency

    def _schedule(self) -> Tuple[List[date], date]:
        """Coupon dates after the quote date (ascending) and the last one on or before it"""
        step = 12 // self.frequency
        dates = []
        i = 0
        current = self.maturity_date
        while current > self.quote_date:
            dates.append(current)
            i += 1
            current = self.maturity_date - relativedelta(months=step * i)
        return dates[::-1], current

    @property
    def coupon_dates(self) -> List[date]:
        return self._schedule()[0]

    @property
    def accrued(self) -> float:
        """Linear accrual since the previous coupon date"""
        if self.coupon_rate == 0:
            return 0.0
        upcoming, previous = self._schedule()
        period = (upcoming[0] - previous).days
        return self.coupon * (self.quote_date - previous).days / period

    @property
    def dirty_price(self) -> float:
        return self.clean_price * self.face / 100.0 + self.accrued

    def cashflows(self, day_count: str = "ACT/365") -> Tuple[np.ndarray, np.ndarray]:
        """(tenors in years, amounts): coupons on every schedule date plus face at maturity"""
        basis = DAY_COUNTS[day_count]
        dates = self.coupon_dates if self.coupon_rate > 0 else [self.maturity_date]
        tenors = np.array([(d - self.quote_date).days / basis for d in dates])
        amounts = np.full(len(dates), self.coupon)
        amounts[-1] += self.face
        return tenors, amounts

    def sort_key(self) -> Tuple[Any, ...]:
        return (self.quote_date, self.maturity_date, self.coupon_rate, self.frequency, self.clean_price, self.face)


@dataclass
class IngestResult:
    systems: List[CashflowSystem]
    quotes: List[BondQuote]
    rejects: pd.DataFrame


def _parse_row(row: Dict[str, str]) -> BondQuote:
    try:
        face = row.get("face", "").strip()
        return BondQuote(
            quote_date=date.fromisoformat(row["quote_date"].strip()),
            maturity_date=date.fromisoformat(row["maturity_date"].strip()),
            coupon_rate=float(row["coupon_rate"]),
            frequency=int(row["frequency"]),
            clean_price=float(row["clean_price"]),
            face=float(face) if face else 100.0,
        )
    except (ValueError, TypeError) as e:
        raise InputError(str(e)) from e


def _merge_tenors(tenors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted grid with points closer than the dedup tolerance merged; index of each input on the grid"""
    order = np.argsort(tenors, kind="stable")
    grid: List[float] = []
    index = np.empty(tenors.size, dtype=int)
    for i in order:
        if not grid or tenors[i] - grid[-1] > DUPLICATE_TENOR_TOL:
            grid.append(float(tenors[i]))
        index[i] = len(grid) - 1
    return np.array(grid), index


def quotes_to_systems(quotes: Sequence[BondQuote], day_count: str = "ACT/365") -> List[CashflowSystem]:
    """One CashflowSystem per quote date; contracts in canonical order on a merged tenor grid"""
    if day_count not in DAY_COUNTS:
        raise InputError(f"unsupported day count {day_count!r}")
    by_day: Dict[date, List[BondQuote]] = {}
    for quote in sorted(quotes, key=BondQuote.sort_key):
        by_day.setdefault(quote.quote_date, []).append(quote)

    systems = []
    for day, day_quotes in sorted(by_day.items()):
        flows = [q.cashflows(day_count) for q in day_quotes]
        all_tenors = np.concatenate([t for t, _ in flows])
        grid, index = _merge_tenors(all_tenors)
        C = np.zeros((len(day_quotes), grid.size))
        offset = 0
        for row, (tenors, amounts) in enumerate(flows):
            np.add.at(C[row], index[offset : offset + tenors.size], amounts)
            offset += tenors.size
        systems.append(
            CashflowSystem(
                prices=[q.dirty_price for q in day_quotes],
                cashflows=C,
                tenors=grid,
                quote_date=day.isoformat(),
            )
        )
    return systems


def ingest_csv(path: Path, day_count: str = "ACT/365") -> IngestResult:
    """
    Read a quote file into per-day CashflowSystems.

    Malformed or rejected rows go to the rejects table (line, reason);
    duplicates of (quote_date, maturity_date, coupon_rate, frequency) keep
    the canonically first row.
    """
    if day_count not in DAY_COUNTS:
        raise InputError(f"unsupported day count {day_count!r}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise InputError(f"{path} is empty") from e

    missing = [c for c in CSV_COLUMNS[:-1] if c not in frame.columns]
    if missing:
        raise InputError(f"{path} lacks columns: {', '.join(missing)}")
    if frame.empty:
        raise InputError(f"{path} has no quote rows")

    rejects = []
    parsed: List[Tuple[int, BondQuote]] = []
    for i, row in enumerate(frame.to_dict("records")):
        line = i + 2
        try:
            parsed.append((line, _parse_row(row)))
        except InputError as e:
            rejects.append({"line": line, "reason": str(e)})

    parsed.sort(key=lambda item: item[1].sort_key())
    seen = set()
    quotes = []
    for line, quote in parsed:
        key = (quote.quote_date, quote.maturity_date, quote.coupon_rate, quote.frequency)
        if key in seen:
            rejects.append({"line": line, "reason": "duplicate bond-date row"})
            continue
        seen.add(key)
        quotes.append(quote)

    rejects_frame = pd.DataFrame(rejects, columns=["line", "reason"]).sort_values("line", kind="stable")
    if not quotes:
        raise InputError(f"{path} has no valid quotes ({len(rejects)} rejected)")

    systems = quotes_to_systems(quotes, day_count)
    logger.info(f"Ingested {len(quotes)} quotes over {len(systems)} days, {len(rejects)} rejected")
    return IngestResult(systems=systems, quotes=quotes, rejects=rejects_frame.reset_index(drop=True))


def quotes_frame(quotes: Sequence[BondQuote]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "quote_date": q.quote_date.isoformat(),
                "maturity_date": q.maturity_date.isoformat(),
                "coupon_rate": q.coupon_rate,
                "frequency": q.frequency,
                "clean_price": q.clean_price,
                "face": q.face,
            }
            for q in quotes
        ],
        columns=CSV_COLUMNS,
    )


def write_quotes_csv(quotes: Sequence[BondQuote], path: Path) -> Path:
    quotes_frame(quotes).to_csv(path, index=False)
    return path


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Treasury-like universe repriced every business day from a diagonal model.

    Maturities are dense up to 5 years and sparse beyond 20. Bills (one
    year or less) pay no coupon. price_noise_sd is in price units per 100
    face and is added to clean prices.
    """

    n_days: int = 20
    contracts_per_day: int = 40
    true_rates: Tuple[float, ...] = (-0.02, -0.06, -0.15)
    true_z0: Tuple[float, ...] = (0.5, 0.3, 0.2)
    sigma_true: Optional[Tuple[Tuple[float, ...], ...]] = None
    sigma_scale: float = 0.02
    price_noise_sd: float = 0.0
    max_maturity_years: float = 30.0
    start_date: date = date(2021, 1, 4)
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        if self.n_days < 1 or self.contracts_per_day < 1:
            errors.append("n_days and contracts_per_day must be positive")
        if len(self.true_rates) != len(self.true_z0):
            errors.append("true_rates and true_z0 must have the same length")
        if self.price_noise_sd < 0:
            errors.append("price_noise_sd must be nonnegative")
        if not 5.0 < self.max_maturity_years <= MAX_MATURITY_YEARS:
            errors.append(f"max_maturity_years must lie in (5, {MAX_MATURITY_YEARS}]")
        if errors:
            raise InputError("; ".join(errors))

    @property
    def sigma(self) -> np.ndarray:
        dim = len(self.true_rates)
        if self.sigma_true is not None:
            return np.asarray(self.sigma_true, dtype=float).reshape(dim, dim)
        return self.sigma_scale * np.eye(dim)


@dataclass
class SyntheticDataset:
    quotes: List[BondQuote]
    systems: List[CashflowSystem]
    model: AffineModelSpec
    daily_coefs: np.ndarray
    days: List[date] = field(default_factory=list)

    def true_curve(self, day: int) -> Callable[[Any], Any]:
        rates = self.model.rates
        z = self.daily_coefs[day]

        def h(x: Any) -> Any:
            return np.exp(np.asarray(x, dtype=float)[..., None] * rates) @ z

        return h

    def true_prices(self, day: int) -> np.ndarray:
        system = self.systems[day]
        return system.cashflows @ self.true_curve(day)(system.tenors)


def _bond_universe(spec: SyntheticSpec, rng: np.random.Generator) -> List[Tuple[date, float]]:
    roll = spec.n_days / TRADING_DAYS
    n = spec.contracts_per_day
    n_long = max(1, int(round(0.1 * n))) if n >= 3 else 0
    n_mid = max(1, int(round(0.2 * n))) if n >= 2 else 0
    n_short = n - n_long - n_mid
    years = np.concatenate(
        [
            rng.uniform(0.25, 5.0, n_short),
            rng.uniform(5.0, 20.0, n_mid),
            rng.uniform(20.0, spec.max_maturity_years - roll, n_long),
        ]
    ) + roll
    universe = []
    for y in np.sort(years):
        maturity = spec.start_date + relativedelta(days=int(round(y * 365)))
        coupon = 0.0 if y <= 1.0 else round(rng.uniform(0.005, 0.05) * 800) / 800
        universe.append((maturity, coupon))
    return universe


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """
    Simulate the factor path with the pinned diffusion, reprice the bond
    universe on every business day with the true curve and add price noise.
    Quotes are expanded through quotes_to_systems, as ingested files are.
    """
    rng = np.random.default_rng(spec.seed)
    model = AffineModelSpec(z0=np.asarray(spec.true_z0, dtype=float), rates=np.asarray(spec.true_rates, dtype=float))
    days = [d.date() for d in pd.bdate_range(spec.start_date, periods=spec.n_days)]

    sigma = pin_terminal(spec.sigma)
    if spec.n_days == 1 or not np.any(sigma):
        coefs = np.tile(model.z0, (spec.n_days, 1))
    else:
        diff = DiffusionSpec(
            sigma=sigma,
            dt=1.0 / TRADING_DAYS,
            horizon=(spec.n_days - 1) / TRADING_DAYS,
            n_paths=1,
            seed=spec.seed,
        )
        coefs = simulate(model, diff).paths[0]

    universe = _bond_universe(spec, rng)
    quotes = []
    for t, day in enumerate(days):
        z = coefs[t]
        for maturity, coupon in universe:
            template = BondQuote(day, maturity, coupon, 2, 100.0)
            tenors, amounts = template.cashflows()
            dirty = float(amounts @ (np.exp(tenors[:, None] * model.rates) @ z))
            clean = (dirty - template.accrued) * 100.0 / template.face
            if spec.price_noise_sd > 0:
                clean += rng.normal(0.0, spec.price_noise_sd)
            quotes.append(BondQuote(day, maturity, coupon, 2, clean))

    systems = quotes_to_systems(quotes)
    logger.info(f"Generated {len(quotes)} synthetic quotes over {len(days)} days")
    return SyntheticDataset(quotes=quotes, systems=systems, model=model, daily_coefs=coefs, days=days)
