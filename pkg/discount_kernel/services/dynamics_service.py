from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import expm

from ..core.concurrency import map_in_threads
from ..core.errors import DegenerateNumeraireError, DiagnosticInvalidError, InputError
from ..core.linalg import symmetric_sqrt

logger = logging.getLogger("discount_kernel.dynamics")

TRADING_DAYS = 252
CHUNK_PATHS = 256
EXPLOSION_FACTOR = 1e6
MARTINGALE_BOUND = 3.0
MAX_EXPLODED_FRACTION = 0.5

DriftFn = Callable[["AffineModelSpec", np.ndarray], np.ndarray]


def _frozen(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AffineModelSpec:
    """
    Affine term-structure model h_t(x) = <e^{xJ} p, Z_t>, H_t = 1 - h_t.

    Diagonal form: give `rates`, then J = diag(rates) and p = 1.
    Generator form: give `generator` J and `p` directly.
    """

    z0: np.ndarray
    rates: Optional[np.ndarray] = None
    generator: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        z0 = np.asarray(self.z0, dtype=float).reshape(-1)
        if (self.rates is None) == (self.generator is None):
            raise InputError("give exactly one of rates (diagonal form) or generator")
        if self.rates is not None:
            rates = np.asarray(self.rates, dtype=float).reshape(-1)
            if rates.shape != z0.shape:
                raise InputError(f"{rates.size} rates for a state of size {z0.size}")
            object.__setattr__(self, "rates", _frozen(rates))
            object.__setattr__(self, "p", _frozen(np.ones_like(rates)))
        else:
            J = np.asarray(self.generator, dtype=float)
            if J.shape != (z0.size, z0.size):
                raise InputError(f"generator of shape {J.shape} for a state of size {z0.size}")
            p = np.eye(z0.size)[0] if self.p is None else np.asarray(self.p, dtype=float).reshape(-1)
            if p.shape != z0.shape:
                raise InputError("p must match the state size")
            object.__setattr__(self, "generator", _frozen(J))
            object.__setattr__(self, "p", _frozen(p))
        if not np.all(np.isfinite(z0)) or not np.all(np.isfinite(self.J)):
            raise InputError("model parameters must be finite")
        object.__setattr__(self, "z0", _frozen(z0))

    @classmethod
    def from_generator(cls, M: Any, y0: Sequence[float]) -> AffineModelSpec:
        """Model in (1, Y) coordinates: J = M, p = e_0, Z_0 = (1, y0)"""
        y0 = np.asarray(y0, dtype=float).reshape(-1)
        return cls(z0=np.concatenate([[1.0], y0]), generator=M, p=np.eye(y0.size + 1)[0])

    @property
    def is_diagonal(self) -> bool:
        return self.rates is not None

    @property
    def dim(self) -> int:
        return int(self.z0.size)

    @property
    def J(self) -> np.ndarray:
        return np.diag(self.rates) if self.is_diagonal else self.generator

    @property
    def short_rate_weights(self) -> np.ndarray:
        """Jp, so that r = -<Jp, Z>"""
        return self.rates if self.is_diagonal else self.generator @ self.p

    def loadings(self, x: Any) -> np.ndarray:
        """e^{xJ} p for every tenor in x, shape x.shape + (dim,)"""
        x = np.asarray(x, dtype=float)
        if self.is_diagonal:
            return np.exp(x[..., None] * self.rates)
        flat = [expm(xi * self.generator) @ self.p for xi in x.reshape(-1)]
        return np.asarray(flat).reshape(x.shape + (self.dim,))

    def to_dict(self) -> Dict[str, Any]:
        if self.is_diagonal:
            return {"form": "diagonal", "rates": self.rates.tolist(), "z0": self.z0.tolist()}
        return {
            "form": "generator",
            "generator": self.generator.tolist(),
            "p": self.p.tolist(),
            "z0": self.z0.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> AffineModelSpec:
        if data.get("form", "diagonal") == "diagonal":
            return cls(z0=data["z0"], rates=data["rates"])
        return cls(z0=data["z0"], generator=data["generator"], p=data["p"])


@dataclass(frozen=True, eq=False)
class DiffusionSpec:
    """Constant diffusion sigma of Z and the Euler grid"""

    sigma: np.ndarray
    dt: float = 1.0 / TRADING_DAYS
    horizon: float = 1.0
    n_paths: int = 1000
    seed: int = 0
    record_every: int = 1

    def __post_init__(self) -> None:
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        errors = []
        if sigma.shape[0] != sigma.shape[1]:
            errors.append(f"sigma must be square, got {sigma.shape}")
        if not np.all(np.isfinite(sigma)):
            errors.append("sigma must be finite")
        if not (self.dt > 0 and self.horizon > 0 and self.dt <= self.horizon):
            errors.append("need 0 < dt <= horizon")
        if self.n_paths < 1:
            errors.append("n_paths must be at least 1")
        if self.record_every < 1:
            errors.append("record_every must be at least 1")
        if errors:
            raise InputError("; ".join(errors))
        object.__setattr__(self, "sigma", _frozen(sigma))

    @property
    def n_steps(self) -> int:
        return max(int(round(self.horizon / self.dt)), 1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sigma": self.sigma.tolist(),
            "dt": self.dt,
            "horizon": self.horizon,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "record_every": self.record_every,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> DiffusionSpec:
        return cls(**data)


@dataclass
class SimulationResult:
    """
    Recorded Euler paths. paths has shape (n_paths, n_times, dim);
    integrated_short_rate holds int_0^t r_s ds on the same times.
    """

    times: np.ndarray
    paths: np.ndarray
    exploded: np.ndarray
    integrated_short_rate: np.ndarray
    log_density: Optional[np.ndarray] = None
    forward_maturity: Optional[float] = None

    @property
    def exploded_fraction(self) -> float:
        return float(np.mean(self.exploded)) if self.exploded.size else 0.0

    def to_frame(self) -> pd.DataFrame:
        n_paths, n_times, dim = self.paths.shape
        frame = pd.DataFrame(
            {
                "path_id": np.repeat(np.arange(n_paths), n_times),
                "time": np.tile(self.times, n_paths),
            }
        )
        for i in range(dim):
            frame[f"z_{i}"] = self.paths[:, :, i].reshape(-1)
        frame["exploded"] = np.repeat(self.exploded, n_times)
        return frame


def g_curve(M: Any, x: float) -> np.ndarray:
    """g(x) = (I - e^{xM}) e_0; g(0) = 0 exactly"""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)) or not math.isfinite(x):
        raise InputError("generator and tenor must be finite")
    if x < 0:
        raise InputError("tenor must be nonnegative")
    if x == 0:
        return np.zeros(M.shape[0])
    e0 = np.eye(M.shape[0])[0]
    return e0 - expm(x * M)[:, 0]


def short_rate(spec: AffineModelSpec, Z: Any) -> Any:
    """r = -<Jp, Z>; rows of Z are states"""
    return -(np.asarray(Z, dtype=float) @ spec.short_rate_weights)


def drift_Z(spec: AffineModelSpec, Z: Any) -> np.ndarray:
    """
    Drift making every discounted bond price a local martingale:

        b(Z) = (J^T - <Jp, Z> I) Z

    i.e. lambda_i Z_i - <lambda, Z> Z_i in the diagonal form. Rows of Z are states.
    """
    Z = np.asarray(Z, dtype=float)
    r = short_rate(spec, Z)
    if spec.is_diagonal:
        linear = Z * spec.rates
    else:
        linear = Z @ spec.generator
    return linear + np.asarray(r)[..., None] * Z


def term_structure(spec: AffineModelSpec, Z: Any, x: Any):
    """(h, H) with h = <e^{xJ} p, Z> and H = 1 - h"""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InputError("tenors must be nonnegative")
    h = spec.loadings(x) @ np.asarray(Z, dtype=float)
    return h, 1.0 - h


def pin_terminal(sigma: Any) -> np.ndarray:
    """Project sigma so that 1^T sigma = 0, which keeps sum_i Z_i constant"""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = sigma.shape[0]
    projector = np.eye(n) - np.full((n, n), 1.0 / n)
    return projector @ sigma


def girsanov_kernel(spec: AffineModelSpec, diff: DiffusionSpec, Z_t: Any, t: float, T: float) -> np.ndarray:
    """
    Integrand of the forward-measure density, (e^{(T-t)J} p)^T sigma / h_t(T - t).
    """
    if not t < T:
        raise InputError(f"need t < T, got t={t}, T={T}")
    loadings = spec.loadings(T - t)
    price = float(loadings @ np.asarray(Z_t, dtype=float))
    if not price > 0:
        raise DegenerateNumeraireError(f"degenerate numeraire: bond price {price} at t={t}, T={T}")
    return loadings @ diff.sigma / price


def _record_indices(n_steps: int, record_every: int) -> np.ndarray:
    return np.unique(np.append(np.arange(0, n_steps + 1, record_every), n_steps))


def _simulate_chunk(
    spec: AffineModelSpec,
    diff: DiffusionSpec,
    n_paths: int,
    seed_seq: np.random.SeedSequence,
    drift_fn: DriftFn,
    forward_maturity: Optional[float],
) -> Dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(seed_seq))
    n_steps = diff.n_steps
    dt = diff.horizon / n_steps
    sqrt_dt = math.sqrt(dt)
    record = _record_indices(n_steps, diff.record_every)
    bound = EXPLOSION_FACTOR * max(float(np.linalg.norm(spec.z0)), 1.0)
    sigma_t = diff.sigma.T

    Z = np.tile(spec.z0, (n_paths, 1))
    exploded = np.zeros(n_paths, dtype=bool)
    r = short_rate(spec, Z)
    integral = np.zeros(n_paths)
    log_eta = np.zeros(n_paths)

    paths = np.empty((n_paths, record.size, spec.dim))
    integrals = np.empty((n_paths, record.size))
    densities = np.empty((n_paths, record.size)) if forward_maturity is not None else None
    slot = 0

    for k in range(n_steps + 1):
        if slot < record.size and record[slot] == k:
            paths[:, slot] = Z
            integrals[:, slot] = integral
            if densities is not None:
                densities[:, slot] = log_eta
            slot += 1
        if k == n_steps:
            break

        dW = rng.standard_normal((n_paths, spec.dim)) * sqrt_dt
        active = ~exploded
        t = k * dt

        if forward_maturity is not None and t < forward_maturity:
            loadings = spec.loadings(forward_maturity - t)
            prices = Z @ loadings
            degenerate = active & ~(prices > 0)
            exploded |= degenerate
            active = ~exploded
            theta = np.zeros((n_paths, spec.dim))
            theta[active] = (loadings @ diff.sigma)[None, :] / prices[active, None]
            log_eta[active] += np.sum(theta[active] * dW[active], axis=1) - 0.5 * np.sum(theta[active] ** 2, axis=1) * dt

        Z_next = Z[active] + drift_fn(spec, Z[active]) * dt + dW[active] @ sigma_t
        blown = ~np.all(np.isfinite(Z_next), axis=1) | (np.linalg.norm(Z_next, axis=1) > bound)
        index = np.flatnonzero(active)
        exploded[index[blown]] = True
        keep = index[~blown]
        r_next = short_rate(spec, Z_next[~blown])
        integral[keep] += 0.5 * (r[keep] + r_next) * dt
        r[keep] = r_next
        Z[keep] = Z_next[~blown]

    return {"paths": paths, "exploded": exploded, "integral": integrals, "density": densities}


def simulate(
    spec: AffineModelSpec,
    diff: DiffusionSpec,
    forward_maturity: Optional[float] = None,
    drift_fn: Optional[DriftFn] = None,
    jobs: int = 1,
) -> SimulationResult:
    """
    Euler-Maruyama for dZ = b(Z) dt + sigma dW.

    Paths run in chunks, each with its own Philox stream spawned from
    SeedSequence(seed), so results do not depend on jobs. Paths leaving
    the ball of radius 1e6 |Z_0| are flagged and frozen.
    """
    if diff.sigma.shape[0] != spec.dim:
        raise InputError(f"sigma of size {diff.sigma.shape[0]} for a state of size {spec.dim}")
    drift_fn = drift_fn or drift_Z

    sizes = [min(CHUNK_PATHS, diff.n_paths - start) for start in range(0, diff.n_paths, CHUNK_PATHS)]
    streams = np.random.SeedSequence(diff.seed).spawn(len(sizes))
    chunks = map_in_threads(
        lambda item: _simulate_chunk(spec, diff, item[0], item[1], drift_fn, forward_maturity),
        list(zip(sizes, streams)),
        jobs,
    )

    n_steps = diff.n_steps
    times = _record_indices(n_steps, diff.record_every) * (diff.horizon / n_steps)
    result = SimulationResult(
        times=times,
        paths=np.concatenate([c["paths"] for c in chunks]),
        exploded=np.concatenate([c["exploded"] for c in chunks]),
        integrated_short_rate=np.concatenate([c["integral"] for c in chunks]),
        log_density=None if forward_maturity is None else np.concatenate([c["density"] for c in chunks]),
        forward_maturity=forward_maturity,
    )
    if result.exploded.any():
        logger.warning(f"{int(result.exploded.sum())} of {diff.n_paths} paths exploded")
    return result


@dataclass
class MartingaleReport:
    table: pd.DataFrame
    exploded_fraction: float

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.table["stat"]) <= MARTINGALE_BOUND))


def discounted_bond_prices(spec: AffineModelSpec, result: SimulationResult, T: float) -> np.ndarray:
    """e^{-int_0^t r} h_t(T - t) for recorded t <= T, shape (n_paths, n_times)"""
    mask = result.times <= T + 1e-12
    times = result.times[mask]
    loadings = spec.loadings(np.clip(T - times, 0.0, None))
    h = np.einsum("ptd,td->pt", result.paths[:, mask], loadings)
    return np.exp(-result.integrated_short_rate[:, mask]) * h


def martingale_diagnostic(
    spec: AffineModelSpec,
    diff: DiffusionSpec,
    T_list: Sequence[float],
    result: Optional[SimulationResult] = None,
    drift_fn: Optional[DriftFn] = None,
    jobs: int = 1,
) -> MartingaleReport:
    """
    Standardized deviations (mean_t - mean_0) / stderr of discounted bond
    prices over non-exploded paths, per maturity and monitoring time.
    """
    if any(T > diff.horizon + 1e-12 or T <= 0 for T in T_list):
        raise InputError("maturities must lie in (0, horizon]")
    if result is None:
        result = simulate(spec, diff, drift_fn=drift_fn, jobs=jobs)
    fraction = result.exploded_fraction
    if fraction > MAX_EXPLODED_FRACTION:
        raise DiagnosticInvalidError(fraction)

    alive = ~result.exploded
    n = int(alive.sum())
    rows: List[Dict[str, float]] = []
    for T in T_list:
        values = discounted_bond_prices(spec, result, T)[alive]
        mean = values.mean(axis=0)
        stderr = values.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
        deviation = mean - mean[0]
        # Deterministic columns (t = 0, sigma = 0) carry no sampling error to test against.
        with np.errstate(divide="ignore", invalid="ignore"):
            stat = np.where(stderr > 0, deviation / stderr, 0.0)
        for t, m, s, z in zip(result.times[: mean.size], mean, stderr, stat):
            rows.append({"maturity": float(T), "time": float(t), "mean_discounted_bond": m, "stderr": s, "stat": z})

    report = MartingaleReport(table=pd.DataFrame(rows), exploded_fraction=fraction)
    if not report.passed:
        worst = float(np.max(np.abs(report.table["stat"])))
        logger.warning(f"Martingale diagnostic failed: max |stat| {worst:.2f}")
    return report


def estimate_covariance(coef_series: Any, dt: float = 1.0 / TRADING_DAYS) -> np.ndarray:
    """sigma = sqrt(cov(dZ) / dt), symmetric square root with negative eigenvalues clipped"""
    series = np.asarray(coef_series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    if series.shape[0] < 2:
        raise InputError("covariance estimation needs at least 2 days")
    increments = np.diff(series, axis=0)
    if not np.any(increments):
        logger.warning("Coefficient series is constant; diffusion estimate is zero")
        return np.zeros((series.shape[1], series.shape[1]))
    ddof = 1 if increments.shape[0] > 1 else 0
    cov = np.atleast_2d(np.cov(increments, rowvar=False, ddof=ddof)) / dt
    return symmetric_sqrt(cov)
