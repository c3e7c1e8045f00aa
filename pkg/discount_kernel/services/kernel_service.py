from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Protocol, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial import polynomial as npoly
from scipy.special import gammaln

from ..core.errors import InputError, OutsideRKHSError

logger = logging.getLogger("discount_kernel.kernel")

DUPLICATE_TENOR_TOL = 1e-9
DEFAULT_SERIES_TERMS = 500
MAX_POLY_DEGREE = 6


@dataclass(frozen=True)
class SectionTerm:
    """One summand q(x) e^{rate x} of a kernel section x -> k(x, y)"""

    rate: float
    poly: Polynomial


class QuasiExponentialKernel(Protocol):
    """Anything check_full_consistency can inspect"""

    def __call__(self, x: Any, y: Any) -> Any: ...

    def derivative_x(self, x: Any, y: Any) -> Any: ...

    def section_terms(self, y: float) -> List[SectionTerm]: ...


def _compose(outer: Sequence[float], inner: Polynomial) -> Polynomial:
    result = Polynomial([0.0])
    for coef in reversed(list(outer)):
        result = result * inner + coef
    return result


@dataclass(frozen=True)
class KernelSpec:
    """
    Fully consistent polynomial-exponential kernel

        k(x, y) = p((sqrt(b) x - a/sqrt(b)) (sqrt(b) y - a/sqrt(b))) e^{b x y - a (x + y)}

    with a = alpha >= 0, b = beta > 0 and p(t) = sum_k poly[k] t^k, poly[k] >= 0.
    """

    alpha: float
    beta: float
    poly: Tuple[float, ...] = (1.0,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "poly", tuple(float(a) for a in self.poly))

        errors = []
        if not math.isfinite(self.beta) or self.beta <= 0:
            errors.append(f"beta must be positive, got {self.beta}")
        if not math.isfinite(self.alpha) or self.alpha < 0:
            errors.append(f"alpha must be nonnegative, got {self.alpha}")
        if not self.poly or any(not math.isfinite(a) or a < 0 for a in self.poly):
            errors.append("polynomial coefficients must be finite and nonnegative")
        elif not any(a > 0 for a in self.poly):
            errors.append("at least one polynomial coefficient must be positive")
        if errors:
            raise InputError("; ".join(errors))

    @property
    def degree(self) -> int:
        return max(i for i, a in enumerate(self.poly) if a > 0)

    @property
    def is_exponential(self) -> bool:
        return self.degree == 0

    @property
    def center(self) -> float:
        """Expansion point alpha / beta of the RKHS Taylor series"""
        return self.alpha / self.beta

    def __call__(self, x: Any, y: Any) -> Any:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        # Only the symmetric combinations x*y and x+y enter, so k(x, y) == k(y, x) bitwise.
        exponent = self.beta * (x * y) - self.alpha * (x + y)
        if self.is_exponential:
            return self.poly[0] * np.exp(exponent)
        arg = exponent + self.alpha**2 / self.beta
        return npoly.polyval(arg, self.poly) * np.exp(exponent)

    def derivative_x(self, x: Any, y: Any) -> Any:
        """Partial derivative of k in its first argument"""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        exponent = self.beta * (x * y) - self.alpha * (x + y)
        rate = self.beta * y - self.alpha
        arg = exponent + self.alpha**2 / self.beta
        p = npoly.polyval(arg, self.poly)
        dp = npoly.polyval(arg, npoly.polyder(self.poly)) if len(self.poly) > 1 else 0.0
        return rate * (p + dp) * np.exp(exponent)

    def section_terms(self, y: float) -> List[SectionTerm]:
        """k(., y) = q_y(x) e^{(beta y - alpha) x} with q_y a polynomial of degree deg(p)"""
        rate = self.beta * y - self.alpha
        # Argument of p as a function of x: (beta y - alpha) x + alpha^2/beta - alpha y
        inner = Polynomial([self.alpha**2 / self.beta - self.alpha * y, rate])
        q = _compose(self.poly[: self.degree + 1], inner) * math.exp(-self.alpha * y)
        return [SectionTerm(rate=rate, poly=q)]

    def to_dict(self) -> Dict[str, Any]:
        return {"alpha": self.alpha, "beta": self.beta, "poly": list(self.poly)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> KernelSpec:
        return cls(alpha=data["alpha"], beta=data["beta"], poly=tuple(data.get("poly", [1.0])))


@dataclass(frozen=True)
class SumKernelSpec:
    """Finite sum of fully consistent kernels; its RKHS is the sum of the part spaces"""

    parts: Tuple[KernelSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise InputError("a sum kernel needs at least one part")

    @property
    def is_exponential(self) -> bool:
        return False

    def __call__(self, x: Any, y: Any) -> Any:
        return sum(part(x, y) for part in self.parts)

    def derivative_x(self, x: Any, y: Any) -> Any:
        return sum(part.derivative_x(x, y) for part in self.parts)

    def section_terms(self, y: float) -> List[SectionTerm]:
        merged: List[SectionTerm] = []
        for part in self.parts:
            for term in part.section_terms(y):
                for i, existing in enumerate(merged):
                    if abs(existing.rate - term.rate) <= 1e-12:
                        merged[i] = SectionTerm(existing.rate, existing.poly + term.poly)
                        break
                else:
                    merged.append(term)
        return merged

    def to_dict(self) -> Dict[str, Any]:
        return {"parts": [part.to_dict() for part in self.parts]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> SumKernelSpec:
        return cls(parts=tuple(KernelSpec.from_dict(p) for p in data["parts"]))


Kernel = Union[KernelSpec, SumKernelSpec]


def kernel_from_dict(data: Dict[str, Any]) -> Kernel:
    if "parts" in data:
        return SumKernelSpec.from_dict(data)
    return KernelSpec.from_dict(data)


@dataclass(frozen=True)
class WeightSequence:
    """Truncated sequence h_0..h_K; the RKHS weights are w_k = 1/h_k where h_k > 0"""

    h: np.ndarray
    truncation: int

    @property
    def weights(self) -> np.ndarray:
        w = np.zeros_like(self.h)
        positive = self.h > 0
        w[positive] = 1.0 / self.h[positive]
        return w


def _check_tenors(x: Any, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise InputError(f"{name} must be finite and nonnegative")
    return arr


def eval_kernel(spec: Kernel, x: Any, y: Any) -> Any:
    """Evaluate k(x, y) for tenors in years; broadcasts over arrays"""
    x = _check_tenors(x, "x")
    y = _check_tenors(y, "y")
    value = spec(x, y)
    return float(value) if np.ndim(value) == 0 else value


def gram_matrix(spec: Kernel, tenors: Sequence[float]) -> np.ndarray:
    """K_ij = k(x_i, x_j) for distinct nonnegative tenors"""
    t = _check_tenors(tenors, "tenors").ravel()
    if t.size > 1:
        gaps = np.diff(np.sort(t))
        if np.any(gaps < DUPLICATE_TENOR_TOL):
            raise InputError("duplicate tenors (closer than 1e-9 years) make the Gram matrix degenerate")
    return spec(t[:, None], t[None, :])


def weight_sequence(spec: KernelSpec, K: int) -> WeightSequence:
    """h_k = e^{-alpha^2/beta} sum_{l <= min(k, deg p)} C(k, l) l! a_l for k = 0..K"""
    if K < 1:
        raise InputError("truncation K must be at least 1")
    k = np.arange(K + 1, dtype=float)
    h = np.zeros(K + 1)
    falling = np.ones(K + 1)  # k (k-1) ... (k-l+1) = C(k, l) l!
    for l, a_l in enumerate(spec.poly):
        if l > 0:
            falling = falling * np.clip(k - (l - 1), 0.0, None)
        if a_l > 0:
            h += a_l * falling
    h *= math.exp(-spec.alpha**2 / spec.beta)
    return WeightSequence(h=h, truncation=K)


def exponential_taylor_coefficients(lam: float, center: float, K: int) -> np.ndarray:
    """b_k = lam^k e^{lam center} / k!, Taylor coefficients of e^{lam x} about center"""
    k = np.arange(K + 1)
    if lam == 0.0:
        b = np.zeros(K + 1)
        b[0] = 1.0
        return b
    log_mag = k * math.log(abs(lam)) + lam * center - gammaln(k + 1)
    sign = np.where((k % 2 == 1) & (lam < 0), -1.0, 1.0)
    return sign * np.exp(log_mag)


def section_taylor_coefficients(spec: KernelSpec, y: float, K: int) -> np.ndarray:
    """Taylor coefficients of k(., y) about alpha/beta: b_k = h_k beta^k (y - alpha/beta)^k / k!"""
    h = weight_sequence(spec, K).h
    shift = y - spec.center
    b = np.zeros(K + 1)
    if shift == 0.0:
        b[0] = h[0]
        return b
    k = np.arange(K + 1)
    positive = h > 0
    log_mag = np.full(K + 1, -np.inf)
    log_mag[positive] = (
        np.log(h[positive]) + k[positive] * (math.log(spec.beta) + math.log(abs(shift))) - gammaln(k[positive] + 1)
    )
    sign = np.where((k % 2 == 1) & (shift < 0), -1.0, 1.0)
    return sign * np.exp(log_mag)


def rkhs_inner_product_series(
    spec: KernelSpec,
    f_coeffs: Sequence[float],
    g_coeffs: Sequence[float],
    K: int = DEFAULT_SERIES_TERMS,
) -> float:
    """
    Truncated weighted-series inner product

        <f, g> = sum_{k <= K} w_k k! / beta^k * b_k(f) * b_k(g)

    where b_k are Taylor coefficients about alpha/beta. Summed with math.fsum.
    """
    f = np.asarray(f_coeffs, dtype=float)
    g = np.asarray(g_coeffs, dtype=float)
    n = min(f.size, g.size, K + 1)
    if n < K:
        raise InputError(f"need at least {K} Taylor coefficients, got {min(f.size, g.size)}")

    h = weight_sequence(spec, max(n - 1, 1)).h
    log_beta = math.log(spec.beta)
    terms = []
    for k in range(n):
        if h[k] == 0.0:
            if f[k] != 0.0 or g[k] != 0.0:
                raise OutsideRKHSError(f"Taylor coefficient {k} is nonzero but the kernel weight h_{k} vanishes")
            continue
        if f[k] == 0.0 or g[k] == 0.0:
            continue
        log_term = (
            math.log(abs(f[k])) + math.log(abs(g[k])) + math.lgamma(k + 1) - k * log_beta - math.log(h[k])
        )
        terms.append(math.copysign(math.exp(log_term), f[k] * g[k]))
    return math.fsum(terms)


def _require_exponential(spec: Kernel) -> KernelSpec:
    if not isinstance(spec, KernelSpec) or not spec.is_exponential:
        raise InputError("closed-form inner products need a pure exponential kernel (constant polynomial)")
    return spec


def rkhs_inner_product_exp(spec: KernelSpec, lam: float, mu: float) -> float:
    """<e^{lam .}, e^{mu .}> = e^{(lam + alpha)(mu + alpha)/beta} / a_0"""
    spec = _require_exponential(spec)
    return math.exp((lam + spec.alpha) * (mu + spec.alpha) / spec.beta) / spec.poly[0]


def _d_lambda(coef: np.ndarray, beta: float) -> np.ndarray:
    # d/da (P(a, b) e^{ab/beta}) = (dP/da + b P / beta) e^{ab/beta}
    out = np.zeros_like(coef)
    i = np.arange(1, coef.shape[0])
    out[:-1, :] += i[:, None] * coef[1:, :]
    out[:, 1:] += coef[:, :-1] / beta
    return out


def _d_mu(coef: np.ndarray, beta: float) -> np.ndarray:
    return _d_lambda(coef.T, beta).T


def rkhs_inner_product_polyexp(
    spec: KernelSpec,
    p1: Sequence[float],
    lam: float,
    p2: Sequence[float],
    mu: float,
) -> float:
    """
    <p1 e^{lam .}, p2 e^{mu .}> = p1(d/dlam) p2(d/dmu) e^{(lam + alpha)(mu + alpha)/beta} / a_0

    p1, p2 are coefficient sequences in ascending powers. The derivatives are
    carried symbolically as P(a, b) e^{ab/beta} with a = lam + alpha, b = mu + alpha.
    """
    spec = _require_exponential(spec)
    c1 = np.trim_zeros(np.asarray(p1, dtype=float), "b")
    c2 = np.trim_zeros(np.asarray(p2, dtype=float), "b")
    if c1.size == 0 or c2.size == 0:
        return 0.0
    if c1.size - 1 > MAX_POLY_DEGREE or c2.size - 1 > MAX_POLY_DEGREE:
        raise InputError(f"polynomial degree above {MAX_POLY_DEGREE} is not supported")

    size = c1.size + c2.size
    total = np.zeros((size, size))
    mu_derivative = np.zeros((size, size))
    mu_derivative[0, 0] = 1.0
    for n, coef_n in enumerate(c2):
        if n > 0:
            mu_derivative = _d_mu(mu_derivative, spec.beta)
        current = mu_derivative
        for m, coef_m in enumerate(c1):
            if m > 0:
                current = _d_lambda(current, spec.beta)
            total += coef_m * coef_n * current

    a = lam + spec.alpha
    b = mu + spec.alpha
    return float(npoly.polyval2d(a, b, total)) * math.exp(a * b / spec.beta) / spec.poly[0]


@dataclass(frozen=True)
class ConsistencyReport:
    """Residuals of the quasi-exponential section test, relative to each section's scale"""

    per_tenor: List[Dict[str, float]]
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tol


def _relative_max(residual: np.ndarray, reference: np.ndarray) -> float:
    scale = float(np.max(np.abs(reference))) if reference.size else 0.0
    err = float(np.max(np.abs(residual))) if residual.size else 0.0
    if scale == 0.0:
        return err
    return err / scale


def check_full_consistency(
    kernel: QuasiExponentialKernel,
    tenors: Sequence[float],
    x_grid: Sequence[float],
    tol: float = 1e-9,
) -> ConsistencyReport:
    """
    Check numerically that every section k(., y) is quasi-exponential and that
    its derivative stays in the span {x^l e^{rate x}} of the claimed terms.
    Failures are reported, never raised.
    """
    x = np.asarray(x_grid, dtype=float)
    rows = []
    for y in np.asarray(tenors, dtype=float):
        terms = kernel.section_terms(float(y))
        values = np.asarray(kernel(x, y), dtype=float)
        derivs = np.asarray(kernel.derivative_x(x, y), dtype=float)

        direct = sum(term.poly(x) * np.exp(term.rate * x) for term in terms)
        section_residual = _relative_max(values - direct, values)

        columns = []
        for term in terms:
            for power in range(max(term.poly.degree(), 0) + 1):
                column = x**power * np.exp(term.rate * x)
                norm = float(np.max(np.abs(column)))
                columns.append(column / norm if norm > 0 else column)
        basis = np.column_stack(columns)
        coef, *_ = np.linalg.lstsq(basis, derivs, rcond=None)
        derivative_residual = _relative_max(derivs - basis @ coef, derivs)

        rows.append(
            {
                "tenor": float(y),
                "section_residual": section_residual,
                "derivative_residual": derivative_residual,
            }
        )

    residual = max((max(r["section_residual"], r["derivative_residual"]) for r in rows), default=0.0)
    report = ConsistencyReport(per_tenor=rows, residual=residual, tol=tol)
    if not report.passed:
        logger.info(f"Full-consistency check failed: residual {residual:.3e} > {tol:.1e}")
    return report
