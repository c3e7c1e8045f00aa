import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import cho_factor, cho_solve
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

logger = logging.getLogger("discount_kernel.linalg")

JITTER_RELATIVE = 1e-12
MAX_ATTEMPTS = 3


@dataclass(frozen=True)
class SolveDiagnostics:
    """Outcome of a symmetric positive-definite solve"""

    jitter: float
    attempts: int

    @property
    def jittered(self) -> bool:
        return self.jitter > 0.0


def cholesky_solve(matrix: np.ndarray, rhs: np.ndarray, label: str = "system") -> Tuple[np.ndarray, SolveDiagnostics]:
    """
    Solve matrix @ x = rhs for a symmetric positive-definite matrix.

    The first attempt factorizes the matrix as given. Each retry adds
    1e-12 * trace / n (times 10 per extra attempt) to the diagonal.
    Raises LinAlgError once the attempts are exhausted.
    """
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    if n == 0:
        return np.zeros_like(np.asarray(rhs, dtype=float)), SolveDiagnostics(0.0, 1)

    scale = JITTER_RELATIVE * abs(np.trace(matrix)) / n
    jitter = 0.0
    factor = None
    attempts = 0

    for attempt in Retrying(
        stop=stop_after_attempt(MAX_ATTEMPTS),
        retry=retry_if_exception_type(LinAlgError),
        reraise=True,
    ):
        with attempt:
            attempts = attempt.retry_state.attempt_number
            jitter = 0.0 if attempts == 1 else scale * 10.0 ** (attempts - 2)
            factor = cho_factor(matrix + jitter * np.eye(n), lower=True)

    if jitter > 0.0:
        logger.warning(f"{label}: Cholesky needed jitter {jitter:.3e} after {attempts} attempts")

    return cho_solve(factor, rhs), SolveDiagnostics(jitter=jitter, attempts=attempts)


def symmetric_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Spectral square root of a symmetric matrix, negative eigenvalues clipped at 0"""
    sym = 0.5 * (matrix + matrix.T)
    eigval, eigvec = np.linalg.eigh(sym)
    root = np.sqrt(np.clip(eigval, 0.0, None))
    return (eigvec * root) @ eigvec.T
