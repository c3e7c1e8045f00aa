from __future__ import annotations

from typing import Any, Dict, List, Optional, Sequence


class DiscountKernelError(Exception):
    """Base class for all package errors"""


class ConfigError(DiscountKernelError, ValueError):
    """Invalid environment or command-line configuration"""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("Configuration errors:\n" + "\n".join(f"- {e}" for e in self.errors))


class InputError(DiscountKernelError, ValueError):
    """Inputs violate a type invariant or a shape contract"""


class IllPosedFitError(DiscountKernelError):
    """The ridge system of a curve fit cannot be factorized"""

    def __init__(self, message: str, condition_number: float):
        self.condition_number = condition_number
        super().__init__(f"ill-posed fit: {message} (condition number {condition_number:.3e})")


class SingularBasisError(DiscountKernelError):
    """Reduction rates produce a singular or ill-conditioned basis Gram matrix"""

    def __init__(
        self,
        message: str,
        rates: Sequence[float],
        condition_number: float = float("inf"),
        diagnostics: Optional[List[Dict[str, Any]]] = None,
    ):
        self.rates = list(rates)
        self.condition_number = condition_number
        self.diagnostics = diagnostics or []
        super().__init__(f"singular basis: {message} (condition number {condition_number:.3e})")


class OutsideRKHSError(DiscountKernelError, ValueError):
    """A function has a Taylor coefficient the kernel gives zero weight to"""


class NegativeDiscountError(DiscountKernelError, ValueError):
    """A yield was requested for a nonpositive price"""


class DegenerateNumeraireError(DiscountKernelError):
    """The numeraire bond price is not positive"""


class DiagnosticInvalidError(DiscountKernelError):
    """Too many simulated paths exploded for the diagnostic to be meaningful"""

    def __init__(self, exploded_fraction: float):
        self.exploded_fraction = exploded_fraction
        super().__init__(f"diagnostic invalid: {exploded_fraction:.1%} of paths exploded")


class ArtifactVersionError(DiscountKernelError):
    """A saved bundle was written with another schema version"""

    def __init__(self, found: Any, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"artifact schema version {found!r} found, {expected} expected")
