from __future__ import annotations

import os
from pathlib import Path
from dataclasses import dataclass, field
from typing import List, Optional, Tuple
from dotenv import load_dotenv

from .errors import ConfigError

LOG_LEVELS = ("error", "warn", "info", "debug")

# Parameters selected by cross-validation on one year of treasury quotes.
DEFAULT_ALPHA = 0.2
DEFAULT_BETA = 0.04
DEFAULT_RIDGE = 0.001


@dataclass
class AppConfig:
    """Process-wide settings"""

    log_level: str = "info"
    log_file: Optional[Path] = None
    jobs: int = 1

    @classmethod
    def from_env(cls) -> AppConfig:
        """Create configuration from environment variables"""
        load_dotenv()

        log_level = os.getenv("DISCOUNT_KERNEL_LOG", "info").strip().lower()
        log_file_str = os.getenv("DISCOUNT_KERNEL_LOG_FILE", "").strip()
        jobs_str = os.getenv("DISCOUNT_KERNEL_JOBS", "1").strip()

        return cls(
            log_level=log_level,
            log_file=Path(log_file_str) if log_file_str else None,
            jobs=int(jobs_str) if jobs_str.isdigit() else 0,
        )

    def validate(self) -> None:
        """Validate configuration"""
        errors = []

        if self.log_level not in LOG_LEVELS:
            errors.append(f"DISCOUNT_KERNEL_LOG must be one of {', '.join(LOG_LEVELS)}")

        if self.jobs < 1:
            errors.append("DISCOUNT_KERNEL_JOBS must be a positive integer")

        if errors:
            raise ConfigError(errors)


@dataclass
class RunConfig:
    """Settings of one command-line run"""

    subcommand: str
    out: Path
    seed: int = 0
    jobs: int = 1
    strict: bool = False
    xlsx: bool = False

    # Inputs
    csv_path: Optional[Path] = None
    systems_dir: Optional[Path] = None
    curves_dir: Optional[Path] = None
    model_path: Optional[Path] = None
    grid_path: Optional[Path] = None

    # Kernel and ridge
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    ridge: float = DEFAULT_RIDGE
    poly: Tuple[float, ...] = (1.0,)
    terminal_weight: Optional[float] = None

    # Cross-validation and sensitivity
    folds: int = 5
    steps: int = 5

    # Reduction
    d_min: int = 1
    d_max: int = 1
    starts: int = 8
    max_iter: int = 2000
    init_rates: List[float] = field(default_factory=lambda: [-0.02, -0.06, -0.15])

    # Simulation
    horizon: float = 1.0
    dt: float = 1.0 / 252.0
    n_paths: int = 1000
    maturities: List[float] = field(default_factory=lambda: [0.25, 0.5, 1.0])
    record_every: int = 1
    pin_terminal: bool = True

    # Synthetic data
    n_days: int = 20
    contracts_per_day: int = 40
    noise_bp: float = 0.0

    def validate(self) -> None:
        """Check module preconditions before dispatch"""
        errors = []

        if self.jobs < 1:
            errors.append("--jobs must be at least 1")
        if self.ridge <= 0:
            errors.append("--ridge must be positive")
        if self.beta <= 0:
            errors.append("--beta must be positive")
        if self.alpha < 0:
            errors.append("--alpha must be nonnegative")
        if not self.poly or any(a < 0 for a in self.poly) or not any(a > 0 for a in self.poly):
            errors.append("--poly needs nonnegative coefficients, at least one positive")
        if self.terminal_weight is not None and self.terminal_weight <= 0:
            errors.append("--terminal-weight must be positive")
        if self.folds < 2:
            errors.append("--folds must be at least 2")
        if self.steps < 2:
            errors.append("--steps must be at least 2")
        if self.d_min < 0 or self.d_min > self.d_max:
            errors.append("--d-min must satisfy 0 <= d-min <= d-max")
        if self.d_max + 1 > 64:
            errors.append("--d-max must be at most 63")
        if self.starts < 1 or self.max_iter < 1:
            errors.append("--starts and --max-iter must be positive")
        if not self.init_rates or len(set(self.init_rates)) != len(self.init_rates):
            errors.append("--init needs distinct rates")
        if self.dt <= 0 or self.horizon <= 0 or self.dt > self.horizon:
            errors.append("--dt and --horizon must satisfy 0 < dt <= horizon")
        if self.n_paths < 1:
            errors.append("--n-paths must be at least 1")
        if self.record_every < 1:
            errors.append("--record-every must be at least 1")
        if self.subcommand == "simulate" and any(T <= 0 or T > self.horizon for T in self.maturities):
            errors.append("--maturities must lie in (0, horizon]")
        if self.n_days < 1 or self.contracts_per_day < 1 or self.noise_bp < 0:
            errors.append("--n-days and --contracts must be positive, --noise-bp nonnegative")

        for name in ("csv_path", "systems_dir", "curves_dir", "model_path", "grid_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                errors.append(f"input {path} does not exist")

        try:
            self.out.mkdir(parents=True, exist_ok=True)
            if not os.access(self.out, os.W_OK):
                errors.append(f"output directory {self.out} is not writable")
        except OSError as e:
            errors.append(f"output directory {self.out} cannot be created: {e}")

        if errors:
            raise ConfigError(errors)
