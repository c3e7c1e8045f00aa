"""
Arbitrage-free discount curve toolkit

Kernel ridge regression of daily zero-coupon curves in fully consistent
polynomial-exponential RKHS, reduction to quasi-exponential factor models and
simulation of their no-arbitrage dynamics.
"""

__version__ = "0.3.0"

# Bumped whenever the JSON layout of saved artifacts changes.
SCHEMA_VERSION = 2
