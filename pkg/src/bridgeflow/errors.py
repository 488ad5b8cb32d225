"""Exception hierarchy for bridgeflow.

The CLI maps :class:`ConfigError` to exit code 1 and :class:`NumericalError`
to exit code 2.  Shape mismatches in the numerical primitives raise plain
``ValueError``.
"""


class BridgeflowError(Exception):
    """Base class for all bridgeflow errors."""


class ConfigError(BridgeflowError, ValueError):
    """Invalid scenario, override, scheme or configuration file."""


class NumericalError(BridgeflowError, ArithmeticError):
    """A numerical failure: non-finite state, singular solve, weight underflow."""
