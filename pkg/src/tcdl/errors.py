"""Exception hierarchy shared across the package."""


class TcdlError(Exception):
    """Base class for all package errors."""


class MarketError(TcdlError):
    """Malformed tree or market data (cycles, orphans, bad probabilities, ...)."""


class DomainError(TcdlError):
    """Argument outside the mathematical domain of a function."""


class NoConsistentPriceSystemError(TcdlError):
    """The market admits no consistent price system; dual machinery refuses to run."""


class BelowX0Error(TcdlError):
    """Initial capital below the infeasibility threshold x0."""


class SolverIndeterminateError(TcdlError):
    """A solve stalled numerically; no certified answer is available."""


class ConfigError(TcdlError):
    """Invalid CLI or experiment configuration."""
