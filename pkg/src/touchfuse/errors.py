"""Exception types that the CLI maps onto distinct exit codes."""


class ConfigError(ValueError):
    """Bad or inconsistent scene configuration."""


class DependencyError(RuntimeError):
    """A pipeline stage was requested before its upstream artifacts exist."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (factorization, divergence, ...)."""
