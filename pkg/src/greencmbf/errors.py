"""Exception hierarchy shared by all modules."""


class CmbfError(Exception):
    """Base class for every error raised by greencmbf."""


class InstanceError(CmbfError, ValueError):
    """Malformed problem instance or mismatched dimensions."""


class PricingError(CmbfError, ValueError):
    """Buy price below sell price (a < b)."""


class ConfigError(CmbfError, ValueError):
    """Invalid scenario or experiment configuration."""


class DatabaseParseError(CmbfError, ValueError):
    """Malformed sample-database file; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InfeasibleError(CmbfError):
    """A conic program or QoS requirement has no feasible point."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic


class NumericalError(CmbfError):
    """The conic solver failed to reach a trustworthy solution."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic
