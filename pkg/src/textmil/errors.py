"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: config errors exit 2,
data errors exit 3, numeric failures exit 4.
"""


class ConfigError(Exception):
    """Invalid or unknown configuration value."""


class DataError(Exception):
    """Malformed input file or infeasible data request."""


class NumericError(Exception):
    """Non-finite value where the computation requires finite numbers."""
