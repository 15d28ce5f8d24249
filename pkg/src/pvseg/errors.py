"""Exception taxonomy shared across the package.

The command-line layer maps these to process exit codes; library callers can
catch them individually.
"""


class ConfigError(Exception):
    """Bad configuration or arguments (unknown key, unparsable value)."""


class DataError(Exception):
    """Bad input data: missing/corrupt files, malformed manifests, shape mismatches."""


class NumericError(Exception):
    """Non-finite value where a finite one is required (NaN/Inf loss)."""
