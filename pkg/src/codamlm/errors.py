"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so keep raises categorised:
data problems (bad values, shapes, files) vs sampling problems (the
posterior machinery failed to run).
"""


class CodamlmError(Exception):
    """Base class for all package errors."""


class DataError(CodamlmError, ValueError):
    """Invalid data: zero/negative parts, shape or total mismatches, bad files."""


class DesignError(DataError):
    """Model design matrix cannot be formed (e.g. rank deficiency)."""


class SamplingError(CodamlmError, RuntimeError):
    """The sampler could not produce draws (e.g. initialization failure)."""
