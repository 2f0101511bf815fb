"""Exception types shared across the package."""


class CsnError(Exception):
    """Base class for all csnlab errors."""


class ShapeError(CsnError):
    """An operation received tensors with non-conformable shapes."""


class NumericError(CsnError):
    """An operation produced a non-finite (NaN/Inf) value.

    Carries the name of the offending op so failures point at the source
    instead of surfacing ten layers downstream.
    """

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite output in op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UsageError(CsnError):
    """An API was called in a way its contract forbids (e.g. backward on a
    tensor that is not on any tape)."""


class ConfigError(CsnError):
    """Invalid configuration: unknown key, bad value, or an inconsistent
    combination of settings."""


class SamplerError(CsnError):
    """An episode could not be sampled (too few classes or examples)."""


class OracleInvalidError(CsnError):
    """A finite-difference check was asked to verify a non-deterministic
    function."""
