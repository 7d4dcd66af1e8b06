"""Exception hierarchy shared by every module.

CLI exit-code mapping: ContractError / ConfigError / DimensionError and
friends are user-facing validation failures (exit 1); OS-level problems
(missing files, unreadable images) surface as OSError subclasses (exit 2).
"""


class FewshotError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FewshotError):
    """Shapes or axes that cannot be combined the way the caller asked."""


class ContractError(FewshotError):
    """A precondition of an operation was violated (bad labels, missing
    grads, non-scalar loss, unsatisfiable episode spec, ...)."""


class ConfigError(FewshotError):
    """A configuration value is invalid or internally inconsistent."""


class DegenerateBatchError(ContractError):
    """Batch statistics requested on a batch too small to define them."""


class NonFiniteError(FewshotError):
    """A forward operation produced NaN or Inf. Carries the op name."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DataIntegrityError(FewshotError):
    """The dataset on disk violates the expected structure."""
