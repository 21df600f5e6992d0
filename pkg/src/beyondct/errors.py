"""Exception types shared across the package."""


class BeyondCTError(Exception):
    """Base class for all package errors."""


class DimensionError(BeyondCTError, ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(BeyondCTError, ValueError):
    """A precondition other than shape was violated."""


class FormatError(BeyondCTError, ValueError):
    """On-disk payload is malformed or inconsistent with its header."""


class UnsupportedFormatError(FormatError):
    """File is recognized but uses features outside the supported subset."""


class ConfigError(BeyondCTError, ValueError):
    """Run configuration is invalid or incomplete."""


class TrainingError(BeyondCTError, RuntimeError):
    """Training aborted: non-finite numbers or unrecoverable I/O."""
