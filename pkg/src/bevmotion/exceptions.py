"""Exception hierarchy; the CLI maps these onto exit codes."""


class BevMotionError(Exception):
    """Base class for all package errors."""


class ConfigError(BevMotionError):
    """Invalid configuration: unknown keys, bad values, unknown backbone names."""


class ContractError(BevMotionError):
    """An argument violated a documented precondition (shape, finiteness, range)."""


class DataFormatError(BevMotionError):
    """A dataset file is not in the expected format (bad magic, unknown version)."""


class DataCorruptionError(BevMotionError):
    """A dataset file is structurally valid but truncated or inconsistent."""


class GenerationError(BevMotionError):
    """Scene generation could not satisfy the configured constraints."""


class NumericalError(BevMotionError):
    """A non-finite value appeared where the pipeline requires finite numbers."""
