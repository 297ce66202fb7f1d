"""Exception types shared across the package."""


class ShapedisError(Exception):
    """Base class for package errors."""


class InputError(ShapedisError, ValueError):
    """Malformed argument: bad shape, dtype, range, or inconsistent sizes."""


class ConfigError(ShapedisError, ValueError):
    """Invalid configuration value. The message names the offending key."""


class FormatError(ShapedisError, ValueError):
    """A file on disk does not match the expected format or version."""


class DependencyError(ShapedisError, RuntimeError):
    """A pipeline step is missing or inconsistent with its upstream artifacts.

    The message includes which artifact is stale/missing and which command
    produces it.
    """


class TrainingDiverged(ShapedisError, RuntimeError):
    """A loss term became non-finite during training.

    Carries a ``diagnostics`` dict (epoch, step, per-term values, shape ids)
    so the failure can be traced to a batch.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FrozenRendererError(ShapedisError, RuntimeError):
    """The frozen SDF decoder would have been modified during stage 2."""


class LockHeldError(ShapedisError, RuntimeError):
    """Another process holds the write lock for this run directory."""
