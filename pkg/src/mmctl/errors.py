"""Exception types shared across the package."""


class MmctlError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MmctlError, ValueError):
    """Invalid configuration value or key."""


class ShapeError(MmctlError, ValueError):
    """Tensor geometry does not match the operation's contract."""


class InputError(MmctlError, ValueError):
    """Semantically invalid input (bad range, empty where non-empty required)."""


class StateError(MmctlError, RuntimeError):
    """Operation called in the wrong object state (e.g. attaching a bypass twice)."""


class FormatError(MmctlError, ValueError):
    """Malformed on-disk artifact (checkpoint, media file, manifest)."""


class PromptParseError(MmctlError, ValueError):
    """Structured prompt could not be parsed.

    Carries the byte offset of the first offending position.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
