"""Exception types shared across the package."""


class InputError(ValueError):
    """Invalid argument or data passed by the caller."""


class ConfigError(InputError):
    """Inconsistent or unsupported configuration."""


class DatasetError(InputError):
    """A stored dataset or checkpoint is corrupt, incomplete or of the wrong version."""


class StateError(RuntimeError):
    """Operation not valid in the object's current state (e.g. growing past the last step)."""


class MissingArtifactError(StateError):
    """A prerequisite artifact is absent; the message names the command that produces it."""
