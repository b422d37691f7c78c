"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the code it should
produce when it escapes a subcommand.
"""


class ProxyIdError(Exception):
    exit_code = 2


class UserError(ProxyIdError):
    """Bad configuration, bad flags, or a precondition the caller violated."""

    exit_code = 1


class DegenerateInputError(UserError, ValueError):
    """Zero-norm vectors, empty masks and similar inputs with no defined answer."""


class CorruptArtifactError(ProxyIdError):
    """A persisted file failed its magic, header, or length checks."""

    exit_code = 3


class TrainingError(ProxyIdError):
    """Optimization produced a non-finite or divergent loss."""


class SceneGenerationError(ProxyIdError):
    pass


class ConfigError(UserError):
    """Malformed or invalid run configuration."""


class UsageError(UserError):
    """Unknown subcommand or flag."""


class MissingArtifactError(UserError):
    """An input file a subcommand depends on does not exist."""
