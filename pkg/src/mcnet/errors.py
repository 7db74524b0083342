"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MCNError(Exception):
    exit_code = 1


class InputError(MCNError, ValueError):
    exit_code = 1


class ConfigError(MCNError, ValueError):
    exit_code = 1


class StateError(MCNError, RuntimeError):
    exit_code = 1


class IntegrityError(MCNError):
    exit_code = 2


class GenerationError(MCNError):
    exit_code = 1


class DivergenceError(MCNError, FloatingPointError):
    exit_code = 3


class NotFoundError(MCNError, FileNotFoundError):
    exit_code = 1
