class RegistrationError(Exception):
    """Base class for every error raised by the registration tools."""


class InputError(RegistrationError):
    """Unreadable files, wrong image shapes, malformed landmarks."""


class ConfigError(InputError):
    """Configuration document violates the schema."""


class GeometryError(RegistrationError):
    """Degenerate transforms or too few correspondences to fit one."""


class PluginError(RegistrationError):
    """External matcher process failed, timed out or spoke out of protocol."""

    def __init__(self, message, stderr=''):
        super().__init__(message)
        self.stderr = stderr


class DivergenceError(RegistrationError):
    """Instance optimization produced a non-finite objective."""

    def __init__(self, level, iteration, message=None):
        super().__init__(message or f"objective diverged at level {level}, iteration {iteration}")
        self.level = level
        self.iteration = iteration
