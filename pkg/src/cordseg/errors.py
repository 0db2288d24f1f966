"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes (see cli module).
"""


class CordSegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CordSegError):
    """Invalid configuration, arguments, or incompatible inputs."""


class GeometryError(ConfigError):
    """Volumes/masks whose grids do not match where they must."""


class FormatError(CordSegError):
    """Unreadable or malformed file content."""


class MissingDataError(CordSegError):
    """Required masks or dataset entries are absent."""


class NoCordFoundError(CordSegError):
    """The detection stage produced an all-background prediction."""
