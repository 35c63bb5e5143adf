"""Exception hierarchy. Every error raised by the package derives from XdmmdError."""


class XdmmdError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ConfigError(XdmmdError, ValueError):
    pass


class BoundsError(XdmmdError, ValueError):
    pass


class ShapeError(XdmmdError, ValueError):
    pass


class ArchError(XdmmdError, ValueError):
    pass


class LayerError(XdmmdError, ValueError):
    pass


class CacheError(XdmmdError, ValueError):
    pass


class FormatError(XdmmdError, ValueError):
    pass


class IoError(XdmmdError, OSError):
    pass


class DataError(XdmmdError, ValueError):
    pass


class EmptyGroupError(XdmmdError, ValueError):
    pass


class DegenerateGroupError(XdmmdError, ValueError):
    pass


class NotFoundError(XdmmdError, KeyError):
    def __str__(self) -> str:
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""
