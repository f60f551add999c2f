"""Exception hierarchy.

Every domain error derives from ``ProxyNovelError`` so the CLI can map
them to exit code 1 in one place.
"""


class ProxyNovelError(Exception):
    """Base class for all domain errors raised by this package."""


class NearZeroNorm(ProxyNovelError, ValueError):
    pass


class DimensionMismatch(ProxyNovelError, ValueError):
    pass


class SchemaError(ProxyNovelError, ValueError):
    pass


class SpecError(ProxyNovelError, ValueError):
    pass


class ConfigError(ProxyNovelError, ValueError):
    pass


class EmptyClass(ProxyNovelError, ValueError):
    pass


class EmptyGroup(ProxyNovelError, ValueError):
    pass


class UnknownClass(ProxyNovelError, KeyError):
    pass


class UnknownGroup(ProxyNovelError, ValueError):
    pass


class InsufficientClasses(ProxyNovelError, ValueError):
    pass


class MissingTargets(ProxyNovelError, ValueError):
    pass
