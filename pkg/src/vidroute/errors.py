"""Exception hierarchy shared across the package."""


class VidrouteError(Exception):
    """Base class for all package errors."""


class ConfigurationError(VidrouteError):
    """Invalid configuration: bad indices, missing table entries, broken invariants."""


class InputError(VidrouteError):
    """Malformed caller input (shapes, empty collections, unparsable files)."""


class InfeasibleError(VidrouteError):
    """No decision satisfies the constraints (per task or globally)."""


class CapacityError(VidrouteError):
    """Problem size exceeds an exact-enumeration guard; no silent approximation."""
