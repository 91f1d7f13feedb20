from __future__ import annotations


class PPRouteError(Exception):
    """Base class for all library errors."""


class RangeError(PPRouteError, ValueError):
    """A value does not fit the fixed-point range or a headroom bound."""


class ProtocolError(PPRouteError):
    """Shares, parties or message schedules are inconsistent."""


class ScheduleError(ProtocolError):
    """The two party programs diverged (different labels, one finished early)."""


class DeadlockError(ScheduleError):
    """The phase-count bound was exceeded."""


class SelectionError(ProtocolError):
    """Masked selection was asked to pick from an empty candidate set."""


class ConfigurationError(PPRouteError, ValueError):
    """A model pool, dataset or weights file is inconsistent."""
