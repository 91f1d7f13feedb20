"""Two-party secure LLM routing: secret-shared protocols, unsorted top-k and routing policies."""

from .engine import CommStats, Session, run_lockstep
from .errors import (
    ConfigurationError,
    DeadlockError,
    PPRouteError,
    ProtocolError,
    RangeError,
    ScheduleError,
    SelectionError,
)
from .ring import DEFAULT_CONFIG, FixedPointConfig, decode, encode
from .sharing import FixedShare, reconstruct, share

__version__ = "0.1.0"
