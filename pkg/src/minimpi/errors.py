"""Error taxonomy for the minimpi runtime.

Every failure raised by the public API is a subclass of MinimpiError and
carries a stable machine-readable ``code`` string so tests and callers can
dispatch without string-matching messages.
"""


class MinimpiError(Exception):
    """Base class for all runtime errors."""

    code = "ERR_OTHER"

    def __init__(self, msg: str = "", *, status=None):
        super().__init__(msg or self.code)
        # optional partially-filled Status (e.g. truncated receives)
        self.status = status


class StateError(MinimpiError):
    """Object used outside its legal lifecycle (pre-init, post-free, ...)."""

    code = "ERR_STATE"


class PendingError(MinimpiError):
    """Teardown attempted while operations are still outstanding."""

    code = "ERR_PENDING"


class ArgError(MinimpiError):
    """Bad argument: bounds, malformed values, wrong-queue handles."""

    code = "ERR_ARG"


class TransportError(MinimpiError):
    """Connection, protocol or framing failure in a backend."""

    code = "ERR_TRANSPORT"


class SpawnError(MinimpiError):
    """Launcher could not start a participant."""

    code = "ERR_SPAWN"


class ExhaustedError(MinimpiError):
    """A fixed-capacity pool (interface pool) has no free entry."""

    code = "ERR_EXHAUSTED"


class UnsupportedError(MinimpiError):
    """Recognized but deliberately unimplemented feature was requested."""

    code = "ERR_UNSUPPORTED"


class TruncateError(MinimpiError):
    """Incoming message larger than the posted receive buffer."""

    code = "ERR_TRUNCATE"


_BY_CODE = {cls.code: cls for cls in (
    MinimpiError, StateError, PendingError, ArgError, TransportError,
    SpawnError, ExhaustedError, UnsupportedError, TruncateError)}


def for_status(status):
    """Build the exception matching a completion status's error code."""
    cls = _BY_CODE.get(status.error, MinimpiError)
    return cls("operation completed with %s" % status.error, status=status)
