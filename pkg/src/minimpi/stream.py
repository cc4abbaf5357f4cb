"""Stream handles and the VCI pool.

A SERIAL_CONTEXT stream owns one explicit VCI from a bounded pool and
carries its caller's promise of serial use, so everything issued on it
runs lock free.  DEVICE_QUEUE streams borrow the VCI owned by their
simulated device queue (several streams may share one).  NULL_STREAM is
the "no stream" sentinel accepted wherever a stream argument is
optional.
"""

import threading

from .errors import ArgError, ExhaustedError, PendingError
from .transport import CountingLock, Vci

SERIAL_CONTEXT = "serial_context"
DEVICE_QUEUE = "device_queue"

LOCK_GLOBAL = "global"
LOCK_PER_VCI = "pervci"

DEFAULT_POOL_CAPACITY = 64
IMPLICIT_VCI_COUNT = 16


class _NullStream:
    """Singleton marker for "no stream"."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NULL_STREAM"


NULL_STREAM = _NullStream()


class Stream:
    __slots__ = ("id", "kind", "vci", "device", "instance", "attach_count",
                 "freed", "grequests")

    def __init__(self, sid, kind, vci, instance, device=None):
        self.id = sid
        self.kind = kind
        self.vci = vci
        self.device = device
        self.instance = instance
        self.attach_count = 0
        self.freed = False
        self.grequests = {}

    def _check_live(self, what="use"):
        if self.freed:
            raise ArgError("stream %s after free" % what)

    def __repr__(self):
        return "Stream(id=%d, kind=%s)" % (self.id, self.kind)


class VciPool:
    """Implicit VCIs for streamless traffic plus a bounded allocation
    pool of explicit VCIs handed out to SERIAL_CONTEXT streams.

    Locking regime applies to the implicit set only: GLOBAL shares one
    CountingLock across all of them, PER_VCI gives each its own.
    Explicit VCIs never get a guard; the owning stream's serial-context
    promise replaces it.
    """

    def __init__(self, owner, capacity=DEFAULT_POOL_CAPACITY,
                 lock_mode=LOCK_PER_VCI, implicit_count=IMPLICIT_VCI_COUNT):
        if lock_mode == LOCK_GLOBAL:
            shared = CountingLock("global")
            guards = [shared] * implicit_count
        elif lock_mode == LOCK_PER_VCI:
            guards = [CountingLock("vci%d" % i)
                      for i in range(implicit_count)]
        else:
            raise ArgError("unknown lock mode %r" % (lock_mode,))
        self.lock_mode = lock_mode
        self.implicit = [Vci(owner, index=-1, guard=g) for g in guards]
        self.capacity = capacity
        self._owner = owner
        self._free = list(range(capacity - 1, -1, -1))  # pop() yields 0 first
        self._allocated = {}
        self._mutex = threading.Lock()  # pool bookkeeping, not message path

    def implicit_for(self, context_id):
        return self.implicit[context_id % len(self.implicit)]

    def alloc(self):
        with self._mutex:
            if not self._free:
                raise ExhaustedError(
                    "VCI pool exhausted (%d in use)" % self.capacity)
            idx = self._free.pop()
            vci = Vci(self._owner, index=idx, guard=None)
            self._allocated[idx] = vci
            return vci

    def release(self, vci):
        with self._mutex:
            if self._allocated.get(vci.index) is not vci:
                raise ArgError("VCI %d is not an allocated pool member"
                               % vci.index)
            del self._allocated[vci.index]
            self._free.append(vci.index)

    @property
    def in_use(self):
        return len(self._allocated)

    @property
    def available(self):
        return len(self._free)

    def explicit_vcis(self):
        return list(self._allocated.values())

    def all_vcis(self):
        return self.implicit + self.explicit_vcis()


def make_stream(instance, vci, kind=SERIAL_CONTEXT, device=None):
    """Wrap an allocated VCI in a Stream with a monotone id (handles
    are never recycled within a process, unlike VCI indexes)."""
    sid = instance.next_stream_id
    instance.next_stream_id = sid + 1
    return Stream(sid, kind, vci, instance, device)


def free_stream(stream):
    if stream is NULL_STREAM:
        raise ArgError("cannot free NULL_STREAM")
    stream._check_live("free")
    if stream.attach_count > 0:
        raise PendingError(
            "stream %d still attached to %d communicator(s)"
            % (stream.id, stream.attach_count))
    inst = stream.instance
    if inst.progress_threads.get(stream.id) is not None:
        raise PendingError("stream %d has a progress thread running"
                           % stream.id)
    stream.freed = True
    if stream.kind == SERIAL_CONTEXT:
        inst.pool.release(stream.vci)
    # DEVICE_QUEUE streams borrow the queue's VCI; nothing to return.
