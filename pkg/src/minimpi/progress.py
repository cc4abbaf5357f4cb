"""Requests, generalized requests, the wait family, and progress.

Completion here is poll driven: wait() spins over the request's own
progress hook, never a condition variable, so latency stays measurable.
Generalized requests carry the five user callbacks; poll_fn runs under
a per-request try-lock so it is never re-entered concurrently and
never fires after completion.
"""

import threading
import time

from . import transport
from .errors import ArgError, StateError, for_status
from .stream import NULL_STREAM
from .transport import Status

# Grequests not bound to a stream live here; NULL_STREAM progress from
# any instance polls them ("globally registered").
_GLOBAL_GREQUESTS = {}

# Spin policy: stay hot while polls make progress, then back off to a
# real kernel sleep.  A bare sleep(0) loop on a single core starves the
# peer thread of the interpreter lock until the forced switch interval
# (~5ms), which would swamp every latency number.
_IDLE_SPINS = 64
_IDLE_NAP_S = 50e-6


def _nap(idle):
    time.sleep(_IDLE_NAP_S if idle >= _IDLE_SPINS else 0)


class Request:
    """Point-to-point completion handle."""

    kind = "p2p"
    enqueued = False    # device-queue requests override; host wait refuses

    __slots__ = ("complete", "status", "vci", "scope")

    def __init__(self, vci=None, scope=None):
        self.complete = False
        self.status = None
        self.vci = vci
        self.scope = scope  # object carrying a `live` set, e.g. a comm

    def finish(self, status):
        assert not self.complete, "request completed twice"
        self.status = status
        self.complete = True
        if self.vci is not None:
            self.vci.live.discard(self)
        if self.scope is not None:
            self.scope.live.discard(self)

    def progress_pass(self):
        if self.vci is not None:
            return transport.vci_poll(self.vci)
        return False


def completed_request(status=None):
    req = Request()
    req.complete = True
    req.status = status
    return req


class GeneralizedRequest(Request):
    kind = "generalized"

    __slots__ = ("query_fn", "free_fn", "cancel_fn", "poll_fn", "wait_fn",
                 "extra_state", "stream", "_poll_mutex", "_finalized")

    def __init__(self, query_fn, free_fn, cancel_fn, poll_fn=None,
                 wait_fn=None, extra_state=None, stream=None):
        super().__init__()
        self.query_fn = query_fn
        self.free_fn = free_fn
        self.cancel_fn = cancel_fn
        self.poll_fn = poll_fn
        self.wait_fn = wait_fn
        self.extra_state = extra_state
        self.stream = stream
        self._poll_mutex = threading.Lock()
        self._finalized = False

    def poll(self):
        if self.complete or self.poll_fn is None:
            return
        # Try-lock: never concurrent with itself, never after complete.
        if not self._poll_mutex.acquire(blocking=False):
            return
        try:
            if not self.complete:
                self.poll_fn(self.extra_state, Status())
        finally:
            self._poll_mutex.release()

    def progress_pass(self):
        return self.poll()

    def finalize(self):
        """Run query_fn into a fresh Status, then free_fn, exactly once."""
        if self._finalized:
            return self.status
        self._finalized = True
        st = Status()
        self.query_fn(self.extra_state, st)
        self.free_fn(self.extra_state)
        self.status = st
        _GLOBAL_GREQUESTS.pop(id(self), None)
        if self.stream is not None:
            self.stream.grequests.pop(id(self), None)
        return st


def grequest_start(query_fn, free_fn, cancel_fn, poll_fn=None, wait_fn=None,
                   extra_state=None, stream=None):
    """Start a generalized request.

    query_fn/free_fn/cancel_fn are mandatory; poll_fn and wait_fn are
    the optional progress hooks.  stream=None (or NULL_STREAM) registers
    the request globally; passing a stream binds it so only
    stream_progress on that stream polls it.
    """
    for name, fn in (("query_fn", query_fn), ("free_fn", free_fn),
                     ("cancel_fn", cancel_fn)):
        if not callable(fn):
            raise ArgError("%s must be callable" % name)
    for name, fn in (("poll_fn", poll_fn), ("wait_fn", wait_fn)):
        if fn is not None and not callable(fn):
            raise ArgError("%s must be callable or None" % name)
    if stream is NULL_STREAM:
        stream = None
    req = GeneralizedRequest(query_fn, free_fn, cancel_fn, poll_fn, wait_fn,
                             extra_state, stream)
    if stream is None:
        _GLOBAL_GREQUESTS[id(req)] = req
    else:
        stream._check_live("grequest registration")
        stream.grequests[id(req)] = req
    return req


def grequest_complete(request):
    if not isinstance(request, GeneralizedRequest):
        raise ArgError("grequest_complete needs a generalized request")
    if request.complete:
        raise ArgError("generalized request already complete")
    request.complete = True


def _poll_registry(registry):
    for req in list(registry.values()):
        if req.complete:
            registry.pop(id(req), None)
        else:
            req.poll()


def drive(instance, stream=None):
    """One explicit progress pass.

    NULL_STREAM (or None) polls every implicit VCI of the instance plus
    all globally registered grequests; a specific stream polls exactly
    its own VCI and its own grequests, acquiring nothing.
    """
    if stream is None or stream is NULL_STREAM:
        worked = False
        if instance is not None:
            for vci in instance.pool.implicit:
                worked = transport.vci_poll(vci) or worked
        _poll_registry(_GLOBAL_GREQUESTS)
        return worked
    stream._check_live("progress")
    worked = transport.vci_poll(stream.vci)
    _poll_registry(stream.grequests)
    return worked


def _finalize(request):
    if isinstance(request, GeneralizedRequest):
        st = request.finalize()
    else:
        st = request.status
    if st is None:
        st = Status()
    if st.error:
        raise for_status(st)
    return st


def wait(request):
    """Block until the request completes; returns its Status.

    Spins between progress passes.  For p2p requests a pass polls the
    request's VCI; for generalized ones it invokes poll_fn (if any).
    A poll-less grequest therefore blocks here until some other thread
    calls grequest_complete.
    """
    if request.enqueued:
        raise ArgError("request belongs to a device queue; use wait_enqueue")
    idle = 0
    while not request.complete:
        moved = request.progress_pass()
        if request.complete:
            break
        idle = 0 if moved else idle + 1
        _nap(idle)
    return _finalize(request)


def test(request):
    """One progress pass; returns (flag, Status)."""
    if request.enqueued:
        raise ArgError("request belongs to a device queue; use wait_enqueue")
    if not request.complete:
        request.progress_pass()
    if request.complete:
        return True, _finalize(request)
    return False, Status()


def _batchable(requests):
    if not requests:
        return None
    first = requests[0]
    if not isinstance(first, GeneralizedRequest) or first.wait_fn is None:
        return None
    wf = first.wait_fn
    for r in requests:
        if not isinstance(r, GeneralizedRequest) or r.wait_fn is not wf:
            return None
    return wf


def waitall(requests):
    """Wait for every request; returns their statuses in order.

    When the whole set is generalized requests sharing one wait_fn, the
    batch contract applies: wait_fn(count, extra_states, timeout,
    status) is called with every still-pending state at once (statuses
    come from query_fn afterwards; the wait_fn status output is
    ignored), looping until all complete.  Any mixed set falls back to
    interleaved per-request polling.
    """
    requests = list(requests)
    for r in requests:
        if r.enqueued:
            raise ArgError(
                "request belongs to a device queue; use waitall_enqueue")
    wf = _batchable(requests)
    if wf is not None:
        idle = 0
        while True:
            pending = [r for r in requests if not r.complete]
            if not pending:
                break
            states = [r.extra_state for r in pending]
            wf(len(states), states, float("inf"), Status())
            if any(not r.complete for r in pending):
                idle += 1
                _nap(idle)
    else:
        idle = 0
        while True:
            pending = [r for r in requests if not r.complete]
            if not pending:
                break
            moved = False
            for r in pending:
                moved = r.progress_pass() or moved
            idle = 0 if moved else idle + 1
            _nap(idle)
    statuses = []
    failure = None
    for r in requests:
        try:
            statuses.append(_finalize(r))
        except Exception as exc:  # surface after finalizing the rest
            if failure is None:
                failure = exc
            statuses.append(getattr(exc, "status", None))
    if failure is not None:
        raise failure
    return statuses


class ProgressThread(threading.Thread):
    """Background poller: stream_progress in a loop with a yield nap."""

    def __init__(self, instance, stream, yield_us):
        name = "minimpi-progress-%s" % (
            "null" if stream is None else stream.id)
        super().__init__(name=name, daemon=True)
        self.instance = instance
        self.stream = stream
        self.nap = max(yield_us, 0) / 1e6
        # NB: threading.Thread has a private _stop method; don't shadow it
        self._halt = threading.Event()

    def run(self):
        while not self._halt.is_set():
            drive(self.instance, self.stream)
            if self.nap:
                self._halt.wait(self.nap)
            else:
                time.sleep(0)

    def stop(self):
        self._halt.set()
        self.join()
