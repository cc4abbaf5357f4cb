"""Simulated device offload queues.

A DeviceQueue stands in for a GPU stream: an opaque 8-byte handle, a
private lock-free VCI, and one executor thread that runs enqueued tasks
strictly in order.  Communication enqueued on the queue is initiated and
progressed entirely by the executor, so the queue's VCI never needs a
lock and host threads never block inside enqueue calls.

Ergonomics follow the stream-triggered model: *_enqueue calls return
immediately; completion is ordered by the queue.  Requests returned by
isend/irecv_enqueue are owned by the queue -- host-side wait/test on
them is an error, wait_enqueue/waitall_enqueue put the wait itself on
the queue.  Errors raised inside plain enqueued work (send_enqueue,
memcpy, compute) are held and re-raised by the next queue_synchronize;
errors in enqueued waits land in the request's status instead.
"""

import collections
import os
import threading
import time

from . import p2p
from . import progress as _progress
from .datatype import as_byte_view
from .errors import ArgError, MinimpiError, StateError
from .progress import Request
from .transport import Status

_QUEUES = {}
_registry_lock = threading.Lock()


class EnqueuedRequest(Request):
    """Completion handle owned by a device queue."""

    kind = "enqueued"
    enqueued = True

    __slots__ = ("queue", "inner")

    def __init__(self, queue):
        super().__init__(vci=None, scope=None)
        self.queue = queue
        self.inner = None
        self.status = Status()


class DeviceQueue:
    """One simulated device queue.  Create with queue_create()."""

    def __init__(self, instance):
        self.instance = instance
        self.vci = instance.pool.alloc()
        self._tasks = collections.deque()
        self._wake = threading.Event()
        self._submitted = 0
        self._done = 0
        self._errors = []
        self._stopping = False
        self.destroyed = False
        with _registry_lock:
            while True:
                handle = os.urandom(8).hex()
                if handle not in _QUEUES:
                    break
            self.handle = handle
            _QUEUES[handle] = self
        self._thread = threading.Thread(
            target=self._run, name="minimpi-devq-%s" % handle[:6],
            daemon=True)
        self._thread.start()

    def __repr__(self):
        return "DeviceQueue(handle=%s)" % self.handle

    def _check_live(self):
        if self.destroyed:
            raise StateError("device queue already destroyed")

    def _submit(self, task):
        self._check_live()
        self._submitted += 1
        self._tasks.append(task)
        self._wake.set()

    def _run(self):
        while True:
            try:
                task = self._tasks.popleft()
            except IndexError:
                if self._stopping:
                    return
                self._wake.wait(0.001)
                self._wake.clear()
                continue
            try:
                task()
            except MinimpiError as exc:
                self._errors.append(exc)
            finally:
                self._done += 1

    def _drain(self):
        # hot-spin briefly, then yield real time slices to the executor
        idle = 0
        while self._done < self._submitted:
            idle += 1
            time.sleep(0 if idle < 64 else 50e-6)

    def synchronize(self):
        """Block the host until every enqueued task has run; re-raise the
        first error deferred by plain enqueued work since the last sync."""
        self._check_live()
        self._drain()
        if self._errors:
            exc = self._errors[0]
            del self._errors[:]
            raise exc

    def destroy(self):
        """Drain outstanding tasks, stop the executor, release the VCI.
        Deferred errors still pending are dropped (synchronize first if
        they matter)."""
        self._check_live()
        self._drain()
        self._stopping = True
        self._wake.set()
        self._thread.join()
        self.destroyed = True
        with _registry_lock:
            _QUEUES.pop(self.handle, None)
        self.instance.pool.release(self.vci)

    def stream_info(self):
        """Info dict suitable for Instance.stream_create()."""
        return {"type": "devstream", "value": self.handle}


def queue_create(instance):
    return DeviceQueue(instance)


def queue_destroy(queue):
    queue.destroy()


def queue_synchronize(queue):
    queue.synchronize()


def queue_from_hex(value):
    """Resolve a device queue from its hex handle (any case, optional
    left-padding).  Malformed text or an unknown handle is an ArgError."""
    if not isinstance(value, str) or not value:
        raise ArgError("device queue handle must be hex text, got %r"
                       % (value,))
    try:
        num = int(value, 16)
    except ValueError:
        raise ArgError("malformed device queue handle %r" % (value,))
    if num < 0 or num >> 64:
        raise ArgError("device queue handle %r out of range" % (value,))
    key = "%016x" % num
    with _registry_lock:
        queue = _QUEUES.get(key)
    if queue is None:
        raise ArgError("unknown device queue handle %r" % (value,))
    return queue


def _queue_of(comm):
    queue = comm._device_queue
    if queue is None:
        raise ArgError("communicator is not bound to a device queue")
    queue._check_live()
    return queue


# ---------------------------------------------------------------------------
# enqueued operations


def send_enqueue(comm, buf, count, dtype, dest, tag):
    """Ordered full send on the queue.  The executor performs the whole
    blocking send when the queue reaches this slot."""
    queue = _queue_of(comm)
    queue._submit(
        lambda: p2p._send_direct(comm, buf, count, dtype, dest, tag))


def recv_enqueue(comm, buf, count, dtype, source=-1, tag=-1):
    queue = _queue_of(comm)
    queue._submit(
        lambda: p2p._recv_direct(comm, buf, count, dtype, source, tag))


def isend_enqueue(comm, buf, count, dtype, dest, tag):
    """Initiation-only: when the queue reaches this slot the send is
    started (not finished).  Pair with wait_enqueue."""
    queue = _queue_of(comm)
    req = EnqueuedRequest(queue)

    def start():
        try:
            req.inner = p2p._isend_direct(comm, buf, count, dtype, dest, tag)
        except MinimpiError as exc:
            req.status.error = exc.code
            req.complete = True

    queue._submit(start)
    return req


def irecv_enqueue(comm, buf, count, dtype, source=-1, tag=-1):
    queue = _queue_of(comm)
    req = EnqueuedRequest(queue)

    def start():
        try:
            req.inner = p2p._irecv_direct(comm, buf, count, dtype, source, tag)
        except MinimpiError as exc:
            req.status.error = exc.code
            req.complete = True

    queue._submit(start)
    return req


def _finish_on_queue(req):
    if req.complete:        # initiation already failed; error is in status
        return
    try:
        req.status = _progress.wait(req.inner)
    except MinimpiError as exc:
        req.status = exc.status if exc.status is not None \
            else Status(error=exc.code)
    req.complete = True


def wait_enqueue(request):
    """Enqueue the completion wait for an enqueued request onto its own
    queue.  Returns immediately; the request's status is valid once the
    queue has passed this slot (queue_synchronize to observe)."""
    if not isinstance(request, EnqueuedRequest):
        raise ArgError("wait_enqueue needs a request produced by an "
                       "_enqueue operation")
    request.queue._submit(lambda: _finish_on_queue(request))


def waitall_enqueue(requests):
    requests = list(requests)
    if not requests:
        return
    for r in requests:
        if not isinstance(r, EnqueuedRequest):
            raise ArgError("waitall_enqueue needs requests produced by "
                           "_enqueue operations")
    queue = requests[0].queue
    for r in requests[1:]:
        if r.queue is not queue:
            raise ArgError("waitall_enqueue cannot mix device queues")

    def finish_all():
        for r in requests:
            _finish_on_queue(r)

    queue._submit(finish_all)


def memcpy_enqueue(queue, dst, src, nbytes):
    """Ordered byte copy on the queue."""
    queue._check_live()
    if not isinstance(nbytes, int) or isinstance(nbytes, bool) or nbytes < 0:
        raise ArgError("nbytes must be a nonnegative int")
    dview = as_byte_view(dst, writable=True)
    sview = as_byte_view(src, writable=False)
    if nbytes > len(dview) or nbytes > len(sview):
        raise ArgError("memcpy of %d bytes overruns a %d/%d byte buffer"
                       % (nbytes, len(sview), len(dview)))

    def run():
        dview[:nbytes] = sview[:nbytes]

    queue._submit(run)


def compute_enqueue(queue, fn, *args):
    """Ordered host-side compute task standing in for a device kernel."""
    queue._check_live()
    if not callable(fn):
        raise ArgError("compute_enqueue needs a callable")
    queue._submit(lambda: fn(*args))


def saxpy(a, x, y, count):
    """y[i] = a*x[i] + y[i] over float64 buffers; the stock kernel used
    by the demos and tests."""
    xv = as_byte_view(x, writable=False).cast("d")
    yv = as_byte_view(y, writable=True).cast("d")
    if count > len(xv) or count > len(yv):
        raise ArgError("saxpy count %d overruns operand buffers" % count)
    for i in range(count):
        yv[i] = a * xv[i] + yv[i]
