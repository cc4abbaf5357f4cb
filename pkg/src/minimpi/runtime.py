"""Runtime instance: initialization, configuration, frame routing,
explicit progress control, and the multi-process launcher.

An Instance is one rank's view of the job.  Two transports exist:

* inproc -- several Instances in one OS process, joined through a named
  in-memory fabric.  This is how most of the test suite runs and how the
  benchmark harness hosts both ranks of a ping-pong pair.
* socket -- one Instance per OS process over loopback TCP, bootstrapped
  through a rendezvous address carried in the environment by launch().

Configuration precedence for every knob: explicit argument, then the
MINIMPI_* environment variable, then the built-in default.
"""

import os
import socket
import subprocess
import sys
import time

from . import progress as _progress
from . import transport
from .comm import Communicator, barrier
from .errors import (ArgError, PendingError, SpawnError, StateError,
                     TransportError, UnsupportedError)
from .stream import (DEFAULT_POOL_CAPACITY, DEVICE_QUEUE, LOCK_GLOBAL,
                     LOCK_PER_VCI, NULL_STREAM, SERIAL_CONTEXT, VciPool,
                     free_stream, make_stream)
from .transport import (DEFAULT_CHUNK_SIZE, DEFAULT_EAGER_LIMIT,
                        InProcFabric, SocketBackend)

TRANSPORT_INPROC = "inproc"
TRANSPORT_SOCKET = "socket"

DEFAULT_PROGRESS_YIELD_US = 50
DEFAULT_CONNECT_TIMEOUT = 10.0

# Socket transport owns process-wide resources (the data listener), so a
# process hosts at most one live socket Instance at a time.
_socket_instance = None


def _cfg(flag, env, default, convert):
    if flag is not None:
        return flag
    raw = os.environ.get(env)
    if raw is not None:
        try:
            return convert(raw)
        except (TypeError, ValueError):
            raise ArgError("bad %s value %r" % (env, raw))
    return default


class Instance:
    """One rank of a running job.  Create through init()."""

    def __init__(self, transport_kind, rank, size, group, lock_mode,
                 vci_pool, eager_limit, chunk_size, progress_yield_us,
                 connect_timeout, root_addr, trace):
        self.transport = transport_kind
        self.rank = rank
        self.size = size
        self.group = group
        self.lock_mode = lock_mode
        self.eager_limit = eager_limit
        self.chunk_size = chunk_size
        self.progress_yield_us = progress_yield_us
        self.connect_timeout = connect_timeout
        self.trace = trace
        self.finalized = False

        self.pool = VciPool(self, capacity=vci_pool, lock_mode=lock_mode)
        self.contexts = {}
        self.next_context_id = 2
        self.next_stream_id = 0
        self.progress_threads = {}
        self.windows = {}
        self.next_win_id = 0
        self.onesided_ops = {}
        self.next_op_id = 0

        self.world = Communicator(self, 0, rank, size)
        self.contexts[0] = self.world
        self.contexts[1] = self.world

        if transport_kind == TRANSPORT_INPROC:
            self._fabric = InProcFabric.join(group, size, rank, self)
            self._socket = None
        elif transport_kind == TRANSPORT_SOCKET:
            global _socket_instance
            if _socket_instance is not None:
                raise StateError("a socket-transport instance is already "
                                 "live in this process")
            if root_addr is None:
                raise ArgError("socket transport needs a rendezvous "
                               "address (root_addr / MINIMPI_ROOT_ADDR)")
            self._fabric = None
            self._socket = SocketBackend(rank, size, root_addr,
                                         self.deliver,
                                         connect_timeout=connect_timeout)
            _socket_instance = self
        else:
            raise ArgError("unknown transport %r" % (transport_kind,))

    def __repr__(self):
        return "<Instance rank=%d/%d transport=%s>" % (
            self.rank, self.size, self.transport)

    def _check_live(self):
        if self.finalized:
            raise StateError("instance already finalized")

    # ---- frame plumbing (called from transport and peer instances) ------

    def send_frame(self, frame, to_proc):
        if self.trace:
            transport.trace_frame("tx", self.rank, frame)
        if self._socket is not None:
            self._socket.send(frame, to_proc)
        else:
            self._fabric.send(frame, to_proc, self.connect_timeout)

    def deliver(self, frame):
        comm = self.contexts.get(frame.context_id)
        if comm is None:
            raise TransportError("protocol violation: unknown context %d"
                                 % frame.context_id)
        vci = comm._vci_for_frame(frame)
        if self.trace:
            transport.trace_frame("rx", self.rank, frame)
        vci.inbox.append(frame)

    def handle_onesided(self, vci, frame):
        from . import onesided
        onesided.handle_frame(self, vci, frame)

    # ---- explicit progress ----------------------------------------------

    def progress(self, stream=None):
        """One manual progress pass: the given stream's lane, or every
        implicit VCI plus global generalized requests when stream is
        None/NULL_STREAM."""
        self._check_live()
        _progress.drive(self, stream)

    def start_progress_thread(self, stream=None, yield_us=None):
        self._check_live()
        key = None if stream is None or stream is NULL_STREAM else stream.id
        if key in self.progress_threads:
            raise StateError("a progress thread is already running for %s"
                             % ("the null stream" if key is None
                                else "stream %d" % key))
        if yield_us is None:
            yield_us = self.progress_yield_us
        th = _progress.ProgressThread(self, stream, yield_us)
        self.progress_threads[key] = th
        th.start()
        return th

    def stop_progress_thread(self, stream=None):
        key = None if stream is None or stream is NULL_STREAM else stream.id
        th = self.progress_threads.pop(key, None)
        if th is None:
            raise StateError("no progress thread running for %s"
                             % ("the null stream" if key is None
                                else "stream %d" % key))
        th.stop()

    # ---- streams ----------------------------------------------------------

    def stream_create(self, info=None):
        """Create a stream.  With no info (or no "type" entry) this is a
        plain serial-context stream backed by a fresh explicit VCI.  An
        info of type "devstream" wraps an existing device queue handle;
        "cudaStream_t" is recognized but unsupported in this build."""
        self._check_live()
        kind_val = info.get("type") if info is not None else None
        if kind_val is None:
            return make_stream(self, self.pool.alloc(), SERIAL_CONTEXT)
        if kind_val == "devstream":
            from . import offload
            queue = offload.queue_from_hex(info.get("value"))
            return make_stream(self, queue.vci, DEVICE_QUEUE, device=queue)
        if kind_val == "cudaStream_t":
            raise UnsupportedError("no CUDA runtime in this build")
        raise ArgError("unknown stream type %r" % (kind_val,))

    def stream_free(self, stream):
        free_stream(stream)

    # ---- shutdown ----------------------------------------------------------

    def finalize(self):
        """Collective teardown.  Refuses while anything is outstanding."""
        self._check_live()
        pending = sum(len(c.live) for c in set(self.contexts.values()))
        if pending:
            raise PendingError("%d operations still outstanding" % pending)
        for c in set(self.contexts.values()):
            if c.kind == "threadcomm" and c.active:
                raise StateError("a threadcomm is still active")
        if self.progress_threads:
            raise StateError("%d progress thread(s) still running"
                             % len(self.progress_threads))
        barrier(self.world)
        self.finalized = True
        if self._socket is not None:
            global _socket_instance
            self._socket.close()
            _socket_instance = None
        else:
            self._fabric.leave(self.rank)


def init(transport=None, rank=None, ranks=None, group=None, lock_mode=None,
         vci_pool=None, eager_limit=None, chunk_size=None,
         progress_yield_us=None, connect_timeout=None, root_addr=None):
    """Bring up this rank and return its Instance.

    With no arguments the configuration comes from MINIMPI_* environment
    variables (which is how launch() conveys it), falling back to a
    single-rank in-process instance.
    """
    root_addr = _cfg(root_addr, "MINIMPI_ROOT_ADDR", None, str)
    default_transport = (TRANSPORT_SOCKET if root_addr is not None
                         else TRANSPORT_INPROC)
    transport_kind = _cfg(transport, "MINIMPI_TRANSPORT",
                          default_transport, str)
    # the launcher CLI spells it "in-proc"
    transport_kind = transport_kind.replace("-", "")
    rank = _cfg(rank, "MINIMPI_RANK", 0, int)
    size = _cfg(ranks, "MINIMPI_SIZE", 1, int)
    group = _cfg(group, "MINIMPI_GROUP", "default", str)
    lock_mode = _cfg(lock_mode, "MINIMPI_LOCK_MODE", LOCK_PER_VCI, str)
    vci_pool = _cfg(vci_pool, "MINIMPI_VCI_POOL", DEFAULT_POOL_CAPACITY, int)
    eager_limit = _cfg(eager_limit, "MINIMPI_EAGER_LIMIT",
                       DEFAULT_EAGER_LIMIT, int)
    chunk_size = _cfg(chunk_size, "MINIMPI_CHUNK_SIZE",
                      DEFAULT_CHUNK_SIZE, int)
    progress_yield_us = _cfg(progress_yield_us, "MINIMPI_PROGRESS_YIELD_US",
                             DEFAULT_PROGRESS_YIELD_US, int)
    connect_timeout = _cfg(connect_timeout, "MINIMPI_CONNECT_TIMEOUT",
                           DEFAULT_CONNECT_TIMEOUT, float)
    trace = os.environ.get("MINIMPI_TRACE_FRAMES", "") == "1"

    if size < 1:
        raise ArgError("ranks must be >= 1, got %d" % size)
    if not 0 <= rank < size:
        raise ArgError("rank %d outside job of %d" % (rank, size))
    if chunk_size < 1 or eager_limit < 0:
        raise ArgError("eager_limit/chunk_size out of range")

    return Instance(transport_kind, rank, size, group, lock_mode, vci_pool,
                    eager_limit, chunk_size, progress_yield_us,
                    connect_timeout, root_addr, trace)


# ---------------------------------------------------------------------------
# info objects


class Info:
    """Ordered string key/value hints, mpi4py-Info-flavoured."""

    def __init__(self):
        self._entries = {}

    def set(self, key, value):
        if not isinstance(key, str) or not key:
            raise ArgError("info key must be a nonempty string")
        if not isinstance(value, str):
            raise ArgError("info value must be a string")
        self._entries[key] = value

    def get(self, key, default=None):
        return self._entries.get(key, default)

    def delete(self, key):
        if key not in self._entries:
            raise ArgError("info has no key %r" % (key,))
        del self._entries[key]

    def keys(self):
        return list(self._entries)

    def __repr__(self):
        return "Info(%r)" % (self._entries,)


def info_create():
    return Info()


def info_set(info, key, value):
    info.set(key, value)


def info_set_hex(info, key, value, length=None):
    """Store a binary handle as lowercase hex text, two characters per
    byte, memory byte order preserved.  Accepts an int or a bytes-like;
    ints are zero-padded to 8 bytes (the native handle width) unless
    length says otherwise.  length limits how many bytes of value are
    encoded."""
    if length is not None and (not isinstance(length, int)
                               or isinstance(length, bool) or length < 0):
        raise ArgError("length must be a nonnegative int, got %r"
                       % (length,))
    if isinstance(value, int) and not isinstance(value, bool):
        if value < 0:
            raise ArgError("hex info value must be nonnegative")
        width = 8 if length is None else length
        if value >> (8 * width):
            raise ArgError("value %#x does not fit in %d bytes"
                           % (value, width))
        info.set(key, "%0*x" % (2 * width, value) if width else "")
    elif isinstance(value, (bytes, bytearray, memoryview)):
        raw = bytes(value)
        if length is not None:
            if length > len(raw):
                raise ArgError("length %d exceeds value size %d"
                               % (length, len(raw)))
            raw = raw[:length]
        info.set(key, raw.hex())
    else:
        raise ArgError("expected int or bytes for hex value, got %r"
                       % (value,))


# ---------------------------------------------------------------------------
# launcher


def _pick_root_addr():
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind(("127.0.0.1", 0))
        host, port = probe.getsockname()
    finally:
        probe.close()
    return "%s:%d" % (host, port)


def launch(n, program, args=(), transport=TRANSPORT_SOCKET, env=None,
           timeout=None):
    """Spawn an n-rank job and wait for it.  Returns the first nonzero
    exit code, or 0 when every rank succeeded.

    Rank, size, transport, and the rendezvous address travel to the
    children in MINIMPI_* environment variables; rank 0 binds the
    rendezvous socket.  The in-process transport cannot span OS
    processes, so it is restricted to n=1 here.
    """
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ArgError("n must be a positive int, got %r" % (n,))
    if transport == TRANSPORT_INPROC and n != 1:
        raise ArgError("in-proc transport lives inside one process; "
                       "launch(n>1) needs the socket transport")
    if transport not in (TRANSPORT_INPROC, TRANSPORT_SOCKET):
        raise ArgError("unknown transport %r" % (transport,))

    root_addr = _pick_root_addr() if transport == TRANSPORT_SOCKET else ""
    if program.endswith(".py"):
        cmd = [sys.executable, program] + list(args)
    else:
        cmd = [program] + list(args)

    procs = []
    try:
        for r in range(n):
            child_env = dict(os.environ if env is None else env)
            child_env["MINIMPI_RANK"] = str(r)
            child_env["MINIMPI_SIZE"] = str(n)
            child_env["MINIMPI_TRANSPORT"] = transport
            if root_addr:
                child_env["MINIMPI_ROOT_ADDR"] = root_addr
            else:
                child_env.pop("MINIMPI_ROOT_ADDR", None)
            try:
                procs.append(subprocess.Popen(cmd, env=child_env))
            except OSError as exc:
                raise SpawnError("cannot spawn rank %d (%s): %s"
                                 % (r, cmd[0], exc))
    except BaseException:
        for p in procs:
            p.kill()
        for p in procs:
            p.wait()
        raise

    deadline = None if timeout is None else time.monotonic() + timeout
    codes = []
    try:
        for p in procs:
            left = None if deadline is None \
                else max(0.0, deadline - time.monotonic())
            codes.append(p.wait(timeout=left))
    except subprocess.TimeoutExpired:
        for p in procs:
            if p.poll() is None:
                p.kill()
        for p in procs:
            p.wait()
        raise SpawnError("job timed out after %.1fs" % timeout)

    for code in codes:
        if code != 0:
            return code
    return 0
