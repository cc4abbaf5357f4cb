"""Point-to-point sends and receives.

Every operation here resolves its communicator-specific routing through
``comm._send_route`` / ``comm._recv_route`` and then talks straight to the
transport layer.  Blocking calls are thin wrappers over the nonblocking
ones except for one shortcut: a blocking send of a small message to a
thread on the same process deposits a packed cell into the peer inbox and
returns without ever allocating a request object.
"""

from . import transport
from .datatype import check_region, copy_between, pack_or_alias, unpack
from .errors import ArgError, TruncateError
from .progress import Request, completed_request, wait
from .transport import ANY, RecvDesc

ANY_SOURCE = ANY
ANY_TAG = ANY

# Tags ride a signed 32-bit wire field; the upper lane is reserved for
# internal collective traffic on the paired context.
MAX_TAG = (1 << 31) - 1


def _check_count(count):
    if not isinstance(count, int) or isinstance(count, bool) or count < 0:
        raise ArgError("count must be a nonnegative int, got %r" % (count,))


def _check_tag(tag, allow_any):
    if not isinstance(tag, int) or isinstance(tag, bool):
        raise ArgError("tag must be an int, got %r" % (tag,))
    if allow_any and tag == ANY_TAG:
        return
    if not 0 <= tag <= MAX_TAG:
        raise ArgError("tag %d out of range [0, %d]" % (tag, MAX_TAG))


def _check_idx(name, idx, allow_any=False):
    if not isinstance(idx, int) or isinstance(idx, bool):
        raise ArgError("%s must be an int, got %r" % (name, idx))
    if idx < 0 and not (allow_any and idx == ANY):
        raise ArgError("%s %d out of range" % (name, idx))


class DtypeSink:
    """Receive-side landing zone: scatters incoming bytes through a datatype.

    ``write`` handles fully buffered payloads (eager frames, rendezvous
    assembly, packed local cells); ``write_direct`` is the local zipper
    path that copies straight out of the sender's buffer.  Both report
    element counts and an ERR_TRUNCATE marker when the incoming data
    overruns the posted capacity.
    """

    __slots__ = ("dtype", "count", "buf", "capacity")

    def __init__(self, dtype, count, buf):
        self.dtype = dtype
        self.count = count
        self.buf = buf
        self.capacity = dtype.size_bytes * count
        # fail at post time, not delivery time
        check_region(dtype, buf, count, writable=True)

    def write(self, payload):
        try:
            wrote = unpack(self.dtype, payload, self.buf, self.count)
            err = None
        except TruncateError:
            wrote = self.capacity
            err = "ERR_TRUNCATE"
        size = self.dtype.size_bytes
        return (wrote // size if size else 0), err

    def write_direct(self, src_dtype, src_count, src_buf, total):
        moved = copy_between(src_dtype, src_count, src_buf,
                             self.dtype, self.count, self.buf)
        err = "ERR_TRUNCATE" if total > self.capacity else None
        size = self.dtype.size_bytes
        return (moved // size if size else 0), err


def _start_send(comm, buf, count, dtype, dest, tag, src_idx, dst_idx, coll):
    dtype._check_usable("send")
    _check_count(count)
    _check_tag(tag, allow_any=False)
    (vci, ctx, src_logical, dst_logical, to_proc,
     sidx, didx, local_vci) = comm._send_route(dest, src_idx, dst_idx, coll)

    if local_vci is not None:
        # same-process thread peer: hand off through inboxes, no wire
        env = (ctx, src_logical, tag, sidx, didx)
        nbytes = dtype.size_bytes * count
        if nbytes <= transport.CELL_THRESHOLD:
            payload = pack_or_alias(dtype, buf, count)
            transport.vci_local_send(vci, local_vci, env, dtype, count, buf,
                                     payload, None)
            return None
        check_region(dtype, buf, count, writable=False)
        req = Request(vci, scope=comm)
        comm.live.add(req)
        transport.vci_local_send(vci, local_vci, env, dtype, count, buf,
                                 None, req)
        return req

    payload = pack_or_alias(dtype, buf, count)
    req = Request(vci, scope=comm)
    comm.live.add(req)
    transport.vci_isend(vci, ctx, src_logical, dst_logical, to_proc, tag,
                        sidx, didx, payload, req)
    return req


def _start_recv(comm, buf, count, dtype, source, tag, src_idx, dst_idx, coll):
    dtype._check_usable("recv")
    _check_count(count)
    _check_tag(tag, allow_any=True)
    (vci, ctx, pat_src, pat_sidx,
     pat_didx) = comm._recv_route(source, src_idx, dst_idx, coll)
    sink = DtypeSink(dtype, count, buf)
    req = Request(vci, scope=comm)
    comm.live.add(req)
    transport.vci_post_recv(
        vci, RecvDesc((ctx, pat_src, tag, pat_sidx, pat_didx), sink, req))
    return req


def _isend_direct(comm, buf, count, dtype, dest, tag, coll=False):
    req = _start_send(comm, buf, count, dtype, dest, tag, None, None, coll)
    return req if req is not None else completed_request()


def _send_direct(comm, buf, count, dtype, dest, tag, coll=False):
    req = _start_send(comm, buf, count, dtype, dest, tag, None, None, coll)
    if req is not None:
        wait(req)


def _irecv_direct(comm, buf, count, dtype, source=ANY_SOURCE, tag=ANY_TAG,
                  coll=False):
    return _start_recv(comm, buf, count, dtype, source, tag, None, None, coll)


def _recv_direct(comm, buf, count, dtype, source=ANY_SOURCE, tag=ANY_TAG,
                 coll=False):
    return wait(_start_recv(comm, buf, count, dtype, source, tag, None, None,
                            coll))


def _enqueue_instead(comm, coll):
    # user traffic on a device-stream comm becomes enqueue ops no matter
    # which API surface it entered through; runtime-internal collective
    # traffic stays on the host path
    return None if coll else getattr(comm, "_device_queue", None)


def isend(comm, buf, count, dtype, dest, tag, coll=False):
    if _enqueue_instead(comm, coll) is not None:
        from . import offload
        return offload.isend_enqueue(comm, buf, count, dtype, dest, tag)
    return _isend_direct(comm, buf, count, dtype, dest, tag, coll)


def send(comm, buf, count, dtype, dest, tag, coll=False):
    if _enqueue_instead(comm, coll) is not None:
        from . import offload
        return offload.send_enqueue(comm, buf, count, dtype, dest, tag)
    return _send_direct(comm, buf, count, dtype, dest, tag, coll)


def irecv(comm, buf, count, dtype, source=ANY_SOURCE, tag=ANY_TAG,
          coll=False):
    if _enqueue_instead(comm, coll) is not None:
        from . import offload
        return offload.irecv_enqueue(comm, buf, count, dtype, source, tag)
    return _irecv_direct(comm, buf, count, dtype, source, tag, coll)


def recv(comm, buf, count, dtype, source=ANY_SOURCE, tag=ANY_TAG, coll=False):
    """Blocking receive.  Returns the Status for the matched message."""
    if _enqueue_instead(comm, coll) is not None:
        from . import offload
        return offload.recv_enqueue(comm, buf, count, dtype, source, tag)
    return _recv_direct(comm, buf, count, dtype, source, tag, coll)


def stream_isend(comm, buf, count, dtype, dest, tag, src_idx, dst_idx):
    _check_idx("src_idx", src_idx)
    _check_idx("dst_idx", dst_idx)
    req = _start_send(comm, buf, count, dtype, dest, tag, src_idx, dst_idx,
                      False)
    return req if req is not None else completed_request()


def stream_send(comm, buf, count, dtype, dest, tag, src_idx, dst_idx):
    _check_idx("src_idx", src_idx)
    _check_idx("dst_idx", dst_idx)
    req = _start_send(comm, buf, count, dtype, dest, tag, src_idx, dst_idx,
                      False)
    if req is not None:
        wait(req)


def stream_irecv(comm, buf, count, dtype, source, tag, src_idx, dst_idx):
    _check_idx("src_idx", src_idx, allow_any=True)
    _check_idx("dst_idx", dst_idx)
    return _start_recv(comm, buf, count, dtype, source, tag, src_idx, dst_idx,
                       False)


def stream_recv(comm, buf, count, dtype, source, tag, src_idx, dst_idx):
    _check_idx("src_idx", src_idx, allow_any=True)
    _check_idx("dst_idx", dst_idx)
    return wait(_start_recv(comm, buf, count, dtype, source, tag, src_idx,
                            dst_idx, False))
