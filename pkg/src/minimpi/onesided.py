"""Passive-target one-sided reads.

A window exposes a local byte region to every rank of a conventional
communicator.  Reads are fully origin-driven: the origin flattens its
picture of the target datatype into absolute byte segments and ships
them in a GET_REQ frame; the target bounds-checks, gathers, and answers
with GET_RESP inside its normal progress path (no target-side calls are
needed beyond progress happening -- a progress thread suffices).

Only shared lock epochs are implemented; exclusive locking would need a
remote grant protocol and raises UnsupportedError.
"""

import struct
import threading

from . import transport
from .comm import CONVENTIONAL, barrier, _allgather_i64
from .datatype import _layout_for, as_byte_view, packed_size, unpack
from .errors import (ArgError, PendingError, StateError, UnsupportedError)
from .progress import Request, waitall
from .transport import GET_REQ, GET_RESP, Status

LOCK_SHARED = "shared"
LOCK_EXCLUSIVE = "exclusive"

# GET_REQ payload: header then nseg (offset, length) pairs, all LE.
_REQ_HEAD = struct.Struct("<IQQI")   # win_id, op_id, total_bytes, nseg
_SEG = struct.Struct("<QQ")
# GET_RESP payload: header then the gathered bytes (flag 0) or nothing.
_RESP_HEAD = struct.Struct("<QB")    # op_id, flag
_FLAG_OK = 0
_FLAG_REJECT = 1

_op_lock = threading.Lock()          # op-id allocation, not message path


class Window:
    """One rank's view of a shared read window.  Create via win_create."""

    def __init__(self, comm, view, disp_unit, win_id, remote_units,
                 remote_sizes):
        self.comm = comm
        self.view = view
        self.size_bytes = len(view)
        self.disp_unit = disp_unit
        self.win_id = win_id
        # displacement arithmetic always uses the TARGET rank's unit
        self.remote_units = remote_units
        self.remote_sizes = remote_sizes
        self.epochs = {}        # target rank -> list of outstanding reads
        self.freed = False

    def __repr__(self):
        return "Window(id=%d, bytes=%d, comm=%r)" % (
            self.win_id, self.size_bytes, self.comm)

    def _check_live(self):
        if self.freed:
            raise StateError("window already freed")

    def lock(self, target_rank, lock_type=LOCK_SHARED):
        self._check_live()
        if lock_type == LOCK_EXCLUSIVE:
            raise UnsupportedError("exclusive window locks are not "
                                   "implemented; use shared epochs")
        if lock_type != LOCK_SHARED:
            raise ArgError("unknown lock type %r" % (lock_type,))
        if not 0 <= target_rank < self.comm.size:
            raise ArgError("target rank %r out of range" % (target_rank,))
        if target_rank in self.epochs:
            raise StateError("an epoch to rank %d is already open"
                             % target_rank)
        self.epochs[target_rank] = []

    def get(self, origin_buf, origin_count, origin_dtype, target_rank,
            target_disp, target_count, target_dtype):
        """Start one read; completes at unlock."""
        self._check_live()
        ops = self.epochs.get(target_rank)
        if ops is None:
            raise StateError("no access epoch open to rank %d (win_lock "
                             "first)" % target_rank)
        origin_dtype._check_usable("get")
        target_dtype._check_usable("get")
        if not isinstance(target_disp, int) or isinstance(target_disp, bool)\
                or target_disp < 0:
            raise ArgError("target_disp must be a nonnegative int")
        total = packed_size(target_dtype, target_count)
        if packed_size(origin_dtype, origin_count) != total:
            raise ArgError("origin and target type signatures disagree "
                           "(%d vs %d bytes)"
                           % (packed_size(origin_dtype, origin_count),
                              total))
        # origin-side landing zone is validated now, filled at response
        as_byte_view(origin_buf, writable=True)

        base = target_disp * self.remote_units[target_rank]
        segs = [(base + off, ln)
                for off, ln in _layout_for(target_dtype,
                                           target_count).emit(0)]

        comm = self.comm
        inst = comm.instance
        ctx = comm.context_id
        vci = inst.pool.implicit_for(ctx)
        with _op_lock:
            op_id = inst.next_op_id
            inst.next_op_id = op_id + 1
            req = Request(vci, scope=comm)
            inst.onesided_ops[op_id] = (req, origin_dtype, origin_count,
                                        origin_buf, target_rank)
        comm.live.add(req)
        ops.append(req)

        payload = bytearray(_REQ_HEAD.size + _SEG.size * len(segs))
        _REQ_HEAD.pack_into(payload, 0, self.win_id, op_id, total,
                            len(segs))
        pos = _REQ_HEAD.size
        for off, ln in segs:
            _SEG.pack_into(payload, pos, off, ln)
            pos += _SEG.size
        transport.vci_send_raw(vci, GET_REQ, ctx, comm.rank, target_rank,
                               target_rank, 0, bytes(payload))
        return req

    def unlock(self, target_rank):
        """Close the epoch: blocks until every read to target_rank has
        been answered.  Raises the first failed read's error."""
        self._check_live()
        ops = self.epochs.pop(target_rank, None)
        if ops is None:
            raise StateError("no epoch open to rank %d" % target_rank)
        waitall(ops)

    def free(self):
        self._check_live()
        if self.epochs:
            raise PendingError("window has %d open epoch(s)"
                               % len(self.epochs))
        barrier(self.comm)
        self.freed = True
        self.comm.instance.windows.pop(self.win_id, None)


def win_create(comm, buf, disp_unit=1):
    """Collective: expose buf for remote reads over comm."""
    comm._check_live()
    if comm.kind != CONVENTIONAL:
        raise ArgError("windows attach to conventional communicators")
    if not isinstance(disp_unit, int) or isinstance(disp_unit, bool) \
            or disp_unit < 1:
        raise ArgError("disp_unit must be a positive int")
    view = as_byte_view(buf, writable=False)
    inst = comm.instance
    rows = _allgather_i64(comm, (inst.next_win_id, disp_unit, len(view)))
    wid = max(r[0] for r in rows)
    inst.next_win_id = wid + 1
    win = Window(comm, view, disp_unit, wid,
                 [r[1] for r in rows], [r[2] for r in rows])
    inst.windows[wid] = win
    barrier(comm)
    return win


def win_lock(window, target_rank, lock_type=LOCK_SHARED):
    window.lock(target_rank, lock_type)


def win_unlock(window, target_rank):
    window.unlock(target_rank)


def win_get(window, origin_buf, origin_count, origin_dtype, target_rank,
            target_disp, target_count, target_dtype):
    return window.get(origin_buf, origin_count, origin_dtype, target_rank,
                      target_disp, target_count, target_dtype)


def win_free(window):
    window.free()


# ---------------------------------------------------------------------------
# frame service (called from transport dispatch via Instance)


def handle_frame(instance, vci, frame):
    if frame.kind == GET_REQ:
        _serve_get(instance, vci, frame)
    elif frame.kind == GET_RESP:
        _absorb_resp(instance, frame)
    else:
        raise transport.TransportError(
            "protocol violation: unexpected one-sided kind %d" % frame.kind)


def _serve_get(instance, vci, frame):
    payload = frame.payload
    win_id, op_id, total, nseg = _REQ_HEAD.unpack_from(payload, 0)
    window = instance.windows.get(win_id)
    reject = window is None or window.freed
    parts = []
    if not reject:
        view = window.view
        limit = window.size_bytes
        pos = _REQ_HEAD.size
        gathered = 0
        for _ in range(nseg):
            off, ln = _SEG.unpack_from(payload, pos)
            pos += _SEG.size
            if off + ln > limit:
                reject = True
                break
            parts.append(view[off:off + ln])
            gathered += ln
        if not reject and gathered != total:
            reject = True
    if reject:
        resp = _RESP_HEAD.pack(op_id, _FLAG_REJECT)
    else:
        resp = _RESP_HEAD.pack(op_id, _FLAG_OK) + b"".join(
            bytes(p) for p in parts)
    transport._reply(vci, frame, GET_RESP, resp, frame.src_rank)


def _absorb_resp(instance, frame):
    op_id, flag = _RESP_HEAD.unpack_from(frame.payload, 0)
    entry = instance.onesided_ops.pop(op_id, None)
    if entry is None:
        raise transport.TransportError(
            "protocol violation: response for unknown read op %d" % op_id)
    req, dtype, count, buf, target = entry
    if flag != _FLAG_OK:
        req.finish(Status(source=target, error="ERR_ARG"))
        return
    data = frame.payload[_RESP_HEAD.size:]
    unpack(dtype, data, buf, count)
    req.finish(Status(source=target, count=count))
