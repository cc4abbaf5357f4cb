"""Virtual communication interfaces and the frame protocols between them.

Layer zero of the runtime.  Everything above (communicators, point to
point ops, progress) funnels into three entry points here: vci_isend,
vci_post_recv and vci_poll.  Two backends carry encoded frames between
participants: an in-process fabric (plain queue handoff) and a TCP
socket backend.  Interthread traffic inside one participant bypasses
frames entirely through the local descriptor path at the bottom of this
file.

Locking regimes: implicit VCIs are guarded either by one shared
CountingLock (GLOBAL mode) or one lock each (PER_VCI mode).  VCIs bound
to streams, device queues or threadcomm slots always have guard None;
their callers promise serial use, so that path acquires nothing.  Inbox
handoff relies on deque.append/popleft being atomic, which makes the
inbox a safe multiple-producer queue under every regime.
"""

import binascii
import collections
import json
import socket
import struct
import sys
import threading
import time

from .datatype import copy_between
from .errors import ArgError, StateError, TransportError

ANY = -1

# Frame kinds.
EAGER = 0
RTS = 1
CTS = 2
CHUNK = 3
GET_REQ = 4
GET_RESP = 5
CTRL = 6

KIND_NAMES = {
    EAGER: "EAGER", RTS: "RTS", CTS: "CTS", CHUNK: "CHUNK",
    GET_REQ: "GET_REQ", GET_RESP: "GET_RESP", CTRL: "CTRL",
}

MAGIC = b"MMPI"
VERSION = 1

# magic, version, kind, context_id, src_rank, dst_rank, tag,
# src_stream_idx, dst_stream_idx, seq, payload_len -- all little-endian.
HEADER = struct.Struct("<4sBBIiiiiiQQ")
HEADER_SIZE = HEADER.size  # 46 bytes
_PAYLOAD_LEN_OFF = 38  # byte offset of payload_len within the header

_RTS_PAYLOAD = struct.Struct("<QQi")   # send_id, total_bytes, reply_proc
_CTS_PAYLOAD = struct.Struct("<QQi")   # send_id, recv_id, receiver_proc
_ID = struct.Struct("<Q")              # recv_id prefix on CHUNK frames
_CTRL_PAYLOAD = struct.Struct("<BQ")   # ctrl op, send_id

CTRL_ACK = 1

DEFAULT_EAGER_LIMIT = 64 * 1024
DEFAULT_CHUNK_SIZE = 16 * 1024

# Local (interthread) sends at or below this many payload bytes travel
# as a buffered cell without allocating a sender-side request.
CELL_THRESHOLD = 1024


class Frame:
    """One wire unit: match envelope, protocol kind, seq, payload."""

    __slots__ = ("kind", "context_id", "src_rank", "dst_rank", "tag",
                 "src_stream_idx", "dst_stream_idx", "seq", "payload")

    def __init__(self, kind, context_id, src_rank, dst_rank, tag,
                 src_stream_idx, dst_stream_idx, seq, payload=b""):
        self.kind = kind
        self.context_id = context_id
        self.src_rank = src_rank
        self.dst_rank = dst_rank
        self.tag = tag
        self.src_stream_idx = src_stream_idx
        self.dst_stream_idx = dst_stream_idx
        self.seq = seq
        self.payload = payload

    def encode(self):
        p = self.payload
        return HEADER.pack(MAGIC, VERSION, self.kind, self.context_id,
                           self.src_rank, self.dst_rank, self.tag,
                           self.src_stream_idx, self.dst_stream_idx,
                           self.seq, len(p)) + p

    @property
    def envelope(self):
        return (self.context_id, self.src_rank, self.tag,
                self.src_stream_idx, self.dst_stream_idx)

    def __repr__(self):
        return ("Frame({} ctx={} src={} dst={} tag={} sidx={} didx={} "
                "seq={} len={})".format(
                    KIND_NAMES.get(self.kind, self.kind), self.context_id,
                    self.src_rank, self.dst_rank, self.tag,
                    self.src_stream_idx, self.dst_stream_idx, self.seq,
                    len(self.payload)))

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return self.encode() == other.encode()


def decode_frame(buf):
    """Decode one complete frame from bytes; returns (Frame, consumed)."""
    if len(buf) < HEADER_SIZE:
        raise TransportError("short frame header")
    magic, version, kind, ctx, src, dst, tag, sidx, didx, seq, plen = \
        HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TransportError("protocol violation: bad magic %r" % (magic,))
    if version != VERSION:
        raise TransportError("protocol violation: version %d" % version)
    if kind not in KIND_NAMES:
        raise TransportError("protocol violation: kind %d" % kind)
    end = HEADER_SIZE + plen
    if len(buf) < end:
        raise TransportError("truncated frame payload")
    return (Frame(kind, ctx, src, dst, tag, sidx, didx, seq,
                  bytes(buf[HEADER_SIZE:end])), end)


def trace_frame(direction, rank, frame):
    crc = binascii.crc32(frame.payload) & 0xFFFFFFFF
    sys.stderr.write(
        "MMPI {} rank={} kind={} ctx={} src={} dst={} tag={} sidx={} "
        "didx={} seq={} len={} crc={:08x}\n".format(
            direction, rank, KIND_NAMES[frame.kind], frame.context_id,
            frame.src_rank, frame.dst_rank, frame.tag,
            frame.src_stream_idx, frame.dst_stream_idx, frame.seq,
            len(frame.payload), crc))


# ---------------------------------------------------------------------------
# instrumented locks

_ALL_LOCKS = []


class CountingLock:
    """A mutual-exclusion region that counts how often it was entered.

    The per-lock counter is bumped while the lock is held, so it never
    races; global totals are computed by summing over all locks ever
    created.  Tests snapshot the total around a code path to prove the
    path acquired nothing.
    """

    __slots__ = ("_lock", "name", "acquisitions")

    def __init__(self, name=""):
        self._lock = threading.Lock()
        self.name = name
        self.acquisitions = 0
        _ALL_LOCKS.append(self)

    def acquire(self):
        self._lock.acquire()
        self.acquisitions += 1

    def release(self):
        self._lock.release()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self._lock.release()


def lock_acquisitions():
    """Total acquisitions across every CountingLock in the process."""
    return sum(lk.acquisitions for lk in _ALL_LOCKS)


# ---------------------------------------------------------------------------
# matching structures

def _match(pattern, env):
    # pattern and env: (context_id, src, tag, src_idx, dst_idx)
    if pattern[0] != env[0] or pattern[4] != env[4]:
        return False
    if pattern[1] != ANY and pattern[1] != env[1]:
        return False
    if pattern[2] != ANY and pattern[2] != env[2]:
        return False
    if pattern[3] != ANY and pattern[3] != env[3]:
        return False
    return True


class RecvDesc:
    """A posted receive: match pattern plus where the bytes go."""

    __slots__ = ("pattern", "sink", "request")

    def __init__(self, pattern, sink, request):
        self.pattern = pattern
        self.sink = sink
        self.request = request


class _UnexFrame:
    __slots__ = ("env", "frame")

    def __init__(self, frame):
        self.env = frame.envelope
        self.frame = frame


class _LocalEager:
    """Small interthread message: payload buffered in a cell."""

    __slots__ = ("env", "payload")

    def __init__(self, env, payload):
        self.env = env
        self.payload = payload


class _LocalSync:
    """Large interthread message: receiver copies straight from the
    sender's region, then completes the sender's request."""

    __slots__ = ("env", "src_dtype", "src_count", "src_buf", "total",
                 "request")

    def __init__(self, env, src_dtype, src_count, src_buf, total, request):
        self.env = env
        self.src_dtype = src_dtype
        self.src_count = src_count
        self.src_buf = src_buf
        self.total = total
        self.request = request


class _RndvSend:
    __slots__ = ("send_id", "payload", "total", "next_off", "request",
                 "fields", "to_proc", "recv_id")

    def __init__(self, send_id, payload, request, fields, to_proc):
        self.send_id = send_id
        self.payload = payload
        self.total = len(payload)
        self.next_off = 0
        self.request = request
        self.fields = fields  # (ctx, src_logical, dst_logical, tag, sidx, didx)
        self.to_proc = to_proc
        self.recv_id = None


class _RndvRecv:
    __slots__ = ("recv_id", "send_id", "total", "accum", "desc", "rts",
                 "reply_proc")

    def __init__(self, recv_id, send_id, total, desc, rts, reply_proc):
        self.recv_id = recv_id
        self.send_id = send_id
        self.total = total
        self.accum = bytearray()
        self.desc = desc
        self.rts = rts
        self.reply_proc = reply_proc


class Vci:
    """One matching domain: inbox, posted/unexpected queues, protocol
    state, and per-channel sequence counters.

    The owner is the Instance; it supplies rank, limits, the frame
    sender and the trace flag.  index is the pool slot (-1 when the VCI
    lives outside the explicit pool, e.g. implicit or device VCIs).
    """

    __slots__ = ("owner", "index", "guard", "inbox", "posted", "unexpected",
                 "send_seq", "recv_seq", "rndv_send", "rndv_recv",
                 "_next_id", "live", "local_copy_events")

    def __init__(self, owner, index=-1, guard=None):
        self.owner = owner
        self.index = index
        self.guard = guard
        self.inbox = collections.deque()
        self.posted = []
        self.unexpected = []
        self.send_seq = {}
        self.recv_seq = {}
        self.rndv_send = {}
        self.rndv_recv = {}
        self._next_id = 1
        self.live = set()
        self.local_copy_events = 0

    def idle(self):
        return (not self.inbox and not self.posted and not self.rndv_send
                and not self.rndv_recv and not self.live)


# --- send path -------------------------------------------------------------

def vci_isend(vci, ctx, src_logical, dst_logical, to_proc, tag,
              src_idx, dst_idx, payload, request):
    """Start a send on this VCI.  Eager payloads complete immediately;
    larger ones enter the rendezvous table and complete when the final
    chunk has been pushed out.
    """
    g = vci.guard
    if g is None:
        _isend_inner(vci, ctx, src_logical, dst_logical, to_proc, tag,
                     src_idx, dst_idx, payload, request)
    else:
        with g:
            _isend_inner(vci, ctx, src_logical, dst_logical, to_proc, tag,
                         src_idx, dst_idx, payload, request)


def _next_seq(vci, ctx, dst_logical, src_idx, dst_idx):
    key = (ctx, dst_logical, src_idx, dst_idx)
    seq = vci.send_seq.get(key, 0)
    vci.send_seq[key] = seq + 1
    return seq


def vci_send_raw(vci, kind, ctx, src_logical, dst_logical, to_proc, tag,
                 payload):
    """Emit one protocol frame outside the send/recv state machines (the
    one-sided layer initiates its own request/response kinds).  Takes the
    channel's next sequence number under the VCI's locking regime."""
    g = vci.guard
    if g is None:
        seq = _next_seq(vci, ctx, dst_logical, -1, -1)
        fr = Frame(kind, ctx, src_logical, dst_logical, tag, -1, -1, seq,
                   payload)
        vci.owner.send_frame(fr, to_proc)
    else:
        with g:
            seq = _next_seq(vci, ctx, dst_logical, -1, -1)
            fr = Frame(kind, ctx, src_logical, dst_logical, tag, -1, -1, seq,
                       payload)
            vci.owner.send_frame(fr, to_proc)


def _isend_inner(vci, ctx, src_logical, dst_logical, to_proc, tag,
                 src_idx, dst_idx, payload, request):
    owner = vci.owner
    seq = _next_seq(vci, ctx, dst_logical, src_idx, dst_idx)
    if len(payload) <= owner.eager_limit:
        fr = Frame(EAGER, ctx, src_logical, dst_logical, tag,
                   src_idx, dst_idx, seq, payload)
        owner.send_frame(fr, to_proc)
        request.finish(None)
        return
    sid = vci._next_id
    vci._next_id += 1
    st = _RndvSend(sid, payload, request,
                   (ctx, src_logical, dst_logical, tag, src_idx, dst_idx),
                   to_proc)
    vci.rndv_send[sid] = st
    vci.live.add(request)
    head = _RTS_PAYLOAD.pack(sid, st.total, owner.rank)
    fr = Frame(RTS, ctx, src_logical, dst_logical, tag,
               src_idx, dst_idx, seq, head)
    owner.send_frame(fr, to_proc)


def vci_local_send(src_vci, dst_vci, env, dtype, count, buf, payload,
                   request):
    """Interthread send within one participant.

    payload is the packed bytes when the message fits a cell, else None
    and the receiver will copy straight out of buf.  The small path
    deposits only the cell: no request is registered on the sender.
    """
    if payload is not None:
        dst_vci.inbox.append(_LocalEager(env, payload))
        if request is not None:
            request.finish(None)
        return
    total = dtype.size_bytes * count
    item = _LocalSync(env, dtype, count, buf, total, request)
    src_vci.live.add(request)
    dst_vci.inbox.append(item)


# --- receive path ----------------------------------------------------------

def vci_post_recv(vci, desc):
    """Post a receive; matches the oldest unexpected arrival first."""
    g = vci.guard
    if g is None:
        _post_inner(vci, desc)
    else:
        with g:
            _post_inner(vci, desc)


def _post_inner(vci, desc):
    vci.live.add(desc.request)
    unexpected = vci.unexpected
    for i, item in enumerate(unexpected):
        if _match(desc.pattern, item.env):
            del unexpected[i]
            if isinstance(item, _UnexFrame):
                fr = item.frame
                if fr.kind == EAGER:
                    _complete_recv(vci, desc, item.env, fr.payload)
                else:
                    sid, total, rproc = _RTS_PAYLOAD.unpack(fr.payload)
                    _start_rndv_recv(vci, desc, fr, sid, total, rproc)
            elif isinstance(item, _LocalEager):
                vci.local_copy_events += 1
                _complete_recv(vci, desc, item.env, item.payload)
            else:
                _local_sync_deliver(vci, desc, item)
            return
    vci.posted.append(desc)


def _complete_recv(vci, desc, env, payload):
    elems, err = desc.sink.write(payload)
    status = Status(env[1], env[2], elems, env[3], err)
    desc.request.finish(status)


def _local_sync_deliver(vci, desc, item):
    vci.local_copy_events += 1
    elems, err = desc.sink.write_direct(item.src_dtype, item.src_count,
                                        item.src_buf, item.total)
    env = item.env
    status = Status(env[1], env[2], elems, env[3], err)
    item.request.finish(None)
    desc.request.finish(status)


def _start_rndv_recv(vci, desc, rts_frame, send_id, total, reply_proc):
    rid = vci._next_id
    vci._next_id += 1
    st = _RndvRecv(rid, send_id, total, desc, rts_frame, reply_proc)
    vci.rndv_recv[rid] = st
    _reply(vci, rts_frame, CTS,
           _CTS_PAYLOAD.pack(send_id, rid, vci.owner.rank), reply_proc)


def _reply(vci, orig, kind, payload, to_proc):
    # Reverse-direction protocol frame: swap the envelope of orig.
    seq = _next_seq(vci, orig.context_id, orig.src_rank,
                    orig.dst_stream_idx, orig.src_stream_idx)
    fr = Frame(kind, orig.context_id, orig.dst_rank, orig.src_rank,
               orig.tag, orig.dst_stream_idx, orig.src_stream_idx,
               seq, payload)
    vci.owner.send_frame(fr, to_proc)


# --- progress --------------------------------------------------------------

def vci_poll(vci):
    """Drain the inbox, advance protocol state; True if anything moved."""
    g = vci.guard
    if g is None:
        return _poll_inner(vci)
    with g:
        return _poll_inner(vci)


def _poll_inner(vci):
    inbox = vci.inbox
    n = 0
    while True:
        try:
            item = inbox.popleft()
        except IndexError:
            break
        n += 1
        if item.__class__ is Frame:
            _dispatch_frame(vci, item)
        else:
            _on_local_arrival(vci, item)
    return n > 0


def _on_local_arrival(vci, item):
    posted = vci.posted
    for i, desc in enumerate(posted):
        if _match(desc.pattern, item.env):
            del posted[i]
            if isinstance(item, _LocalEager):
                vci.local_copy_events += 1
                _complete_recv(vci, desc, item.env, item.payload)
            else:
                _local_sync_deliver(vci, desc, item)
            return
    vci.unexpected.append(item)


def _dispatch_frame(vci, fr):
    # Per-channel ordering check applies to every kind uniformly.
    key = (fr.context_id, fr.src_rank, fr.src_stream_idx,
           fr.dst_stream_idx)
    expected = vci.recv_seq.get(key, 0)
    if fr.seq != expected:
        raise TransportError(
            "protocol violation: out-of-order frame {} expected seq {}"
            .format(fr, expected))
    vci.recv_seq[key] = expected + 1

    kind = fr.kind
    if kind == EAGER or kind == RTS:
        _on_match_frame(vci, fr)
    elif kind == CTS:
        _on_cts(vci, fr)
    elif kind == CHUNK:
        _on_chunk(vci, fr)
    elif kind == CTRL:
        _on_ctrl(vci, fr)
    elif kind == GET_REQ or kind == GET_RESP:
        vci.owner.handle_onesided(vci, fr)
    else:  # pragma: no cover - decode_frame rejects unknown kinds
        raise TransportError("protocol violation: kind %d" % kind)


def _on_match_frame(vci, fr):
    env = fr.envelope
    posted = vci.posted
    for i, desc in enumerate(posted):
        if _match(desc.pattern, env):
            del posted[i]
            if fr.kind == EAGER:
                _complete_recv(vci, desc, env, fr.payload)
            else:
                sid, total, rproc = _RTS_PAYLOAD.unpack(fr.payload)
                _start_rndv_recv(vci, desc, fr, sid, total, rproc)
            return
    vci.unexpected.append(_UnexFrame(fr))


def _on_cts(vci, fr):
    sid, rid, receiver_proc = _CTS_PAYLOAD.unpack(fr.payload)
    st = vci.rndv_send.get(sid)
    if st is None:
        raise TransportError("protocol violation: CTS for unknown send %d"
                             % sid)
    st.recv_id = rid
    st.to_proc = receiver_proc
    _send_chunk(vci, st)


def _on_ctrl(vci, fr):
    op, sid = _CTRL_PAYLOAD.unpack(fr.payload)
    if op != CTRL_ACK:
        raise TransportError("protocol violation: ctrl op %d" % op)
    st = vci.rndv_send.get(sid)
    if st is None:
        raise TransportError("protocol violation: ack for unknown send %d"
                             % sid)
    _send_chunk(vci, st)


def _send_chunk(vci, st):
    owner = vci.owner
    start = st.next_off
    end = min(start + owner.chunk_size, st.total)
    st.next_off = end
    ctx, src_logical, dst_logical, tag, src_idx, dst_idx = st.fields
    seq = _next_seq(vci, ctx, dst_logical, src_idx, dst_idx)
    fr = Frame(CHUNK, ctx, src_logical, dst_logical, tag,
               src_idx, dst_idx, seq,
               _ID.pack(st.recv_id) + bytes(st.payload[start:end]))
    owner.send_frame(fr, st.to_proc)
    if end >= st.total:
        del vci.rndv_send[st.send_id]
        st.request.finish(None)


def _on_chunk(vci, fr):
    rid, = _ID.unpack_from(fr.payload, 0)
    st = vci.rndv_recv.get(rid)
    if st is None:
        raise TransportError("protocol violation: chunk for unknown recv %d"
                             % rid)
    st.accum += fr.payload[8:]
    if len(st.accum) >= st.total:
        del vci.rndv_recv[rid]
        env = st.rts.envelope
        elems, err = st.desc.sink.write(bytes(st.accum))
        status = Status(env[1], env[2], elems, env[3], err)
        st.desc.request.finish(status)
    else:
        # One outstanding chunk: release the next one.
        _reply(vci, st.rts, CTRL,
               _CTRL_PAYLOAD.pack(CTRL_ACK, st.send_id), st.reply_proc)


class Status:
    """Completion record for a receive (or a grequest's query_fn)."""

    __slots__ = ("source", "tag", "count", "source_stream_idx", "error")

    def __init__(self, source=ANY, tag=ANY, count=0, source_stream_idx=ANY,
                 error=None):
        self.source = source
        self.tag = tag
        self.count = count
        self.source_stream_idx = source_stream_idx
        self.error = error

    def __repr__(self):
        return ("Status(source={}, tag={}, count={}, source_stream_idx={}, "
                "error={!r})".format(self.source, self.tag, self.count,
                                     self.source_stream_idx, self.error))


class ByteSink:
    """Receive sink for a raw byte region, used by transport tests and
    the rendezvous accumulation path."""

    __slots__ = ("view", "capacity", "stored")

    def __init__(self, buf):
        self.view = memoryview(buf).cast("B")
        self.capacity = len(self.view)
        self.stored = 0

    def write(self, payload):
        n = min(len(payload), self.capacity)
        self.view[:n] = payload[:n]
        self.stored = n
        err = "ERR_TRUNCATE" if len(payload) > self.capacity else None
        return n, err

    def write_direct(self, src_dtype, src_count, src_buf, total):
        moved = copy_between(src_dtype, src_count, src_buf,
                             None, 1, self.view)
        self.stored = moved
        err = "ERR_TRUNCATE" if total > self.capacity else None
        return moved, err


# ---------------------------------------------------------------------------
# in-process fabric

class InProcFabric:
    """Routes frames between Instances living in one OS process.

    Instances join a named group; sends to a rank that has not joined
    yet block until it does (bounded by connect_timeout).  The group is
    garbage collected when every member leaves.
    """

    _groups = {}
    _registry_lock = threading.Lock()

    def __init__(self, name, size):
        self.name = name
        self.size = size
        self.slots = [None] * size
        self._cond = threading.Condition()
        self._left = 0

    @classmethod
    def join(cls, name, size, rank, instance):
        with cls._registry_lock:
            fab = cls._groups.get(name)
            if fab is None:
                fab = cls(name, size)
                cls._groups[name] = fab
        if fab.size != size:
            raise ArgError("group %r has size %d, not %d"
                           % (name, fab.size, size))
        if not 0 <= rank < size:
            raise ArgError("rank %d outside group of %d" % (rank, size))
        with fab._cond:
            if fab.slots[rank] is not None:
                raise StateError("rank %d already joined group %r"
                                 % (rank, name))
            fab.slots[rank] = instance
            fab._cond.notify_all()
        return fab

    def leave(self, rank):
        with self._cond:
            self.slots[rank] = None
            self._left += 1
            if self._left >= self.size:
                with InProcFabric._registry_lock:
                    if InProcFabric._groups.get(self.name) is self:
                        del InProcFabric._groups[self.name]

    def _member(self, rank, timeout):
        inst = self.slots[rank]
        if inst is not None:
            return inst
        deadline = time.monotonic() + timeout
        with self._cond:
            while self.slots[rank] is None:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportError(
                        "rank %d never joined group %r" % (rank, self.name))
                self._cond.wait(left)
            return self.slots[rank]

    def send(self, frame, to_proc, timeout):
        self._member(to_proc, timeout).deliver(frame)


# ---------------------------------------------------------------------------
# socket backend

_RECV_CHUNK = 256 * 1024


def _parse_addr(text):
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ArgError("address %r is not host:port" % (text,))
    try:
        return host, int(port)
    except ValueError:
        raise ArgError("address %r has a bad port" % (text,)) from None


class _Conn:
    """One TCP connection: dedicated reader thread, dedicated writer
    thread draining an outbox deque.  Senders only append and set an
    event, so the frame send path takes no mutual-exclusion region."""

    def __init__(self, sock, peer, deliver, label):
        # dialed sockets arrive with the connect timeout still set, and a
        # timed-out recv() is indistinguishable from a dead peer below
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.peer = peer
        self.outbox = collections.deque()
        self.wake = threading.Event()
        self.stopping = False
        self.dead = False
        self._deliver = deliver
        self.reader = threading.Thread(
            target=self._read_loop, name="minimpi-rd-%s" % label, daemon=True)
        self.writer = threading.Thread(
            target=self._write_loop, name="minimpi-wr-%s" % label, daemon=True)
        self.reader.start()
        self.writer.start()

    def push(self, data):
        self.outbox.append(data)
        self.wake.set()

    def _write_loop(self):
        outbox = self.outbox
        try:
            while True:
                self.wake.wait()
                self.wake.clear()
                parts = []
                while True:
                    try:
                        parts.append(outbox.popleft())
                    except IndexError:
                        break
                if parts:
                    self.sock.sendall(b"".join(parts))
                if self.stopping and not outbox:
                    break
        except OSError:
            self.dead = True
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass

    def _read_loop(self):
        buf = bytearray()
        sock = self.sock
        try:
            while True:
                data = sock.recv(_RECV_CHUNK)
                if not data:
                    break
                buf += data
                while len(buf) >= HEADER_SIZE:
                    plen, = struct.unpack_from("<Q", buf, _PAYLOAD_LEN_OFF)
                    end = HEADER_SIZE + plen
                    if len(buf) < end:
                        break
                    frame, consumed = decode_frame(buf[:end])
                    del buf[:consumed]
                    self._deliver(frame)
        except OSError:
            pass
        except TransportError as exc:
            sys.stderr.write("minimpi: connection to rank %s dropped: %s\n"
                             % (self.peer, exc))
        self.dead = True

    def close(self, join_timeout=5.0):
        self.stopping = True
        self.wake.set()
        self.writer.join(join_timeout)
        # Unblock our reader; anything the peer still had in flight is
        # past the caller's quiescence point and may be dropped.
        try:
            self.sock.shutdown(socket.SHUT_RD)
        except OSError:
            pass
        self.reader.join(join_timeout)
        try:
            self.sock.close()
        except OSError:
            pass


def _read_line(sock, limit=65536):
    buf = bytearray()
    while len(buf) < limit:
        c = sock.recv(1)
        if not c:
            raise TransportError("peer closed during handshake")
        if c == b"\n":
            return bytes(buf)
        buf += c
    raise TransportError("oversized handshake line")


class SocketBackend:
    """TCP transport: rank 0 runs the bootstrap rendezvous at root_addr,
    everyone runs a data listener; process pairs connect lazily, one
    duplex connection per pair."""

    def __init__(self, rank, size, root_addr, deliver, connect_timeout=10.0):
        self.rank = rank
        self.size = size
        self.deliver = deliver
        self.connect_timeout = connect_timeout
        self.conns = {}
        self._dial_lock = threading.Lock()  # connection setup only
        self._closing = False

        self._listener = socket.create_server(("127.0.0.1", 0))
        # Polling accept: closing a listener does not wake a blocked
        # accept() on Linux, so the loop re-checks _closing regularly.
        self._listener.settimeout(0.2)
        self.addr = self._listener.getsockname()
        self.table = self._bootstrap(root_addr)
        self._accepter = threading.Thread(
            target=self._accept_loop, name="minimpi-accept-%d" % rank,
            daemon=True)
        self._accepter.start()

    # bootstrap: everyone tells rank 0 its data address, rank 0 answers
    # with the full table.
    def _bootstrap(self, root_addr):
        addr = _parse_addr(root_addr)
        if self.rank == 0:
            root_srv = socket.create_server(addr)
            try:
                table = {0: list(self.addr)}
                pending = []
                while len(table) < self.size:
                    sock, _ = root_srv.accept()
                    hello = json.loads(_read_line(sock))
                    table[int(hello["rank"])] = hello["addr"]
                    pending.append(sock)
                blob = (json.dumps(table).encode() + b"\n")
                for sock in pending:
                    sock.sendall(blob)
                    sock.close()
                return {int(k): tuple(v) for k, v in table.items()}
            finally:
                root_srv.close()
        sock = self._dial(addr, self.connect_timeout)
        try:
            sock.sendall(json.dumps(
                {"rank": self.rank, "addr": list(self.addr)}).encode()
                + b"\n")
            table = json.loads(_read_line(sock))
        finally:
            sock.close()
        return {int(k): tuple(v) for k, v in table.items()}

    @staticmethod
    def _dial(addr, timeout):
        deadline = time.monotonic() + timeout
        while True:
            try:
                return socket.create_connection(addr, timeout=1.0)
            except OSError:
                if time.monotonic() >= deadline:
                    raise TransportError(
                        "cannot reach rendezvous at %s:%d" % addr) from None
                time.sleep(0.05)

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return  # listener closed
            sock.settimeout(None)
            try:
                hello = json.loads(_read_line(sock))
                peer = int(hello["data"])
            except (TransportError, ValueError, KeyError):
                sock.close()
                continue
            conn = _Conn(sock, peer, self.deliver,
                         "%d<%d" % (self.rank, peer))
            # Keep reading even if we lose the race for the table slot.
            self.conns.setdefault(peer, conn)

    def _get_conn(self, peer):
        conn = self.conns.get(peer)
        if conn is not None:
            return conn
        with self._dial_lock:
            conn = self.conns.get(peer)
            if conn is not None:
                return conn
            sock = self._dial(self.table[peer], self.connect_timeout)
            sock.sendall(json.dumps({"data": self.rank}).encode() + b"\n")
            conn = _Conn(sock, peer, self.deliver,
                         "%d>%d" % (self.rank, peer))
            return self.conns.setdefault(peer, conn)

    def send(self, frame, to_proc, timeout=None):
        if to_proc == self.rank:
            self.deliver(frame)
            return
        conn = self._get_conn(to_proc)
        if conn.dead and not self._closing:
            raise TransportError("connection to rank %d is down" % to_proc)
        conn.push(frame.encode())

    def close(self):
        self._closing = True
        self._listener.close()
        self._accepter.join(5.0)
        for conn in list(self.conns.values()):
            conn.close()
        self.conns.clear()
