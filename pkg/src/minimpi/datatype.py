"""Derived-datatype descriptors with constant-size layout trees.

A datatype describes a (possibly non-contiguous, possibly nested) byte
layout.  The committed form is a small tree of Run / Rep / Seq nodes whose
size depends only on constructor nesting, never on how many contiguous
segments the layout expands to.  Every node caches its segment count and
byte total, so

  * type_iov_len answers "how many whole segments fit in N bytes" by
    descending the tree (depth x log(segments) time), and
  * type_iov seeks to an arbitrary segment index the same way and then
    streams segments lazily.

Segments are maximal contiguous (offset, length) runs in traversal order.
Runs that touch byte-wise but are not adjacent in traversal order are NOT
merged; that keeps the segment list equal to the exact packing order.
"""

from __future__ import annotations

import itertools
from bisect import bisect_right
from typing import Iterator, NamedTuple, Sequence

from .errors import ArgError, TruncateError


class IovSegment(NamedTuple):
    """One maximal contiguous byte run of a layout."""

    base_offset: int
    length: int


# ---------------------------------------------------------------------------
# layout tree
#
# Invariants maintained by the constructors below:
#   - every node is non-empty (EMPTY is the only zero-run value)
#   - traversal-adjacent runs are never byte-adjacent (merging happened
#     at construction time), so node.runs is the true maximal-run count
# ---------------------------------------------------------------------------


class _Empty:
    __slots__ = ()
    runs = 0
    nbytes = 0
    node_count = 1
    first_start = 0
    last_end = 0
    min_off = 0
    max_end = 0

    def emit(self, shift):
        return iter(())

    def emit_from(self, k, shift):
        return iter(())

    def prefix_within(self, budget):
        return 0, 0


EMPTY = _Empty()


class _Run:
    __slots__ = ("off", "length")
    node_count = 1
    runs = 1

    def __init__(self, off: int, length: int):
        assert length > 0
        self.off = off
        self.length = length

    @property
    def nbytes(self):
        return self.length

    @property
    def first_start(self):
        return self.off

    @property
    def last_end(self):
        return self.off + self.length

    @property
    def min_off(self):
        return self.off

    @property
    def max_end(self):
        return self.off + self.length

    def emit(self, shift):
        yield shift + self.off, self.length

    def emit_from(self, k, shift):
        if k == 0:
            yield shift + self.off, self.length

    def prefix_within(self, budget):
        if self.length <= budget:
            return 1, self.length
        return 0, 0


class _Rep:
    """`count` copies of `body`, copy k displaced by base + k*stride.

    Constructed only when no run of copy k is byte-adjacent to a run of
    copy k+1 (replicate() resolves such merges into a different shape).
    """

    __slots__ = (
        "count", "stride", "body", "base",
        "runs", "nbytes", "node_count",
        "first_start", "last_end", "min_off", "max_end",
    )

    def __init__(self, count, stride, body, base):
        assert count >= 2 and body.runs > 0
        self.count = count
        self.stride = stride
        self.body = body
        self.base = base
        self.runs = count * body.runs
        self.nbytes = count * body.nbytes
        self.node_count = 1 + body.node_count
        span = (count - 1) * stride
        self.first_start = base + body.first_start
        self.last_end = base + span + body.last_end
        self.min_off = base + min(0, span) + body.min_off
        self.max_end = base + max(0, span) + body.max_end

    def emit(self, shift):
        body, stride = self.body, self.stride
        start = shift + self.base
        for k in range(self.count):
            yield from body.emit(start + k * stride)

    def emit_from(self, k, shift):
        body, stride = self.body, self.stride
        start = shift + self.base
        q, r = divmod(k, body.runs)
        if r:
            yield from body.emit_from(r, start + q * stride)
            q += 1
        for j in range(q, self.count):
            yield from body.emit(start + j * stride)

    def prefix_within(self, budget):
        per = self.body.nbytes
        q = min(budget // per, self.count)
        segs, used = q * self.body.runs, q * per
        if q < self.count:
            s2, u2 = self.body.prefix_within(budget - used)
            segs += s2
            used += u2
        return segs, used


class _Seq:
    """Heterogeneous children in traversal order, offsets pre-shifted."""

    __slots__ = (
        "children", "run_prefix", "byte_prefix",
        "runs", "nbytes", "node_count",
        "first_start", "last_end", "min_off", "max_end",
    )

    def __init__(self, children):
        assert len(children) >= 2
        self.children = children
        rp = [0]
        bp = [0]
        for c in children:
            assert c.runs > 0
            rp.append(rp[-1] + c.runs)
            bp.append(bp[-1] + c.nbytes)
        if __debug__:
            for a, b in zip(children, children[1:]):
                # merging must have been resolved upstream
                assert a.last_end != b.first_start
        self.run_prefix = rp
        self.byte_prefix = bp
        self.runs = rp[-1]
        self.nbytes = bp[-1]
        self.node_count = 1 + sum(c.node_count for c in children)
        self.first_start = children[0].first_start
        self.last_end = children[-1].last_end
        self.min_off = min(c.min_off for c in children)
        self.max_end = max(c.max_end for c in children)

    def emit(self, shift):
        for c in self.children:
            yield from c.emit(shift)

    def emit_from(self, k, shift):
        i = bisect_right(self.run_prefix, k) - 1
        yield from self.children[i].emit_from(k - self.run_prefix[i], shift)
        for c in self.children[i + 1:]:
            yield from c.emit(shift)

    def prefix_within(self, budget):
        i = bisect_right(self.byte_prefix, budget) - 1
        segs, used = self.run_prefix[i], self.byte_prefix[i]
        if i < len(self.children):
            s2, u2 = self.children[i].prefix_within(budget - used)
            segs += s2
            used += u2
        return segs, used


def _shift(node, d):
    if d == 0 or node.runs == 0:
        return node
    if isinstance(node, _Run):
        return _Run(node.off + d, node.length)
    if isinstance(node, _Rep):
        return _Rep(node.count, node.stride, node.body, node.base + d)
    return _Seq(tuple(_shift(c, d) for c in node.children))


def _first_run(node):
    if isinstance(node, _Run):
        return node.off, node.length
    if isinstance(node, _Rep):
        off, ln = _first_run(node.body)
        return node.base + off, ln
    return _first_run(node.children[0])


def _last_run(node):
    if isinstance(node, _Run):
        return node.off, node.length
    if isinstance(node, _Rep):
        off, ln = _last_run(node.body)
        return node.base + (node.count - 1) * node.stride + off, ln
    return _last_run(node.children[-1])


def _seq_raw(parts):
    """Assemble pre-merged parts; boundaries must not be byte-adjacent."""
    kept = tuple(p for p in parts if p.runs > 0)
    if not kept:
        return EMPTY
    if len(kept) == 1:
        return kept[0]
    flat = []
    for p in kept:  # flatten nested _Seq for shallower trees
        if isinstance(p, _Seq):
            flat.extend(p.children)
        else:
            flat.append(p)
    return _Seq(tuple(flat))


def _make_rep(count, stride, body, base):
    if count <= 0 or body.runs == 0:
        return EMPTY
    if count == 1:
        return _shift(body, base)
    return _Rep(count, stride, body, base)


def _drop_first(node):
    if isinstance(node, _Run):
        return EMPTY
    if isinstance(node, _Rep):
        rest = _make_rep(node.count - 1, node.stride, node.body,
                         node.base + node.stride)
        if node.body.runs == 1:
            return rest
        return _seq_raw([_shift(_drop_first(node.body), node.base), rest])
    c0 = _drop_first(node.children[0])
    return _seq_raw([c0, *node.children[1:]])


def _drop_last(node):
    if isinstance(node, _Run):
        return EMPTY
    if isinstance(node, _Rep):
        head = _make_rep(node.count - 1, node.stride, node.body, node.base)
        if node.body.runs == 1:
            return head
        last_base = node.base + (node.count - 1) * node.stride
        return _seq_raw([head, _shift(_drop_last(node.body), last_base)])
    cn = _drop_last(node.children[-1])
    return _seq_raw([*node.children[:-1], cn])


def _replicate(body, count, stride):
    """count copies of body at the given stride, resolving boundary merges."""
    if body.runs == 0 or count == 0:
        return EMPTY
    if count == 1:
        return body
    if body.last_end != stride + body.first_start:
        return _Rep(count, stride, body, 0)
    # the last run of each copy lands flush against the first run of the
    # next copy: merged runs span copy boundaries
    if body.runs == 1:
        return _Run(body.first_start, (count - 1) * stride + body.nbytes)
    h_off, h_len = _first_run(body)
    t_off, t_len = _last_run(body)
    mid = _drop_last(_drop_first(body))
    inner = _seq_raw([mid, _Run(t_off, t_len + h_len)])
    tail = _shift(_drop_first(body), (count - 1) * stride)
    return _seq_raw([_Run(h_off, h_len),
                     _make_rep(count - 1, stride, inner, 0),
                     tail])


def _concat(parts):
    """Concatenate layouts in traversal order, fusing adjacent boundaries."""
    acc = []
    for p in parts:
        if p.runs == 0:
            continue
        if acc and acc[-1].last_end == p.first_start:
            prev = acc.pop()
            t_off, t_len = _last_run(prev)
            _h_off, h_len = _first_run(p)
            rem = _drop_last(prev)
            if rem.runs:
                acc.append(rem)
            acc.append(_Run(t_off, t_len + h_len))
            rest = _drop_first(p)
            if rest.runs:
                acc.append(rest)
        else:
            acc.append(p)
    return _seq_raw(acc)


# ---------------------------------------------------------------------------
# public descriptor
# ---------------------------------------------------------------------------


class Datatype:
    """Immutable descriptor of a byte layout plus (lb, ub) placement bounds.

    extent_bytes = ub - lb governs where copy k of the type starts when the
    type is replicated (k * extent_bytes); resized types override the bounds
    without moving any data byte.
    """

    __slots__ = ("_layout", "size_bytes", "lb", "ub", "_committed", "_freed",
                 "_desc", "struct_fmt")

    def __init__(self, layout, size_bytes, lb, ub, desc,
                 committed=False, struct_fmt=None):
        if ub - lb < 0:
            raise ArgError("datatype extent must be >= 0")
        self._layout = layout
        self.size_bytes = size_bytes
        self.lb = lb
        self.ub = ub
        self._desc = desc
        self._committed = committed
        self._freed = False
        self.struct_fmt = struct_fmt  # set for numeric basics only

    @property
    def extent_bytes(self) -> int:
        return self.ub - self.lb

    @property
    def segment_count(self) -> int:
        return self._layout.runs

    @property
    def committed(self) -> bool:
        return self._committed and not self._freed

    @property
    def node_count(self) -> int:
        """Layout tree size; constant in segment_count by construction."""
        return self._layout.node_count

    def __repr__(self):
        return (f"<Datatype {self._desc} size={self.size_bytes} "
                f"extent={self.extent_bytes} segments={self.segment_count}>")

    # convenience method forms of the module-level operations
    def commit(self) -> "Datatype":
        return type_commit(self)

    def free(self) -> None:
        type_free(self)

    def iov_len(self, max_iov_bytes: int = -1):
        return type_iov_len(self, max_iov_bytes)

    def iov(self, iov_offset: int = 0, max_iov_len: int = -1):
        return type_iov(self, iov_offset, max_iov_len)

    def _check_usable(self, what="query"):
        if self._freed:
            raise ArgError(f"datatype {what} after free")
        if not self._committed:
            raise ArgError(f"datatype {what} before commit")


def _basic(name, size, fmt=None):
    return Datatype(_Run(0, size), size, 0, size, name,
                    committed=True, struct_fmt=fmt)


BYTE = _basic("byte", 1)
CHAR = _basic("char", 1)
INT32 = _basic("int32", 4, "<i")
INT64 = _basic("int64", 8, "<q")
FLOAT32 = _basic("float32", 4, "<f")
FLOAT64 = _basic("float64", 8, "<d")

_BASICS = (BYTE, CHAR, INT32, INT64, FLOAT32, FLOAT64)


def _check_child(child):
    if not isinstance(child, Datatype):
        raise ArgError("child must be a Datatype")
    if child._freed:
        raise ArgError("child datatype was freed")
    if not child._committed:
        raise ArgError("child datatype must be committed (or basic)")


def _check_count(n, what):
    if not isinstance(n, int) or isinstance(n, bool) or n < 0:
        raise ArgError(f"{what} must be an integer >= 0")


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def type_contiguous(count: int, child: Datatype) -> Datatype:
    _check_count(count, "count")
    _check_child(child)
    ext = child.extent_bytes
    layout = _replicate(child._layout, count, ext)
    if count == 0:
        lb = ub = 0
    else:
        lb = child.lb
        ub = (count - 1) * ext + child.ub
    return Datatype(layout, count * child.size_bytes, lb, ub,
                    f"contiguous({count}, {child._desc})")


def type_vector(count: int, blocklength: int, stride_elems: int,
                child: Datatype) -> Datatype:
    _check_count(count, "count")
    _check_count(blocklength, "blocklength")
    if not isinstance(stride_elems, int) or isinstance(stride_elems, bool):
        raise ArgError("stride must be an integer")
    _check_child(child)
    ext = child.extent_bytes
    block = _replicate(child._layout, blocklength, ext)
    layout = _replicate(block, count, stride_elems * ext)
    if count == 0 or blocklength == 0:
        lb = ub = 0
    else:
        span = (count - 1) * stride_elems * ext
        lb = min(0, span) + child.lb
        ub = max(0, span) + (blocklength - 1) * ext + child.ub
    return Datatype(layout, count * blocklength * child.size_bytes, lb, ub,
                    f"vector({count}, {blocklength}, {stride_elems}, {child._desc})")


def type_hvector(count: int, blocklength: int, stride_bytes: int,
                 child: Datatype) -> Datatype:
    _check_count(count, "count")
    _check_count(blocklength, "blocklength")
    if not isinstance(stride_bytes, int) or isinstance(stride_bytes, bool):
        raise ArgError("stride must be an integer")
    _check_child(child)
    ext = child.extent_bytes
    block = _replicate(child._layout, blocklength, ext)
    layout = _replicate(block, count, stride_bytes)
    if count == 0 or blocklength == 0:
        lb = ub = 0
    else:
        span = (count - 1) * stride_bytes
        lb = min(0, span) + child.lb
        ub = max(0, span) + (blocklength - 1) * ext + child.ub
    return Datatype(layout, count * blocklength * child.size_bytes, lb, ub,
                    f"hvector({count}, {blocklength}, {stride_bytes}b, {child._desc})")


def type_indexed_block(blocklength: int, displacements: Sequence[int],
                       child: Datatype) -> Datatype:
    _check_count(blocklength, "blocklength")
    _check_child(child)
    displs = list(displacements)
    for d in displs:
        if not isinstance(d, int) or isinstance(d, bool):
            raise ArgError("displacements must be integers")
    ext = child.extent_bytes
    block = _replicate(child._layout, blocklength, ext)
    layout = _concat([_shift(block, d * ext) for d in displs])
    if not displs or blocklength == 0:
        lb = ub = 0
    else:
        lb = min(displs) * ext + child.lb
        ub = (max(displs) + blocklength - 1) * ext + child.ub
    return Datatype(layout, len(displs) * blocklength * child.size_bytes,
                    lb, ub,
                    f"indexed_block({blocklength}, {displs}, {child._desc})")


def type_create_struct(blocklengths: Sequence[int],
                       byte_displacements: Sequence[int],
                       children: Sequence[Datatype]) -> Datatype:
    bls = list(blocklengths)
    displs = list(byte_displacements)
    kids = list(children)
    if not (len(bls) == len(displs) == len(kids)):
        raise ArgError("struct arrays must have equal length")
    parts = []
    size = 0
    lb = ub = None
    for bl, d, c in zip(bls, displs, kids):
        _check_count(bl, "blocklength")
        if not isinstance(d, int) or isinstance(d, bool):
            raise ArgError("byte displacements must be integers")
        _check_child(c)
        ext = c.extent_bytes
        parts.append(_shift(_replicate(c._layout, bl, ext), d))
        size += bl * c.size_bytes
        if bl > 0:
            b_lb = d + c.lb
            b_ub = d + (bl - 1) * ext + c.ub
            lb = b_lb if lb is None else min(lb, b_lb)
            ub = b_ub if ub is None else max(ub, b_ub)
    if lb is None:
        lb = ub = 0
    desc = "struct(" + ", ".join(
        f"{bl}x{c._desc}@{d}" for bl, d, c in zip(bls, displs, kids)) + ")"
    return Datatype(_concat(parts), size, lb, ub, desc)


def type_create_subarray(full_sizes: Sequence[int], sub_sizes: Sequence[int],
                         sub_offsets: Sequence[int],
                         child: Datatype) -> Datatype:
    """C-order (row-major, last dimension fastest) subarray of an n-d array."""
    full = list(full_sizes)
    sub = list(sub_sizes)
    offs = list(sub_offsets)
    if not full or not (len(full) == len(sub) == len(offs)):
        raise ArgError("subarray dimension arrays must match and be non-empty")
    for f, s, o in zip(full, sub, offs):
        _check_count(f, "full size")
        _check_count(s, "sub size")
        _check_count(o, "offset")
        if s > f or o > f - s:
            raise ArgError("subarray block must fit inside the full array")
    _check_child(child)
    ext = child.extent_bytes
    ndims = len(full)
    strides = [0] * ndims
    strides[-1] = ext
    for d in range(ndims - 2, -1, -1):
        strides[d] = strides[d + 1] * full[d + 1]
    core = _replicate(child._layout, sub[-1], ext)
    for d in range(ndims - 2, -1, -1):
        core = _replicate(core, sub[d], strides[d])
    base = sum(o * s for o, s in zip(offs, strides))
    size = child.size_bytes
    volume = 1
    for s in sub:
        size *= s
    for f in full:
        volume *= f
    return Datatype(_shift(core, base), size, 0, volume * ext,
                    f"subarray({full}, {sub}, {offs}, {child._desc})")


def type_create_resized(child: Datatype, lb: int, extent: int) -> Datatype:
    _check_child(child)
    if not isinstance(lb, int) or not isinstance(extent, int) or extent < 0:
        raise ArgError("resized needs integer lb and extent >= 0")
    return Datatype(child._layout, child.size_bytes, lb, lb + extent,
                    f"resized({child._desc}, lb={lb}, extent={extent})")


def type_commit(d: Datatype) -> Datatype:
    if not isinstance(d, Datatype):
        raise ArgError("type_commit expects a Datatype")
    if d._freed:
        raise ArgError("cannot commit a freed datatype")
    d._committed = True
    return d


def type_free(d: Datatype) -> None:
    if not isinstance(d, Datatype):
        raise ArgError("type_free expects a Datatype")
    if d in _BASICS:
        raise ArgError("builtin datatypes cannot be freed")
    if d._freed:
        raise ArgError("datatype already freed")
    d._freed = True


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def type_iov_len(d: Datatype, max_iov_bytes: int = -1):
    """(number of whole leading segments within the byte budget, their bytes).

    max_iov_bytes = -1 means "no budget": returns (segment_count, size_bytes).
    """
    d._check_usable()
    if not isinstance(max_iov_bytes, int) or max_iov_bytes < -1:
        raise ArgError("max_iov_bytes must be an integer >= -1")
    if max_iov_bytes == -1 or max_iov_bytes >= d.size_bytes:
        return d.segment_count, d.size_bytes
    return d._layout.prefix_within(max_iov_bytes)


def type_iov(d: Datatype, iov_offset: int = 0, max_iov_len: int = -1):
    """(segments[iov_offset : iov_offset + max_iov_len], count returned).

    Seeking to iov_offset descends the layout tree by cached per-subtree
    segment counts rather than walking segments linearly.
    """
    d._check_usable()
    total = d.segment_count
    if not isinstance(iov_offset, int) or not 0 <= iov_offset <= total:
        raise ArgError(f"iov_offset out of range [0, {total}]")
    if not isinstance(max_iov_len, int) or max_iov_len < -1:
        raise ArgError("max_iov_len must be an integer >= -1")
    n = total - iov_offset
    if max_iov_len != -1:
        n = min(n, max_iov_len)
    if n <= 0:
        return [], 0
    gen = d._layout.emit_from(iov_offset, 0)
    segs = [IovSegment(o, ln) for o, ln in itertools.islice(gen, n)]
    return segs, len(segs)


# ---------------------------------------------------------------------------
# pack / unpack
# ---------------------------------------------------------------------------


def _layout_for(d: Datatype, count: int):
    if count == 1:
        return d._layout
    return _replicate(d._layout, count, d.extent_bytes)


def as_byte_view(buf, writable: bool) -> memoryview:
    """Normalize any buffer-protocol object to a flat byte view."""
    try:
        mv = memoryview(buf)
    except TypeError:
        raise ArgError(f"object of type {type(buf).__name__} is not a buffer")
    if writable and mv.readonly:
        raise ArgError("buffer is read-only but a writable one is required")
    if mv.format != "B" or mv.ndim != 1:
        try:
            mv = mv.cast("B")
        except TypeError:
            raise ArgError("buffer must be C-contiguous")
    return mv


def _checked_view(d, buf, count, writable):
    _check_count(count, "count")
    d._check_usable("pack/unpack")
    lay = _layout_for(d, count)
    view = as_byte_view(buf, writable)
    if lay.runs:
        if lay.min_off < 0:
            raise ArgError("layout reaches before the start of the buffer")
        if lay.max_end > len(view):
            raise ArgError(
                f"buffer too small: layout spans {lay.max_end} bytes, "
                f"buffer has {len(view)}")
    return lay, view


def pack(d: Datatype, buf, count: int = 1) -> bytes:
    """Gather the layout's bytes from buf in traversal order."""
    lay, view = _checked_view(d, buf, count, writable=False)
    if lay.runs == 0:
        return b""
    if isinstance(lay, _Run):
        return bytes(view[lay.off:lay.off + lay.length])
    return b"".join(view[o:o + ln] for o, ln in lay.emit(0))


def unpack(d: Datatype, data, buf, count: int = 1) -> int:
    """Scatter packed bytes back into buf; returns bytes written.

    Writes happen run by run in traversal order, so overlapping layouts have
    last-writer-wins semantics.  If data holds more bytes than the layout
    describes, the full layout is written and TruncateError is raised; bytes
    outside the described runs are never touched.
    """
    lay, view = _checked_view(d, buf, count, writable=True)
    src = memoryview(data)
    if src.format != "B" or src.ndim != 1:
        src = src.cast("B")
    n = len(src)
    pos = 0
    for o, ln in lay.emit(0):
        if pos >= n:
            break
        take = min(ln, n - pos)
        view[o:o + take] = src[pos:pos + take]
        pos += take
    if n > lay.nbytes:
        raise TruncateError(
            f"{n} bytes offered but layout holds {lay.nbytes}")
    return pos


def packed_size(d: Datatype, count: int = 1) -> int:
    _check_count(count, "count")
    d._check_usable("size query")
    return d.size_bytes * count


def check_region(d: Datatype, buf, count: int = 1,
                 writable: bool = False) -> None:
    """Validate that buf covers d's layout replicated count times."""
    _checked_view(d, buf, count, writable)


def pack_or_alias(d: Datatype, buf, count: int = 1) -> bytes:
    """Like pack, but returns buf itself when that is already the exact
    packed representation (immutable bytes, identity layout).

    Callers that hand the result to the transport can rely on bytes
    being immutable, so aliasing is safe and saves one copy on the
    common contiguous send path.
    """
    if isinstance(buf, bytes):
        lay = _layout_for(d, count)
        if (isinstance(lay, _Run) and lay.off == 0
                and lay.length == len(buf)):
            d._check_usable("pack")
            return buf
    return pack(d, buf, count)


def copy_between(src_d: Datatype, src_count: int, src_buf,
                 dst_d, dst_count: int, dst_buf) -> int:
    """Move bytes from one layout straight into another, zipper style.

    This is the single-copy engine behind interthread transfers: no
    staging buffer, each payload byte is touched exactly once.  dst_d
    may be None to mean "dst_buf is a plain contiguous byte region".
    Returns bytes moved = min of the two packed sizes.
    """
    slay, sview = _checked_view(src_d, src_buf, src_count, writable=False)
    if dst_d is None:
        dview = as_byte_view(dst_buf, writable=True)
        dlay = _Run(0, len(dview)) if len(dview) else EMPTY
    else:
        dlay, dview = _checked_view(dst_d, dst_buf, dst_count, writable=True)
    sgen = slay.emit(0)
    dgen = dlay.emit(0)
    moved = 0
    so = sl = do = dl = 0
    while True:
        if sl == 0:
            nxt = next(sgen, None)
            if nxt is None:
                break
            so, sl = nxt
        if dl == 0:
            nxt = next(dgen, None)
            if nxt is None:
                break
            do, dl = nxt
        n = sl if sl < dl else dl
        dview[do:do + n] = sview[so:so + n]
        so += n
        sl -= n
        do += n
        dl -= n
        moved += n
    return moved


# constructor-expression namespace for the debug CLI ("minimpi type-dump")
_EXPR_NAMES = {
    "byte": BYTE,
    "char": CHAR,
    "int32": INT32,
    "int64": INT64,
    "float32": FLOAT32,
    "float64": FLOAT64,
    "contiguous": lambda *a: type_contiguous(*a).commit(),
    "vector": lambda *a: type_vector(*a).commit(),
    "hvector": lambda *a: type_hvector(*a).commit(),
    "indexed_block": lambda *a: type_indexed_block(*a).commit(),
    "struct": lambda *a: type_create_struct(*a).commit(),
    "subarray": lambda *a: type_create_subarray(*a).commit(),
    "resized": lambda *a: type_create_resized(*a).commit(),
}


def parse_type_expr(text: str) -> Datatype:
    """Evaluate a constructor expression like
    ``vector(3, 2, 4, int32)`` or
    ``subarray([1000,1000,1000], [100,100,100], [300,300,300], contiguous(16, byte))``.
    """
    try:
        value = eval(text, {"__builtins__": {}}, dict(_EXPR_NAMES))
    except ArgError:
        raise
    except Exception as exc:
        raise ArgError(f"bad type expression: {exc}") from exc
    if not isinstance(value, Datatype):
        raise ArgError("expression did not produce a datatype")
    return value
