"""Point-to-point semantics: matching, wildcards, truncation, datatypes."""

import array

import pytest

import minimpi as mp
from minimpi import p2p
from minimpi.errors import ArgError, StateError, TruncateError
from minimpi.p2p import MAX_TAG

from _twin import pair, unique_group


@pytest.fixture
def solo():
    inst = mp.init(transport="inproc", group=unique_group("p2p"))
    yield inst
    if not inst.finalized:
        inst.finalize()


def test_eager_and_rendezvous_roundtrip():
    big = 200 * 1024          # above the 64 KiB eager limit

    def rank0(inst):
        p2p.send(inst.world, b"small", 5, mp.BYTE, 1, 1)
        p2p.send(inst.world, bytes(range(256)) * (big // 256), big,
                 mp.BYTE, 1, 2)

    def rank1(inst):
        buf = bytearray(5)
        st = p2p.recv(inst.world, buf, 5, mp.BYTE, 0, 1)
        assert bytes(buf) == b"small" and st.count == 5
        blob = bytearray(big)
        st = p2p.recv(inst.world, blob, big, mp.BYTE, 0, 2)
        assert st.count == big
        assert bytes(blob) == bytes(range(256)) * (big // 256)

    pair(rank0, rank1)


def test_self_send(solo):
    req = p2p.isend(solo.world, b"loop", 4, mp.BYTE, 0, 9)
    buf = bytearray(4)
    st = p2p.recv(solo.world, buf, 4, mp.BYTE, 0, 9)
    mp.wait(req)
    assert bytes(buf) == b"loop"
    assert (st.source, st.tag, st.count) == (0, 9, 4)


def test_wildcard_source_and_tag():
    def rank0(inst):
        p2p.send(inst.world, b"aa", 2, mp.BYTE, 1, 17)

    def rank1(inst):
        buf = bytearray(2)
        st = p2p.recv(inst.world, buf, 2, mp.BYTE, mp.ANY_SOURCE,
                      mp.ANY_TAG)
        assert (st.source, st.tag) == (0, 17)

    pair(rank0, rank1)


def test_fifo_per_channel():
    n = 200

    def rank0(inst):
        reqs = [p2p.isend(inst.world, i.to_bytes(4, "little"), 4, mp.BYTE,
                          1, 7) for i in range(n)]
        mp.waitall(reqs)

    def rank1(inst):
        buf = bytearray(4)
        for i in range(n):
            p2p.recv(inst.world, buf, 4, mp.BYTE, 0, 7)
            assert int.from_bytes(buf, "little") == i

    pair(rank0, rank1)


def test_tag_lanes_demultiplex():
    def rank0(inst):
        p2p.send(inst.world, b"B", 1, mp.BYTE, 1, 2)
        p2p.send(inst.world, b"A", 1, mp.BYTE, 1, 1)

    def rank1(inst):
        a, b = bytearray(1), bytearray(1)
        p2p.recv(inst.world, a, 1, mp.BYTE, 0, 1)   # posted out of order
        p2p.recv(inst.world, b, 1, mp.BYTE, 0, 2)
        assert (bytes(a), bytes(b)) == (b"A", b"B")

    pair(rank0, rank1)


def test_truncation_blocking_raises_and_status_counts(solo):
    req = p2p.isend(solo.world, b"0123456789", 10, mp.BYTE, 0, 3)
    small = bytearray(4)
    with pytest.raises(TruncateError):
        p2p.recv(solo.world, small, 4, mp.BYTE, 0, 3)
    mp.wait(req)
    assert bytes(small) == b"0123"       # prefix delivered

    # nonblocking flavour: error carried in the status
    req = p2p.isend(solo.world, b"0123456789", 10, mp.BYTE, 0, 4)
    rr = p2p.irecv(solo.world, small, 4, mp.BYTE, 0, 4)
    mp.wait(req)
    with pytest.raises(TruncateError) as ei:
        mp.wait(rr)
    assert ei.value.status.count == 4
    assert ei.value.status.error == "ERR_TRUNCATE"


def test_noncontiguous_datatype_transfer(solo):
    # strided int32 columns -> contiguous on the receive side
    vec = mp.type_vector(4, 1, 3, mp.INT32).commit()
    src = array.array("i", range(12))
    dst = array.array("i", [0] * 4)
    req = p2p.isend(solo.world, src, 1, vec, 0, 5)
    st = p2p.recv(solo.world, dst, 4, mp.INT32, 0, 5)
    mp.wait(req)
    assert list(dst) == [0, 3, 6, 9]
    assert st.count == 4

    # and back into a strided layout
    hole = array.array("i", [0] * 12)
    req = p2p.isend(solo.world, array.array("i", [5, 6, 7, 8]), 4,
                    mp.INT32, 0, 6)
    p2p.recv(solo.world, hole, 1, vec, 0, 6)
    mp.wait(req)
    assert hole[0::3] == array.array("i", [5, 6, 7, 8])
    assert sum(hole) == 5 + 6 + 7 + 8


def test_count_zero_messages(solo):
    req = p2p.isend(solo.world, b"", 0, mp.BYTE, 0, 8)
    st = p2p.recv(solo.world, bytearray(0), 0, mp.BYTE, 0, 8)
    mp.wait(req)
    assert st.count == 0


def test_validation_errors(solo):
    w = solo.world
    with pytest.raises(ArgError):
        p2p.send(w, b"x", -1, mp.BYTE, 0, 0)            # bad count
    with pytest.raises(ArgError):
        p2p.send(w, b"x", 1, mp.BYTE, 0, -1)            # ANY_TAG on send
    with pytest.raises(ArgError):
        p2p.send(w, b"x", 1, mp.BYTE, 0, MAX_TAG + 1)
    with pytest.raises(ArgError):
        p2p.send(w, b"x", 1, mp.BYTE, 5, 0)             # rank out of range
    with pytest.raises(ArgError):
        p2p.recv(w, b"readonly", 8, mp.BYTE, 0, 0)      # immutable buffer
    u = mp.type_contiguous(2, mp.BYTE)                  # uncommitted
    with pytest.raises(ArgError):
        p2p.send(w, b"xy", 1, u, 0, 0)
    with pytest.raises(ArgError):
        p2p.recv(w, bytearray(1), 2, mp.BYTE, 0, 0)     # region too small


def test_send_on_freed_comm_rejected(solo):
    c = mp.comm_dup(solo.world)
    mp.comm_free(c)
    with pytest.raises(StateError):
        p2p.isend(c, b"x", 1, mp.BYTE, 0, 0)


def test_stream_comm_cross_rank():
    def rank0(inst):
        s = inst.stream_create()
        c = mp.stream_comm_create(inst.world, s)
        p2p.send(c, b"via-vci", 7, mp.BYTE, 1, 1)
        buf = bytearray(7)
        st = p2p.recv(c, buf, 7, mp.BYTE, 1, 1)
        assert bytes(buf) == b"via-vci" and st.source_stream_idx == 0
        mp.comm_free(c)
        mp.free_stream(s)

    def rank1(inst):
        s = inst.stream_create()
        c = mp.stream_comm_create(inst.world, s)
        buf = bytearray(7)
        st = p2p.recv(c, buf, 7, mp.BYTE, 0, 1)
        assert st.source_stream_idx == 0
        p2p.send(c, bytes(buf), 7, mp.BYTE, 0, 1)
        mp.comm_free(c)
        mp.free_stream(s)

    pair(rank0, rank1)


def test_multiplex_lanes_are_ordered_channels():
    # two lanes between the same ranks: order within a lane holds even
    # when the receiver drains lanes in opposite order
    def rank0(inst):
        streams = [inst.stream_create() for _ in range(2)]
        c = mp.stream_comm_create_multiplex(inst.world, streams)
        reqs = []
        for i in range(10):
            lane = i % 2
            reqs.append(p2p.stream_isend(
                c, bytes([i]), 1, mp.BYTE, 1, 0, lane, lane))
        mp.waitall(reqs)
        mp.comm_free(c)
        for s in streams:
            mp.free_stream(s)

    def rank1(inst):
        streams = [inst.stream_create() for _ in range(2)]
        c = mp.stream_comm_create_multiplex(inst.world, streams)
        buf = bytearray(1)
        for lane in (1, 0):
            vals = []
            for _ in range(5):
                st = p2p.stream_recv(c, buf, 1, mp.BYTE, 0, 0, lane, lane)
                assert st.source_stream_idx == lane
                vals.append(buf[0])
            assert vals == sorted(vals)
        mp.comm_free(c)
        for s in streams:
            mp.free_stream(s)

    pair(rank0, rank1)


def test_recv_any_stream_index():
    # receiver matches a lane wildcard; status reports the actual lane
    def rank0(inst):
        streams = [inst.stream_create() for _ in range(2)]
        c = mp.stream_comm_create_multiplex(inst.world, streams)
        req = p2p.stream_isend(c, b"z", 1, mp.BYTE, 1, 0, 1, 0)
        mp.wait(req)
        mp.comm_free(c)
        for s in streams:
            mp.free_stream(s)

    def rank1(inst):
        streams = [inst.stream_create()]
        c = mp.stream_comm_create_multiplex(inst.world, streams)
        buf = bytearray(1)
        st = p2p.stream_recv(c, buf, 1, mp.BYTE, 0, 0, -1, 0)
        assert st.source_stream_idx == 1
        mp.comm_free(c)
        mp.free_stream(streams[0])

    pair(rank0, rank1)


def test_threadcomm_local_and_remote_paths(solo):
    tc = mp.threadcomm_init(solo.world, 2)

    from _twin import fan

    def member(i):
        r = tc.start()
        if r == 0:
            p2p.send(tc, b"tiny", 4, mp.BYTE, 1, 0)         # cell path
            p2p.send(tc, bytes(5000), 5000, mp.BYTE, 1, 0)  # sync path
        else:
            buf = bytearray(4)
            p2p.recv(tc, buf, 4, mp.BYTE, 0, 0)
            assert bytes(buf) == b"tiny"
            big = bytearray(5000)
            st = p2p.recv(tc, big, 5000, mp.BYTE, 0, 0)
            assert st.count == 5000
        tc.finish()

    fan(member, 2)
    mp.threadcomm_free(tc)


def test_isend_small_local_completes_immediately(solo):
    req = p2p.isend(solo.world, b"x", 1, mp.BYTE, 0, 0)
    flag, _ = mp.test(req)
    # sub-threshold loopback copies at send time
    buf = bytearray(1)
    p2p.recv(solo.world, buf, 1, mp.BYTE, 0, 0)
    assert bytes(buf) == b"x"
