"""Stream handles and the VCI pool."""

import pytest

import minimpi as mp
from minimpi.errors import (ArgError, ExhaustedError, PendingError,
                            UnsupportedError)
from minimpi.stream import (DEVICE_QUEUE, IMPLICIT_VCI_COUNT, NULL_STREAM,
                            SERIAL_CONTEXT)

from _twin import unique_group


@pytest.fixture
def inst():
    instance = mp.init(transport="inproc", group=unique_group("stream"))
    yield instance
    if not instance.finalized:
        instance.finalize()


def test_default_stream_is_serial_context_with_private_vci(inst):
    s = inst.stream_create()
    assert s.kind == SERIAL_CONTEXT
    assert s is not NULL_STREAM
    # dedicated, lock-free channel
    assert s.vci.guard is None
    assert s.vci not in inst.pool.implicit
    t = inst.stream_create()
    assert t.vci is not s.vci
    mp.free_stream(t)
    mp.free_stream(s)


def test_pool_exhaustion_and_reuse():
    instance = mp.init(transport="inproc", group=unique_group("pool"),
                       vci_pool=4)
    try:
        streams = [instance.stream_create() for _ in range(4)]
        with pytest.raises(ExhaustedError):
            instance.stream_create()
        mp.free_stream(streams.pop())
        again = instance.stream_create()   # freed slot is reusable
        for s in streams + [again]:
            mp.free_stream(s)
    finally:
        instance.finalize()


def test_create_free_cycling_never_exhausts(inst):
    cap = inst.pool.capacity
    for _ in range(3):
        batch = [inst.stream_create() for _ in range(cap)]
        for s in batch:
            mp.free_stream(s)
    assert inst.pool.in_use == 0


def test_cuda_stream_info_unsupported(inst):
    with pytest.raises(UnsupportedError):
        inst.stream_create({"type": "cudaStream_t", "value": "deadbeef"})


def test_unknown_stream_type_rejected(inst):
    with pytest.raises(ArgError):
        inst.stream_create({"type": "warp-drive"})


def test_null_and_double_free_rejected(inst):
    with pytest.raises(ArgError):
        mp.free_stream(NULL_STREAM)
    s = inst.stream_create()
    mp.free_stream(s)
    with pytest.raises(ArgError):
        mp.free_stream(s)


def test_free_refused_while_attached_to_comm(inst):
    s = inst.stream_create()
    c = mp.stream_comm_create(inst.world, s)
    with pytest.raises(PendingError):
        mp.free_stream(s)
    mp.comm_free(c)
    mp.free_stream(s)


def test_free_refused_while_progress_thread_runs(inst):
    s = inst.stream_create()
    inst.start_progress_thread(s)
    with pytest.raises(PendingError):
        mp.free_stream(s)
    inst.stop_progress_thread(s)
    mp.free_stream(s)


def test_lock_regimes():
    g = mp.init(transport="inproc", group=unique_group("lockg"),
                lock_mode=mp.LOCK_GLOBAL)
    try:
        guards = {id(v.guard) for v in g.pool.implicit}
        assert len(guards) == 1          # one shared lock
        assert g.pool.implicit[0].guard is not None
    finally:
        g.finalize()
    p = mp.init(transport="inproc", group=unique_group("lockp"),
                lock_mode=mp.LOCK_PER_VCI)
    try:
        guards = {id(v.guard) for v in p.pool.implicit}
        assert len(guards) == len(p.pool.implicit)
    finally:
        p.finalize()


def test_bad_lock_mode_rejected():
    with pytest.raises(ArgError):
        mp.init(transport="inproc", group=unique_group("lockbad"),
                lock_mode="speculative")


def test_implicit_vci_count_fixed(inst):
    assert len(inst.pool.implicit) == IMPLICIT_VCI_COUNT
    # implicit vcis are not pool slots: allocation starts beyond them
    s = inst.stream_create()
    assert s.vci not in inst.pool.implicit
    mp.free_stream(s)


def test_device_queue_stream_shares_queue_vci(inst):
    q = mp.queue_create(inst)
    info = mp.info_create()
    mp.info_set(info, "type", "devstream")
    mp.info_set_hex(info, "value", bytes.fromhex(q.handle))
    s1 = inst.stream_create(info)
    s2 = inst.stream_create(info)
    assert s1.kind == DEVICE_QUEUE and s2.kind == DEVICE_QUEUE
    assert s1.vci is s2.vci              # queue endpoint may be shared
    assert s1.device is q and s2.device is q
    mp.free_stream(s1)
    mp.free_stream(s2)
    mp.queue_destroy(q)
