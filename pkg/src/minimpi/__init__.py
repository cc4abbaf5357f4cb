"""minimpi: a miniature message-passing runtime.

Core surface:
  init/finalize and Instance      - runtime lifecycle, one participant each
  Datatype constructors           - non-contiguous layout descriptors + iov
  streams and stream communicators- explicit communication channels (VCIs)
  thread communicators            - threads as ranks on a shared comm
  offload queues                  - enqueue communication onto a device queue
  windows                         - passive-target one-sided reads
  progress control                - explicit per-stream progress, pollers
"""

from .errors import (
    MinimpiError, StateError, PendingError, ArgError, TransportError,
    SpawnError, ExhaustedError, UnsupportedError, TruncateError,
)
from .datatype import (
    Datatype, IovSegment,
    BYTE, CHAR, INT32, INT64, FLOAT32, FLOAT64,
    type_contiguous, type_vector, type_hvector, type_indexed_block,
    type_create_struct, type_create_subarray, type_create_resized,
    type_commit, type_free, type_iov_len, type_iov, pack, unpack,
    parse_type_expr,
)
from .transport import Status, lock_acquisitions
from .stream import (
    NULL_STREAM, Stream, SERIAL_CONTEXT, DEVICE_QUEUE,
    LOCK_GLOBAL, LOCK_PER_VCI, free_stream,
)
from .progress import (
    Request, GeneralizedRequest, grequest_start, grequest_complete,
    wait, test, waitall, ProgressThread,
)
from .comm import (
    Communicator, ThreadComm, SUM,
    CONVENTIONAL, STREAM_SINGLE, STREAM_MULTIPLEX, THREADCOMM,
    barrier, allreduce, comm_dup, comm_free, comm_get_stream,
    comm_test_threadcomm, stream_comm_create, stream_comm_create_multiplex,
    threadcomm_init, threadcomm_start, threadcomm_finish, threadcomm_free,
)
from .p2p import (
    send, recv, isend, irecv,
    stream_send, stream_recv, stream_isend, stream_irecv,
)
from .runtime import (
    Instance, init, launch, Info, info_create, info_set, info_set_hex,
    TRANSPORT_INPROC, TRANSPORT_SOCKET,
)
from .offload import (
    DeviceQueue, queue_create, queue_destroy, queue_synchronize,
    queue_from_hex,
    send_enqueue, recv_enqueue, isend_enqueue, irecv_enqueue,
    wait_enqueue, waitall_enqueue, memcpy_enqueue, compute_enqueue, saxpy,
)
from .onesided import (
    Window, win_create, win_lock, win_unlock, win_get, win_free,
    LOCK_SHARED, LOCK_EXCLUSIVE,
)

ANY_SOURCE = -1
ANY_TAG = -1

__version__ = "0.1.0"
