"""Storage server: directory, fragmenter, disk manager and buffer manager.

A server owns a set of disk directories and serves the byte ranges of
logical files that the file layout assigns to it.  Incoming external
requests (from a client's interface library) are fragmented into a local
part plus directed or broadcast internal sub-requests; every serving
server acknowledges and transfers directly to the client, never through
the buddy.  One server is the system controller (SC: file registry,
hints, shutdown, layout administration) and one the connection controller
(CC: buddy assignment); both default to server 0.

Data flow per serving server and request part, in separate-data mode:

    read:  per chunk one ACK (piece table, status = chunk bytes) plus one
           DATA message; the last chunk ACK carries the final flag, the
           served byte count and, from the buddy, the remote-server plan.
    write: per chunk one pull ACK naming the pieces wanted next and one
           DATA message back from the client; after the last chunk is on
           disk a final completion ACK closes the part.  The completion
           ACK exists so that a write completes only after the bytes are
           durable and the new file extent is registered.

In inline mode chunk data rides inside the ACK (reads) or inside the
request and its sub-requests (writes).

Requests of one client execute in arrival order on a dedicated worker
thread, which is what makes read-your-writes hold across sub-requests;
controller lookups run on a separate control worker so they never block
behind data transfers.
"""

from __future__ import annotations

import enum
import json
import os
import struct
import threading
import time
from bisect import bisect_right
from dataclasses import dataclass
from queue import Queue

from .protocol import (
    ACK_FINAL,
    ACK_HAS_PLAN,
    ACK_WRITE_PULL,
    AckParams,
    Message,
    Method,
    MsgClass,
    MsgType,
    Piece,
    Run,
    choose_transmission,
    pack_ack,
    pack_runs,
    pack_str,
    unpack_runs,
    unpack_rw,
    unpack_str,
)
from .transport import Endpoint
from .viewdesc import AccessDesc, enumerate_runs, unpack_descriptor


class Errno(enum.IntEnum):
    OK = 0
    EXISTS = -2
    NO_SUCH_FILE = -3
    MODE_CONFLICT = -4
    NOT_CONTROLLER = -5
    UNKNOWN_FILE = -6
    IO_FAILURE = -7
    BAD_REQUEST = -8
    REFUSED = -10


# open flags
RDONLY = 1
RDWR = 2
WRONLY = 4
CREATE = 8
EXCL = 16
DELETE_ON_CLOSE = 32
UNIQUE_OPEN = 64
SEQUENTIAL = 128
APPEND = 256

HINT_FILE_ADMINISTRATION = 1
HINT_PREFETCH = 2
HINT_ADMINISTRATION = 3


@dataclass
class DiskConfig:
    path: str
    latency_ms_per_mib: float = 0.0
    capacity: int | None = None


@dataclass
class ServerConfig:
    server_id: int
    address: str  # "host:port" or "inproc"
    disks: list[DiskConfig]
    buffer_capacity: int = 1 << 20
    inline_threshold: int = 0
    stripe_size: int = 1 << 16
    is_sc: bool = False
    is_cc: bool = False


class BufferManager:
    """First come, first served allotment of a server's transfer buffer.

    A request asking for more than the total capacity is granted the full
    capacity (callers chunk against the grant); otherwise it waits until,
    in strict arrival order, its demand fits.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._free = capacity
        self._cond = threading.Condition()
        self._queue: list = []
        self._grants: dict = {}

    def grant(self, key, want: int) -> int:
        if want < 1:
            raise ValueError("want must be >= 1")
        ask = min(want, self.capacity)
        with self._cond:
            self._queue.append(key)
            while self._queue[0] != key or ask > self._free:
                self._cond.wait()
            self._queue.pop(0)
            self._free -= ask
            self._grants[key] = ask
            self._cond.notify_all()
            return ask

    def release(self, key) -> None:
        with self._cond:
            got = self._grants.pop(key, 0)
            self._free += got
            self._cond.notify_all()

    def in_use(self) -> int:
        with self._cond:
            return self.capacity - self._free


class Disk:
    """A directory acting as one disk, with synthetic per-MiB latency.

    The latency sleep happens under the disk lock: a disk performs one
    operation at a time, which is what makes the scaling trends of the
    benchmark reproducible.
    """

    def __init__(self, disk_id: int, cfg: DiskConfig):
        self.disk_id = disk_id
        self.cfg = cfg
        self.lock = threading.Lock()
        os.makedirs(cfg.path, exist_ok=True)

    def portion_path(self, file_id: int) -> str:
        return os.path.join(self.cfg.path, f"f{file_id:06d}.portion")

    def _sleep_for(self, nbytes: int) -> None:
        if self.cfg.latency_ms_per_mib > 0 and nbytes > 0:
            time.sleep(self.cfg.latency_ms_per_mib * nbytes / (1 << 20) / 1000.0)

    def read(self, file_id: int, phys_offset: int, length: int) -> bytes:
        path = self.portion_path(file_id)
        with self.lock:
            self._sleep_for(length)
            if not os.path.exists(path):
                return b"\0" * length
            with open(path, "rb") as fh:
                fh.seek(phys_offset)
                got = fh.read(length)
        return got + b"\0" * (length - len(got))

    def write(self, file_id: int, phys_offset: int, data: bytes) -> None:
        path = self.portion_path(file_id)
        with self.lock:
            self._sleep_for(len(data))
            mode = "r+b" if os.path.exists(path) else "w+b"
            with open(path, mode) as fh:
                fh.seek(phys_offset)
                fh.write(data)

    def truncate(self, file_id: int, phys_length: int) -> None:
        path = self.portion_path(file_id)
        with self.lock:
            if os.path.exists(path):
                with open(path, "r+b") as fh:
                    fh.truncate(phys_length)

    def sync(self, file_id: int) -> None:
        path = self.portion_path(file_id)
        with self.lock:
            if os.path.exists(path):
                with open(path, "rb") as fh:
                    os.fsync(fh.fileno())

    def remove(self, file_id: int) -> None:
        path = self.portion_path(file_id)
        with self.lock:
            if os.path.exists(path):
                os.remove(path)


@dataclass(frozen=True)
class FittedRange:
    start: int
    end: int
    server_id: int


@dataclass
class FileLayout:
    """Which logical bytes live on which server, and where physically.

    ``striped``: stripes of ``stripe`` bytes round-robin over ``servers``.
    ``fitted``: an explicit logical run table tiling [0, fitted_end); each
    server stores its runs back to back, so a client's byte set is
    physically contiguous on its buddy whatever the logical pattern.
    Bytes past the fitted table fall back to striping.  ``known_global``
    marks layouts pinned by a file administration hint: only then may a
    fragmenter route directed sub-requests to other servers.
    """

    file_id: int
    name: str
    kind: str  # "striped" | "fitted"
    stripe: int
    servers: tuple[int, ...]
    ranges: tuple[FittedRange, ...] = ()
    known_global: bool = False

    def to_json(self) -> dict:
        return {
            "file_id": self.file_id,
            "name": self.name,
            "kind": self.kind,
            "stripe": self.stripe,
            "servers": list(self.servers),
            "ranges": [[r.start, r.end, r.server_id] for r in self.ranges],
            "known_global": self.known_global,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FileLayout":
        return cls(
            obj["file_id"], obj["name"], obj["kind"], obj["stripe"],
            tuple(obj["servers"]),
            tuple(FittedRange(a, b, s) for a, b, s in obj["ranges"]),
            obj["known_global"],
        )

    def fitted_end(self) -> int:
        return self.ranges[-1].end if self.ranges else 0

    def owner_segments(self, start: int, end: int):
        """Yield (start, end, server_id) splitting [start, end) by owner."""
        pos = start
        fe = self.fitted_end()
        starts = [r.start for r in self.ranges]
        while pos < end:
            if pos < fe:
                i = bisect_right(starts, pos) - 1
                r = self.ranges[i]
                seg_end = min(end, r.end)
                yield pos, seg_end, r.server_id
                pos = seg_end
            else:
                rel = pos - fe
                stripe_idx = rel // self.stripe
                owner = self.servers[stripe_idx % len(self.servers)]
                seg_end = min(end, fe + (stripe_idx + 1) * self.stripe)
                yield pos, seg_end, owner
                pos = seg_end

    def physical_segments(self, server_id: int, start: int, end: int):
        """Yield (phys_offset, seg_start, length) for this server's bytes in
        [start, end), split at physical discontinuities."""
        nserv = len(self.servers)
        fitted_total = 0
        fitted_before = []
        for r in self.ranges:
            fitted_before.append(fitted_total)
            if r.server_id == server_id:
                fitted_total += r.end - r.start
        fe = self.fitted_end()
        starts = [r.start for r in self.ranges]
        srv_pos = self.servers.index(server_id) if server_id in self.servers else -1
        for seg_start, seg_end, owner in self.owner_segments(start, end):
            if owner != server_id:
                continue
            if seg_start < fe:
                i = bisect_right(starts, seg_start) - 1
                r = self.ranges[i]
                phys = fitted_before[i] + (seg_start - r.start)
            else:
                if srv_pos < 0:
                    continue
                rel = seg_start - fe
                stripe_idx = rel // self.stripe
                phys = fitted_total + (stripe_idx // nserv) * self.stripe + rel % self.stripe
            yield phys, seg_start, seg_end - seg_start

    def portions(self, server_id: int, size: int, disk_path: str) -> list[dict]:
        """Directory entries for one server's portions of a file of ``size``."""
        out = []
        for phys, start, length in self.physical_segments(server_id, 0, max(size, 0)):
            out.append(
                {
                    "server_id": server_id,
                    "start": start,
                    "end": start + length,
                    "physical_path": disk_path,
                    "physical_offset": phys,
                }
            )
        return out


def split_runs_by_owner(layout: FileLayout, runs: list[Run]) -> dict[int, list[Run]]:
    """Partition view runs by owning server, preserving view order."""
    parts: dict[int, list[Run]] = {}
    for run in runs:
        for seg_start, seg_end, owner in layout.owner_segments(
            run.abs_offset, run.abs_offset + run.length
        ):
            parts.setdefault(owner, []).append(
                Run(seg_start, run.view_offset + (seg_start - run.abs_offset),
                    seg_end - seg_start)
            )
    return parts


@dataclass
class _FileMeta:
    file_id: int
    name: str
    size: int
    layout: FileLayout
    removed: bool = False


class ControllerState:
    """File registry, pending layout hints, buddy assignment, barriers."""

    def __init__(self):
        self.lock = threading.RLock()
        self.files_by_name: dict[str, _FileMeta] = {}
        self.files_by_id: dict[int, _FileMeta] = {}
        self.next_file_id = 1
        self.pending_layouts: dict[str, list] = {}
        self.next_client = 0
        self.buddy_queue: list[int] = []
        self.clients: dict[int, int] = {}
        self.barriers: dict[str, dict] = {}
        self.barrier_cond = threading.Condition(self.lock)
        self.prefetch_hints: list[dict] = []


@dataclass
class _PartChunk:
    runs: list[Run]
    nbytes: int


def _chunk_part(runs: list[Run], chunk: int) -> list[_PartChunk]:
    """Split a part's runs into chunks of at most ``chunk`` bytes."""
    chunks: list[_PartChunk] = []
    cur: list[Run] = []
    cur_bytes = 0
    for run in runs:
        pos = 0
        while pos < run.length:
            take = min(chunk - cur_bytes, run.length - pos)
            cur.append(Run(run.abs_offset + pos, run.view_offset + pos, take))
            cur_bytes += take
            pos += take
            if cur_bytes == chunk:
                chunks.append(_PartChunk(cur, cur_bytes))
                cur, cur_bytes = [], 0
    if cur:
        chunks.append(_PartChunk(cur, cur_bytes))
    return chunks


def _slice_part(data: bytes, base_view: int, runs: list[Run]) -> bytes:
    """Gather a part's bytes out of a view-linear payload."""
    out = bytearray()
    for r in runs:
        off = r.view_offset - base_view
        out += data[off:off + r.length]
    return bytes(out)


def pack_subrequest(runs: list[Run], inline: bool, layout: FileLayout) -> bytes:
    return pack_runs(runs, inline) + pack_str(json.dumps(layout.to_json()))


def unpack_subrequest(params: bytes) -> tuple[list[Run], bool, FileLayout]:
    runs, inline, pos = unpack_runs(params)
    blob, _ = unpack_str(params, pos)
    return runs, inline, FileLayout.from_json(json.loads(blob))


class _RWLock:
    """Per-file reader/writer discipline: shared reads, exclusive writes."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    def acquire(self, exclusive: bool) -> None:
        with self._cond:
            if exclusive:
                while self._writer or self._readers:
                    self._cond.wait()
                self._writer = True
            else:
                while self._writer:
                    self._cond.wait()
                self._readers += 1

    def release(self, exclusive: bool) -> None:
        with self._cond:
            if exclusive:
                self._writer = False
            else:
                self._readers -= 1
            self._cond.notify_all()


class StorageServer:
    """One storage daemon attached to a transport endpoint."""

    def __init__(self, cfg: ServerConfig, endpoint: Endpoint, server_ids: list[int],
                 controller_id: int, connection_controller_id: int):
        self.cfg = cfg
        self.endpoint = endpoint
        self.server_ids = list(server_ids)
        self.sc_id = controller_id
        self.cc_id = connection_controller_id
        self.disks = [Disk(i, d) for i, d in enumerate(cfg.disks)]
        self.bdl = list(range(len(self.disks)))
        self.buffer = BufferManager(cfg.buffer_capacity)
        self.layouts: dict[int, FileLayout] = {}
        # per-open state at the buddy: (client, access id) -> real file id;
        # the wire file_id field of external requests carries the access id
        self.open_map: dict[tuple[int, int], int] = {}
        self.views: dict[tuple[int, int], tuple[AccessDesc, int, bool]] = {}
        self.controller = ControllerState() if (cfg.is_sc or cfg.is_cc) else None
        self.rw_locks: dict[int, _RWLock] = {}
        self._state_lock = threading.Lock()
        self._pending: dict[tuple[int, int], Queue] = {}
        self._next_internal = 1
        self._workers: dict[int, Queue] = {}
        self._control_queue: Queue = Queue()
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        self._drained = threading.Event()
        self.fragment_stats = {"directed": 0, "broadcast": 0, "local_only": 0}

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        for target, name in (
            (self._dispatch_loop, "dispatch"),
            (lambda: self._worker_loop(self._control_queue), "control"),
        ):
            t = threading.Thread(target=target, daemon=True,
                                 name=f"vs{self.cfg.server_id}-{name}")
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stopping.set()

    def join(self, timeout: float = 10.0) -> None:
        self._drained.wait(timeout)
        self.endpoint.close()

    # -- plumbing ------------------------------------------------------------

    def _next_request_id(self) -> int:
        with self._state_lock:
            rid = self._next_internal
            self._next_internal += 1
        return 0x40000000 | rid

    def _send(self, msg: Message) -> None:
        self.endpoint.send(msg)

    def _dispatch_loop(self) -> None:
        while not self._stopping.is_set():
            msg = self.endpoint.recv(timeout=0.05)
            if msg is not None:
                self._route(msg)
        # keep routing whatever arrives while workers wind down
        deadline = time.monotonic() + 2.0
        while time.monotonic() < deadline:
            msg = self.endpoint.recv(timeout=0.05)
            if msg is None:
                break
            self._route(msg)
        for q in list(self._workers.values()) + [self._control_queue]:
            q.put(None)
        self._drained.set()

    def _route(self, msg: Message) -> None:
        if msg.msg_class is MsgClass.ACK or msg.msg_type is MsgType.DATA:
            with self._state_lock:
                waiter = self._pending.get((msg.client_id, msg.request_id))
            if waiter is not None:
                waiter.put(msg)
            return
        if msg.msg_class is MsgClass.DI and msg.msg_type in (
            MsgType.OPEN, MsgType.GET_SIZE, MsgType.SET_SIZE, MsgType.REMOVE, MsgType.HINT
        ):
            self._control_queue.put(msg)
            return
        with self._state_lock:
            q = self._workers.get(msg.client_id)
            if q is None:
                q = Queue()
                self._workers[msg.client_id] = q
                t = threading.Thread(target=self._worker_loop, args=(q,), daemon=True,
                                     name=f"vs{self.cfg.server_id}-c{msg.client_id}")
                t.start()
                self._threads.append(t)
        q.put(msg)

    def _worker_loop(self, q: Queue) -> None:
        while True:
            msg = q.get()
            if msg is None:
                return
            try:
                self._handle(msg)
            except Exception as exc:
                self._error_ack(msg, Errno.IO_FAILURE, f"{type(exc).__name__}: {exc}")

    def _register_waiter(self, client_id: int, rid: int) -> Queue:
        with self._state_lock:
            return self._pending.setdefault((client_id, rid), Queue())

    def _drop_waiter(self, client_id: int, rid: int) -> None:
        with self._state_lock:
            self._pending.pop((client_id, rid), None)

    def _control_query(self, recipient: int, msg_type: MsgType, *, client_id: int = 0,
                       file_id: int = 0, status: int = 0, params: bytes = b"",
                       data: bytes = b"") -> Message:
        rid = self._next_request_id()
        q = self._register_waiter(client_id, rid)
        self._send(Message(msg_type, MsgClass.DI, self.cfg.server_id, recipient,
                           client_id, file_id, rid, status, params, data))
        try:
            return q.get(timeout=30.0)
        finally:
            self._drop_waiter(client_id, rid)

    def _broadcast_and_wait(self, msg_type: MsgType, client_id: int, file_id: int,
                            params: bytes) -> list[Message]:
        rid = self._next_request_id()
        q = self._register_waiter(client_id, rid)
        others = [s for s in self.server_ids if s != self.cfg.server_id]
        try:
            for sid in others:
                self._send(Message(msg_type, MsgClass.BI, self.cfg.server_id, sid,
                                   client_id, file_id, rid, 0, params))
            return [q.get(timeout=30.0) for _ in others]
        finally:
            self._drop_waiter(client_id, rid)

    def _reply(self, req: Message, *, status: int = 0, params: bytes = b"",
               data: bytes = b"") -> None:
        self._send(Message(req.msg_type, MsgClass.ACK, self.cfg.server_id, req.sender_id,
                           req.client_id, req.file_id, req.request_id, status, params, data))

    def _error_ack(self, req: Message, errno: Errno, detail: str = "") -> None:
        if req.msg_type in (MsgType.READ, MsgType.WRITE):
            ack = AckParams(flags=ACK_FINAL | ACK_HAS_PLAN, n_remote=0, served_total=0)
            self._send(Message(MsgType.ACK, MsgClass.ACK, self.cfg.server_id,
                               req.client_id, req.client_id, req.file_id, req.request_id,
                               int(errno), pack_ack(ack), detail.encode()))
        else:
            self._reply(req, status=int(errno), data=detail.encode())

    # -- request dispatch ------------------------------------------------------

    def _handle(self, msg: Message) -> None:
        handler = {
            MsgType.CONNECT: self._h_connect,
            MsgType.DISCONNECT: self._h_disconnect,
            MsgType.OPEN: self._h_open,
            MsgType.CLOSE: self._h_close,
            MsgType.SET_VIEW: self._h_set_view,
            MsgType.READ: self._h_read,
            MsgType.WRITE: self._h_write,
            MsgType.GET_SIZE: self._h_get_size,
            MsgType.SET_SIZE: self._h_set_size,
            MsgType.REMOVE: self._h_remove,
            MsgType.HINT: self._h_hint,
            MsgType.ADMIN: self._h_admin,
            MsgType.SHUTDOWN: self._h_shutdown,
        }.get(msg.msg_type)
        if handler is None:
            self._error_ack(msg, Errno.BAD_REQUEST, f"unhandled type {msg.msg_type}")
        else:
            handler(msg)

    # -- controller services -----------------------------------------------------

    def _require(self, msg: Message, *, cc: bool = False) -> bool:
        ok = self.cfg.is_cc if cc else self.cfg.is_sc
        if not ok:
            self._reply(msg, status=int(Errno.NOT_CONTROLLER))
        return ok

    def _h_connect(self, msg: Message) -> None:
        if not self._require(msg, cc=True):
            return
        st = self.controller
        with st.lock:
            if st.buddy_queue:
                buddy = st.buddy_queue.pop(0)
            else:
                buddy = self.server_ids[st.next_client % len(self.server_ids)]
            st.next_client += 1
            st.clients[msg.sender_id] = buddy
        self._reply(msg, params=struct.pack("<II", msg.sender_id, buddy))

    def _h_disconnect(self, msg: Message) -> None:
        if not self._require(msg, cc=True):
            return
        with self.controller.lock:
            known = self.controller.clients.pop(msg.sender_id, None)
        self._reply(msg, status=0 if known is not None else int(Errno.REFUSED))

    def _h_open(self, msg: Message) -> None:
        if msg.msg_class is MsgClass.DI:
            self._sc_open(msg)
            return
        reply = self._control_query(self.sc_id, MsgType.OPEN, client_id=msg.client_id,
                                    params=msg.params)
        if reply.status < 0:
            self._reply(msg, status=reply.status, data=reply.data)
            return
        obj = json.loads(reply.data.decode())
        layout = FileLayout.from_json(obj["layout"])
        with self._state_lock:
            self.layouts[layout.file_id] = layout
            self.open_map[(msg.client_id, msg.file_id)] = layout.file_id
        self._reply(msg, params=struct.pack("<IQ", layout.file_id, obj["size"]))

    def _resolve(self, msg: Message) -> int | None:
        """Real file id behind an external request's access id."""
        with self._state_lock:
            return self.open_map.get((msg.client_id, msg.file_id))

    def _sc_open(self, msg: Message) -> None:
        if not self.cfg.is_sc:
            self._reply(msg, status=int(Errno.NOT_CONTROLLER))
            return
        (flags,) = struct.unpack_from("<I", msg.params, 0)
        name, _ = unpack_str(msg.params, 4)
        access = flags & (RDONLY | RDWR | WRONLY)
        if access not in (RDONLY, RDWR, WRONLY):
            self._reply(msg, status=int(Errno.MODE_CONFLICT),
                        data=b"exactly one access mode required")
            return
        if (flags & (CREATE | EXCL)) and (flags & RDONLY):
            self._reply(msg, status=int(Errno.MODE_CONFLICT),
                        data=b"create/excl conflict with read-only")
            return
        if (flags & SEQUENTIAL) and (flags & RDWR):
            self._reply(msg, status=int(Errno.MODE_CONFLICT),
                        data=b"sequential conflicts with read-write")
            return
        st = self.controller
        with st.lock:
            meta = st.files_by_name.get(name)
            if meta is None:
                if not flags & CREATE:
                    self._reply(msg, status=int(Errno.NO_SUCH_FILE), data=name.encode())
                    return
                file_id = st.next_file_id
                st.next_file_id += 1
                layout = self._decide_layout(file_id, name, st)
                meta = _FileMeta(file_id, name, 0, layout)
                st.files_by_name[name] = meta
                st.files_by_id[file_id] = meta
            elif (flags & CREATE) and (flags & EXCL):
                self._reply(msg, status=int(Errno.EXISTS), data=name.encode())
                return
            payload = {"size": meta.size, "layout": meta.layout.to_json()}
        self._reply(msg, data=json.dumps(payload).encode())

    def _decide_layout(self, file_id: int, name: str, st: ControllerState) -> FileLayout:
        ranges = st.pending_layouts.pop(name, None)
        if ranges is None:
            return FileLayout(file_id, name, "striped", self.cfg.stripe_size,
                              tuple(self.server_ids))
        return FileLayout(file_id, name, "fitted", self.cfg.stripe_size,
                          tuple(self.server_ids),
                          tuple(FittedRange(a, b, s) for a, b, s in ranges),
                          known_global=True)

    def _h_get_size(self, msg: Message) -> None:
        if msg.msg_class is MsgClass.DI:
            if not self.cfg.is_sc:
                self._reply(msg, status=int(Errno.NOT_CONTROLLER))
                return
            st = self.controller
            with st.lock:
                meta = st.files_by_id.get(msg.file_id)
                if meta is None or meta.removed:
                    self._reply(msg, status=int(Errno.UNKNOWN_FILE))
                    return
                if msg.params:  # extent report from a serving server
                    (end,) = struct.unpack("<Q", msg.params)
                    meta.size = max(meta.size, end)
                self._reply(msg, params=struct.pack("<Q", meta.size))
            return
        real = self._resolve(msg)
        if real is None:
            self._reply(msg, status=int(Errno.UNKNOWN_FILE))
            return
        reply = self._control_query(self.sc_id, MsgType.GET_SIZE,
                                    client_id=msg.client_id, file_id=real)
        self._reply(msg, status=reply.status, params=reply.params)

    def _h_set_size(self, msg: Message) -> None:
        if msg.msg_class is MsgClass.DI:
            if not self.cfg.is_sc:
                self._reply(msg, status=int(Errno.NOT_CONTROLLER))
                return
            size, only_grow = struct.unpack("<QB", msg.params)
            st = self.controller
            with st.lock:
                meta = st.files_by_id.get(msg.file_id)
                if meta is None or meta.removed:
                    self._reply(msg, status=int(Errno.UNKNOWN_FILE))
                    return
                old = meta.size
                meta.size = max(size, old) if only_grow else size
                self._reply(msg, params=struct.pack("<QQ", old, meta.size))
            return
        if msg.msg_class is MsgClass.BI:
            (size,) = struct.unpack("<Q", msg.params)
            layout = self._layout_for(msg.file_id)
            if layout is not None:
                self._truncate_local(layout, size)
            self._reply(msg, status=0)
            return
        real = self._resolve(msg)
        if real is None:
            self._reply(msg, status=int(Errno.UNKNOWN_FILE))
            return
        reply = self._control_query(self.sc_id, MsgType.SET_SIZE,
                                    client_id=msg.client_id, file_id=real,
                                    params=msg.params)
        if reply.status < 0:
            self._reply(msg, status=reply.status)
            return
        old, new = struct.unpack("<QQ", reply.params)
        if new < old:
            self._broadcast_and_wait(MsgType.SET_SIZE, msg.client_id, real,
                                     struct.pack("<Q", new))
            layout = self._layout_for(real)
            if layout is not None:
                self._truncate_local(layout, new)
        self._reply(msg, status=0, params=struct.pack("<Q", new))

    def _truncate_local(self, layout: FileLayout, size: int) -> None:
        disk = self.disks[self.bdl[0]]
        phys_len = 0
        for phys, _start, length in layout.physical_segments(self.cfg.server_id, 0, size):
            phys_len = max(phys_len, phys + length)
        disk.truncate(layout.file_id, phys_len)

    def _h_remove(self, msg: Message) -> None:
        if msg.msg_class is MsgClass.DI:
            if not self.cfg.is_sc:
                self._reply(msg, status=int(Errno.NOT_CONTROLLER))
                return
            name, _ = unpack_str(msg.params, 0)
            st = self.controller
            with st.lock:
                meta = st.files_by_name.get(name)
                if meta is None or meta.removed:
                    self._reply(msg, status=int(Errno.NO_SUCH_FILE))
                    return
                meta.removed = True
                del st.files_by_name[name]
            self._reply(msg, data=json.dumps(meta.layout.to_json()).encode())
            return
        if msg.msg_class is MsgClass.BI:
            for disk in self.disks:
                disk.remove(msg.file_id)
            with self._state_lock:
                self.layouts.pop(msg.file_id, None)
            self._reply(msg, status=0)
            return
        reply = self._control_query(self.sc_id, MsgType.REMOVE, client_id=msg.client_id,
                                    params=msg.params)
        if reply.status < 0:
            self._reply(msg, status=reply.status)
            return
        layout = FileLayout.from_json(json.loads(reply.data.decode()))
        self._broadcast_and_wait(MsgType.REMOVE, msg.client_id, layout.file_id, b"")
        for disk in self.disks:
            disk.remove(layout.file_id)
        with self._state_lock:
            self.layouts.pop(layout.file_id, None)
        self._reply(msg, status=0)

    def _h_hint(self, msg: Message) -> None:
        if msg.msg_class is MsgClass.DI:
            if not self.cfg.is_sc:
                self._reply(msg, status=int(Errno.NOT_CONTROLLER))
                return
            self._sc_hint(msg)
            return
        reply = self._control_query(self.sc_id, MsgType.HINT, client_id=msg.client_id,
                                    status=msg.status, data=msg.data)
        self._reply(msg, status=reply.status, data=reply.data)

    def _sc_hint(self, msg: Message) -> None:
        kind = msg.status
        body = json.loads(msg.data.decode()) if msg.data else {}
        st = self.controller
        if kind == HINT_FILE_ADMINISTRATION:
            try:
                ranges = self._hint_ranges(body)
            except (KeyError, ValueError) as exc:
                self._reply(msg, status=int(Errno.BAD_REQUEST), data=str(exc).encode())
                return
            with st.lock:
                st.pending_layouts[body["name"]] = ranges
            self._reply(msg, status=0)
        elif kind == HINT_PREFETCH:
            with st.lock:
                st.prefetch_hints.append(body)  # accepted; acted on by no policy yet
            self._reply(msg, status=0)
        elif kind == HINT_ADMINISTRATION:
            if "buddy_order" in body:
                with st.lock:
                    st.buddy_queue = list(body["buddy_order"])
            self._reply(msg, status=0)
        else:
            self._reply(msg, status=int(Errno.BAD_REQUEST))

    def _hint_ranges(self, body: dict) -> list:
        if "ranges" in body:
            ranges = sorted(tuple(r) for r in body["ranges"])
        else:
            from .distribution import build_process_view, descriptor_from_json

            rd = descriptor_from_json(body["distribution"])
            servers = body["servers"]
            ranges = []
            for rank, sid in enumerate(servers):
                view = build_process_view(rd, rank)
                if view.total_bytes == 0:
                    continue
                for run in enumerate_runs(view.descriptor, 0, 0, view.total_bytes):
                    ranges.append((run.file_offset, run.file_offset + run.length, sid))
            ranges.sort()
        pos = 0
        for a, b, sid in ranges:
            if a != pos or b <= a or sid not in self.server_ids:
                raise ValueError(f"layout ranges must tile the file from 0, bad ({a},{b},{sid})")
            pos = b
        return [list(r) for r in ranges]

    def _h_admin(self, msg: Message) -> None:
        subkind, pos = unpack_str(msg.params, 0)
        body = json.loads(msg.params[pos:].decode()) if len(msg.params) > pos else {}
        if subkind == "ping":
            self._reply(msg, data=b"pong")
        elif subkind == "counters":
            stats = getattr(self.endpoint, "stats", None)
            snap = stats.snapshot() if stats is not None else {}
            snap["fragmenter"] = dict(self.fragment_stats)
            snap["buffer_in_use"] = self.buffer.in_use()
            self._reply(msg, data=json.dumps(snap).encode())
        elif subkind == "bdl":
            order = body.get("order")
            if order is not None:
                if sorted(order) != list(range(len(self.disks))):
                    self._reply(msg, status=int(Errno.BAD_REQUEST))
                    return
                self.bdl = list(order)
            if "latency_ms_per_mib" in body:
                for disk in self.disks:
                    disk.cfg.latency_ms_per_mib = float(body["latency_ms_per_mib"])
            self._reply(msg, data=json.dumps({"bdl": self.bdl}).encode())
        elif subkind == "fsync":
            self.disks[self.bdl[0]].sync(msg.file_id)
            self._reply(msg, status=0)
        elif subkind == "sync":
            real = self._resolve(msg) if msg.msg_class is MsgClass.ER else msg.file_id
            if real is None:
                self._reply(msg, status=int(Errno.UNKNOWN_FILE))
                return
            if msg.msg_class is MsgClass.ER:
                self._broadcast_and_wait(MsgType.ADMIN, msg.client_id, real,
                                         pack_str("fsync"))
            self.disks[self.bdl[0]].sync(real)
            self._reply(msg, status=0)
        elif subkind == "layout":
            if self._require(msg):
                self._admin_layout(msg, body)
        elif subkind == "barrier":
            if self._require(msg):
                self._admin_barrier(msg, body)
        else:
            self._reply(msg, status=int(Errno.BAD_REQUEST))

    def _admin_layout(self, msg: Message, body: dict) -> None:
        st = self.controller
        with st.lock:
            meta = st.files_by_name.get(body.get("name", ""))
            if meta is None:
                meta = st.files_by_id.get(body.get("file_id", -1))
            if meta is None or meta.removed:
                self._reply(msg, status=int(Errno.NO_SUCH_FILE))
                return
            table = {
                "file_id": meta.file_id,
                "name": meta.name,
                "size": meta.size,
                "layout": meta.layout.to_json(),
                "portions": [],
            }
            for sid in self.server_ids:
                table["portions"].extend(
                    meta.layout.portions(sid, meta.size, f"vs{sid}:disk{self.bdl[0]}")
                )
        self._reply(msg, data=json.dumps(table).encode())

    def _admin_barrier(self, msg: Message, body: dict) -> None:
        st = self.controller
        key, need = str(body["key"]), int(body["need"])
        tag = json.dumps(body.get("tag"), sort_keys=True)
        with st.barrier_cond:
            entry = st.barriers.setdefault(key, {"arrived": 0, "tags": set(), "gen": 0, "ok": True})
            entry["arrived"] += 1
            entry["tags"].add(tag)
            gen = entry["gen"]
            if entry["arrived"] >= need:
                entry["ok"] = len(entry["tags"]) == 1
                entry["gen"] += 1
                entry["arrived"] = 0
                entry["tags"] = set()
                st.barrier_cond.notify_all()
            else:
                while entry["gen"] == gen:
                    if not st.barrier_cond.wait(timeout=30.0):
                        self._reply(msg, status=int(Errno.REFUSED))
                        return
            ok = entry["ok"]
        self._reply(msg, status=0 if ok else int(Errno.BAD_REQUEST))

    def _h_shutdown(self, msg: Message) -> None:
        if msg.msg_class is MsgClass.BI:
            self._reply(msg, status=0)
            self._stopping.set()
            return
        if not self._require(msg):
            return
        self._broadcast_and_wait(MsgType.SHUTDOWN, msg.client_id, 0, b"")
        self._reply(msg, status=0)
        self._stopping.set()

    # -- views ---------------------------------------------------------------

    def _h_close(self, msg: Message) -> None:
        with self._state_lock:
            self.views.pop((msg.client_id, msg.file_id), None)
            self.open_map.pop((msg.client_id, msg.file_id), None)
        self._reply(msg, status=0)

    def _h_set_view(self, msg: Message) -> None:
        disp, _etype_code, contiguous, blob_len = struct.unpack_from("<QIBI", msg.params, 0)
        head = struct.calcsize("<QIBI")
        desc = unpack_descriptor(msg.params[head:head + blob_len])
        with self._state_lock:
            self.views[(msg.client_id, msg.file_id)] = (desc, disp, bool(contiguous))
        self._reply(msg, status=0)

    def _view_for(self, client_id: int, file_id: int):
        with self._state_lock:
            return self.views.get((client_id, file_id), (None, 0, True))

    def _layout_for(self, file_id: int) -> FileLayout | None:
        with self._state_lock:
            return self.layouts.get(file_id)

    def _remember_layout(self, layout: FileLayout) -> None:
        with self._state_lock:
            self.layouts.setdefault(layout.file_id, layout)

    # -- data path -------------------------------------------------------------

    def _file_size(self, file_id: int, client_id: int) -> int:
        reply = self._control_query(self.sc_id, MsgType.GET_SIZE, client_id=client_id,
                                    file_id=file_id)
        if reply.status < 0:
            raise KeyError(f"file {file_id} unknown to the controller")
        (size,) = struct.unpack("<Q", reply.params)
        return size

    def _report_extent(self, file_id: int, client_id: int, end: int) -> None:
        self._control_query(self.sc_id, MsgType.GET_SIZE, client_id=client_id,
                            file_id=file_id, params=struct.pack("<Q", end))

    def _h_read(self, msg: Message) -> None:
        self._data_request(msg, writing=False)

    def _h_write(self, msg: Message) -> None:
        self._data_request(msg, writing=True)

    def _data_request(self, msg: Message, writing: bool) -> None:
        if msg.msg_class in (MsgClass.DI, MsgClass.BI):
            runs, inline, layout = unpack_subrequest(msg.params)
            self._remember_layout(layout)
            part_data = msg.data
            if msg.msg_class is MsgClass.BI:
                runs, part_data = self._broadcast_intersection(layout, runs, msg.data, inline, writing)
            self._serve_part(msg, layout, runs, writing, is_buddy=False,
                             n_remote=0, inline=inline, part_data=part_data)
            return
        real = self._resolve(msg)
        layout = self._layout_for(real) if real is not None else None
        if layout is None:
            self._error_ack(msg, Errno.UNKNOWN_FILE, f"file {msg.file_id} not open here")
            return
        view_offset, length, _at = unpack_rw(msg.params)
        runs = self._translate(msg, layout, view_offset, length, writing)
        inline = choose_transmission(length, self.cfg.inline_threshold) is Method.INLINE
        parts = split_runs_by_owner(layout, runs)
        local = parts.pop(self.cfg.server_id, [])
        remote_bytes = sum(r.length for part in parts.values() for r in part)
        n_remote = 0
        if remote_bytes:
            if layout.known_global:
                n_remote = len(parts)
                self.fragment_stats["directed"] += len(parts)
                for sid, part in parts.items():
                    data = _slice_part(msg.data, view_offset, part) if (writing and inline) else b""
                    self._send(Message(msg.msg_type, MsgClass.DI, self.cfg.server_id, sid,
                                       msg.client_id, layout.file_id, msg.request_id, 0,
                                       pack_subrequest(part, inline, layout), data))
            else:
                remote_runs = sorted((r for part in parts.values() for r in part),
                                     key=lambda r: r.view_offset)
                others = [s for s in self.server_ids if s != self.cfg.server_id]
                n_remote = len(others)
                self.fragment_stats["broadcast"] += 1
                data = _slice_part(msg.data, view_offset, remote_runs) if (writing and inline) else b""
                for sid in others:
                    self._send(Message(msg.msg_type, MsgClass.BI, self.cfg.server_id, sid,
                                       msg.client_id, layout.file_id, msg.request_id, 0,
                                       pack_subrequest(remote_runs, inline, layout), data))
        else:
            self.fragment_stats["local_only"] += 1
        part_data = _slice_part(msg.data, view_offset, local) if (writing and inline) else b""
        self._serve_part(msg, layout, local, writing, is_buddy=True,
                         n_remote=n_remote, inline=inline, part_data=part_data)

    def _broadcast_intersection(self, layout: FileLayout, runs: list[Run],
                                data: bytes, inline: bool, writing: bool):
        """Keep only the broadcast runs this server owns, slicing any inline
        payload (which is the concatenation of all broadcast runs)."""
        mine: list[Run] = []
        out = bytearray()
        pos = 0
        for r in runs:
            for s, e, owner in layout.owner_segments(r.abs_offset, r.abs_offset + r.length):
                if owner == self.cfg.server_id:
                    mine.append(Run(s, r.view_offset + (s - r.abs_offset), e - s))
                    if writing and inline:
                        off = pos + (s - r.abs_offset)
                        out += data[off:off + (e - s)]
            pos += r.length
        return mine, bytes(out)

    def _translate(self, msg: Message, layout: FileLayout, view_offset: int,
                   length: int, writing: bool) -> list[Run]:
        desc, disp, contiguous = self._view_for(msg.client_id, msg.file_id)
        if desc is None or contiguous:
            runs = [Run(disp + view_offset, view_offset, length)] if length else []
        else:
            runs = []
            pos = view_offset
            for r in enumerate_runs(desc, disp, view_offset, length):
                runs.append(Run(r.file_offset, pos, r.length))
                pos += r.length
        if not writing and runs:
            size = self._file_size(layout.file_id, msg.client_id)
            clipped = []
            for r in runs:
                if r.abs_offset >= size:
                    continue
                clipped.append(Run(r.abs_offset, r.view_offset,
                                   min(r.length, size - r.abs_offset)))
            runs = clipped
        return runs

    def _serve_part(self, msg: Message, layout: FileLayout, runs: list[Run],
                    writing: bool, is_buddy: bool, n_remote: int, inline: bool,
                    part_data: bytes = b"") -> None:
        part_bytes = sum(r.length for r in runs)
        plan = ACK_HAS_PLAN if is_buddy else 0
        if part_bytes == 0:
            self._ack_client(msg, 0, AckParams(flags=ACK_FINAL | plan, n_remote=n_remote))
            return
        key = (msg.client_id, msg.request_id)
        rwlock = self._rw_lock(layout.file_id)
        rwlock.acquire(exclusive=writing)
        granted = self.buffer.grant(key, part_bytes)
        try:
            if writing:
                self._serve_write(msg, layout, runs, granted, plan, n_remote, inline, part_data)
            else:
                self._serve_read(msg, layout, runs, granted, plan, n_remote, inline)
        finally:
            self.buffer.release(key)
            rwlock.release(exclusive=writing)

    def _serve_read(self, msg: Message, layout: FileLayout, runs: list[Run],
                    granted: int, plan: int, n_remote: int, inline: bool) -> None:
        chunks = _chunk_part(runs, granted)
        served = 0
        for i, chunk in enumerate(chunks):
            payload = bytearray()
            for run in chunk.runs:
                payload += self._read_local(layout, run.abs_offset, run.length)
            served += chunk.nbytes
            last = i == len(chunks) - 1
            ack = AckParams(
                flags=(ACK_FINAL | plan) if last else 0,
                n_remote=n_remote if last else 0,
                served_total=served if last else 0,
                pieces=tuple(Piece(r.view_offset, r.length) for r in chunk.runs),
            )
            self._send(Message(MsgType.ACK, MsgClass.ACK, self.cfg.server_id, msg.client_id,
                               msg.client_id, msg.file_id, msg.request_id, chunk.nbytes,
                               pack_ack(ack), bytes(payload) if inline else b""))
            if not inline:
                self._send(Message(MsgType.DATA, MsgClass.ACK, self.cfg.server_id,
                                   msg.client_id, msg.client_id, msg.file_id,
                                   msg.request_id, chunk.nbytes, b"", bytes(payload)))

    def _serve_write(self, msg: Message, layout: FileLayout, runs: list[Run],
                     granted: int, plan: int, n_remote: int, inline: bool,
                     part_data: bytes) -> None:
        chunks = _chunk_part(runs, granted)
        served = 0
        max_end = 0
        if inline:
            pos = 0
            for chunk in chunks:
                for run in chunk.runs:
                    self._write_local(layout, run.abs_offset, part_data[pos:pos + run.length])
                    pos += run.length
                    max_end = max(max_end, run.abs_offset + run.length)
                served += chunk.nbytes
        else:
            key = (msg.client_id, msg.request_id)
            q = self._register_waiter(*key)
            try:
                for chunk in chunks:
                    ack = AckParams(flags=ACK_WRITE_PULL,
                                    pieces=tuple(Piece(r.view_offset, r.length) for r in chunk.runs))
                    self._send(Message(MsgType.ACK, MsgClass.ACK, self.cfg.server_id,
                                       msg.client_id, msg.client_id, msg.file_id,
                                       msg.request_id, chunk.nbytes, pack_ack(ack)))
                    data_msg = q.get(timeout=30.0)
                    pos = 0
                    for run in chunk.runs:
                        self._write_local(layout, run.abs_offset,
                                          data_msg.data[pos:pos + run.length])
                        pos += run.length
                        max_end = max(max_end, run.abs_offset + run.length)
                    served += chunk.nbytes
            finally:
                self._drop_waiter(*key)
        if max_end:
            self._report_extent(layout.file_id, msg.client_id, max_end)
        self._ack_client(msg, 0, AckParams(flags=ACK_FINAL | plan, n_remote=n_remote,
                                           served_total=served))

    def _ack_client(self, msg: Message, status: int, ack: AckParams) -> None:
        self._send(Message(MsgType.ACK, MsgClass.ACK, self.cfg.server_id, msg.client_id,
                           msg.client_id, msg.file_id, msg.request_id, status, pack_ack(ack)))

    def _read_local(self, layout: FileLayout, start: int, length: int) -> bytes:
        disk = self.disks[self.bdl[0]]
        out = bytearray()
        for phys, _seg, seg_len in layout.physical_segments(self.cfg.server_id,
                                                            start, start + length):
            out += disk.read(layout.file_id, phys, seg_len)
        if len(out) != length:
            raise IOError(f"server {self.cfg.server_id} owns {len(out)} of the "
                          f"{length} bytes requested at {start}")
        return bytes(out)

    def _write_local(self, layout: FileLayout, start: int, data: bytes) -> None:
        disk = self.disks[self.bdl[0]]
        pos = 0
        for phys, _seg, seg_len in layout.physical_segments(self.cfg.server_id,
                                                            start, start + len(data)):
            disk.write(layout.file_id, phys, data[pos:pos + seg_len])
            pos += seg_len
        if pos != len(data):
            raise IOError(f"server {self.cfg.server_id} wrote {pos} of {len(data)} "
                          f"bytes at {start}")

    def _rw_lock(self, file_id: int) -> _RWLock:
        with self._state_lock:
            lock = self.rw_locks.get(file_id)
            if lock is None:
                lock = self.rw_locks[file_id] = _RWLock()
            return lock
