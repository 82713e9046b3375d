"""Client interface library: sessions, handles, views and data access.

A session connects to the connection controller, which assigns a buddy
server; all external requests go to the buddy, while acknowledges and
data arrive directly from every serving server.  The library owns all
per-handle state (position, view, modes): servers never track client file
pointers.

Blocking and non-blocking calls share one per-session worker thread, so
operations execute in issue order; non-blocking calls return immediately
with a request handle for test/wait.  Offsets and counts in the public
API are in element-type units; the engine below works in bytes.
"""

from __future__ import annotations

import json
import struct
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from queue import Empty, Queue

from . import datatypes as dt
from .protocol import (
    Message,
    Method,
    MsgClass,
    MsgType,
    choose_transmission,
    pack_str,
    unpack_ack,
)
from .server import (
    APPEND,
    CREATE,
    DELETE_ON_CLOSE,
    EXCL,
    RDONLY,
    RDWR,
    SEQUENTIAL,
    UNIQUE_OPEN,
    WRONLY,
    Errno,
)
from .viewdesc import (
    AccessDesc,
    EtypeMismatch,
    absolute_offset,
    build_descriptor,
    byte_to_etype,
    count_accessible,
    enumerate_runs,
    etype_to_byte,
    pack_descriptor,
)

SEEK_SET = "set"
SEEK_CUR = "cur"
SEEK_END = "end"


class ClientError(Exception):
    pass


class BadHandle(ClientError):
    pass


class NotReadable(ClientError):
    pass


class NotWritable(ClientError):
    pass


class BadWhence(ClientError):
    pass


class UnsupportedRepresentation(ClientError):
    pass


class Unsupported(ClientError):
    pass


class UnfinishedRequest(ClientError):
    pass


class UnknownRequest(ClientError):
    pass


class NoController(ClientError):
    pass


class Refused(ClientError):
    pass


class ServerError(ClientError):
    def __init__(self, errno: Errno, detail: str = ""):
        super().__init__(f"{errno.name}: {detail}" if detail else errno.name)
        self.errno = errno


class Exists(ServerError):
    pass


class NoSuchFile(ServerError):
    pass


class ModeConflict(ServerError):
    pass


class UnknownFile(ServerError):
    pass


class IOFailure(ServerError):
    pass


_ERRNO_MAP = {
    Errno.EXISTS: Exists,
    Errno.NO_SUCH_FILE: NoSuchFile,
    Errno.MODE_CONFLICT: ModeConflict,
    Errno.UNKNOWN_FILE: UnknownFile,
    Errno.IO_FAILURE: IOFailure,
}


def _raise_status(status: int, detail: bytes = b"") -> None:
    if status >= 0:
        return
    errno = Errno(status) if status in set(int(e) for e in Errno) else Errno.IO_FAILURE
    cls = _ERRNO_MAP.get(errno, ServerError)
    raise cls(errno, detail.decode(errors="replace"))


@dataclass
class IoStatus:
    file_ref: int
    bytes_transferred: int


@dataclass
class IoRequest:
    request_id: int
    file_ref: int


@dataclass
class View:
    disp: int
    etype: dt.BaseType
    filetype: dt.Node | None
    desc: AccessDesc | None
    contiguous: bool
    is_set: bool


@dataclass
class FileState:
    server_file_id: int
    name: str
    access_mode: int
    view: View
    access_id: int = 0  # per-open id carried in the wire file_id field
    position: int = 0  # bytes within the view
    already_accessed: bool = False
    atomicity: bool = True


class HandleTable:
    """Dense integer handles; storage starts at 10 slots and grows by 5.

    Closed slots are not reused while any file stays open; once the last
    file closes the table is torn down and indices restart from zero.
    """

    INITIAL = 10
    GROWTH = 5

    def __init__(self):
        self.capacity = self.INITIAL
        self.slots: list[FileState | None] = [None] * self.INITIAL
        self.n_open_files = 0
        self._high = 0

    def append(self, fs: FileState) -> int:
        if self._high == self.capacity:
            self.capacity += self.GROWTH
            self.slots.extend([None] * self.GROWTH)
        idx = self._high
        self.slots[idx] = fs
        self._high += 1
        self.n_open_files += 1
        return idx

    def get(self, handle: int) -> FileState:
        if not 0 <= handle < self._high or self.slots[handle] is None:
            raise BadHandle(f"handle {handle} is not open")
        return self.slots[handle]

    def delete(self, handle: int) -> None:
        self.get(handle)
        self.slots[handle] = None
        self.n_open_files -= 1
        if self.n_open_files == 0:
            self.capacity = self.INITIAL
            self.slots = [None] * self.INITIAL
            self._high = 0


def default_view() -> View:
    return View(0, dt.BaseType.BYTE, None, None, True, False)


class Session:
    """One client connection to the cluster."""

    def __init__(self, cluster_or_endpoint, *, cc_id: int, sc_id: int,
                 inline_thresholds: dict[int, int] | None = None):
        if hasattr(cluster_or_endpoint, "client_endpoint"):
            self.endpoint = cluster_or_endpoint.client_endpoint()
        else:
            self.endpoint = cluster_or_endpoint
        self.cc_id = cc_id
        self.sc_id = sc_id
        self.inline_thresholds = inline_thresholds or {}
        self.client_id = self.endpoint.node_id
        self.buddy = -1
        self.connected = False
        self.table = HandleTable()
        self._next_access = 1
        self._next_rid = 1
        self._rid_lock = threading.Lock()
        self._waiters: dict[int, Queue] = {}
        self._waiter_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=1)
        self._futures: dict[int, Future] = {}
        self._stop = threading.Event()
        self._rx = threading.Thread(target=self._recv_loop, daemon=True)
        self._rx.start()

    # -- plumbing -------------------------------------------------------------

    def _recv_loop(self) -> None:
        while not self._stop.is_set():
            msg = self.endpoint.recv(timeout=0.05)
            if msg is None:
                continue
            with self._waiter_lock:
                q = self._waiters.get(msg.request_id)
            if q is not None:
                q.put(msg)

    def _rid(self) -> int:
        with self._rid_lock:
            rid = self._next_rid
            self._next_rid += 1
            return rid

    def _open_channel(self, rid: int) -> Queue:
        q: Queue = Queue()
        with self._waiter_lock:
            self._waiters[rid] = q
        return q

    def _close_channel(self, rid: int) -> None:
        with self._waiter_lock:
            self._waiters.pop(rid, None)

    def _request(self, msg_type: MsgType, recipient: int, *, file_id: int = 0,
                 status: int = 0, params: bytes = b"", data: bytes = b"",
                 timeout: float = 30.0) -> Message:
        """One-shot control request: send and wait for the single reply."""
        rid = self._rid()
        q = self._open_channel(rid)
        try:
            self.endpoint.send(Message(msg_type, MsgClass.ER, self.client_id, recipient,
                                       self.client_id, file_id, rid, status, params, data))
            try:
                return q.get(timeout=timeout)
            except Empty:
                raise IOFailure(Errno.IO_FAILURE,
                                f"no reply to {msg_type.name} within {timeout}s") from None
        finally:
            self._close_channel(rid)

    def _require_connected(self) -> None:
        if not self.connected:
            raise Refused("session is not connected")

    # -- connection -----------------------------------------------------------

    def connect(self) -> "Session":
        if self.connected:
            raise Refused("already connected")
        try:
            reply = self._request(MsgType.CONNECT, self.cc_id)
        except Exception as exc:
            raise NoController(f"connection controller unreachable: {exc}") from None
        if reply.status < 0:
            if reply.status == int(Errno.NOT_CONTROLLER):
                raise NoController("target server is not the connection controller")
            _raise_status(reply.status, reply.data)
        cid, buddy = struct.unpack("<II", reply.params)
        self.client_id = cid
        self.buddy = buddy
        self.connected = True
        return self

    def disconnect(self) -> None:
        self._require_connected()
        reply = self._request(MsgType.DISCONNECT, self.cc_id)
        self.connected = False
        # queued (not yet running) operations fail; the running one finishes
        self._pool.shutdown(wait=True, cancel_futures=True)
        self._stop.set()
        _raise_status(reply.status, reply.data)
        self.endpoint.close()

    # -- file manipulation ------------------------------------------------------

    def open(self, name: str, flags: int) -> int:
        self._require_connected()
        access_id = self._next_access
        self._next_access += 1
        params = struct.pack("<I", flags) + pack_str(name)
        reply = self._request(MsgType.OPEN, self.buddy, file_id=access_id, params=params)
        _raise_status(reply.status, reply.data)
        file_id, size = struct.unpack("<IQ", reply.params)
        fs = FileState(file_id, name, flags, default_view(), access_id=access_id)
        if flags & APPEND:
            fs.position = size
        return self.table.append(fs)

    def close(self, handle: int) -> None:
        fs = self.table.get(handle)
        reply = self._request(MsgType.CLOSE, self.buddy, file_id=fs.access_id)
        _raise_status(reply.status, reply.data)
        self.table.delete(handle)
        if fs.access_mode & DELETE_ON_CLOSE:
            self.remove(fs.name)

    def remove(self, name: str) -> None:
        self._require_connected()
        reply = self._request(MsgType.REMOVE, self.buddy, params=pack_str(name))
        _raise_status(reply.status, reply.data)

    def set_size(self, handle: int, size: int, *, only_grow: bool = False) -> int:
        fs = self.table.get(handle)
        reply = self._request(MsgType.SET_SIZE, self.buddy, file_id=fs.access_id,
                              params=struct.pack("<QB", size, 1 if only_grow else 0))
        _raise_status(reply.status, reply.data)
        (new,) = struct.unpack("<Q", reply.params)
        return new

    def preallocate(self, handle: int, size: int) -> int:
        return self.set_size(handle, size, only_grow=True)

    def get_size(self, handle: int) -> int:
        fs = self.table.get(handle)
        reply = self._request(MsgType.GET_SIZE, self.buddy, file_id=fs.access_id)
        _raise_status(reply.status, reply.data)
        (size,) = struct.unpack("<Q", reply.params)
        return size

    # -- views ---------------------------------------------------------------

    def set_view(self, handle: int, disp: int, etype: dt.BaseType, filetype: dt.Node,
                 representation: str = "native",
                 collective: tuple[str, int] | None = None) -> None:
        fs = self.table.get(handle)
        if representation != "native":
            raise UnsupportedRepresentation(f"representation {representation!r}")
        tree = dt.normalize(filetype)
        if dt.element_type_of(tree, require_homogeneous=True) is not etype:
            raise EtypeMismatch(
                f"etype {etype.label} does not match the view's element type"
            )
        desc, contiguous = build_descriptor(tree, etype=etype)
        blob = pack_descriptor(desc)
        params = struct.pack("<QIBI", disp, 0, 1 if contiguous else 0, len(blob)) + blob
        reply = self._request(MsgType.SET_VIEW, self.buddy, file_id=fs.access_id,
                              params=params)
        _raise_status(reply.status, reply.data)
        fs.view = View(disp, etype, filetype, desc, contiguous, True)
        fs.position = 0
        if collective is not None:
            key, need = collective
            self.admin("barrier", {"key": key, "need": need, "tag": etype.label},
                       recipient=self.sc_id)

    def set_view_descriptor(self, handle: int, disp: int, desc: AccessDesc,
                            etype: dt.BaseType = dt.BaseType.BYTE,
                            contiguous: bool = False) -> None:
        """Install a prebuilt access descriptor as the view (used for
        compiler runtime-descriptor views, which arrive already lowered)."""
        fs = self.table.get(handle)
        blob = pack_descriptor(desc)
        params = struct.pack("<QIBI", disp, 0, 1 if contiguous else 0, len(blob)) + blob
        reply = self._request(MsgType.SET_VIEW, self.buddy, file_id=fs.access_id,
                              params=params)
        _raise_status(reply.status, reply.data)
        fs.view = View(disp, etype, None, desc, contiguous, True)
        fs.position = 0

    # -- data access ------------------------------------------------------------

    def _etype_bytes(self, fs: FileState, count: int, memtype: dt.Node | None) -> int:
        if memtype is None:
            return etype_to_byte(count, fs.view.etype)
        mem_desc, _ = build_descriptor(dt.normalize(memtype))
        return count * mem_desc.total_actual

    def _mem_desc(self, memtype: dt.Node | None) -> AccessDesc | None:
        if memtype is None:
            return None
        desc, contiguous = build_descriptor(dt.normalize(memtype))
        return None if contiguous else desc

    def read(self, handle: int, buf: bytearray, count: int,
             memtype: dt.Node | None = None) -> IoStatus:
        return self._submit_and_wait(self._op_read, handle, buf, count, memtype, None)

    def write(self, handle: int, data, count: int | None = None,
              memtype: dt.Node | None = None) -> IoStatus:
        return self._submit_and_wait(self._op_write, handle, data, count, memtype, None)

    def read_at(self, handle: int, offset: int, buf: bytearray, count: int,
                memtype: dt.Node | None = None) -> IoStatus:
        return self._submit_and_wait(self._op_read, handle, buf, count, memtype, offset)

    def write_at(self, handle: int, offset: int, data, count: int | None = None,
                 memtype: dt.Node | None = None) -> IoStatus:
        return self._submit_and_wait(self._op_write, handle, data, count, memtype, offset)

    def iread(self, handle: int, buf: bytearray, count: int,
              memtype: dt.Node | None = None) -> IoRequest:
        return self._submit(self._op_read, handle, buf, count, memtype, None)

    def iwrite(self, handle: int, data, count: int | None = None,
               memtype: dt.Node | None = None) -> IoRequest:
        return self._submit(self._op_write, handle, data, count, memtype, None)

    def iread_at(self, handle: int, offset: int, buf: bytearray, count: int,
                 memtype: dt.Node | None = None) -> IoRequest:
        return self._submit(self._op_read, handle, buf, count, memtype, offset)

    def iwrite_at(self, handle: int, offset: int, data, count: int | None = None,
                  memtype: dt.Node | None = None) -> IoRequest:
        return self._submit(self._op_write, handle, data, count, memtype, offset)

    def test(self, req: IoRequest) -> tuple[bool, IoStatus]:
        fut = self._futures.get(req.request_id)
        if fut is None:
            raise UnknownRequest(f"request {req.request_id}")
        if not fut.done():
            return False, IoStatus(-1, 0)
        return True, self.wait(req)

    def wait(self, req: IoRequest) -> IoStatus:
        from concurrent.futures import CancelledError

        fut = self._futures.get(req.request_id)
        if fut is None:
            raise UnknownRequest(f"request {req.request_id}")
        try:
            status = fut.result()
        except CancelledError:
            raise Refused("session disconnected before the request ran") from None
        finally:
            self._futures.pop(req.request_id, None)
        return status

    def _submit(self, op, handle, *args) -> IoRequest:
        self._require_connected()
        fs = self.table.get(handle)
        rid = self._rid()
        fut = self._pool.submit(op, fs, handle, rid, *args)
        self._futures[rid] = fut
        return IoRequest(rid, handle)

    def _submit_and_wait(self, op, handle, *args) -> IoStatus:
        req = self._submit(op, handle, *args)
        return self.wait(req)

    def _view_len_bytes(self, fs: FileState) -> int:
        size = self._size_of(fs)
        view = fs.view
        if view.desc is None or view.contiguous:
            return max(0, size - view.disp)
        return count_accessible(view.desc, view.disp, size)

    def _size_of(self, fs: FileState) -> int:
        reply = self._request(MsgType.GET_SIZE, self.buddy, file_id=fs.access_id)
        _raise_status(reply.status, reply.data)
        (size,) = struct.unpack("<Q", reply.params)
        return size

    def _op_read(self, fs: FileState, handle: int, rid: int, buf: bytearray,
                 count: int, memtype: dt.Node | None, at: int | None) -> IoStatus:
        if not fs.access_mode & (RDONLY | RDWR):
            raise NotReadable(f"file {fs.name!r} is not open for reading")
        nbytes = self._etype_bytes(fs, count, memtype)
        view_offset = fs.position if at is None else etype_to_byte(at, fs.view.etype)
        got = self._transfer(fs, rid, MsgType.READ, view_offset, nbytes,
                             read_buf=buf, mem_desc=self._mem_desc(memtype))
        fs.already_accessed = True
        if at is None:
            fs.position = view_offset + got
        return IoStatus(handle, got)

    def _op_write(self, fs: FileState, handle: int, rid: int, data,
                  count: int | None, memtype: dt.Node | None, at: int | None) -> IoStatus:
        if not fs.access_mode & (WRONLY | RDWR):
            raise NotWritable(f"file {fs.name!r} is not open for writing")
        mem_desc = self._mem_desc(memtype)
        if count is None:
            nbytes = len(data)
            if memtype is not None:
                raise ValueError("count is required with a memory datatype")
        else:
            nbytes = self._etype_bytes(fs, count, memtype)
        payload = self._gather(bytes(data), nbytes, mem_desc)
        view_offset = fs.position if at is None else etype_to_byte(at, fs.view.etype)
        got = self._transfer(fs, rid, MsgType.WRITE, view_offset, nbytes,
                             write_data=payload)
        fs.already_accessed = True
        if at is None:
            fs.position = view_offset + got
        return IoStatus(handle, got)

    def _gather(self, data: bytes, nbytes: int, mem_desc: AccessDesc | None) -> bytes:
        """Collect the linear transfer payload out of the user buffer."""
        if mem_desc is None:
            if len(data) < nbytes:
                raise ValueError(f"buffer holds {len(data)} of {nbytes} bytes")
            return data[:nbytes]
        out = bytearray()
        for run in enumerate_runs(mem_desc, 0, 0, nbytes):
            out += data[run.file_offset:run.file_offset + run.length]
        return bytes(out)

    def _scatter(self, buf: bytearray, lin_offset: int, payload: bytes,
                 mem_desc: AccessDesc | None) -> None:
        """Place transfer bytes at their linear offset, through the memory
        pattern when one is set."""
        if mem_desc is None:
            buf[lin_offset:lin_offset + len(payload)] = payload
            return
        pos = 0
        for run in enumerate_runs(mem_desc, 0, lin_offset, len(payload)):
            buf[run.file_offset:run.file_offset + run.length] = payload[pos:pos + run.length]
            pos += run.length

    def _transfer(self, fs: FileState, rid: int, msg_type: MsgType, view_offset: int,
                  nbytes: int, read_buf: bytearray | None = None,
                  write_data: bytes = b"", mem_desc: AccessDesc | None = None) -> int:
        """Run one read or write request to completion, any server order."""
        writing = msg_type is MsgType.WRITE
        threshold = self.inline_thresholds.get(self.buddy, 0)
        inline = writing and choose_transmission(nbytes, threshold) is Method.INLINE
        if read_buf is not None and mem_desc is None and len(read_buf) < nbytes:
            raise ValueError(f"read buffer holds {len(read_buf)} of {nbytes} bytes")
        q = self._open_channel(rid)
        try:
            params = struct.pack("<QQQ", view_offset, nbytes, 1 if writing else 0)
            self.endpoint.send(Message(msg_type, MsgClass.ER, self.client_id, self.buddy,
                                       self.client_id, fs.access_id, rid, 0, params,
                                       write_data if inline else b""))
            finals = 0
            finals_needed = None
            transferred = 0
            pending_pieces: dict[int, list] = {}
            while (finals_needed is None or finals < finals_needed
                   or any(pending_pieces.values())):
                try:
                    msg = q.get(timeout=30.0)
                except Empty:
                    raise IOFailure(Errno.IO_FAILURE,
                                    "transfer stalled: no acknowledge within 30s") from None
                if msg.msg_type is MsgType.DATA:
                    pieces = pending_pieces[msg.sender_id].pop(0)
                    self._place_pieces(read_buf, view_offset, pieces, msg.data, mem_desc)
                    continue
                ack = unpack_ack(msg.params)
                if msg.status < 0:
                    _raise_status(msg.status, msg.data)
                if ack.write_pull:
                    chunk = self._gather_pieces(write_data, view_offset, ack.pieces)
                    self.endpoint.send(Message(MsgType.DATA, MsgClass.ACK, self.client_id,
                                               msg.sender_id, self.client_id,
                                               fs.access_id, rid, len(chunk), b"", chunk))
                    continue
                if not writing and ack.pieces:
                    if msg.data:  # inline read chunk
                        self._place_pieces(read_buf, view_offset, ack.pieces, msg.data, mem_desc)
                    else:
                        pending_pieces.setdefault(msg.sender_id, []).append(ack.pieces)
                if ack.final:
                    finals += 1
                    transferred += ack.served_total
                    if ack.has_plan:
                        finals_needed = 1 + ack.n_remote
            return transferred
        finally:
            self._close_channel(rid)

    def _place_pieces(self, buf: bytearray | None, base: int, pieces, payload: bytes,
                      mem_desc: AccessDesc | None) -> None:
        if buf is None:
            return
        pos = 0
        for piece in pieces:
            self._scatter(buf, piece.view_offset - base, payload[pos:pos + piece.length],
                          mem_desc)
            pos += piece.length

    def _gather_pieces(self, data: bytes, base: int, pieces) -> bytes:
        out = bytearray()
        for piece in pieces:
            off = piece.view_offset - base
            out += data[off:off + piece.length]
        return bytes(out)

    # -- positioning ------------------------------------------------------------

    def seek(self, handle: int, offset: int, whence: str = SEEK_SET) -> int:
        fs = self.table.get(handle)
        delta = etype_to_byte(offset, fs.view.etype)
        if whence == SEEK_SET:
            pos = delta
        elif whence == SEEK_CUR:
            pos = fs.position + delta
        elif whence == SEEK_END:
            pos = self._view_len_bytes(fs) + delta
        else:
            raise BadWhence(f"whence {whence!r}")
        if pos < 0:
            raise BadWhence(f"position {pos} before start of view")
        fs.position = pos
        return byte_to_etype(pos, fs.view.etype)

    def get_position(self, handle: int) -> int:
        fs = self.table.get(handle)
        return byte_to_etype(fs.position, fs.view.etype)

    def get_byte_offset(self, handle: int, offset: int) -> int:
        fs = self.table.get(handle)
        nbytes = etype_to_byte(offset, fs.view.etype)
        view = fs.view
        if view.desc is None or view.contiguous:
            return view.disp + nbytes
        return view.disp + absolute_offset(view.desc, nbytes)

    # -- status -------------------------------------------------------------------

    def get_count(self, status: IoStatus, etype: dt.BaseType | None = None) -> int:
        if status.file_ref < 0:
            raise UnfinishedRequest("request has not finished")
        fs = self.table.get(status.file_ref)
        return byte_to_etype(status.bytes_transferred, etype or fs.view.etype)

    def get_atomicity(self, handle: int) -> bool:
        self.table.get(handle)
        return True

    def set_atomicity(self, handle: int, flag: bool) -> None:
        self.table.get(handle)
        if not flag:
            raise Unsupported("only atomic mode is supported")

    def sync(self, handle: int) -> None:
        fs = self.table.get(handle)
        self.admin("sync", {}, recipient=self.buddy, file_id=fs.access_id)

    # -- hints and administration ---------------------------------------------------

    def hint(self, kind: int, body: dict) -> None:
        self._require_connected()
        reply = self._request(MsgType.HINT, self.buddy, status=kind,
                              data=json.dumps(body).encode())
        _raise_status(reply.status, reply.data)

    def admin(self, subkind: str, body: dict, *, recipient: int | None = None,
              file_id: int = 0) -> dict:
        params = pack_str(subkind) + (json.dumps(body).encode() if body else b"")
        reply = self._request(MsgType.ADMIN, recipient if recipient is not None else self.sc_id,
                              file_id=file_id, params=params, timeout=60.0)
        if reply.status == int(Errno.NOT_CONTROLLER):
            raise NoController("target server is not a controller")
        if reply.status == int(Errno.BAD_REQUEST) and subkind == "barrier":
            raise EtypeMismatch("collective participants disagree")
        _raise_status(reply.status, reply.data)
        return json.loads(reply.data.decode()) if reply.data else {}

    def shutdown_cluster(self) -> None:
        reply = self._request(MsgType.SHUTDOWN, self.sc_id, timeout=60.0)
        _raise_status(reply.status, reply.data)


def connect(cluster, system_id: int = 0) -> Session:
    """Open a session against a running cluster object (loopback or CLI).

    ``system_id`` is reserved for selecting among multiple systems; only
    system 0 exists here.
    """
    if system_id != 0:
        raise NoController(f"no system {system_id}")
    thresholds = {s.cfg.server_id: s.cfg.inline_threshold for s in cluster.servers}
    session = Session(cluster, cc_id=cluster.cc_id, sc_id=cluster.sc_id,
                      inline_thresholds=thresholds)
    return session.connect()


# ---------------------------------------------------------------------------
# command-file driver


FLAG_NAMES = {
    "rdonly": RDONLY,
    "rdwr": RDWR,
    "wronly": WRONLY,
    "create": CREATE,
    "excl": EXCL,
    "delete_on_close": DELETE_ON_CLOSE,
    "unique": UNIQUE_OPEN,
    "sequential": SEQUENTIAL,
    "append": APPEND,
}


def parse_flags(text: str) -> int:
    flags = 0
    for part in text.split(","):
        part = part.strip()
        if part not in FLAG_NAMES:
            raise ValueError(f"unknown open flag {part!r}")
        flags |= FLAG_NAMES[part]
    return flags


def run_command_file(session: Session, text: str) -> list[str]:
    """Execute one operation per line against an open session.

    Commands (offsets in etype units; ``-1`` keeps the file pointer,
    matching the compatibility surface):

        open <name> <flags>            e.g. open data rdwr,create
        view <h> <disp> <etype> <type> e.g. view 0 0 int vector(10,2,10;int)
        write <h> <hex> [<at>]
        read <h> <count> [<at>]
        seek <h> <offset> <set|cur|end>
        pos <h> | size <h> | setsize <h> <n> | prealloc <h> <n>
        close <h> | remove <name> | sync <h>

    Returns one result line per command.
    """
    out: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        op, *args = line.split()
        try:
            if op == "open":
                h = session.open(args[0], parse_flags(args[1]))
                out.append(f"open {args[0]} -> handle {h}")
            elif op == "view":
                h, disp, etype, text_type = int(args[0]), int(args[1]), args[2], args[3]
                session.set_view(h, disp, dt.BaseType.from_label(etype),
                                 dt.parse_datatype(text_type))
                out.append(f"view {h} set")
            elif op == "write":
                h = int(args[0])
                data = bytes.fromhex(args[1])
                at = int(args[2]) if len(args) > 2 else -1
                st = (session.write(h, data) if at < 0
                      else session.write_at(h, at, data))
                out.append(f"write {h} -> {st.bytes_transferred} bytes")
            elif op == "read":
                h, count = int(args[0]), int(args[1])
                at = int(args[2]) if len(args) > 2 else -1
                fs = session.table.get(h)
                buf = bytearray(etype_to_byte(count, fs.view.etype))
                st = (session.read(h, buf, count) if at < 0
                      else session.read_at(h, at, buf, count))
                out.append(f"read {h} -> {bytes(buf[:st.bytes_transferred]).hex()}")
            elif op == "seek":
                h = int(args[0])
                pos = session.seek(h, int(args[1]), args[2])
                out.append(f"seek {h} -> {pos}")
            elif op == "pos":
                out.append(f"pos {args[0]} -> {session.get_position(int(args[0]))}")
            elif op == "size":
                out.append(f"size {args[0]} -> {session.get_size(int(args[0]))}")
            elif op == "setsize":
                out.append(f"setsize -> {session.set_size(int(args[0]), int(args[1]))}")
            elif op == "prealloc":
                out.append(f"prealloc -> {session.preallocate(int(args[0]), int(args[1]))}")
            elif op == "close":
                session.close(int(args[0]))
                out.append(f"close {args[0]}")
            elif op == "remove":
                session.remove(args[0])
                out.append(f"remove {args[0]}")
            elif op == "sync":
                session.sync(int(args[0]))
                out.append(f"sync {args[0]}")
            else:
                raise ValueError(f"unknown command {op!r}")
        except Exception as exc:
            out.append(f"line {lineno}: error: {exc}")
    return out
