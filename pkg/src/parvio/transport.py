"""Message transports: in-process loopback and TCP sockets.

Both transports move encoded frames between named nodes and expose the
same endpoint contract: ``send(msg)`` delivers a Message to its
recipient's inbox, ``recv()`` blocks on the local inbox.  Frames always
pass through the codec, so loopback runs exercise the exact bytes that
sockets would carry.  Socket frames are length-delimited with a u32
little-endian prefix.

Node ids: storage servers use their configured small integers; client
nodes are assigned ids at CLIENT_ID_BASE and above by the connection
controller.
"""

from __future__ import annotations

import socket
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from queue import Empty, Queue

from .protocol import Message, MsgClass, MsgType, decode, encode

CLIENT_ID_BASE = 1000


class TransportError(Exception):
    pass


@dataclass
class TransportStats:
    """Message counts kept by the transport for reporting and tests."""

    by_type: Counter = field(default_factory=Counter)
    by_class: Counter = field(default_factory=Counter)
    by_edge: Counter = field(default_factory=Counter)  # (sender, recipient, type)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def record(self, msg: Message) -> None:
        with self.lock:
            self.by_type[msg.msg_type] += 1
            self.by_class[msg.msg_class] += 1
            self.by_edge[(msg.sender_id, msg.recipient_id, msg.msg_type)] += 1

    def snapshot(self) -> dict:
        with self.lock:
            return {
                "by_type": {t.name: n for t, n in self.by_type.items()},
                "by_class": {c.name: n for c, n in self.by_class.items()},
            }

    def count(self, msg_type: MsgType) -> int:
        with self.lock:
            return self.by_type[msg_type]

    def reset(self) -> None:
        with self.lock:
            self.by_type.clear()
            self.by_class.clear()
            self.by_edge.clear()


class Endpoint:
    """One node's attachment to a transport."""

    def __init__(self, node_id: int):
        self.node_id = node_id
        self.inbox: Queue = Queue()
        self.closed = False

    def send(self, msg: Message) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> Message | None:
        try:
            return self.inbox.get(timeout=timeout)
        except Empty:
            return None

    def close(self) -> None:
        self.closed = True


class LoopbackHub:
    """Single-process transport: queues keyed by node id."""

    def __init__(self):
        self.stats = TransportStats()
        self._nodes: dict[int, "LoopbackEndpoint"] = {}
        self._lock = threading.Lock()

    def attach(self, node_id: int) -> "LoopbackEndpoint":
        ep = LoopbackEndpoint(node_id, self)
        with self._lock:
            if node_id in self._nodes:
                raise TransportError(f"node {node_id} already attached")
            self._nodes[node_id] = ep
        return ep

    def detach(self, node_id: int) -> None:
        with self._lock:
            self._nodes.pop(node_id, None)

    def deliver(self, msg: Message) -> None:
        frame = encode(msg)
        with self._lock:
            target = self._nodes.get(msg.recipient_id)
        if target is None or target.closed:
            raise TransportError(f"no node {msg.recipient_id} attached")
        self.stats.record(msg)
        target.inbox.put(decode(frame))


class LoopbackEndpoint(Endpoint):
    def __init__(self, node_id: int, hub: LoopbackHub):
        super().__init__(node_id)
        self.hub = hub

    def send(self, msg: Message) -> None:
        self.hub.deliver(msg)

    def close(self) -> None:
        super().close()
        self.hub.detach(self.node_id)


# ---------------------------------------------------------------------------
# sockets

_LEN = struct.Struct("<I")


def _send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(_LEN.pack(len(frame)) + frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def _recv_frame(sock: socket.socket) -> bytes | None:
    head = _recv_exact(sock, _LEN.size)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    return _recv_exact(sock, n)


class SocketEndpoint(Endpoint):
    """TCP endpoint. Servers listen; peers are dialed lazily by address.

    The first frame on every dialed connection is an identification
    message (ADMIN/DI, status carries the dialer's node id), letting the
    accepting side route replies back over the same connection.
    """

    def __init__(self, node_id: int, addr_map: dict[int, tuple[str, int]],
                 listen: bool = True):
        super().__init__(node_id)
        self.addr_map = dict(addr_map)
        self.stats = TransportStats()
        self._conns: dict[int, socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        if listen:
            host, port = self.addr_map[node_id]
            srv = socket.create_server((host, port))
            srv.settimeout(0.2)
            self._listener = srv
            t = threading.Thread(target=self._accept_loop, daemon=True)
            t.start()
            self._threads.append(t)

    @property
    def bound_port(self) -> int:
        assert self._listener is not None
        return self._listener.getsockname()[1]

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self.closed:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn: socket.socket) -> None:
        peer_bound = False
        while not self.closed:
            try:
                frame = _recv_frame(conn)
            except OSError:
                break
            if frame is None:
                break
            msg = decode(frame)
            if not peer_bound:
                with self._conn_lock:
                    self._conns.setdefault(msg.sender_id, conn)
                peer_bound = True
            if msg.msg_type is MsgType.ADMIN and msg.params == b"ident":
                continue
            self.inbox.put(msg)
        try:
            conn.close()
        except OSError:
            pass

    def _connection_to(self, node_id: int) -> socket.socket:
        with self._conn_lock:
            conn = self._conns.get(node_id)
            if conn is not None:
                return conn
        if node_id not in self.addr_map:
            raise TransportError(f"no address for node {node_id}")
        conn = socket.create_connection(self.addr_map[node_id])
        ident = Message(MsgType.ADMIN, MsgClass.DI, self.node_id, node_id, params=b"ident")
        _send_frame(conn, encode(ident))
        threading.Thread(target=self._reader, args=(conn,), daemon=True).start()
        with self._conn_lock:
            self._conns.setdefault(node_id, conn)
            return self._conns[node_id]

    def send(self, msg: Message) -> None:
        conn = self._connection_to(msg.recipient_id)
        self.stats.record(msg)
        try:
            _send_frame(conn, encode(msg))
        except OSError as exc:
            raise TransportError(f"send to {msg.recipient_id} failed: {exc}") from None

    def close(self) -> None:
        super().close()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._conn_lock:
            for conn in self._conns.values():
                try:
                    conn.close()
                except OSError:
                    pass
            self._conns.clear()
