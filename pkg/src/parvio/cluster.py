"""Cluster assembly from a config file, for loopback and socket modes.

Config line format (one server per line, '#' comments):

    server <id> <addr> buffer=<bytes> disks=<path>:<lat_ms_per_mib>[:<cap>][,...]
        [stripe=<bytes>] [inline=<bytes>] [sc] [cc]

``addr`` is ``host:port`` for socket mode or ``inproc`` for a cluster that
runs entirely inside one process.  Exactly one server carries ``sc`` (the
system controller) and one ``cc`` (the connection controller); if no
flags appear, server 0 takes both roles.  Sizes accept k/m/g suffixes.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

from .server import DiskConfig, ServerConfig, StorageServer
from .transport import CLIENT_ID_BASE, LoopbackHub, SocketEndpoint, TransportStats


class ConfigError(Exception):
    pass


def parse_size(text: str) -> int:
    text = text.strip().lower()
    mult = 1
    if text and text[-1] in "kmg":
        mult = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}[text[-1]]
        text = text[:-1]
    try:
        return int(text) * mult
    except ValueError:
        raise ConfigError(f"bad size {text!r}") from None


def parse_config(text: str) -> list[ServerConfig]:
    servers: list[ServerConfig] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "server" or len(parts) < 3:
            raise ConfigError(f"line {lineno}: expected 'server <id> <addr> ...'")
        try:
            sid = int(parts[1])
        except ValueError:
            raise ConfigError(f"line {lineno}: bad server id {parts[1]!r}") from None
        cfg = ServerConfig(server_id=sid, address=parts[2], disks=[])
        for tok in parts[3:]:
            if tok == "sc":
                cfg.is_sc = True
            elif tok == "cc":
                cfg.is_cc = True
            elif tok.startswith("buffer="):
                cfg.buffer_capacity = parse_size(tok[7:])
            elif tok.startswith("stripe="):
                cfg.stripe_size = parse_size(tok[7:])
            elif tok.startswith("inline="):
                cfg.inline_threshold = parse_size(tok[7:])
            elif tok.startswith("disks="):
                for spec in tok[6:].split(","):
                    fields = spec.split(":")
                    if not fields or not fields[0]:
                        raise ConfigError(f"line {lineno}: bad disk spec {spec!r}")
                    disk = DiskConfig(fields[0])
                    if len(fields) > 1 and fields[1]:
                        disk.latency_ms_per_mib = float(fields[1])
                    if len(fields) > 2 and fields[2]:
                        disk.capacity = parse_size(fields[2])
                    cfg.disks.append(disk)
            else:
                raise ConfigError(f"line {lineno}: unknown token {tok!r}")
        if not cfg.disks:
            raise ConfigError(f"line {lineno}: server {sid} has no disks")
        servers.append(cfg)
    if not servers:
        raise ConfigError("config defines no servers")
    ids = [s.server_id for s in servers]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate server ids in {ids}")
    if not any(s.is_sc for s in servers):
        servers[0].is_sc = True
    if not any(s.is_cc for s in servers):
        servers[0].is_cc = True
    if sum(s.is_sc for s in servers) > 1 or sum(s.is_cc for s in servers) > 1:
        raise ConfigError("at most one sc and one cc server allowed")
    return servers


def load_config(path: str) -> list[ServerConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


@dataclass
class Cluster:
    """A running set of storage servers plus client attachment helpers."""

    servers: list[StorageServer]
    hub: LoopbackHub | None = None
    addr_map: dict[int, tuple[str, int]] = field(default_factory=dict)
    _client_ids: "itertools.count" = field(default_factory=lambda: itertools.count(CLIENT_ID_BASE))
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def server_ids(self) -> list[int]:
        return [s.cfg.server_id for s in self.servers]

    @property
    def sc_id(self) -> int:
        return next(s.cfg.server_id for s in self.servers if s.cfg.is_sc)

    @property
    def cc_id(self) -> int:
        return next(s.cfg.server_id for s in self.servers if s.cfg.is_cc)

    @property
    def stats(self) -> TransportStats | None:
        return self.hub.stats if self.hub is not None else None

    def client_endpoint(self):
        with self._lock:
            node_id = next(self._client_ids)
        if self.hub is not None:
            return self.hub.attach(node_id)
        return SocketEndpoint(node_id, self.addr_map, listen=False)

    def server(self, server_id: int) -> StorageServer:
        return next(s for s in self.servers if s.cfg.server_id == server_id)

    def shutdown(self) -> None:
        for s in self.servers:
            s.stop()
        for s in self.servers:
            s.join()

    def drain_wait(self, timeout: float = 10.0) -> None:
        for s in self.servers:
            s.join(timeout)


def start_cluster(configs: list[ServerConfig]) -> Cluster:
    """Bring up all servers on a shared loopback hub or on sockets."""
    inproc = all(c.address == "inproc" for c in configs)
    if not inproc and any(c.address == "inproc" for c in configs):
        raise ConfigError("mix of inproc and socket addresses")
    server_ids = [c.server_id for c in configs]
    sc_id = next(c.server_id for c in configs if c.is_sc)
    cc_id = next(c.server_id for c in configs if c.is_cc)
    servers = []
    if inproc:
        hub = LoopbackHub()
        for cfg in configs:
            ep = hub.attach(cfg.server_id)
            servers.append(StorageServer(cfg, ep, server_ids, sc_id, cc_id))
        cluster = Cluster(servers, hub=hub)
    else:
        addr_map = {}
        for cfg in configs:
            host, _, port = cfg.address.partition(":")
            if not port:
                raise ConfigError(f"server {cfg.server_id}: address needs host:port")
            addr_map[cfg.server_id] = (host, int(port))
        for cfg in configs:
            ep = SocketEndpoint(cfg.server_id, addr_map, listen=True)
            servers.append(StorageServer(cfg, ep, server_ids, sc_id, cc_id))
        cluster = Cluster(servers, addr_map=addr_map)
    for s in servers:
        s.start()
    return cluster


def inproc_config(n_servers: int, tmpdir: str, *, buffer: int = 1 << 20,
                  stripe: int = 1 << 16, inline: int = 0,
                  latency_ms_per_mib: float = 0.0) -> list[ServerConfig]:
    """Convenience loopback topology with one disk per server under tmpdir."""
    return [
        ServerConfig(
            server_id=i,
            address="inproc",
            disks=[DiskConfig(f"{tmpdir}/vs{i}-disk0", latency_ms_per_mib)],
            buffer_capacity=buffer,
            stripe_size=stripe,
            inline_threshold=inline,
            is_sc=(i == 0),
            is_cc=(i == 0),
        )
        for i in range(n_servers)
    ]
