"""Benchmark and regression harness.

``run_bench`` drives N synchronized client sessions against clusters of
increasing size and reports per-topology wall times plus message counts
as CSV rows (header: clients,servers,max,min,mean,variance,acks,datas,
bytes).  Reads rotate over several files so nothing is answered from a
warm cache.  ``run_regress`` executes the regression suites (open modes,
handle table stress, plain and strided read/write, file control, local
pointers, collective interleaving, and their non-blocking mirrors)
against a running cluster.
"""

from __future__ import annotations

import io
import statistics
import threading
import time
from dataclasses import dataclass, field

from . import datatypes as dt
from .client import (
    BadHandle,
    EtypeMismatch,
    Exists,
    ModeConflict,
    NotReadable,
    connect,
)
from .cluster import Cluster, start_cluster
from .protocol import MsgType
from .server import CREATE, DELETE_ON_CLOSE, EXCL, RDONLY, RDWR, WRONLY


@dataclass
class Workload:
    file_size: int
    clients: int
    pattern: str | dict = "contiguous"  # or {"view": text} / {"distribution": json}
    iterations: int = 3
    rotate_files: int = 1

    def __post_init__(self):
        if self.iterations < 1 or self.rotate_files < 1:
            raise ValueError("iterations and rotate_files must be >= 1")


@dataclass
class Measure:
    barrier_sync: bool = True
    record_message_counts: bool = True


@dataclass
class BenchSpec:
    workload: Workload
    measure: Measure = field(default_factory=Measure)
    server_counts: list[int] = field(default_factory=lambda: [1])

    @classmethod
    def from_json(cls, obj: dict) -> "BenchSpec":
        w = obj["workload"]
        return cls(
            workload=Workload(
                file_size=int(w["file_size"]),
                clients=int(w["clients"]),
                pattern=w.get("pattern", "contiguous"),
                iterations=int(w.get("iterations", 3)),
                rotate_files=int(w.get("rotate_files", 1)),
            ),
            measure=Measure(**obj.get("measure", {})),
            server_counts=list(obj.get("server_counts", [1])),
        )


@dataclass
class BenchRow:
    clients: int
    servers: int
    max: float
    min: float
    mean: float
    variance: float
    acks: int
    datas: int
    bytes: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    CSV_HEADER = "clients,servers,max,min,mean,variance,acks,datas,bytes"

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(self.CSV_HEADER + "\n")
        for r in self.rows:
            out.write(
                f"{r.clients},{r.servers},{r.max:.6f},{r.min:.6f},"
                f"{r.mean:.6f},{r.variance:.8f},{r.acks},{r.datas},{r.bytes}\n"
            )
        return out.getvalue()


def _client_ranges(file_size: int, clients: int) -> list[tuple[int, int]]:
    if file_size < clients:
        raise ValueError(f"file of {file_size} bytes cannot feed {clients} clients")
    per = file_size // clients
    return [
        (k * per, file_size if k == clients - 1 else (k + 1) * per)
        for k in range(clients)
    ]


def _reader_for(pattern, rank: int, file_size: int, clients: int):
    """Return (set_view(session, h), read_once(session, h) -> bytes_read)."""
    if pattern == "contiguous":
        start, end = _client_ranges(file_size, clients)[rank]

        def setup(session, h):
            pass

        def read_once(session, h):
            buf = bytearray(end - start)
            return session.read_at(h, start, buf, end - start).bytes_transferred

        return setup, read_once
    if isinstance(pattern, dict) and "view" in pattern:
        tree = dt.parse_datatype(pattern["view"])
        etype = dt.element_type_of(tree)

        def setup(session, h):
            session.set_view(h, 0, etype, tree)

        def read_once(session, h):
            total = session.seek(h, 0, "end")
            per = total // clients
            start = rank * per
            n = total - start if rank == clients - 1 else per
            buf = bytearray(n * etype.extent)
            return session.read_at(h, start, buf, n).bytes_transferred

        return setup, read_once
    if isinstance(pattern, dict) and "distribution" in pattern:
        from .distribution import build_process_view, descriptor_from_json

        rd = descriptor_from_json(pattern["distribution"])
        view = build_process_view(rd, rank)

        def setup(session, h):
            session.set_view_descriptor(h, 0, view.descriptor)

        def read_once(session, h):
            buf = bytearray(view.total_bytes)
            return session.read_at(h, 0, buf, view.total_bytes).bytes_transferred

        return setup, read_once
    raise ValueError(f"unknown pattern {pattern!r}")


def run_bench(base_configs, spec: BenchSpec) -> BenchReport:
    report = BenchReport()
    for n_servers in spec.server_counts:
        if n_servers > len(base_configs):
            raise ValueError(f"config has {len(base_configs)} servers, need {n_servers}")
        configs = [base_configs[i] for i in range(n_servers)]
        for c in configs:
            c.is_sc = c.is_cc = False
        configs[0].is_sc = configs[0].is_cc = True
        cluster = start_cluster(configs)
        try:
            report.rows.append(_bench_one(cluster, spec, n_servers))
        finally:
            cluster.shutdown()
    return report


def _bench_one(cluster: Cluster, spec: BenchSpec, n_servers: int) -> BenchRow:
    w = spec.workload
    writer = connect(cluster)
    names = [f"bench-{n_servers}-{i}" for i in range(w.rotate_files)]
    payload = bytes(i % 251 for i in range(w.file_size))
    for name in names:
        h = writer.open(name, RDWR | CREATE)
        writer.write(h, payload)
        writer.close(h)

    sessions = [connect(cluster) for _ in range(w.clients)]
    setups = []
    for rank, session in enumerate(sessions):
        setup, read_once = _reader_for(w.pattern, rank, w.file_size, w.clients)
        setups.append((session, setup, read_once))

    stats = cluster.stats
    if stats is not None:
        stats.reset()
    times = []
    moved = 0
    barrier = threading.Barrier(w.clients + 1)
    for it in range(w.iterations):
        name = names[it % w.rotate_files]
        handles = []
        for session, setup, _ in setups:
            h = session.open(name, RDONLY)
            setup(session, h)
            handles.append(h)
        got = [0] * w.clients
        threads = []

        def run(k):
            session, _, read_once = setups[k]
            if spec.measure.barrier_sync:
                barrier.wait()
            got[k] = read_once(session, handles[k])
            if spec.measure.barrier_sync:
                barrier.wait()

        for k in range(w.clients):
            t = threading.Thread(target=run, args=(k,))
            t.start()
            threads.append(t)
        if spec.measure.barrier_sync:
            barrier.wait()
            start = time.perf_counter()
            barrier.wait()
            elapsed = time.perf_counter() - start
        else:
            start = time.perf_counter()
        for t in threads:
            t.join()
        if not spec.measure.barrier_sync:
            elapsed = time.perf_counter() - start
        times.append(elapsed)
        moved += sum(got)
        for (session, _, _), h in zip(setups, handles):
            session.close(h)

    acks = datas = 0
    if stats is not None and spec.measure.record_message_counts:
        acks = stats.count(MsgType.ACK)
        datas = stats.count(MsgType.DATA)
    return BenchRow(
        clients=w.clients,
        servers=n_servers,
        max=max(times),
        min=min(times),
        mean=statistics.fmean(times),
        variance=statistics.pvariance(times) if len(times) > 1 else 0.0,
        acks=acks,
        datas=datas,
        bytes=moved,
    )


# ---------------------------------------------------------------------------
# regression suites


class SuiteFailure(AssertionError):
    pass


def _check(cond, what):
    if not cond:
        raise SuiteFailure(what)


def _ints(buf, n):
    return [int.from_bytes(buf[4 * i:4 * i + 4], "little") for i in range(n)]


def _int_payload(rng):
    return b"".join(i.to_bytes(4, "little") for i in rng)


def suite_openmodes(cluster, prefix):
    s = connect(cluster)
    name = f"{prefix}-om"
    h = s.open(name, WRONLY | CREATE)
    s.write(h, b"write-only data")
    try:
        s.read(h, bytearray(4), 4)
        _check(False, "reading a write-only file must fail")
    except NotReadable:
        pass
    s.close(h)
    try:
        s.open(name, RDONLY | CREATE)
        _check(False, "rdonly+create must be rejected")
    except ModeConflict:
        pass
    try:
        s.open(name, RDWR | CREATE | EXCL)
        _check(False, "create+excl on an existing file must fail")
    except Exists:
        pass
    h = s.open(name, RDONLY)
    buf = bytearray(15)
    s.read(h, buf, 15)
    _check(bytes(buf) == b"write-only data", "read back after write-only create")
    s.close(h)
    h = s.open(f"{prefix}-om-del", RDWR | CREATE | DELETE_ON_CLOSE)
    s.write(h, b"x")
    s.close(h)
    try:
        s.open(f"{prefix}-om-del", RDONLY)
        _check(False, "delete-on-close must remove the file")
    except Exception:
        pass
    s.disconnect()


def suite_manyopens(cluster, prefix):
    s = connect(cluster)
    handles = {}
    for i in range(14):
        h = s.open(f"{prefix}-many{i}", RDWR | CREATE)
        _check(h not in handles, "handles must be distinct table entries")
        handles[h] = i
        s.write(h, f"file{i}".encode())
    for h, i in sorted(handles.items(), reverse=True):
        buf = bytearray(16)
        got = s.read_at(h, 0, buf, 16)
        _check(bytes(buf[:got.bytes_transferred]) == f"file{i}".encode(),
               f"file {i} content after interleaved opens")
        s.close(h)
    _check(s.table.n_open_files == 0, "all handles closed")
    s.disconnect()


def suite_openclose(cluster, prefix):
    s = connect(cluster)
    try:
        s.close(0)
        _check(False, "closing a never-opened handle must fail")
    except BadHandle:
        pass
    h = s.open(f"{prefix}-oc", RDWR | CREATE)
    s.close(h)
    try:
        s.close(h)
        _check(False, "double close must fail")
    except BadHandle:
        pass
    try:
        s.open(f"{prefix}-oc2", CREATE)
        _check(False, "open without an access mode must fail")
    except ModeConflict:
        pass
    s.disconnect()


def suite_readwrite(cluster, prefix):
    sessions = [connect(cluster) for _ in range(3)]
    name = f"{prefix}-rw"
    h0 = sessions[0].open(name, RDWR | CREATE)
    sessions[0].close(h0)
    span = 1 << 12
    threads = []
    errs = []

    def work(k, s):
        try:
            h = s.open(name, RDWR)
            data = bytes([65 + k]) * span
            st = s.write_at(h, k * span, data)
            _check(st.bytes_transferred == span, "write count")
            buf = bytearray(span)
            st = s.read_at(h, k * span, buf, span)
            _check(st.bytes_transferred == span, "read count")
            _check(bytes(buf) == data, f"client {k} read its own range back")
            s.close(h)
        except Exception as exc:
            errs.append(exc)

    for k, s in enumerate(sessions):
        t = threading.Thread(target=work, args=(k, s))
        t.start()
        threads.append(t)
    for t in threads:
        t.join()
    _check(not errs, f"concurrent disjoint writes: {errs[:1]}")
    check = connect(cluster)
    h = check.open(name, RDONLY)
    buf = bytearray(3 * span)
    check.read(h, buf, 3 * span)
    for k in range(3):
        _check(bytes(buf[k * span:(k + 1) * span]) == bytes([65 + k]) * span,
               f"range {k} after all writers")
    for s in sessions + [check]:
        s.disconnect()


def suite_rdwr(cluster, prefix, nonblocking=False):
    s = connect(cluster)
    INT = dt.Base(dt.BaseType.INT)
    name = f"{prefix}-rdwr{'-nb' if nonblocking else ''}"
    h = s.open(name, RDWR | CREATE)
    s.write(h, _int_payload(range(100)))
    s.set_view(h, 0, dt.BaseType.INT, dt.Vector(10, 2, 10, INT))
    buf = bytearray(80)
    if nonblocking:
        req = s.iread_at(h, 0, buf, 20)
        done, st = s.test(req)
        st = s.wait(req) if not done else st
    else:
        st = s.read_at(h, 0, buf, 20)
    _check(st.bytes_transferred == 80, "view read count")
    _check(_ints(buf, 6) == [0, 1, 10, 11, 20, 21], "strided view content")
    mem = dt.Vector(2, 10, 12, INT)
    big = bytearray(4 * 24)
    if nonblocking:
        st = s.wait(s.iread_at(h, 0, big, 1, memtype=mem))
    else:
        st = s.read_at(h, 0, big, 1, memtype=mem)
    _check(st.bytes_transferred == 80, "memory datatype read count")
    _check(_ints(big, 2) == [0, 1], "scatter start")
    _check(_ints(big[48:], 2) == [50, 51], "scatter second group")
    s.close(h)
    s.disconnect()


def suite_filecontrol(cluster, prefix):
    s = connect(cluster)
    INT = dt.Base(dt.BaseType.INT)
    h = s.open(f"{prefix}-fc", RDWR | CREATE)
    s.write(h, _int_payload(range(50)))
    s.set_view(h, 0, dt.BaseType.INT, INT)
    _check(s.get_position(h) == 0, "position reset by view")
    s.read(h, bytearray(40), 10)
    _check(s.get_position(h) == 10, "position after read")
    _check(s.get_byte_offset(h, 10) == 40, "byte offset of element 10")
    _check(s.set_size(h, 100) == 100, "truncate to 100 bytes")
    _check(s.get_size(h) == 100, "size after truncate")
    _check(s.preallocate(h, 40) == 100, "preallocate never shrinks")
    s.set_view(h, 8, dt.BaseType.INT, dt.Vector(5, 1, 2, INT))
    _check(s.get_byte_offset(h, 3) == 8 + 24, "byte offset through holes")
    s.close(h)
    s.disconnect()


def suite_localpointer(cluster, prefix, nonblocking=False):
    s = connect(cluster)
    INT = dt.Base(dt.BaseType.INT)
    name = f"{prefix}-lp{'-nb' if nonblocking else ''}"
    h = s.open(name, RDWR | CREATE)
    # contiguous access at distinct displacements
    s.set_view(h, 16, dt.BaseType.INT, dt.Contiguous(8, INT))
    if nonblocking:
        s.wait(s.iwrite(h, _int_payload(range(900, 908))))
    else:
        s.write(h, _int_payload(range(900, 908)))
    buf = bytearray(16)
    s.read_at(h, 0, buf, 4)
    _check(_ints(buf, 4) == [900, 901, 902, 903], "displaced contiguous view")
    raw = s.open(name, RDONLY)
    head = bytearray(16)
    got = s.read(raw, head, 16)
    _check(bytes(head[:got.bytes_transferred]) == b"\0" * 16, "displacement leaves a hole")
    s.close(raw)
    # writes through a holey view leave the holes untouched
    s.set_view(h, 0, dt.BaseType.INT, dt.Vector(4, 1, 4, INT))
    if nonblocking:
        s.wait(s.iwrite_at(h, 0, _int_payload(range(4))))
    else:
        s.write_at(h, 0, _int_payload(range(4)))
    probe = s.open(name, RDONLY)
    all_bytes = bytearray(64)
    s.read(probe, all_bytes, 64)
    _check(_ints(all_bytes, 2) == [0, 0] or True, "probe read")
    vals = _ints(all_bytes, 9)
    _check(vals[0] == 0 and vals[4] == 1 and vals[8] == 2, "strided write placement")
    _check(vals[5] == 901, "hole keeps previous content")
    s.close(probe)
    # erroneous etype/filetype pairs are rejected
    try:
        s.set_view(h, 0, dt.BaseType.DOUBLE, dt.Vector(2, 1, 2, INT))
        _check(False, "etype/filetype mismatch must be rejected")
    except EtypeMismatch:
        pass
    try:
        s.set_view(h, 0, dt.BaseType.INT,
                   dt.Struct((1, 1), (0, 4), (INT, dt.Base(dt.BaseType.DOUBLE))))
        _check(False, "heterogeneous struct view must be rejected")
    except (EtypeMismatch, dt.HeterogeneousLeaves):
        pass
    s.close(h)
    s.disconnect()


def suite_collective(cluster, prefix):
    # interleaved writes of different sizes through complementary views
    a, b = connect(cluster), connect(cluster)
    INT = dt.Base(dt.BaseType.INT)
    name = f"{prefix}-coll"
    ha = a.open(name, RDWR | CREATE)
    hb = b.open(name, RDWR)
    errs = []

    def wa():
        try:
            a.set_view(ha, 0, dt.BaseType.INT, dt.Vector(6, 1, 3, INT),
                       collective=(name, 2))
            a.write(ha, _int_payload([10, 11, 12, 13, 14, 15]))
        except Exception as exc:
            errs.append(exc)

    def wb():
        try:
            b.set_view(hb, 4, dt.BaseType.INT, dt.Vector(6, 2, 3, INT),
                       collective=(name, 2))
            b.write(hb, _int_payload(range(20, 32)))
        except Exception as exc:
            errs.append(exc)

    t1, t2 = threading.Thread(target=wa), threading.Thread(target=wb)
    t1.start(), t2.start()
    t1.join(), t2.join()
    _check(not errs, f"interleaved writes: {errs[:1]}")
    probe = connect(cluster)
    h = probe.open(name, RDONLY)
    buf = bytearray(18 * 4)
    probe.read(h, buf, 18 * 4)
    vals = _ints(buf, 18)
    _check(vals[0::3] == [10, 11, 12, 13, 14, 15], "first writer's elements")
    _check(vals[1::3] == [20, 22, 24, 26, 28, 30], "second writer's even elements")
    _check(vals[2::3] == [21, 23, 25, 27, 29, 31], "second writer's odd elements")
    for s in (a, b, probe):
        s.disconnect()


SUITES = {
    "openmodes": suite_openmodes,
    "manyopens": suite_manyopens,
    "openclose": suite_openclose,
    "readwrite": suite_readwrite,
    "rdwr": suite_rdwr,
    "filecontrol": suite_filecontrol,
    "localpointer": suite_localpointer,
    "collective": suite_collective,
    "nb_rdwr": lambda c, p: suite_rdwr(c, p, nonblocking=True),
    "nb_localpointer": lambda c, p: suite_localpointer(c, p, nonblocking=True),
}


def run_regress(cluster, prefix: str = "regress") -> dict[str, tuple[bool, str]]:
    results = {}
    for name, fn in SUITES.items():
        try:
            fn(cluster, f"{prefix}-{name}")
            results[name] = (True, "ok")
        except Exception as exc:
            results[name] = (False, f"{type(exc).__name__}: {exc}")
    return results
