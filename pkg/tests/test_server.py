import threading
import time

import pytest

from parvio.client import Exists, ModeConflict, NoSuchFile, connect
from parvio.protocol import MsgType, Run
from parvio.server import (
    CREATE,
    EXCL,
    RDONLY,
    RDWR,
    WRONLY,
    BufferManager,
    FileLayout,
    FittedRange,
    split_runs_by_owner,
)


class TestBufferManager:
    def test_grant_caps_at_capacity(self):
        bm = BufferManager(8 << 10)
        assert bm.grant("a", 20 << 10) == 8 << 10
        bm.release("a")

    def test_small_grant_immediate(self):
        bm = BufferManager(8 << 10)
        assert bm.grant("x", 1) == 1
        bm.release("x")

    def test_second_full_request_waits_fcfs(self):
        bm = BufferManager(8 << 10)
        order = []
        bm.grant("first", 8 << 10)

        def second():
            bm.grant("second", 8 << 10)
            order.append("second-granted")
            bm.release("second")

        t = threading.Thread(target=second)
        t.start()
        time.sleep(0.05)
        assert order == []
        order.append("first-released")
        bm.release("first")
        t.join(timeout=2)
        assert order == ["first-released", "second-granted"]

    def test_strict_arrival_order(self):
        bm = BufferManager(100)
        bm.grant("hog", 100)
        log = []

        def want(key, n):
            bm.grant(key, n)
            log.append(key)
            bm.release(key)

        threads = []
        for key, n in [("big", 100), ("small", 1)]:
            t = threading.Thread(target=want, args=(key, n), daemon=True)
            t.start()
            time.sleep(0.05)
            threads.append(t)
        # "small" would fit right away but arrived after "big": both wait
        assert log == []
        bm.release("hog")
        for t in threads:
            t.join(timeout=2)
        assert log == ["big", "small"]


class TestLayoutMapping:
    def test_striped_owner_round_robin(self):
        lay = FileLayout(1, "f", "striped", 4, (0, 1))
        segs = list(lay.owner_segments(0, 16))
        assert segs == [(0, 4, 0), (4, 8, 1), (8, 12, 0), (12, 16, 1)]

    def test_striped_physical_offsets(self):
        lay = FileLayout(1, "f", "striped", 4, (0, 1))
        assert list(lay.physical_segments(0, 0, 16)) == [(0, 0, 4), (4, 8, 4)]
        assert list(lay.physical_segments(1, 0, 16)) == [(0, 4, 4), (4, 12, 4)]

    def test_fitted_ranges_and_tail(self):
        lay = FileLayout(
            2, "g", "fitted", 4, (0, 1),
            (FittedRange(0, 6, 1), FittedRange(6, 10, 0)),
        )
        assert list(lay.owner_segments(0, 12)) == [(0, 6, 1), (6, 10, 0), (10, 12, 0)]
        # server 1 stores its fitted run at physical 0; server 0's fitted
        # bytes start at 0 and tail stripes follow its fitted total
        assert list(lay.physical_segments(1, 0, 6)) == [(0, 0, 6)]
        assert list(lay.physical_segments(0, 6, 12)) == [(0, 6, 4), (4, 10, 2)]

    def test_split_runs_by_owner(self):
        lay = FileLayout(1, "f", "striped", 4, (0, 1))
        parts = split_runs_by_owner(lay, [Run(2, 100, 8)])
        assert parts[0] == [Run(2, 100, 2), Run(8, 106, 2)]
        assert parts[1] == [Run(4, 102, 4)]

    def test_portions_report(self):
        lay = FileLayout(1, "f", "striped", 4, (0, 1))
        ports = lay.portions(0, 10, "p")
        assert [(p["start"], p["end"], p["physical_offset"]) for p in ports] == [
            (0, 4, 0), (8, 10, 4)
        ]


class TestOpenModes:
    def test_create_and_reopen(self, cluster2):
        s = connect(cluster2)
        h = s.open("modes1", RDWR | CREATE)
        s.write(h, b"abcdef")
        s.close(h)
        h2 = s.open("modes1", RDONLY)
        buf = bytearray(6)
        s.read(h2, buf, 6)
        assert bytes(buf) == b"abcdef"

    def test_create_excl_on_existing(self, cluster2):
        s = connect(cluster2)
        s.open("modes2", RDWR | CREATE)
        with pytest.raises(Exists):
            s.open("modes2", RDWR | CREATE | EXCL)

    def test_rdonly_create_conflict(self, cluster2):
        s = connect(cluster2)
        with pytest.raises(ModeConflict):
            s.open("modes3", RDONLY | CREATE)

    def test_open_missing(self, cluster2):
        s = connect(cluster2)
        with pytest.raises(NoSuchFile):
            s.open("never-created", RDWR)

    def test_wronly_then_read_fails(self, cluster2):
        from parvio.client import NotReadable

        s = connect(cluster2)
        h = s.open("modes4", WRONLY | CREATE)
        s.write(h, b"zz")
        with pytest.raises(NotReadable):
            s.read(h, bytearray(2), 2)


class TestStripedRoundTrip:
    def test_write_read_across_servers(self, cluster2):
        s = connect(cluster2)
        h = s.open("big", RDWR | CREATE)
        data = bytes(range(256)) * 64  # 16 KiB over 4 KiB stripes on 2 servers
        st = s.write(h, data)
        assert st.bytes_transferred == len(data)
        s.seek(h, 0)
        buf = bytearray(len(data))
        st = s.read(h, buf, len(data))
        assert st.bytes_transferred == len(data)
        assert bytes(buf) == data

    def test_sparse_write_reads_zeros(self, cluster2):
        s = connect(cluster2)
        h = s.open("sparse", RDWR | CREATE)
        s.write_at(h, 10_000, b"tail")
        buf = bytearray(8)
        s.read_at(h, 0, buf, 8)
        assert bytes(buf) == b"\0" * 8
        assert s.get_size(h) == 10_004

    def test_read_clipped_at_eof(self, cluster2):
        s = connect(cluster2)
        h = s.open("short", RDWR | CREATE)
        s.write(h, b"0123456789")
        s.seek(h, 4)
        buf = bytearray(32)
        st = s.read(h, buf, 32)
        assert st.bytes_transferred == 6
        assert bytes(buf[:6]) == b"456789"

    def test_zero_byte_read_single_ack(self, cluster2):
        s = connect(cluster2)
        h = s.open("empty-read", RDWR | CREATE)
        s.write(h, b"xyz")
        stats = cluster2.stats
        stats.reset()
        buf = bytearray(4)
        st = s.read_at(h, 3, buf, 4)  # starts exactly at EOF
        assert st.bytes_transferred == 0
        assert stats.count(MsgType.ACK) == 1
        assert stats.count(MsgType.DATA) == 0


class TestMessageCountLaw:
    @pytest.mark.parametrize("buffer_bytes", [1 << 10, 8 << 10, 64 << 10])
    def test_acks_and_datas_per_chunk(self, make_cluster, buffer_bytes):
        cluster = make_cluster(1, buffer=buffer_bytes, stripe=1 << 20)
        s = connect(cluster)
        h = s.open("chunky", RDWR | CREATE)
        total = 100_000
        s.write(h, b"\xab" * total)
        s.seek(h, 0)
        stats = cluster.stats
        stats.reset()
        buf = bytearray(total)
        s.read(h, buf, total)
        expected = -(-total // buffer_bytes)
        assert stats.count(MsgType.ACK) == expected
        assert stats.count(MsgType.DATA) == expected
        assert bytes(buf) == b"\xab" * total

    def test_write_data_count_matches_law(self, make_cluster):
        cluster = make_cluster(1, buffer=8 << 10, stripe=1 << 20)
        s = connect(cluster)
        h = s.open("wchunk", RDWR | CREATE)
        total = 50_000
        stats = cluster.stats
        stats.reset()
        s.write(h, b"\xcd" * total)
        expected = -(-total // (8 << 10))
        assert stats.count(MsgType.DATA) == expected
        # write pulls plus one completion acknowledge
        assert stats.count(MsgType.ACK) == expected + 1


class TestFragmenter:
    def make_striped_file(self, cluster, nbytes, name="frag"):
        s = connect(cluster)
        h = s.open(name, RDWR | CREATE)
        s.write(h, bytes(i % 251 for i in range(nbytes)))
        return s, h

    def test_local_only_when_fully_local(self, make_cluster):
        cluster = make_cluster(1)
        s, h = self.make_striped_file(cluster, 10_000)
        buddy = cluster.server(s.buddy)
        buddy.fragment_stats.update(directed=0, broadcast=0, local_only=0)
        s.seek(h, 0)
        buf = bytearray(10_000)
        s.read(h, buf, 10_000)
        assert buddy.fragment_stats == {"directed": 0, "broadcast": 0, "local_only": 1}

    def test_broadcast_when_layout_unknown(self, make_cluster):
        cluster = make_cluster(4, stripe=1024)
        s, h = self.make_striped_file(cluster, 64 << 10)
        buddy = cluster.server(s.buddy)
        stats = cluster.stats
        buddy.fragment_stats.update(directed=0, broadcast=0, local_only=0)
        stats.reset()
        s.seek(h, 0)
        buf = bytearray(64 << 10)
        st = s.read(h, buf, 64 << 10)
        assert st.bytes_transferred == 64 << 10
        assert buddy.fragment_stats["broadcast"] == 1
        assert buddy.fragment_stats["directed"] == 0
        # no acknowledge or data relayed through the buddy from a foe
        foes = [sid for sid in cluster.server_ids if sid != s.buddy]
        for foe in foes:
            assert stats.by_edge[(foe, s.buddy, MsgType.ACK)] == 0
            assert stats.by_edge[(foe, s.buddy, MsgType.DATA)] == 0


class TestControllerServices:
    def test_round_robin_buddies(self, make_cluster):
        cluster = make_cluster(2)
        buddies = [connect(cluster).buddy for _ in range(3)]
        assert buddies == [0, 1, 0]

    def test_connect_to_non_controller(self, make_cluster):
        from parvio.client import NoController, Session

        cluster = make_cluster(2)
        session = Session(cluster, cc_id=1, sc_id=0)  # server 1 is not the CC
        with pytest.raises(NoController):
            session.connect()

    def test_admin_layout_dump_matches_fragmenter(self, make_cluster):
        cluster = make_cluster(2, stripe=8)
        s = connect(cluster)
        h = s.open("lay", RDWR | CREATE)
        s.write(h, bytes(range(32)))
        table = s.admin("layout", {"name": "lay"})
        assert table["size"] == 32
        portions = [(p["server_id"], p["start"], p["end"]) for p in table["portions"]]
        assert (0, 0, 8) in portions and (1, 8, 16) in portions
        covered = sorted((p[1], p[2]) for p in portions)
        assert covered[0][0] == 0 and covered[-1][1] == 32

    def test_shutdown_completes_in_flight(self, make_cluster):
        cluster = make_cluster(2, latency_ms_per_mib=50.0, stripe=1 << 20)
        s = connect(cluster)
        h = s.open("inflight", RDWR | CREATE)
        req = s.iwrite(h, b"\xee" * (2 << 20))
        admin = connect(cluster)
        time.sleep(0.01)
        admin.shutdown_cluster()
        st = s.wait(req)
        assert st.bytes_transferred == 2 << 20
        cluster.drain_wait()


class TestSetSizeAndRemove:
    def test_truncate_then_regrow_zeroes(self, cluster2):
        s = connect(cluster2)
        h = s.open("trunc", RDWR | CREATE)
        s.write(h, b"\xff" * 9000)
        assert s.set_size(h, 100) == 100
        assert s.get_size(h) == 100
        s.set_size(h, 9000)
        buf = bytearray(9000)
        got = s.read_at(h, 0, buf, 9000)
        assert got.bytes_transferred == 9000
        assert bytes(buf[:100]) == b"\xff" * 100
        assert bytes(buf[100:]) == b"\0" * 8900

    def test_preallocate_never_shrinks(self, cluster2):
        s = connect(cluster2)
        h = s.open("prealloc", RDWR | CREATE)
        s.write(h, b"x" * 500)
        assert s.preallocate(h, 100) == 500
        assert s.preallocate(h, 900) == 900

    def test_remove_then_open_fails(self, cluster2):
        s = connect(cluster2)
        h = s.open("gone", RDWR | CREATE)
        s.write(h, b"data")
        s.close(h)
        s.remove("gone")
        with pytest.raises(NoSuchFile):
            s.open("gone", RDONLY)
        with pytest.raises(NoSuchFile):
            s.remove("gone")
