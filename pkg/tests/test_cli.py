import json
import socket
import threading
import time

import pytest

from parvio.cli import main


def free_ports(n):
    socks = [socket.create_server(("127.0.0.1", 0)) for _ in range(n)]
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


@pytest.fixture
def socket_config(tmp_path):
    p0, p1 = free_ports(2)
    cfg = tmp_path / "cluster.cfg"
    cfg.write_text(
        f"server 0 127.0.0.1:{p0} buffer=64k stripe=4k disks={tmp_path}/d0:0 sc cc\n"
        f"server 1 127.0.0.1:{p1} buffer=64k stripe=4k disks={tmp_path}/d1:0\n"
    )
    return str(cfg)


@pytest.fixture
def running_cluster(socket_config):
    done = {}

    def serve():
        done["rc"] = main(["serve", "--config", socket_config, "--timeout", "30"])

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    time.sleep(0.3)
    yield socket_config
    main(["shutdown", "--config", socket_config])
    t.join(timeout=10)


class TestCliSocketMode:
    def test_script_inspect_shutdown(self, running_cluster, tmp_path, capsys):
        script = tmp_path / "ops.txt"
        script.write_text(
            "open demo rdwr,create\n"
            "write 0 0001020304050607\n"
            "seek 0 0 set\n"
            "read 0 8\n"
            "size 0\n"
            "close 0\n"
        )
        rc = main(["script", "--config", running_cluster, "--file", str(script)])
        out = capsys.readouterr().out
        assert rc == 0
        assert "0001020304050607" in out
        assert "-> 8" in out

        rc = main(["inspect", "--config", running_cluster, "--file", "demo"])
        out = capsys.readouterr().out
        assert rc == 0
        table = json.loads(out)
        assert table["size"] == 8
        assert table["portions"]

    def test_script_error_exit_code(self, running_cluster, tmp_path, capsys):
        script = tmp_path / "bad.txt"
        script.write_text("open missing rdonly\n")
        rc = main(["script", "--config", running_cluster, "--file", str(script)])
        assert rc == 1


class TestCliConfigErrors:
    def test_missing_config_file(self, capsys):
        assert main(["regress", "--config", "/nonexistent.cfg"]) == 2

    def test_duplicate_server_id(self, tmp_path, capsys):
        cfg = tmp_path / "dup.cfg"
        cfg.write_text("server 0 inproc disks=/tmp/x\nserver 0 inproc disks=/tmp/y\n")
        assert main(["regress", "--config", str(cfg)]) == 2


class TestCliInproc:
    def test_regress_inproc(self, tmp_path, capsys):
        cfg = tmp_path / "inproc.cfg"
        cfg.write_text(
            f"server 0 inproc buffer=64k stripe=4k disks={tmp_path}/r0:0 sc cc\n"
            f"server 1 inproc buffer=64k stripe=4k disks={tmp_path}/r1:0\n"
        )
        rc = main(["regress", "--config", str(cfg)])
        out = capsys.readouterr().out
        assert rc == 0, out
        assert out.count("PASS") == 10

    def test_bench_inproc_csv(self, tmp_path, capsys):
        cfg = tmp_path / "bench.cfg"
        cfg.write_text(
            f"server 0 inproc buffer=64k stripe=4k disks={tmp_path}/b0:0 sc cc\n"
            f"server 1 inproc buffer=64k stripe=4k disks={tmp_path}/b1:0\n"
        )
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({
            "workload": {"file_size": 32768, "clients": 2, "iterations": 2},
            "server_counts": [1, 2],
        }))
        out_csv = tmp_path / "report.csv"
        rc = main(["bench", "--config", str(cfg), "--spec", str(spec),
                   "--out", str(out_csv)])
        assert rc == 0
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0] == "clients,servers,max,min,mean,variance,acks,datas,bytes"
        assert len(lines) == 3
