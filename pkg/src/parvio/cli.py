"""Command line entry points.

    parvio serve    --config F              run the servers of a config
    parvio bench    --config F --spec S.json [--out report.csv]
    parvio regress  --config F              run the regression suites
    parvio inspect  --config F --file NAME  dump a file's layout table
    parvio script   --config F --file S     run a client command file
    parvio shutdown --config F              stop a running cluster

Exit codes: 0 ok, 1 test or suite failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import random
import sys

from .bench import BenchSpec, run_bench, run_regress
from .client import ClientError, Session, run_command_file
from .cluster import ConfigError, load_config, start_cluster
from .transport import SocketEndpoint


class RemoteCluster:
    """Client-side adapter: reach a socket cluster described by a config."""

    def __init__(self, configs):
        self.configs = configs
        self.addr_map = {}
        for cfg in configs:
            host, _, port = cfg.address.partition(":")
            if not port:
                raise ConfigError(f"server {cfg.server_id}: socket address required")
            self.addr_map[cfg.server_id] = (host, int(port))
        self.cc_id = next(c.server_id for c in configs if c.is_cc)
        self.sc_id = next(c.server_id for c in configs if c.is_sc)
        self.inline_thresholds = {c.server_id: c.inline_threshold for c in configs}

    def client_endpoint(self):
        node_id = random.SystemRandom().randrange(0x4000_0000, 0x7000_0000)
        return SocketEndpoint(node_id, self.addr_map, listen=False)


def _connect_remote(configs) -> Session:
    remote = RemoteCluster(configs)
    session = Session(remote, cc_id=remote.cc_id, sc_id=remote.sc_id,
                      inline_thresholds=remote.inline_thresholds)
    return session.connect()


def cmd_serve(args) -> int:
    configs = load_config(args.config)
    if any(c.address == "inproc" for c in configs):
        raise ConfigError("serve needs socket addresses; inproc is for tests")
    cluster = start_cluster(configs)
    print(f"serving {len(cluster.servers)} servers "
          f"(sc={cluster.sc_id}, cc={cluster.cc_id}); awaiting shutdown", flush=True)
    cluster.drain_wait(timeout=(args.timeout if args.timeout > 0 else 86400.0))
    return 0


def cmd_shutdown(args) -> int:
    configs = load_config(args.config)
    session = _connect_remote(configs)
    session.shutdown_cluster()
    print("cluster stopped")
    return 0


def cmd_bench(args) -> int:
    configs = load_config(args.config)
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = BenchSpec.from_json(json.load(fh))
    report = run_bench(configs, spec)
    csv = report.to_csv()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv)
    print(csv, end="")
    return 0


def cmd_regress(args) -> int:
    configs = load_config(args.config)
    if all(c.address == "inproc" for c in configs):
        cluster = start_cluster(configs)
        results = run_regress(cluster)
        cluster.shutdown()
    else:
        remote = RemoteCluster(configs)
        results = run_regress(remote)
    failed = 0
    for name, (ok, detail) in results.items():
        print(f"{name:16s} {'PASS' if ok else 'FAIL'}  {detail if not ok else ''}".rstrip())
        failed += not ok
    return 1 if failed else 0


def cmd_inspect(args) -> int:
    configs = load_config(args.config)
    if all(c.address == "inproc" for c in configs):
        raise ConfigError("inspect needs a running socket cluster")
    session = _connect_remote(configs)
    table = session.admin("layout", {"name": args.file})
    print(json.dumps(table, indent=2))
    session.disconnect()
    return 0


def cmd_script(args) -> int:
    configs = load_config(args.config)
    session = _connect_remote(configs)
    with open(args.file, "r", encoding="utf-8") as fh:
        text = fh.read()
    errors = 0
    for line in run_command_file(session, text):
        print(line)
        errors += "error:" in line
    session.disconnect()
    return 1 if errors else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="parvio", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the servers of a config")
    p.add_argument("--config", required=True)
    p.add_argument("--timeout", type=float, default=0.0,
                   help="exit after this many seconds (0 = run until shutdown)")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("bench", help="run a benchmark spec, emit CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("regress", help="run the regression suites")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_regress)

    p = sub.add_parser("inspect", help="dump a file's layout table")
    p.add_argument("--config", required=True)
    p.add_argument("--file", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("script", help="run a client command file")
    p.add_argument("--config", required=True)
    p.add_argument("--file", required=True)
    p.set_defaults(fn=cmd_script)

    p = sub.add_parser("shutdown", help="stop a running cluster")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_shutdown)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ClientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
