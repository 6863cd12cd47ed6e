"""Command-line entry points: `sim` (thin client of the HTTP service),
`node` (standalone TCP replica), and `client` (TCP request submitter).

`sim` talks to an in-process service instance by default; pass --server to
target a running deployment.  Exit code 0 only if every embedded checker
passed.
"""

from __future__ import annotations

import json
import sys
import time

import click


def _client(server: str | None):
    """An httpx-compatible client: in-process app by default, HTTP otherwise."""
    import httpx

    if server:
        return httpx.Client(base_url=server, timeout=300.0)
    from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _post(server: str | None, path: str, payload: dict) -> dict:
    with _client(server) as c:
        r = c.post(path, json=payload)
        if r.status_code != 200:
            raise click.ClickException(f"{path} failed ({r.status_code}): {r.text}")
        return r.json()


@click.group()
def sim():
    """Deterministic protocol simulation, suites, and regression checks."""


@sim.command("run")
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True),
              help="Scenario JSON file.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the execution trace (newline-delimited JSON) here.")
@click.option("--server", default=None, help="Service URL (default: in-process).")
def sim_run(scenario_path, out_path, server):
    """Run one scenario and print the trial report."""
    with open(scenario_path) as fh:
        scenario = json.load(fh)
    data = _post(server, "/run", {"scenario": scenario, "include_trace": out_path is not None})
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(data["trace_ndjson"])
    click.echo(json.dumps({"ok": data["ok"], "trial": data["trial"],
                           "checks": {k: v.get("ok") for k, v in data["checks"].items()}},
                          indent=2))
    sys.exit(0 if data["ok"] else 1)


@sim.command("suite")
@click.option("--failure", is_flag=True, help="Run the failure scenarios instead of the common case.")
@click.option("--f", "f_", default=None, type=int, help="Fault budget (default 1 common, 2 failure).")
@click.option("--trials", default=10, type=int, help="Common-case trials.")
@click.option("--seed", default=0, type=int)
@click.option("--csv", "csv_path", type=click.Path(), default=None, help="Write the CSV report here.")
@click.option("--json", "json_path", type=click.Path(), default=None, help="Write the JSON report here.")
@click.option("--server", default=None, help="Service URL (default: in-process).")
def sim_suite(failure, f_, trials, seed, csv_path, json_path, server):
    """Run the common-case trials or the failure-scenario suite."""
    if failure:
        payload = {"f": f_ if f_ is not None else 2, "seed": seed}
        data = _post(server, "/suite/failure", payload)
    else:
        payload = {"f": f_ if f_ is not None else 1, "trials": trials, "seed": seed}
        data = _post(server, "/suite/common", payload)
    if csv_path:
        with open(csv_path, "w") as fh:
            fh.write(data["csv"])
    report = {"ok": data["ok"], "trials": data["trials"], "aggregates": data["aggregates"]}
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(report, fh, indent=2)
    click.echo(json.dumps(report, indent=2))
    sys.exit(0 if data["ok"] else 1)


@sim.command("regressions")
@click.option("--seed", default=0, type=int)
@click.option("--server", default=None, help="Service URL (default: in-process).")
def sim_regressions(seed, server):
    """Check that each of the four seeded bugs is caught by its checker."""
    data = _post(server, "/regressions", {"seed": seed})
    click.echo(json.dumps(data, indent=2, default=str))
    sys.exit(0 if data["ok"] else 1)


# --- TCP mode ----------------------------------------------------------------


def _load_cluster(path: str) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    for key in ("f", "key_seed", "nodes"):
        if key not in cfg:
            raise click.ClickException(f"cluster config missing field {key!r}")
    return cfg


def _make_tcp_node(cfg: dict, node_id: int, replica: bool):
    from . import pbft
    from .tcpnet import TcpNode, build_registry

    f = cfg["f"]
    pcfg = pbft.PbftConfig(f=f, view_timeout_base=cfg.get("view_timeout_base_ms", 1000))
    n = pcfg.n
    ids = list(range(n)) + [pcfg.client_id]
    addrs = {int(k): (v[0], v[1]) for k, v in cfg["nodes"].items()}
    missing = [i for i in ids if i not in addrs]
    if missing:
        raise click.ClickException(f"cluster config missing addresses for nodes {missing}")
    key_seed = bytes.fromhex(cfg["key_seed"])
    prog = pbft.pbft_program(pcfg, node_id) if replica else pbft.client_program(pcfg)
    host, port = addrs[node_id]
    node = TcpNode(node_id, prog, registry=None, peers={}, tick_ms=cfg.get("tick_ms", 250),
                   host=host, port=port, replica=replica)
    node.registry = build_registry(key_seed, ids, node_id, addrs)
    node.peers = {i: addrs[i] for i in ids if i != node_id}
    return node, pcfg


@click.group()
def node():
    """Standalone TCP replica."""


@node.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="Cluster JSON: {f, key_seed (hex), nodes: {id: [host, port]}, ...}.")
@click.option("--id", "node_id", required=True, type=int, help="This replica's node id.")
def node_serve(config_path, node_id):
    """Serve one replica until interrupted."""
    cfg = _load_cluster(config_path)
    tcp_node, pcfg = _make_tcp_node(cfg, node_id, replica=True)
    tcp_node.start()
    click.echo(f"replica {node_id} listening on {tcp_node.addr[0]}:{tcp_node.addr[1]}")
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        tcp_node.stop()


@click.group()
def client():
    """TCP client."""


@client.command("request")
@click.option("--value", "value_hex", required=True, help="Request value as hex.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--timeout", "timeout_s", default=30.0, type=float,
              help="Give up after this many seconds.")
def client_request(value_hex, config_path, timeout_s):
    """Submit a request and wait for f+1 matching replies."""
    from . import pbft

    cfg = _load_cluster(config_path)
    pcfg_f = cfg["f"]
    client_id = 3 * pcfg_f + 1
    tcp_node, pcfg = _make_tcp_node(cfg, client_id, replica=False)
    value = bytes.fromhex(value_hex)
    tcp_node.start()
    t0 = time.monotonic()
    try:
        tcp_node.submit(("submit", value))
        while time.monotonic() - t0 < timeout_s:
            if tcp_node.state.done:
                latency = int((time.monotonic() - t0) * 1000)
                click.echo(json.dumps({"ok": True, "value": tcp_node.state.done_value,
                                       "latency_ms": latency}))
                sys.exit(0 if tcp_node.state.done_value == pbft.vkey(value) else 1)
            time.sleep(0.01)
        click.echo(json.dumps({"ok": False, "error": "timed out waiting for replies"}))
        sys.exit(1)
    finally:
        tcp_node.stop()


if __name__ == "__main__":
    sim()
