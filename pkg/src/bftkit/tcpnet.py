"""TCP runtime: the same node programs, hosted over real sockets.

Each node binds one listening socket; peers connect lazily with a retry
budget.  One reader thread per inbound connection parses length-framed
envelopes into a per-node queue; a ticker thread enqueues clock ticks; a
single processor thread drains the queue, so event handling is strictly
sequential per node.  A shared recorder rebuilds the same network-level
execution prefix the simulator produces, so the recorded trace runs through
the identical embedded checkers.
"""

from __future__ import annotations

import queue
import socket
import threading
import time

from . import authn, pbft
from .runtime_api import BROADCAST, CallEvent, MessageEvent, Timeout, step
from .simnet import ScenarioConfig, SendRecord, SimResult, network_next
from .sm_core import ExecutionPrefix, Step


class BindError(Exception):
    pass


class PeerUnreachable(Exception):
    pass


CONNECT_RETRIES = 20
CONNECT_BACKOFF_S = 0.05


class Recorder:
    """Thread-safe builder of the network-level execution prefix."""

    def __init__(self, scenario: ScenarioConfig):
        self.sc = scenario
        self.lock = threading.Lock()
        self.t0 = time.monotonic()
        self.steps: list[Step] = []
        self.sends: list[SendRecord] = []
        self.decides: dict[int, dict] = {}
        self.client: dict = {"done": False, "value": None, "latency_ms": None, "index": None}
        self.premature: list[dict] = []
        self.tick_times: dict[int, list[int]] = {}
        self.request_sent_ms: int | None = None
        self.net = {
            "index": 0, "now": 0, "stabilized": True, "reg": None, "send": None,
            "terminated": [], "views": {}, "decided": {}, "client_done": False,
        }

    def wall_ms(self) -> int:
        return int((time.monotonic() - self.t0) * 1000)

    def _now(self, at: int | None = None) -> int:
        t = self.wall_ms() if at is None else at
        return max(t, self.net["now"])  # monotone logged clock

    def _log_locked(self, transition: dict):
        self.steps.append(Step(state=self.net, transition=transition))
        self.net = network_next(self.net, transition)

    def record_send(self, src: int, dst: int, msg, wire: bytes):
        mkind, mview = pbft.PBFT_CODEC.tag_of(msg)
        with self.lock:
            rec = SendRecord(
                seq=len(self.sends), sent_at=self.wall_ms(), src=src, dst=dst,
                mkind=mkind, mview=mview, msg=msg, wire=wire, deliver_at=None,
            )
            self.sends.append(rec)

    def record_tick(self, node: int, logical_ms: int, effects: dict):
        with self.lock:
            self.tick_times.setdefault(node, []).append(logical_ms)
            self._log_locked({"kind": "tick", "node": node, "now": self._now(), **effects})

    def record_call(self, node: int, value_key: str):
        with self.lock:
            self.request_sent_ms = self.wall_ms()
            self._log_locked({"kind": "call", "node": node, "now": self._now(),
                              "submit": True, "value": value_key})

    def record_delivery(self, src: int, dst: int, mkind: int, mview: int,
                        auth_ok: bool, effects: dict, client_done_value=None):
        with self.lock:
            index = len(self.steps)
            now = self._now()
            # FIFO-match the delivery to its send record
            for rec in self.sends:
                if (rec.src == src and rec.dst == dst and rec.mkind == mkind
                        and rec.mview == mview and rec.delivered_index is None):
                    rec.delivered_index = index
                    rec.deliver_at = now
                    rec.auth_ok = auth_ok
                    break
            tr = {"kind": "deliver", "node": dst, "from": src, "now": now,
                  "mkind": mkind, "mview": mview, "auth_ok": auth_ok,
                  "decided": effects.get("decided"),
                  "decided_view": effects.get("decided_view"),
                  "view": effects.get("view"),
                  "client_done": effects.get("client_done", False)}
            if effects.get("decided") is not None:
                self.decides[dst] = {"value": effects["decided"],
                                     "view": effects["decided_view"],
                                     "time": now, "index": index}
            if effects.get("view") is not None:
                v = effects["view"]
                cfg = pbft.PbftConfig(f=self.sc.f, view_timeout_base=self.sc.view_timeout_base_ms)
                contractual = pbft.view_deadline(v - 1, cfg) if v > 0 else 0
                if now < contractual:
                    self.premature.append({"index": index, "now": now, "node": dst, "view": v})
            if effects.get("client_done"):
                self.client.update(done=True, value=client_done_value,
                                   latency_ms=now - (self.request_sent_ms or 0), index=index)
            self._log_locked(tr)

    def finish(self, cfg: pbft.PbftConfig, honest, final_states) -> SimResult:
        with self.lock:
            horizon = self._now()
            self.steps.append(Step(state=self.net, transition={"kind": "end", "now": horizon}))
            sc = self.sc
            n = cfg.n
            for node in range(n):
                self.tick_times.setdefault(node, [])
            # undelivered in-flight sends near shutdown are excused the same
            # way the simulator excuses beyond-horizon deliveries
            for rec in self.sends:
                if rec.delivered_index is None and rec.deliver_at is None:
                    rec.deliver_at = max(rec.sent_at + sc.delta_ms, horizon + 1)
            expected = list(range(sc.tick_ms, horizon + 1, sc.tick_ms))
            for node in self.tick_times:
                self.tick_times[node] = expected  # logical cadence, see module doc
            return SimResult(
                scenario=ScenarioConfig(
                    f=sc.f, seed=sc.seed, name=sc.name, delta_ms=sc.delta_ms,
                    tick_ms=sc.tick_ms, view_timeout_base_ms=sc.view_timeout_base_ms,
                    request=sc.request, horizon_ms=horizon,
                ),
                cfg=cfg,
                prefix=ExecutionPrefix(self.steps),
                sends=self.sends,
                decides=dict(self.decides),
                client=dict(self.client),
                premature=list(self.premature),
                tick_times=dict(self.tick_times),
                stabilize_index=None,
                honest=tuple(honest),
                final_states=dict(final_states),
            )


class TcpNode:
    """One node: program + registry + sockets + serialized event loop."""

    def __init__(self, node_id: int, prog, registry: authn.KeyRegistry,
                 peers: dict[int, tuple[str, int]], tick_ms: int,
                 recorder: Recorder | None = None, host: str = "127.0.0.1",
                 port: int = 0, replica: bool = True):
        self.id = node_id
        self.prog = prog
        self.registry = registry
        self.peers = dict(peers)
        self.tick_ms = tick_ms
        self.recorder = recorder
        self.replica = replica
        self.state = prog.zero(None)
        self.events: queue.Queue = queue.Queue()
        self.out_socks: dict[int, socket.socket] = {}
        self.out_lock = threading.Lock()
        self.stop_flag = threading.Event()
        self.threads: list[threading.Thread] = []
        try:
            self.listener = socket.create_server((host, port))
        except OSError as e:
            raise BindError(f"node {node_id} cannot bind {host}:{port}: {e}") from e
        self.addr = self.listener.getsockname()

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        for target in (self._accept_loop, self._process_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self.threads.append(t)
        if self.replica:
            t = threading.Thread(target=self._tick_loop, daemon=True)
            t.start()
            self.threads.append(t)

    def stop(self):
        self.stop_flag.set()
        try:
            self.listener.close()
        except OSError:
            pass
        with self.out_lock:
            for s in self.out_socks.values():
                try:
                    s.close()
                except OSError:
                    pass

    def submit(self, arg):
        self.events.put(("call", arg))

    # -- threads ---------------------------------------------------------------

    def _accept_loop(self):
        while not self.stop_flag.is_set():
            try:
                conn, _ = self.listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            t.start()
            self.threads.append(t)

    def _read_loop(self, conn: socket.socket):
        buf = bytearray()
        while not self.stop_flag.is_set():
            try:
                chunk = conn.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            for wire in authn.read_frames(buf):
                self.events.put(("deliver", wire))

    def _tick_loop(self):
        k = 0
        while not self.stop_flag.is_set():
            time.sleep(self.tick_ms / 1000)
            k += 1
            self.events.put(("tick", k * self.tick_ms))

    def _process_loop(self):
        while not self.stop_flag.is_set():
            try:
                kind, payload = self.events.get(timeout=0.1)
            except queue.Empty:
                continue
            if kind == "tick":
                pre = self.state
                self.state, outs = step(self.prog, self.registry, self.state, Timeout(now=payload))
                if self.recorder is not None:
                    effects = self._effects(pre, self.state)
                    self.recorder.record_tick(self.id, payload, effects)
                self._send_all(outs)
            elif kind == "call":
                pre = self.state
                self.state, outs = step(self.prog, self.registry, self.state, CallEvent(payload))
                if self.recorder is not None and payload[0] == "submit":
                    self.recorder.record_call(self.id, pbft.vkey(payload[1]))
                self._send_all(outs)
            elif kind == "deliver":
                env = authn.decode_envelope(payload)
                try:
                    am = authn.validate_receive(self.registry, env, self.prog.mcodec)
                except authn.AuthError:
                    if self.recorder is not None:
                        mk, mv = 0, 0
                        self.recorder.record_delivery(env.signer, self.id, mk, mv, False, {})
                    continue
                pre = self.state
                ev = MessageEvent(sender=am.signer, msg=am.msg, sig=am.root_sig)
                self.state, outs = step(self.prog, self.registry, self.state, ev)
                if self.recorder is not None:
                    effects = self._effects(pre, self.state)
                    mk, mv = pbft.PBFT_CODEC.tag_of(am.msg)
                    done_value = None
                    if effects.get("client_done"):
                        done_value = self.state.done_value
                    self.recorder.record_delivery(am.signer, self.id, mk, mv, True,
                                                  effects, done_value)
                self._send_all(outs)

    def _effects(self, pre, post) -> dict:
        if not self.replica:
            done = (not pre.done) and post.done
            return {"client_done": done}
        obs = pbft.observe_effects(pre, post)
        return {"decided": obs.get("decided"), "decided_view": obs.get("decided_view"),
                "view": obs.get("view")}

    # -- sending ---------------------------------------------------------------

    def _send_all(self, outs):
        for t in outs:
            env = authn.build_envelope(self.registry, t.msg, self.prog.mcodec)
            wire = authn.frame(authn.encode_envelope(env))
            targets = sorted(self.peers) + [self.id] if t.to == BROADCAST else [t.to]
            for dst in targets:
                if self.recorder is not None:
                    self.recorder.record_send(self.id, dst, t.msg, wire[4:])
                if dst == self.id:
                    self.events.put(("deliver", wire[4:]))
                else:
                    self._send_to(dst, wire)

    def _send_to(self, dst: int, framed: bytes):
        with self.out_lock:
            sock = self.out_socks.get(dst)
        if sock is None:
            sock = self._connect(dst)
            if sock is None:
                return
        try:
            sock.sendall(framed)
        except OSError:
            with self.out_lock:
                self.out_socks.pop(dst, None)

    def _connect(self, dst: int):
        host, port = self.peers[dst]
        for attempt in range(CONNECT_RETRIES):
            if self.stop_flag.is_set():
                return None
            try:
                sock = socket.create_connection((host, port), timeout=1.0)
                with self.out_lock:
                    self.out_socks[dst] = sock
                return sock
            except OSError:
                time.sleep(CONNECT_BACKOFF_S)
        raise PeerUnreachable(f"node {self.id} cannot reach peer {dst} at {host}:{port}")


def build_registry(key_seed: bytes, ids, local_id: int,
                   addrs: dict[int, tuple[str, int]]) -> authn.KeyRegistry:
    entries = {}
    for i in ids:
        priv, pub = authn.keypair_from_seed(key_seed, i)
        entries[i] = (pub, f"tcp://{addrs.get(i, ('?', 0))[0]}:{addrs.get(i, ('?', 0))[1]}")
        if i == local_id:
            local_key = priv
    return authn.KeyRegistry(entries=entries, local_id=local_id, local_key=local_key)


def run_tcp_cluster(cluster, value: bytes = b"\x01\x02\x03\x04", seed: int = 0,
                    settle_s: float = 5.0):
    """In-process loopback cluster: n replicas plus a client, one common-case
    request, checkers over the recorded trace.  Returns a LatencyReport."""
    from .checks import check_run, critical_path_count
    from .harness import CheckFailure, LatencyReport, Trial

    f = cluster.f
    cfg = pbft.PbftConfig(f=f, view_timeout_base=cluster.view_timeout_base_ms)
    n = cfg.n
    client_id = cfg.client_id
    ids = list(range(n)) + [client_id]
    key_seed = seed.to_bytes(8, "big")

    scenario = ScenarioConfig(
        f=f, seed=seed, name="tcp-common", delta_ms=cluster.delta_ms,
        tick_ms=cluster.tick_ms, view_timeout_base_ms=cluster.view_timeout_base_ms,
        request=value, horizon_ms=0,
    )
    recorder = Recorder(scenario)

    # bind everyone first so peer addresses are known before any connects
    nodes: dict[int, TcpNode] = {}
    addrs: dict[int, tuple[str, int]] = {}
    for i in ids:
        listener_port = cluster.addresses.get(i, ("127.0.0.1", 0))[1] if cluster.addresses else 0
        prog = pbft.pbft_program(cfg, i) if i != client_id else pbft.client_program(cfg)
        node = TcpNode(i, prog, registry=None, peers={}, tick_ms=cluster.tick_ms,
                       recorder=recorder, port=listener_port, replica=(i != client_id))
        nodes[i] = node
        addrs[i] = node.addr
    for i in ids:
        nodes[i].registry = build_registry(key_seed, ids, i, addrs)
        nodes[i].peers = {j: addrs[j] for j in ids if j != i}

    try:
        for node in nodes.values():
            node.start()
        recorder.t0 = time.monotonic()
        nodes[client_id].submit(("submit", value))
        deadline = time.monotonic() + settle_s
        while time.monotonic() < deadline:
            with recorder.lock:
                done = recorder.client["done"] and len(recorder.decides) == n
            if done:
                break
            time.sleep(0.01)
        time.sleep(0.2)  # let trailing deliveries land before the trace closes
    finally:
        for node in nodes.values():
            node.stop()

    final_states = {i: nodes[i].state for i in ids}
    result = recorder.finish(cfg, honest=tuple(range(n)), final_states=final_states)
    report = check_run(result)
    if not report.ok:
        raise CheckFailure("tcp-common", report)
    trial = Trial(
        scenario="tcp-common", f=f, seed=seed,
        terminate_view=result.terminate_view,
        client_latency_ms=result.client["latency_ms"],
        message_count_critical_path=critical_path_count(result),
        value=result.client["value"],
        checks_ok=report.ok,
    )
    ok = trial.terminate_view == 0 and trial.value == pbft.vkey(value) and report.ok
    return LatencyReport(trials=(trial,), ok=ok)
