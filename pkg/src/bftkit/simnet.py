"""Deterministic discrete-event simulator for a partially synchronous network
with a Byzantine adversary.

Single-threaded event loop over a priority queue keyed by
(time, kind rank, node, insertion counter), so identical inputs produce
byte-identical trace serializations.  Before stabilization, delivery delays
are drawn uniformly from [0, 10Δ] and drop rules apply; at stabilization a
Stabilize transition fires, after which every send is delivered within Δ.
Ticks fire every tick_ms per replica.  The run is logged as an execution
prefix over a network-level state (register, request, terminated set,
per-node views) that conforms to the network specification machine.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, replace

from . import authn, pbft
from .runtime_api import BROADCAST, CallEvent, MessageEvent, Timeout, step
from .sm_core import ExecutionPrefix, SpecMachine, Step, WeakSpec, terminalize

# event kind ranks: equal-time ties break in this order
RANK_STABILIZE = 0
RANK_TICK = 1
RANK_CALL = 2
RANK_DELIVER = 3
RANK_FAULT = 4


class HorizonTooSmall(Exception):
    """The horizon precedes a mandatory scheduled event."""


@dataclass(frozen=True)
class DropRule:
    """Drop messages matching this pattern, sent inside [from_ms, until_ms).

    None fields are wildcards.  until_ms of None means the scenario's
    stabilization time (drops never apply after stabilization).
    """

    mkind: int | None = None
    view: int | None = None
    src: int | None = None
    dst: int | None = None
    from_ms: int = 0
    until_ms: int | None = None

    def to_json(self) -> dict:
        return {
            "mkind": self.mkind,
            "view": self.view,
            "src": self.src,
            "dst": self.dst,
            "from_ms": self.from_ms,
            "until_ms": self.until_ms,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DropRule":
        return cls(**{k: d.get(k) for k in ("mkind", "view", "src", "dst")},
                   from_ms=d.get("from_ms", 0), until_ms=d.get("until_ms"))


@dataclass(frozen=True)
class ScenarioConfig:
    f: int
    seed: int = 0
    name: str = ""
    delta_ms: int = 50
    tick_ms: int = 250
    view_timeout_base_ms: int = 1000
    stabilize_at_ms: int | None = None  # None: stable from the start
    corrupt: tuple[int, ...] = ()
    corrupt_style: str = "silent"  # or "wrong_value"
    attacker_value: bytes = b"\xba\xad"
    drops: tuple[DropRule, ...] = ()
    drop_policy: str = "lost"  # or "redeliver" (at stabilization)
    inject: tuple[dict, ...] = ()  # {"at_ms", "replay_seq", "to"} replay faults
    request: bytes = b"\x01\x02\x03\x04"
    request_at_ms: int = 0
    horizon_ms: int = 4000

    def to_json(self) -> dict:
        return {
            "f": self.f,
            "seed": self.seed,
            "name": self.name,
            "delta_ms": self.delta_ms,
            "tick_ms": self.tick_ms,
            "view_timeout_base_ms": self.view_timeout_base_ms,
            "stabilize_at_ms": self.stabilize_at_ms,
            "corrupt": list(self.corrupt),
            "corrupt_style": self.corrupt_style,
            "attacker_value": self.attacker_value.hex(),
            "drops": [r.to_json() for r in self.drops],
            "drop_policy": self.drop_policy,
            "inject": list(self.inject),
            "request": self.request.hex(),
            "request_at_ms": self.request_at_ms,
            "horizon_ms": self.horizon_ms,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioConfig":
        return cls(
            f=d["f"],
            seed=d.get("seed", 0),
            name=d.get("name", ""),
            delta_ms=d.get("delta_ms", 50),
            tick_ms=d.get("tick_ms", 250),
            view_timeout_base_ms=d.get("view_timeout_base_ms", 1000),
            stabilize_at_ms=d.get("stabilize_at_ms"),
            corrupt=tuple(d.get("corrupt", ())),
            corrupt_style=d.get("corrupt_style", "silent"),
            attacker_value=bytes.fromhex(d.get("attacker_value", "baad")),
            drops=tuple(DropRule.from_json(r) for r in d.get("drops", ())),
            drop_policy=d.get("drop_policy", "lost"),
            inject=tuple(d.get("inject", ())),
            request=bytes.fromhex(d.get("request", "01020304")),
            request_at_ms=d.get("request_at_ms", 0),
            horizon_ms=d.get("horizon_ms", 4000),
        )


@dataclass
class SendRecord:
    seq: int
    sent_at: int
    src: int
    dst: int
    mkind: int
    mview: int
    msg: object
    wire: bytes
    deliver_at: int | None  # None: dropped or beyond horizon
    dropped: bool = False
    delivered_index: int | None = None  # log index of the Deliver transition
    auth_ok: bool | None = None


@dataclass
class SimResult:
    scenario: ScenarioConfig
    cfg: pbft.PbftConfig
    prefix: ExecutionPrefix
    sends: list[SendRecord]
    decides: dict[int, dict]  # node -> {value, view, time, index}
    client: dict  # {done, value, latency_ms, index}
    premature: list[dict]  # view advances before the contractual deadline
    tick_times: dict[int, list[int]]
    stabilize_index: int | None
    honest: tuple[int, ...]
    final_states: dict[int, object]

    @property
    def terminate_view(self) -> int | None:
        views = {d["view"] for d in self.decides.values()}
        return max(views) if views else None


def _matches(rule: DropRule, rec_src, rec_dst, mkind, mview, sent_at, stab) -> bool:
    until = rule.until_ms if rule.until_ms is not None else stab
    if until is None:
        return False  # no drop window in an always-stable network
    if not (rule.from_ms <= sent_at < until):
        return False
    for want, got in ((rule.mkind, mkind), (rule.view, mview), (rule.src, rec_src), (rule.dst, rec_dst)):
        if want is not None and want != got:
            return False
    return True


class SimWorld:
    """One scenario instance.  Build, then run() to the horizon."""

    def __init__(self, scenario: ScenarioConfig, mutants: pbft.Mutants | None = None):
        if scenario.stabilize_at_ms is not None and scenario.horizon_ms < scenario.stabilize_at_ms:
            raise HorizonTooSmall("horizon before stabilization")
        if scenario.horizon_ms < scenario.request_at_ms:
            raise HorizonTooSmall("horizon before the client request")
        if len(scenario.corrupt) > scenario.f:
            raise ValueError("corrupt set exceeds the fault budget f")
        self.sc = scenario
        self.cfg = pbft.PbftConfig(f=scenario.f, view_timeout_base=scenario.view_timeout_base_ms)
        self.mutants = mutants or pbft.Mutants()
        n = self.cfg.n
        self.client_id = self.cfg.client_id
        self.all_ids = list(range(n)) + [self.client_id]
        self.honest = tuple(i for i in range(n) if i not in scenario.corrupt)

        keys = {i: authn.generate_keypair() for i in self.all_ids}
        entries = {i: (keys[i][1], f"sim://{i}") for i in self.all_ids}
        self.regs = {
            i: authn.KeyRegistry(entries=entries, local_id=i, local_key=keys[i][0])
            for i in self.all_ids
        }
        self.progs = {}
        for i in range(n):
            if i in scenario.corrupt:
                if scenario.corrupt_style == "wrong_value":
                    self.progs[i] = pbft.wrong_value_program(self.cfg, i, scenario.attacker_value)
                else:
                    self.progs[i] = pbft.silent_program(self.cfg, i)
            else:
                self.progs[i] = pbft.pbft_program(self.cfg, i, self.mutants)
        self.progs[self.client_id] = pbft.client_program(self.cfg)
        self.node_states = {i: self.progs[i].zero(None) for i in self.all_ids}

        self.rng = random.Random(scenario.seed)
        self.heap: list = []
        self.seq = 0
        self.now = 0
        self.stabilized = scenario.stabilize_at_ms is None
        self.sends: list[SendRecord] = []
        self.steps: list[Step] = []
        self.decides: dict[int, dict] = {}
        self.client_report = {"done": False, "value": None, "latency_ms": None, "index": None}
        self.premature: list[dict] = []
        self.tick_times: dict[int, list[int]] = {i: [] for i in range(n)}
        self.stabilize_index: int | None = None

        # network-level logged state
        self.net = {
            "index": 0,
            "now": 0,
            "stabilized": self.stabilized,
            "reg": None,
            "send": None,
            "terminated": [],
            "views": {},
            "decided": {},
            "client_done": False,
        }

        # mandatory schedule
        if scenario.stabilize_at_ms is not None:
            self._push(scenario.stabilize_at_ms, RANK_STABILIZE, -1, ("stabilize",))
        for i in range(n):
            t = scenario.tick_ms
            while t <= scenario.horizon_ms:
                self._push(t, RANK_TICK, i, ("tick",))
                t += scenario.tick_ms
        self._push(scenario.request_at_ms, RANK_CALL, self.client_id,
                   ("call", ("submit", scenario.request)))
        for inj in scenario.inject:
            self._push(inj["at_ms"], RANK_FAULT, inj["to"], ("fault", inj))

    def _push(self, time: int, rank: int, node: int, payload):
        heapq.heappush(self.heap, (time, rank, node, self.seq, payload))
        self.seq += 1

    # -- sending --------------------------------------------------------------

    def _schedule_transmits(self, sender: int, outs):
        for t in outs:
            env = authn.build_envelope(self.regs[sender], t.msg, pbft.PBFT_CODEC)
            wire = authn.encode_envelope(env)
            mkind, mview = pbft.PBFT_CODEC.tag_of(t.msg)
            targets = self.all_ids if t.to == BROADCAST else [t.to]
            for dst in targets:
                self._schedule_delivery(sender, dst, t.msg, wire, mkind, mview)

    def _schedule_delivery(self, src, dst, msg, wire, mkind, mview):
        rec = SendRecord(
            seq=len(self.sends), sent_at=self.now, src=src, dst=dst,
            mkind=mkind, mview=mview, msg=msg, wire=wire, deliver_at=None,
        )
        self.sends.append(rec)
        stab_at = self.sc.stabilize_at_ms
        # drops apply only before stabilization
        dropped = not self.stabilized and any(
            _matches(r, src, dst, mkind, mview, self.now, stab_at) for r in self.sc.drops
        )
        if dropped:
            rec.dropped = True
            if self.sc.drop_policy == "redeliver" and stab_at is not None:
                rec.deliver_at = max(stab_at, self.now) + self.rng.randint(1, self.sc.delta_ms)
            else:
                return
        elif src == dst:
            rec.deliver_at = self.now + 1
        elif self.stabilized:
            rec.deliver_at = self.now + self.rng.randint(1, self.sc.delta_ms)
        else:
            rec.deliver_at = self.now + self.rng.randint(1, 10 * self.sc.delta_ms)
        if rec.deliver_at is not None and rec.deliver_at <= self.sc.horizon_ms:
            self._push(rec.deliver_at, RANK_DELIVER, dst, ("deliver", rec.seq))
        # deliveries past the horizon stay recorded but never fire

    # -- logging --------------------------------------------------------------

    def _log(self, transition: dict, effects: dict | None = None):
        pre = {k: (dict(v) if isinstance(v, dict) else list(v) if isinstance(v, list) else v)
               for k, v in self.net.items()}
        self.steps.append(Step(state=pre, transition=transition))
        nxt = network_next(pre, transition)
        self.net = nxt

    def _effects_for(self, node: int, pre_state, post_state) -> dict:
        effects: dict = {"decided": None, "decided_view": None, "view": None, "client_done": False}
        if node == self.client_id:
            if not pre_state.done and post_state.done:
                effects["client_done"] = True
                self.client_report.update(
                    done=True, value=post_state.done_value,
                    latency_ms=self.now - self.sc.request_at_ms, index=len(self.steps),
                )
            return effects
        obs = pbft.observe_effects(pre_state, post_state)
        if "decided" in obs:
            effects["decided"] = obs["decided"]
            effects["decided_view"] = obs["decided_view"]
            self.decides[node] = {
                "value": obs["decided"], "view": obs["decided_view"],
                "time": self.now, "index": len(self.steps),
            }
        if "view" in obs:
            v = obs["view"]
            effects["view"] = v
            contractual = pbft.view_deadline(v - 1, self.cfg) if v > 0 else 0
            if self.now < contractual:
                self.premature.append(
                    {"index": len(self.steps), "now": self.now, "node": node, "view": v}
                )
        return effects

    # -- event execution ------------------------------------------------------

    def run(self) -> SimResult:
        while self.heap:
            time, rank, node, _, payload = heapq.heappop(self.heap)
            if time > self.sc.horizon_ms:
                break
            self.now = time
            kind = payload[0]
            if kind == "stabilize":
                self.stabilized = True
                self.stabilize_index = len(self.steps)
                self._log({"kind": "stabilize", "now": time})
            elif kind == "tick":
                self.tick_times[node].append(time)
                pre = self.node_states[node]
                new, outs = step(self.progs[node], self.regs[node], pre, Timeout(now=time))
                self.node_states[node] = new
                effects = self._effects_for(node, pre, new)
                self._log({"kind": "tick", "node": node, "now": time, **effects})
                self._schedule_transmits(node, outs)
            elif kind == "call":
                arg = payload[1]
                pre = self.node_states[node]
                new, outs = step(self.progs[node], self.regs[node], pre, CallEvent(arg))
                self.node_states[node] = new
                tr = {"kind": "call", "node": node, "now": time}
                if arg[0] == "submit":
                    tr["submit"] = True
                    tr["value"] = pbft.vkey(arg[1])
                self._log(tr)
                self._schedule_transmits(node, outs)
            elif kind in ("deliver", "fault"):
                if kind == "fault":
                    rec = self.sends[payload[1]["replay_seq"]]
                    wire, dst, log_rec = rec.wire, node, None
                else:
                    log_rec = self.sends[payload[1]]
                    wire, dst = log_rec.wire, node
                env = authn.decode_envelope(wire)
                tr = {"kind": kind, "node": dst, "now": time,
                      "decided": None, "decided_view": None, "view": None, "client_done": False}
                if log_rec is not None:
                    tr["from"] = log_rec.src
                    tr["mkind"] = log_rec.mkind
                    tr["mview"] = log_rec.mview
                    log_rec.delivered_index = len(self.steps)
                try:
                    am = authn.validate_receive(self.regs[dst], env, pbft.PBFT_CODEC)
                except authn.AuthError:
                    tr["auth_ok"] = False
                    if log_rec is not None:
                        log_rec.auth_ok = False
                    self._log(tr)
                    continue
                tr["auth_ok"] = True
                if log_rec is not None:
                    log_rec.auth_ok = True
                ev = MessageEvent(sender=am.signer, msg=am.msg, sig=am.root_sig)
                pre = self.node_states[dst]
                new, outs = step(self.progs[dst], self.regs[dst], pre, ev)
                self.node_states[dst] = new
                tr.update(self._effects_for(dst, pre, new))
                self._log(tr)
                self._schedule_transmits(dst, outs)
        self.steps.append(Step(state=self.net, transition={"kind": "end", "now": self.now}))
        return SimResult(
            scenario=self.sc,
            cfg=self.cfg,
            prefix=ExecutionPrefix(self.steps),
            sends=self.sends,
            decides=self.decides,
            client=self.client_report,
            premature=self.premature,
            tick_times=self.tick_times,
            stabilize_index=self.stabilize_index,
            honest=self.honest,
            final_states=dict(self.node_states),
        )


def run_scenario(scenario: ScenarioConfig, mutants: pbft.Mutants | None = None) -> SimResult:
    return SimWorld(scenario, mutants).run()


# --- network specification machine ------------------------------------------

_INVALID = {"#invalid": True}


def network_next(s: dict, t: dict) -> dict:
    """Deterministic successor of the network-level logged state."""
    out = {
        "index": s["index"] + 1,
        "now": t.get("now", s["now"]),
        "stabilized": s["stabilized"],
        "reg": s["reg"],
        "send": s["send"],
        "terminated": list(s["terminated"]),
        "views": dict(s["views"]),
        "decided": dict(s["decided"]),
        "client_done": s["client_done"],
    }
    kind = t.get("kind")
    if kind == "stabilize":
        out["stabilized"] = True
    elif kind == "call" and t.get("submit"):
        out["send"] = t["value"]
    elif kind in ("deliver", "fault", "tick"):
        node = t.get("node")
        if t.get("view") is not None:
            out["views"][str(node)] = t["view"]
        if t.get("decided") is not None:
            out["decided"][str(node)] = [t["decided"], t["decided_view"]]
            if out["reg"] is None:
                out["reg"] = t["decided"]
            out["terminated"] = sorted(set(out["terminated"]) | {node})
        if t.get("client_done"):
            out["client_done"] = True
    elif kind == "end":
        return {k: (dict(v) if isinstance(v, dict) else list(v) if isinstance(v, list) else v)
                for k, v in s.items()}
    return out


def network_spec(scenario: ScenarioConfig, honest: tuple[int, ...]) -> SpecMachine:
    """The network machine the simulator's log must conform to: deterministic
    replay of effects plus the agreement invariant, terminalized over
    per-replica decide tasks and the client-completion task."""

    def init(s):
        return (
            s["index"] == 0
            and s["reg"] is None
            and s["send"] is None
            and s["terminated"] == []
            and s["decided"] == {}
            and not s["client_done"]
            and s["stabilized"] == (scenario.stabilize_at_ms is None)
        )

    def nxt(s, t):
        if t.get("kind") not in ("stabilize", "call", "deliver", "fault", "tick", "end"):
            return _INVALID
        return network_next(s, t)

    def invar(s, t):
        # agreement: a decision must match the register once it is set
        if t.get("decided") is not None and s["reg"] is not None:
            if t["decided"] != s["reg"]:
                return False
        # monotone clock
        if t.get("now", s["now"]) < s["now"]:
            return False
        return True

    def weakfair(task, s, t):
        if task[0] == "DoneF":
            return t.get("decided") is not None and t.get("node") == task[1]
        if task == ("ClientDoneF",):
            return bool(t.get("client_done"))
        if task == ("StabilizeF",):
            return t.get("kind") == "stabilize"
        return False

    def disabled(task, s):
        if task[0] == "DoneF":
            return str(task[1]) in s["decided"]
        if task == ("ClientDoneF",):
            return s["client_done"]
        if task == ("StabilizeF",):
            return s["stabilized"]
        return True

    tasks = tuple(("DoneF", i) for i in honest) + (("ClientDoneF",),)
    if scenario.stabilize_at_ms is not None:
        tasks += (("StabilizeF",),)
    ws = WeakSpec(init_pred=init, next_fn=nxt, weakfair_pred=weakfair,
                  task_enum=tasks, name="network")
    spec = terminalize(ws, disabled_pred=disabled)
    return replace(spec, invar_pred=invar)


# --- fairness audit ----------------------------------------------------------


def fairness_audit(result: SimResult) -> dict:
    """Scheduler fairness over the completed run.

    Every message sent to an honest recipient either fired (delivery index
    recorded) or is accounted for: dropped pre-stabilization, or scheduled
    past the horizon.  Post-stabilization sends to honest recipients must be
    delivered within delta.  Ticks fire every tick_ms per replica, and the
    stabilize transition fires exactly once when scheduled.
    """
    sc = result.scenario
    problems = []
    honest = set(result.honest) | {result.cfg.client_id}
    message_report = []
    for rec in result.sends:
        if rec.dst not in honest:
            continue
        entry = {"seq": rec.seq, "fired": rec.delivered_index}
        if rec.delivered_index is None:
            if rec.dropped and rec.deliver_at is None:
                entry["status"] = "dropped_pre_stabilization"
                if sc.stabilize_at_ms is not None and rec.sent_at >= sc.stabilize_at_ms:
                    problems.append(f"message {rec.seq} dropped after stabilization")
            elif rec.deliver_at is not None and rec.deliver_at > sc.horizon_ms:
                entry["status"] = "beyond_horizon"
            else:
                entry["status"] = "unfired"
                problems.append(f"message {rec.seq} to honest node never fired")
        else:
            entry["status"] = "fired"
            stab = sc.stabilize_at_ms if sc.stabilize_at_ms is not None else 0
            if rec.sent_at >= stab and not rec.dropped:
                bound = max(rec.sent_at, stab) + sc.delta_ms
                if rec.deliver_at > bound:
                    problems.append(f"message {rec.seq} delivered past the delta bound")
        message_report.append(entry)
    for node, times in result.tick_times.items():
        expected = list(range(sc.tick_ms, sc.horizon_ms + 1, sc.tick_ms))
        if times != expected:
            problems.append(f"node {node} tick cadence broken")
    if sc.stabilize_at_ms is not None and result.stabilize_index is None:
        problems.append("stabilize never fired")
    return {"ok": not problems, "problems": problems, "messages": message_report}
