"""Single-slot PBFT built as a synchronous-dispatch composition.

One replica is the composition of a request/decide sub-protocol and, per
view, four sub-protocols: proposal (pre-prepare / new-view), prepare
voting, commit voting, and view change.  Views form an unbounded tag
domain; a view's state materializes lazily on first activity.  Certificates
travel as stapled signatures: a view-change staples a quorum of prepare
signatures, a new-view staples a quorum of view-change messages.

View timers use an absolute schedule: view v is abandoned when the local
clock reaches base * 2^(v+1), so consecutive abandon points are exactly
view_timeout(v) apart and the timeout per view doubles.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, replace
from typing import Iterable

from . import codec
from .authn import Staple
from .compose import Composition, DefaultMap, TaggedCall, TaggedMessage, sync_dispatch
from .runtime_api import BROADCAST, CallEvent, MessageEvent, NodeProgram, Timeout, Transmit
from .sm_core import RefinementFn, SpecMachine, WeakSpec, terminalize

# message kind bytes (wire)
KIND_REQUEST = 0x01
KIND_PREPREPARE = 0x02
KIND_PREPARE = 0x03
KIND_COMMIT = 0x04
KIND_VIEWCHANGE = 0x05
KIND_NEWVIEW = 0x06
KIND_REPLY = 0x07

DIGEST_LEN = 32

# sub-protocol phases within a view tag
PP, PREP, CMT, VC = 0, 1, 2, 3
TAG_REQ = ("req",)


def view_tag(view: int, phase: int) -> tuple:
    return ("view", view, phase)


@dataclass(frozen=True)
class PbftConfig:
    f: int
    view_timeout_base: int = 1000  # ms
    view_cap: int = 20  # timeout doubling saturates here
    client: int | None = None  # defaults to node id n (outside the replica set)

    @property
    def n(self) -> int:
        return 3 * self.f + 1

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    @property
    def weak_cert(self) -> int:
        return self.f + 1

    @property
    def client_id(self) -> int:
        return self.n if self.client is None else self.client


@dataclass(frozen=True)
class Mutants:
    """Deliberate bug switches for the regression suite.  All off by default."""

    wrong_view_staples: bool = False  # re-encode new-view staples with the wrong view
    under_quorum: bool = False  # accept and build certificates one signature short
    early_timer: bool = False  # abandon each view one timeout window early
    dual_view_change: bool = False  # send view-change on both trigger events, unchecked


def leader_of(view: int, cfg: PbftConfig) -> int:
    """Leaders rotate cyclically over the replica set."""
    return view % cfg.n


def view_timeout(view: int, cfg: PbftConfig) -> int:
    """Per-view timeout window: base * 2^view, saturating at the cap."""
    return cfg.view_timeout_base << min(view, cfg.view_cap)


def view_deadline(view: int, cfg: PbftConfig) -> int:
    """Absolute clock value at which view `view` is abandoned.

    Consecutive deadlines differ by exactly view_timeout(view), so the
    abandon schedule realizes the exponentially growing timeouts while
    staying deterministic across nodes.
    """
    return cfg.view_timeout_base << min(view + 1, cfg.view_cap + 1)


# --- messages ----------------------------------------------------------------


@dataclass(frozen=True)
class Request:
    value: bytes


@dataclass(frozen=True)
class PrePrepare:
    view: int
    value: bytes | None
    new_view_cert: tuple[Staple, ...] | None = None


@dataclass(frozen=True)
class Prepare:
    view: int
    digest: bytes


@dataclass(frozen=True)
class Commit:
    view: int
    digest: bytes


@dataclass(frozen=True)
class PreparedCert:
    """Evidence that a value prepared at some view: a quorum of prepare staples."""

    view: int
    value: bytes | None
    digest: bytes
    staples: tuple[Staple, ...]


@dataclass(frozen=True)
class ViewChange:
    view: int  # the view being abandoned
    prepared: PreparedCert | None
    vote_value: bytes | None


@dataclass(frozen=True)
class NewView:
    view: int  # the view being started
    staples: tuple[Staple, ...]  # quorum of ViewChange(view - 1, ...) messages


@dataclass(frozen=True)
class Reply:
    value: bytes | None


def digest_of(value: bytes | None) -> bytes:
    if value is None:
        return hashlib.sha256(b"\x00").digest()
    return hashlib.sha256(b"\x01" + codec.blob(value)).digest()


def vkey(value: bytes | None) -> str:
    """Stable string key for a value option (NULL included)."""
    return "null" if value is None else "v:" + value.hex()


# --- canonical codec ---------------------------------------------------------


class PbftCodec:
    """Canonical tag-length-value encoding for all PBFT message kinds."""

    def encode(self, msg) -> bytes:
        if isinstance(msg, Request):
            return codec.u8(KIND_REQUEST) + codec.blob(msg.value)
        if isinstance(msg, PrePrepare):
            out = codec.u8(KIND_PREPREPARE) + codec.u64(msg.view) + codec.opt_blob(msg.value)
            if msg.new_view_cert is None:
                out += codec.u8(0)
            else:
                out += codec.u8(1) + self._encode_staples(msg.new_view_cert)
            return out
        if isinstance(msg, Prepare):
            return codec.u8(KIND_PREPARE) + codec.u64(msg.view) + msg.digest
        if isinstance(msg, Commit):
            return codec.u8(KIND_COMMIT) + codec.u64(msg.view) + msg.digest
        if isinstance(msg, ViewChange):
            out = codec.u8(KIND_VIEWCHANGE) + codec.u64(msg.view)
            if msg.prepared is None:
                out += codec.u8(0)
            else:
                c = msg.prepared
                out += (
                    codec.u8(1)
                    + codec.u64(c.view)
                    + codec.opt_blob(c.value)
                    + c.digest
                    + self._encode_staples(c.staples)
                )
            out += codec.opt_blob(msg.vote_value)
            return out
        if isinstance(msg, NewView):
            return codec.u8(KIND_NEWVIEW) + codec.u64(msg.view) + self._encode_staples(msg.staples)
        if isinstance(msg, Reply):
            return codec.u8(KIND_REPLY) + codec.opt_blob(msg.value)
        raise TypeError(f"not a PBFT message: {msg!r}")

    def _encode_staples(self, staples: tuple[Staple, ...]) -> bytes:
        out = codec.u16(len(staples))
        for st in staples:
            out += codec.u64(st.signer) + codec.blob(self.encode(st.msg)) + codec.blob(st.sig)
        return out

    def decode(self, payload: bytes):
        r = codec.Reader(payload)
        msg = self._decode_inner(r)
        r.done()
        return msg

    def _decode_inner(self, r: codec.Reader):
        kind = r.u8()
        if kind == KIND_REQUEST:
            return Request(value=r.blob())
        if kind == KIND_PREPREPARE:
            view = r.u64()
            value = r.opt_blob()
            cert = None if r.u8() == 0 else self._decode_staples(r)
            return PrePrepare(view=view, value=value, new_view_cert=cert)
        if kind == KIND_PREPARE:
            return Prepare(view=r.u64(), digest=r.take(DIGEST_LEN))
        if kind == KIND_COMMIT:
            return Commit(view=r.u64(), digest=r.take(DIGEST_LEN))
        if kind == KIND_VIEWCHANGE:
            view = r.u64()
            prepared = None
            if r.u8() == 1:
                prepared = PreparedCert(
                    view=r.u64(),
                    value=r.opt_blob(),
                    digest=r.take(DIGEST_LEN),
                    staples=self._decode_staples(r),
                )
            return ViewChange(view=view, prepared=prepared, vote_value=r.opt_blob())
        if kind == KIND_NEWVIEW:
            return NewView(view=r.u64(), staples=self._decode_staples(r))
        if kind == KIND_REPLY:
            return Reply(value=r.opt_blob())
        raise codec.DecodeError(f"unknown message kind {kind:#x}")

    def _decode_staples(self, r: codec.Reader) -> tuple[Staple, ...]:
        count = r.u16()
        staples = []
        for _ in range(count):
            signer = r.u64()
            msg = self.decode(r.blob())
            sig = r.blob()
            staples.append(Staple(signer=signer, msg=msg, sig=sig))
        return tuple(staples)

    def tag_of(self, msg) -> tuple[int, int]:
        if isinstance(msg, Request):
            return (KIND_REQUEST, 0)
        if isinstance(msg, PrePrepare):
            return (KIND_PREPREPARE, msg.view)
        if isinstance(msg, Prepare):
            return (KIND_PREPARE, msg.view)
        if isinstance(msg, Commit):
            return (KIND_COMMIT, msg.view)
        if isinstance(msg, ViewChange):
            return (KIND_VIEWCHANGE, msg.view)
        if isinstance(msg, NewView):
            return (KIND_NEWVIEW, msg.view)
        if isinstance(msg, Reply):
            return (KIND_REPLY, 0)
        raise TypeError(f"not a PBFT message: {msg!r}")

    def extract(self, msg) -> tuple[Staple, ...]:
        """Flatten a message's stapled signatures, depth-first.

        A view-change yields its prepare staples; a new-view yields each
        view-change staple followed by that view-change's own prepare
        staples.
        """
        if isinstance(msg, ViewChange) and msg.prepared is not None:
            return msg.prepared.staples
        if isinstance(msg, NewView) or (
            isinstance(msg, PrePrepare) and msg.new_view_cert is not None
        ):
            staples = msg.staples if isinstance(msg, NewView) else msg.new_view_cert
            out: list[Staple] = []
            for st in staples:
                out.append(st)
                out.extend(self.extract(st.msg))
            return tuple(out)
        return ()


PBFT_CODEC = PbftCodec()


# --- sub-protocol states -----------------------------------------------------


@dataclass(frozen=True)
class ReqState:
    request: bytes | None = None
    has_decided: bool = False
    decided_value: bytes | None = None
    decided_view: int = 0


@dataclass(frozen=True)
class PPState:
    proposed: bool = False
    accepted: bool = False
    value: bytes | None = None
    digest: bytes = b""


@dataclass(frozen=True)
class VoteState:
    voted: bool = False
    digest: bytes = b""
    # (signer, digest, signature) sorted by signer; one vote per signer
    votes: tuple[tuple[int, bytes, bytes], ...] = ()


@dataclass(frozen=True)
class VCState:
    armed: bool = False
    disarmed: bool = False
    sent: str | None = None  # vkey of the value this node view-changed on
    sent_count: int = 0
    prepared: PreparedCert | None = None
    # (signer, ViewChange message, signature) sorted by signer
    votes: tuple[tuple[int, ViewChange, bytes], ...] = ()


REQ_ZERO = ReqState()
PP_ZERO = PPState()
VOTE_ZERO = VoteState()
VC_ZERO = VCState()


def zero_of(tag):
    if tag == TAG_REQ:
        return REQ_ZERO
    _, _, phase = tag
    if phase == PP:
        return PP_ZERO
    if phase in (PREP, CMT):
        return VOTE_ZERO
    return VC_ZERO


def in_domain(tag) -> bool:
    if tag == TAG_REQ:
        return True
    return (
        isinstance(tag, tuple)
        and len(tag) == 3
        and tag[0] == "view"
        and isinstance(tag[1], int)
        and tag[1] >= 0
        and tag[2] in (PP, PREP, CMT, VC)
    )


# --- certificate validation --------------------------------------------------


def _threshold(cfg: PbftConfig, mutants: Mutants) -> int:
    return cfg.quorum - 1 if mutants.under_quorum else cfg.quorum


def valid_prepared_cert(cert: PreparedCert, cfg: PbftConfig, mutants: Mutants) -> bool:
    """Structural check: quorum of distinct replicas all stapling the same
    prepare message.  Signatures were already verified at the runtime
    boundary (receive) or will be at transmit."""
    if cert.digest != digest_of(cert.value):
        return False
    signers = set()
    for st in cert.staples:
        if not isinstance(st.msg, Prepare):
            return False
        if st.msg.view != cert.view or st.msg.digest != cert.digest:
            return False
        if st.signer in signers or not 0 <= st.signer < cfg.n:
            return False
        signers.add(st.signer)
    return len(signers) >= _threshold(cfg, mutants)


def valid_new_view(msg: NewView, cfg: PbftConfig, mutants: Mutants) -> bool:
    signers = set()
    for st in msg.staples:
        if not isinstance(st.msg, ViewChange) or st.msg.view != msg.view - 1:
            return False
        if st.signer in signers or not 0 <= st.signer < cfg.n:
            return False
        if st.msg.prepared is not None and not valid_prepared_cert(st.msg.prepared, cfg, mutants):
            return False
        signers.add(st.signer)
    return len(signers) >= _threshold(cfg, mutants)


def select_value(staples: tuple[Staple, ...]) -> tuple[bytes | None, bytes]:
    """New-view value selection: the prepared certificate with the highest
    view wins; with no prepared certificate the proposal is NULL."""
    best: PreparedCert | None = None
    for st in staples:
        cert = st.msg.prepared
        if cert is None:
            continue
        if best is None or (cert.view, cert.digest) > (best.view, best.digest):
            best = cert
    if best is None:
        return None, digest_of(None)
    return best.value, best.digest


# --- sub-protocol implementations -------------------------------------------


def _req_run(me: int, cfg: PbftConfig):
    def run(state: ReqState, ev):
        if isinstance(ev, MessageEvent) and isinstance(ev.msg, Request):
            if ev.sender == cfg.client_id and state.request is None:
                return replace(state, request=ev.msg.value), ()
            return state, ()
        if isinstance(ev, CallEvent) and isinstance(ev.arg, tuple) and ev.arg[0] == "decide":
            _, value, view = ev.arg
            if not state.has_decided:
                new = replace(state, has_decided=True, decided_value=value, decided_view=view)
                return new, (Transmit(to=cfg.client_id, msg=Reply(value=value)),)
            return state, ()
        return state, ()

    return run


def _pp_run(me: int, cfg: PbftConfig, view: int, mutants: Mutants):
    def run(state: PPState, ev):
        if isinstance(ev, CallEvent) and isinstance(ev.arg, tuple):
            kind = ev.arg[0]
            if kind == "start" and me == leader_of(view, cfg) and not state.proposed:
                _, value = ev.arg
                msg = PrePrepare(view=view, value=value, new_view_cert=None)
                return replace(state, proposed=True), (Transmit(to=BROADCAST, msg=msg),)
            if kind == "start_newview" and me == leader_of(view, cfg) and not state.proposed:
                _, staples = ev.arg
                if mutants.wrong_view_staples:
                    # re-encode the view-change plaintext with the wrong view
                    # while keeping the original signature
                    staples = tuple(
                        Staple(st.signer, replace(st.msg, view=st.msg.view + 1), st.sig)
                        for st in staples
                    )
                msg = NewView(view=view, staples=staples)
                return replace(state, proposed=True), (Transmit(to=BROADCAST, msg=msg),)
            return state, ()
        if isinstance(ev, MessageEvent):
            msg = ev.msg
            if (
                isinstance(msg, PrePrepare)
                and msg.view == view == 0
                and ev.sender == leader_of(view, cfg)
                and not state.accepted
            ):
                return (
                    replace(state, accepted=True, value=msg.value, digest=digest_of(msg.value)),
                    (),
                )
            if (
                isinstance(msg, NewView)
                and msg.view == view
                and view > 0
                and ev.sender == leader_of(view, cfg)
                and not state.accepted
                and valid_new_view(msg, cfg, mutants)
            ):
                value, digest = select_value(msg.staples)
                return replace(state, accepted=True, value=value, digest=digest), ()
            return state, ()
        return state, ()

    return run


def _vote_run(me: int, cfg: PbftConfig, view: int, phase: int):
    msg_type = Prepare if phase == PREP else Commit

    def run(state: VoteState, ev):
        if isinstance(ev, CallEvent) and isinstance(ev.arg, tuple) and ev.arg[0] == "vote":
            if not state.voted:
                _, digest = ev.arg
                msg = msg_type(view=view, digest=digest)
                return replace(state, voted=True, digest=digest), (Transmit(to=BROADCAST, msg=msg),)
            return state, ()
        if isinstance(ev, MessageEvent) and isinstance(ev.msg, msg_type) and ev.msg.view == view:
            if 0 <= ev.sender < cfg.n and all(s != ev.sender for s, _, _ in state.votes):
                votes = tuple(sorted(state.votes + ((ev.sender, ev.msg.digest, ev.sig),)))
                return replace(state, votes=votes), ()
            return state, ()
        return state, ()

    return run


def _vc_run(me: int, cfg: PbftConfig, view: int, mutants: Mutants):
    def deadline() -> int:
        if mutants.early_timer:
            return view_deadline(view, cfg) // 2  # one doubling too soon
        return view_deadline(view, cfg)

    def make_view_change(state: VCState) -> ViewChange:
        if state.prepared is not None:
            return ViewChange(view=view, prepared=state.prepared, vote_value=state.prepared.value)
        return ViewChange(view=view, prepared=None, vote_value=None)

    def run(state: VCState, ev):
        if isinstance(ev, CallEvent) and isinstance(ev.arg, tuple):
            kind = ev.arg[0]
            if kind == "arm":
                if not state.armed and not state.disarmed:
                    return replace(state, armed=True), ()
                return state, ()
            if kind == "disarm":
                if not state.disarmed:
                    return replace(state, disarmed=True, armed=False), ()
                return state, ()
            if kind == "prepared":
                _, cert = ev.arg
                if state.prepared is None or cert.view >= state.prepared.view:
                    return replace(state, prepared=cert), ()
                return state, ()
            if kind == "amplify":
                _, value = ev.arg
                may_send = state.sent is None or mutants.dual_view_change
                if not may_send:
                    return state, ()
                if state.prepared is not None and vkey(state.prepared.value) == vkey(value):
                    msg = make_view_change(state)  # can attach our own evidence
                else:
                    msg = ViewChange(view=view, prepared=None, vote_value=value)
                new = replace(
                    state,
                    sent=state.sent if state.sent is not None else vkey(value),
                    sent_count=state.sent_count + 1,
                )
                return new, (Transmit(to=BROADCAST, msg=msg),)
            return state, ()
        if isinstance(ev, Timeout):
            if state.armed and not state.disarmed and state.sent is None and ev.now >= deadline():
                msg = make_view_change(state)
                new = replace(
                    state, sent=vkey(msg.vote_value), sent_count=state.sent_count + 1, armed=False
                )
                return new, (Transmit(to=BROADCAST, msg=msg),)
            return state, ()
        if isinstance(ev, MessageEvent) and isinstance(ev.msg, ViewChange) and ev.msg.view == view:
            msg = ev.msg
            if msg.prepared is not None and not valid_prepared_cert(msg.prepared, cfg, mutants):
                return state, ()
            if 0 <= ev.sender < cfg.n and all(s != ev.sender for s, _, _ in state.votes):
                votes = tuple(
                    sorted(state.votes + ((ev.sender, msg, ev.sig),), key=lambda v: v[0])
                )
                return replace(state, votes=votes), ()
            return state, ()
        return state, ()

    return run


# --- split: cross-sub-protocol triggers --------------------------------------


def _make_split(me: int, cfg: PbftConfig, mutants: Mutants):
    threshold = _threshold(cfg, mutants)

    def disarm_lower(state: DefaultMap, below: int) -> list:
        out = []
        for tag in state.explicit_tags():
            if tag != TAG_REQ and tag[2] == VC and tag[1] < below:
                sub = state.lookup(tag)
                if not sub.disarmed:
                    out.append((view_tag(tag[1], VC), ("disarm",)))
        return out

    def disarm_all(state: DefaultMap) -> list:
        out = []
        for tag in state.explicit_tags():
            if tag != TAG_REQ and tag[2] == VC:
                sub = state.lookup(tag)
                if not sub.disarmed:
                    out.append((view_tag(tag[1], VC), ("disarm",)))
        return out

    def highest_cert(state: DefaultMap) -> PreparedCert | None:
        """The highest prepared certificate this node knows, across all views.
        It must travel into every later view's view-change vote."""
        best = None
        for tag in state.explicit_tags():
            if tag != TAG_REQ and tag[2] == VC:
                cert = state.lookup(tag).prepared
                if cert is not None and (best is None or cert.view > best.view):
                    best = cert
        return best

    def arm_calls(state: DefaultMap, v: int) -> list:
        """Arm view v's view-change timer, carrying forward prepared evidence."""
        calls = [(view_tag(v, VC), ("arm",))]
        cert = highest_cert(state)
        if cert is not None:
            calls.append((view_tag(v, VC), ("prepared", cert)))
        return calls

    def prepared_cert(v: int, value, digest, pvotes) -> PreparedCert:
        staples = tuple(
            Staple(s, Prepare(view=v, digest=d), sig) for s, d, sig in sorted(pvotes)[:threshold]
        )
        return PreparedCert(view=v, value=value, digest=digest, staples=staples)

    def quorum_calls(state: DefaultMap, v: int, value, digest, extra_prep=None, extra_cmt=None):
        """Quorum-completion triggers for view v, evaluated against the
        pre-step state plus at most one not-yet-stored incoming vote.  Used
        both when a vote arrives (with the incoming vote as extra) and when
        the proposal arrives after votes were already buffered."""
        calls = []
        prep: VoteState = state.lookup(view_tag(v, PREP))
        pvotes = [(s, d, sig) for s, d, sig in prep.votes if d == digest]
        had_prep = len(pvotes) >= threshold
        if extra_prep is not None:
            pvotes.append(extra_prep)
        if len(pvotes) >= threshold and (extra_prep is None or not had_prep):
            cmt: VoteState = state.lookup(view_tag(v, CMT))
            if not cmt.voted:
                calls.append((view_tag(v, CMT), ("vote", digest)))
            calls.append((view_tag(v, VC), ("prepared", prepared_cert(v, value, digest, pvotes))))
        cmt = state.lookup(view_tag(v, CMT))
        cvotes = [x for x in cmt.votes if x[1] == digest]
        had_cmt = len(cvotes) >= threshold
        if extra_cmt is not None:
            cvotes.append(extra_cmt)
        if len(cvotes) >= threshold and (extra_cmt is None or not had_cmt):
            req: ReqState = state.lookup(TAG_REQ)
            vc: VCState = state.lookup(view_tag(v, VC))
            if not req.has_decided and vc.sent is None:
                calls.append((TAG_REQ, ("decide", value, v)))
                calls.extend(disarm_all(state))
        return calls

    def split(state: DefaultMap, trigger):
        if not isinstance(trigger, TaggedMessage):
            return []
        msg, sender = trigger.msg, trigger.sender
        calls: list[tuple[tuple, object]] = []

        if isinstance(msg, Request):
            req: ReqState = state.lookup(TAG_REQ)
            if sender == cfg.client_id and req.request is None:
                if me == leader_of(0, cfg):
                    calls.append((view_tag(0, PP), ("start", msg.value)))
                calls.append((view_tag(0, VC), ("arm",)))
            return calls

        if isinstance(msg, PrePrepare) and msg.view == 0 and sender == leader_of(0, cfg):
            pp: PPState = state.lookup(view_tag(0, PP))
            if not pp.accepted:
                digest = digest_of(msg.value)
                calls.append((view_tag(0, PREP), ("vote", digest)))
                calls.extend(quorum_calls(state, 0, msg.value, digest))
            return calls

        if isinstance(msg, NewView) and msg.view > 0 and sender == leader_of(msg.view, cfg):
            pp = state.lookup(view_tag(msg.view, PP))
            if not pp.accepted and valid_new_view(msg, cfg, mutants):
                value, digest = select_value(msg.staples)
                calls.append((view_tag(msg.view, PREP), ("vote", digest)))
                vc = state.lookup(view_tag(msg.view, VC))
                if not vc.armed and not vc.disarmed:
                    calls.extend(arm_calls(state, msg.view))
                calls.extend(disarm_lower(state, msg.view))
                calls.extend(quorum_calls(state, msg.view, value, digest))
            return calls

        if isinstance(msg, (Prepare, Commit)):
            v = msg.view
            phase = PREP if isinstance(msg, Prepare) else CMT
            pp = state.lookup(view_tag(v, PP))
            if not pp.accepted or pp.digest != msg.digest:
                return []
            vote: VoteState = state.lookup(view_tag(v, phase))
            if any(s == sender for s, _, _ in vote.votes) or not 0 <= sender < cfg.n:
                return []
            incoming = (sender, msg.digest, trigger.sig)
            if phase == PREP:
                return quorum_calls(state, v, pp.value, pp.digest, extra_prep=incoming)
            return quorum_calls(state, v, pp.value, pp.digest, extra_cmt=incoming)

        if isinstance(msg, ViewChange):
            v = msg.view
            vc = state.lookup(view_tag(v, VC))
            if any(s == sender for s, _, _ in vc.votes) or not 0 <= sender < cfg.n:
                return []
            if msg.prepared is not None and not valid_prepared_cert(msg.prepared, cfg, mutants):
                return []
            votes_after = list(vc.votes) + [(sender, msg, trigger.sig)]
            if len(votes_after) == threshold:
                req = state.lookup(TAG_REQ)
                if not req.has_decided:
                    next_vc: VCState = state.lookup(view_tag(v + 1, VC))
                    if not next_vc.armed and not next_vc.disarmed:
                        calls.extend(arm_calls(state, v + 1))
                    calls.extend(disarm_lower(state, v + 1))
                    if me == leader_of(v + 1, cfg):
                        picked = sorted(votes_after, key=lambda t: t[0])[:threshold]
                        staples = tuple(Staple(s, m, sig) for s, m, sig in picked)
                        calls.append((view_tag(v + 1, PP), ("start_newview", staples)))
                return calls
            # weak-certificate amplification: f+1 view-change votes on one value
            counts: dict[str, int] = {}
            for _, m, _ in votes_after:
                counts[vkey(m.vote_value)] = counts.get(vkey(m.vote_value), 0) + 1
            key = vkey(msg.vote_value)
            if counts.get(key, 0) == cfg.weak_cert:
                own_key = None if vc.prepared is None else vkey(vc.prepared.value)
                compatible = own_key is None or own_key == key
                if mutants.dual_view_change:
                    calls.append((view_tag(v, VC), ("amplify", msg.vote_value)))
                elif vc.sent is None and compatible and vc.armed:
                    calls.append((view_tag(v, VC), ("amplify", msg.vote_value)))
            return calls

        return []

    return split


# --- programs ----------------------------------------------------------------


def route_tag(msg) -> tuple:
    if isinstance(msg, (Request, Reply)):
        return TAG_REQ
    if isinstance(msg, (PrePrepare, NewView)):
        return view_tag(msg.view, PP)
    if isinstance(msg, Prepare):
        return view_tag(msg.view, PREP)
    if isinstance(msg, Commit):
        return view_tag(msg.view, CMT)
    if isinstance(msg, ViewChange):
        return view_tag(msg.view, VC)
    raise TypeError(f"not a routable PBFT message: {msg!r}")


def replica_composition(me: int, cfg: PbftConfig, mutants: Mutants | None = None) -> Composition:
    mutants = mutants or Mutants()

    def impl_of(tag):
        if tag == TAG_REQ:
            return _req_run(me, cfg)
        _, view, phase = tag
        if phase == PP:
            return _pp_run(me, cfg, view, mutants)
        if phase in (PREP, CMT):
            return _vote_run(me, cfg, view, phase)
        return _vc_run(me, cfg, view, mutants)

    return Composition(
        impl_of=impl_of,
        zero_of=zero_of,
        split=_make_split(me, cfg, mutants),
        in_domain=in_domain,
    )


def pbft_program(cfg: PbftConfig, me: int, mutants: Mutants | None = None) -> NodeProgram:
    """The composed replica program: request/decide plus per-view proposal,
    prepare, commit, and view-change sub-protocols."""
    comp = replica_composition(me, cfg, mutants)

    def zero(params=None) -> DefaultMap:
        return DefaultMap(zero_of)

    def run(state: DefaultMap, ev):
        if isinstance(ev, Timeout):
            return sync_dispatch(comp, state, ev)
        if isinstance(ev, MessageEvent):
            tagged = TaggedMessage(tag=route_tag(ev.msg), sender=ev.sender, msg=ev.msg, sig=ev.sig)
            return sync_dispatch(comp, state, tagged)
        if isinstance(ev, CallEvent):
            return sync_dispatch(comp, state, TaggedCall(tag=TAG_REQ, arg=ev.arg))
        raise TypeError(f"unsupported event {ev!r}")

    return NodeProgram(zero=zero, run=run, mcodec=PBFT_CODEC)


@dataclass(frozen=True)
class ClientState:
    request: bytes | None = None
    # accepted replies as (signer, value key) pairs
    replies: tuple[tuple[int, str], ...] = ()
    done: bool = False
    done_value: str | None = None


def client_program(cfg: PbftConfig) -> NodeProgram:
    """The client: broadcasts the request, then counts f+1 matching replies."""

    def zero(params=None) -> ClientState:
        return ClientState()

    def run(state: ClientState, ev):
        if isinstance(ev, CallEvent) and isinstance(ev.arg, tuple) and ev.arg[0] == "submit":
            _, value = ev.arg
            if state.request is None:
                return replace(state, request=value), (Transmit(to=BROADCAST, msg=Request(value)),)
            return state, ()
        if isinstance(ev, MessageEvent) and isinstance(ev.msg, Reply) and not state.done:
            if not 0 <= ev.sender < cfg.n:
                return state, ()
            key = vkey(ev.msg.value)
            if any(s == ev.sender for s, _ in state.replies):
                return state, ()
            replies = tuple(sorted(state.replies + ((ev.sender, key),)))
            matching = sum(1 for _, k in replies if k == key)
            if matching >= cfg.weak_cert:
                return replace(state, replies=replies, done=True, done_value=key), ()
            return replace(state, replies=replies), ()
        return state, ()

    return NodeProgram(zero=zero, run=run, mcodec=PBFT_CODEC)


# --- adversarial replica programs (simulator only) ---------------------------


def wrong_value_program(cfg: PbftConfig, me: int, attacker_value: bytes) -> NodeProgram:
    """A corrupted replica that votes and view-changes on the wrong value.

    It runs the honest program but rewrites its outgoing votes; all its
    messages are still signed with its own key by the runtime."""
    base = pbft_program(cfg, me)
    bad_digest = digest_of(attacker_value)

    def rewrite(t: Transmit) -> Transmit:
        m = t.msg
        if isinstance(m, (Prepare, Commit)):
            return replace(t, msg=replace(m, digest=bad_digest))
        if isinstance(m, ViewChange):
            return replace(t, msg=ViewChange(view=m.view, prepared=None, vote_value=attacker_value))
        if isinstance(m, PrePrepare):
            return replace(t, msg=replace(m, value=attacker_value))
        if isinstance(m, Reply):
            return replace(t, msg=Reply(value=attacker_value))
        return t

    def run(state, ev):
        new_state, outs = base.run(state, ev)
        return new_state, tuple(rewrite(t) for t in outs)

    return NodeProgram(zero=base.zero, run=run, mcodec=PBFT_CODEC)


def silent_program(cfg: PbftConfig, me: int) -> NodeProgram:
    """A corrupted replica that sends nothing at all (omission faults)."""
    base = pbft_program(cfg, me)

    def run(state, ev):
        new_state, _ = base.run(state, ev)
        return new_state, ()

    return NodeProgram(zero=base.zero, run=run, mcodec=PBFT_CODEC)


# --- observation helpers (used by hosts for logging) -------------------------


def observe_effects(pre: DefaultMap, post: DefaultMap) -> dict:
    """Diff a replica step for log annotation: decision and view advance."""
    effects: dict = {}
    pre_req: ReqState = pre.lookup(TAG_REQ)
    post_req: ReqState = post.lookup(TAG_REQ)
    if not pre_req.has_decided and post_req.has_decided:
        effects["decided"] = vkey(post_req.decided_value)
        effects["decided_view"] = post_req.decided_view
    pre_armed = max(
        (t[1] for t in pre.explicit_tags() if t != TAG_REQ and t[2] == VC), default=-1
    )
    post_armed = max(
        (t[1] for t in post.explicit_tags() if t != TAG_REQ and t[2] == VC), default=-1
    )
    if post_armed > pre_armed:
        effects["view"] = post_armed
    return effects


def max_view(state: DefaultMap) -> int:
    return max((t[1] for t in state.explicit_tags() if t != TAG_REQ), default=0)


# --- quorum math -------------------------------------------------------------


def quorum_intersection_ok(f: int) -> bool:
    """Exhaustive: every pair of (2f+1)-subsets of 3f+1 nodes shares at least
    f+1 members (hence at least one honest node)."""
    n, q = 3 * f + 1, 2 * f + 1
    nodes = range(n)
    for a in itertools.combinations(nodes, q):
        sa = set(a)
        for b in itertools.combinations(nodes, q):
            if len(sa.intersection(b)) < f + 1:
                return False
    return True


# --- top-level broadcast specification and abstraction map -------------------


def broadcast_spec(cfg: PbftConfig, honest: Iterable[int] | None = None) -> SpecMachine:
    """Terminal specification of the broadcast register.

    State: the agreed register (set at most once), the honest client's
    pending request, and the set of terminated replicas.  Transitions:
    send (client submits), set (first replica terminates, fixing the
    register), terminate (further replicas, value must match).
    """

    invalid = {"#invalid": True}

    def init(s):
        return s == {"reg": None, "send": None, "terminated": []}

    def nxt(s, t):
        if not isinstance(t, dict):
            return invalid
        kind = t.get("kind")
        if kind == "send":
            if s["send"] is not None:
                return invalid
            return {"reg": s["reg"], "send": t["value"], "terminated": s["terminated"]}
        if kind == "set":
            if s["reg"] is not None:
                return invalid
            return {
                "reg": t["value"],
                "send": s["send"],
                "terminated": sorted(set(s["terminated"]) | {t["node"]}),
            }
        if kind == "terminate":
            if s["reg"] != t["value"]:
                return invalid
            return {
                "reg": s["reg"],
                "send": s["send"],
                "terminated": sorted(set(s["terminated"]) | {t["node"]}),
            }
        return invalid

    def weakfair(task, s, t):
        if task == ("SetF",):
            return t.get("kind") == "set" and s["send"] is not None and t["value"] == s["send"]
        if task[0] == "TerminateF":
            return t.get("kind") in ("set", "terminate") and t.get("node") == task[1]
        return False

    def disabled(task, s):
        if task == ("SetF",):
            return s["reg"] is not None or s["send"] is None
        if task[0] == "TerminateF":
            return task[1] in s["terminated"]
        return True

    tasks = broadcast_tasks(honest) if honest is not None else ()
    ws = WeakSpec(init_pred=init, next_fn=nxt, weakfair_pred=weakfair, task_enum=tasks, name="broadcast")
    return terminalize(ws, disabled_pred=disabled)


def broadcast_tasks(honest_replicas: Iterable[int]) -> tuple:
    return (("SetF",),) + tuple(("TerminateF", i) for i in sorted(honest_replicas))


def abstraction_map(cfg: PbftConfig) -> RefinementFn:
    """Trace refinement from the simulated network execution to the broadcast
    register: the client's submit call maps to send; each replica's
    commit-quorum receipt maps to set (the first) or terminate; everything
    else stutters."""

    def map_fn(s, t):
        astate = {"reg": s["reg"], "send": s["send"], "terminated": s["terminated"]}
        atrans = None
        if t.get("kind") == "call" and t.get("submit"):
            atrans = {"kind": "send", "value": t["value"]}
        elif t.get("decided") is not None:
            node = t["node"]
            value = t["decided"]
            if s["reg"] is None:
                atrans = {"kind": "set", "node": node, "value": value}
            else:
                atrans = {"kind": "terminate", "node": node, "value": value}
        return astate, atrans

    return RefinementFn(map_fn=map_fn, trace_only=True)
