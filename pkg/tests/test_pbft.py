import time

import pytest

from bftkit import codec, pbft
from bftkit.authn import Staple
from bftkit.runtime_api import CallEvent, MessageEvent, Timeout


def test_config_derived_sizes(cfg1, cfg2):
    assert (cfg1.n, cfg1.quorum, cfg1.weak_cert, cfg1.client_id) == (4, 3, 2, 4)
    assert (cfg2.n, cfg2.quorum, cfg2.weak_cert, cfg2.client_id) == (7, 5, 3, 7)
    assert pbft.PbftConfig(f=1, client=9).client_id == 9


def test_leader_rotation(cfg1):
    assert [pbft.leader_of(v, cfg1) for v in range(6)] == [0, 1, 2, 3, 0, 1]


def test_view_timeout_doubles_and_saturates(cfg1):
    assert [pbft.view_timeout(v, cfg1) for v in range(4)] == [1000, 2000, 4000, 8000]
    assert pbft.view_timeout(cfg1.view_cap + 5, cfg1) == pbft.view_timeout(cfg1.view_cap, cfg1)


def test_view_deadline_schedule(cfg1):
    assert [pbft.view_deadline(v, cfg1) for v in range(4)] == [2000, 4000, 8000, 16000]
    # consecutive deadlines differ by exactly the newer view's timeout window
    for v in range(1, 6):
        assert pbft.view_deadline(v, cfg1) - pbft.view_deadline(v - 1, cfg1) == pbft.view_timeout(v, cfg1)


def test_digest_and_vkey():
    assert len(pbft.digest_of(None)) == 32
    assert pbft.digest_of(b"a") != pbft.digest_of(b"b") != pbft.digest_of(None)
    assert pbft.vkey(None) == "null"
    assert pbft.vkey(b"\xde\xad") == "v:dead"


def test_quorum_intersection_exhaustive():
    t0 = time.monotonic()
    assert pbft.quorum_intersection_ok(1)
    assert pbft.quorum_intersection_ok(2)
    assert time.monotonic() - t0 < 1.0


# --- codec -------------------------------------------------------------------


def _sample_messages(cfg):
    d = pbft.digest_of(b"val")
    prep = pbft.Prepare(view=2, digest=d)
    cert = pbft.PreparedCert(
        view=2, value=b"val", digest=d,
        staples=tuple(Staple(signer=i, msg=prep, sig=bytes(64)) for i in range(cfg.quorum)),
    )
    vc = pbft.ViewChange(view=2, prepared=cert, vote_value=b"val")
    nv = pbft.NewView(view=3, staples=(Staple(signer=0, msg=vc, sig=bytes(64)),))
    return [
        pbft.Request(value=b"hello"),
        pbft.PrePrepare(view=0, value=b"val"),
        pbft.PrePrepare(view=3, value=None, new_view_cert=nv.staples),
        prep,
        pbft.Commit(view=2, digest=d),
        pbft.ViewChange(view=1, prepared=None, vote_value=None),
        vc,
        nv,
        pbft.Reply(value=b"val"),
        pbft.Reply(value=None),
    ]


def test_codec_roundtrip_all_kinds(cfg1):
    mc = pbft.PBFT_CODEC
    for msg in _sample_messages(cfg1):
        wire = mc.encode(msg)
        assert mc.decode(wire) == msg
        # canonical: a re-encode of the decode is byte-identical
        assert mc.encode(mc.decode(wire)) == wire


def test_codec_rejects_unknown_kind_and_trailing_bytes():
    mc = pbft.PBFT_CODEC
    with pytest.raises(codec.DecodeError):
        mc.decode(b"\x7f")
    with pytest.raises(codec.DecodeError):
        mc.decode(mc.encode(pbft.Reply(value=None)) + b"!")


def test_tag_of_binds_kind_and_view(cfg1):
    mc = pbft.PBFT_CODEC
    d = pbft.digest_of(b"v")
    assert mc.tag_of(pbft.Prepare(view=4, digest=d)) == (pbft.KIND_PREPARE, 4)
    assert mc.tag_of(pbft.Commit(view=4, digest=d)) == (pbft.KIND_COMMIT, 4)
    assert mc.tag_of(pbft.Request(value=b"x")) == (pbft.KIND_REQUEST, 0)
    assert mc.tag_of(pbft.Reply(value=None)) == (pbft.KIND_REPLY, 0)


def test_extract_recurses_through_new_view(cfg1):
    mc = pbft.PBFT_CODEC
    msgs = _sample_messages(cfg1)
    vc_with_cert = msgs[6]
    nv = msgs[7]
    assert len(mc.extract(vc_with_cert)) == cfg1.quorum  # its prepare staples
    # new-view: the view-change staple itself plus its nested prepares
    assert len(mc.extract(nv)) == 1 + cfg1.quorum
    assert len(mc.extract(msgs[2])) == 1 + cfg1.quorum  # kickoff proposal carrying the cert
    assert mc.extract(msgs[0]) == ()


def test_route_tag(cfg1):
    d = pbft.digest_of(b"v")
    assert pbft.route_tag(pbft.Request(value=b"x")) == pbft.TAG_REQ
    assert pbft.route_tag(pbft.Reply(value=None)) == pbft.TAG_REQ
    assert pbft.route_tag(pbft.PrePrepare(view=1, value=b"x")) == ("view", 1, pbft.PP)
    assert pbft.route_tag(pbft.Prepare(view=1, digest=d)) == ("view", 1, pbft.PREP)
    assert pbft.route_tag(pbft.Commit(view=1, digest=d)) == ("view", 1, pbft.CMT)
    assert pbft.route_tag(pbft.ViewChange(view=1, prepared=None, vote_value=None)) == ("view", 1, pbft.VC)


def test_domain_and_zero_states():
    assert pbft.in_domain(pbft.TAG_REQ)
    assert pbft.in_domain(("view", 0, pbft.PP))
    assert not pbft.in_domain(("view", -1, pbft.PP))
    assert not pbft.in_domain(("view", 0, 9))
    assert not pbft.in_domain("nope")
    assert pbft.zero_of(pbft.TAG_REQ) == pbft.ReqState()
    assert pbft.zero_of(("view", 3, pbft.PREP)) == pbft.VoteState()
    assert pbft.zero_of(("view", 3, pbft.VC)) == pbft.VCState()


# --- certificate validation --------------------------------------------------


def _cert(cfg, value=b"val", view=2, signers=None, digest=None):
    signers = range(cfg.quorum) if signers is None else signers
    d = pbft.digest_of(value) if digest is None else digest
    prep = pbft.Prepare(view=view, digest=d)
    return pbft.PreparedCert(
        view=view, value=value, digest=d,
        staples=tuple(Staple(signer=i, msg=prep, sig=bytes(64)) for i in signers),
    )


def test_valid_prepared_cert(cfg1):
    m = pbft.Mutants()
    assert pbft.valid_prepared_cert(_cert(cfg1), cfg1, m)
    # one signature short
    assert not pbft.valid_prepared_cert(_cert(cfg1, signers=range(cfg1.quorum - 1)), cfg1, m)
    # duplicate signer
    assert not pbft.valid_prepared_cert(_cert(cfg1, signers=[0, 0, 1]), cfg1, m)
    # signer outside the replica set
    assert not pbft.valid_prepared_cert(_cert(cfg1, signers=[0, 1, 9]), cfg1, m)
    # digest does not match the claimed value
    assert not pbft.valid_prepared_cert(_cert(cfg1, digest=pbft.digest_of(b"other")), cfg1, m)


def test_under_quorum_mutant_lowers_threshold(cfg1):
    short = _cert(cfg1, signers=range(cfg1.quorum - 1))
    assert not pbft.valid_prepared_cert(short, cfg1, pbft.Mutants())
    assert pbft.valid_prepared_cert(short, cfg1, pbft.Mutants(under_quorum=True))


def test_valid_new_view(cfg1):
    m = pbft.Mutants()

    def vc(signer, prepared=None):
        return Staple(signer=signer, msg=pbft.ViewChange(view=0, prepared=prepared, vote_value=None),
                      sig=bytes(64))

    good = pbft.NewView(view=1, staples=tuple(vc(i) for i in range(cfg1.quorum)))
    assert pbft.valid_new_view(good, cfg1, m)
    # wrong abandoned view in a staple
    bad_view = pbft.NewView(view=2, staples=tuple(vc(i) for i in range(cfg1.quorum)))
    assert not pbft.valid_new_view(bad_view, cfg1, m)
    # under quorum
    short = pbft.NewView(view=1, staples=tuple(vc(i) for i in range(cfg1.quorum - 1)))
    assert not pbft.valid_new_view(short, cfg1, m)
    # invalid nested prepared certificate
    nested = pbft.NewView(view=1, staples=(vc(0, _cert(cfg1, signers=[0])),) + tuple(vc(i) for i in (1, 2)))
    assert not pbft.valid_new_view(nested, cfg1, m)


def test_select_value_prefers_highest_view(cfg1):
    def vc_staple(signer, prepared):
        return Staple(signer=signer, msg=pbft.ViewChange(view=5, prepared=prepared, vote_value=None),
                      sig=bytes(64))

    low = _cert(cfg1, value=b"old", view=1)
    high = _cert(cfg1, value=b"new", view=3)
    value, digest = pbft.select_value((vc_staple(0, low), vc_staple(1, high), vc_staple(2, None)))
    assert value == b"new" and digest == pbft.digest_of(b"new")
    value, digest = pbft.select_value((vc_staple(0, None),))
    assert value is None and digest == pbft.digest_of(None)


# --- hand-driven single-node runs --------------------------------------------


def _sig_for(msg):
    return bytes(64)


def test_leader_proposes_on_request(cfg1):
    prog = pbft.pbft_program(cfg1, 0)  # node 0 leads view 0
    state = prog.zero()
    state, outs = prog.run(state, MessageEvent(sender=cfg1.client_id, msg=pbft.Request(value=b"v"), sig=b""))
    kinds = [type(t.msg).__name__ for t in outs]
    assert "PrePrepare" in kinds
    pp = next(t.msg for t in outs if isinstance(t.msg, pbft.PrePrepare))
    assert pp.view == 0 and pp.value == b"v"
    # a non-leader replica stores the request but does not propose
    prog1 = pbft.pbft_program(cfg1, 1)
    s1, outs1 = prog1.run(prog1.zero(), MessageEvent(sender=cfg1.client_id, msg=pbft.Request(value=b"v"), sig=b""))
    assert not any(isinstance(t.msg, pbft.PrePrepare) for t in outs1)


def test_replica_prepares_on_accepted_proposal(cfg1):
    prog = pbft.pbft_program(cfg1, 1)
    state = prog.zero()
    state, outs = prog.run(state, MessageEvent(sender=0, msg=pbft.PrePrepare(view=0, value=b"v"), sig=b""))
    preps = [t.msg for t in outs if isinstance(t.msg, pbft.Prepare)]
    assert len(preps) == 1 and preps[0].digest == pbft.digest_of(b"v")
    # a second proposal for the same view is ignored
    state, outs = prog.run(state, MessageEvent(sender=0, msg=pbft.PrePrepare(view=0, value=b"w"), sig=b""))
    assert outs == ()


def test_full_view0_exchange_decides(cfg1):
    """Drive replica 1 through proposal, prepare quorum, commit quorum."""
    prog = pbft.pbft_program(cfg1, 1)
    state = prog.zero()
    d = pbft.digest_of(b"v")
    state, _ = prog.run(state, MessageEvent(sender=0, msg=pbft.PrePrepare(view=0, value=b"v"), sig=b""))
    all_outs = []
    for sender in (0, 2, 3):
        state, outs = prog.run(state, MessageEvent(sender=sender, msg=pbft.Prepare(view=0, digest=d), sig=bytes(64)))
        all_outs.extend(outs)
    assert any(isinstance(t.msg, pbft.Commit) for t in all_outs)
    all_outs = []
    for sender in (0, 2, 3):
        state, outs = prog.run(state, MessageEvent(sender=sender, msg=pbft.Commit(view=0, digest=d), sig=bytes(64)))
        all_outs.extend(outs)
    req = state.lookup(pbft.TAG_REQ)
    assert req.has_decided and req.decided_value == b"v" and req.decided_view == 0
    replies = [t.msg for t in all_outs if isinstance(t.msg, pbft.Reply)]
    assert replies == [pbft.Reply(value=b"v")]
    effects = pbft.observe_effects(prog.zero(), state)
    assert effects["decided"] == pbft.vkey(b"v") and effects["decided_view"] == 0


def test_votes_buffered_before_acceptance_complete_on_acceptance(cfg1):
    """Prepare quorum arriving before the proposal still yields a commit."""
    prog = pbft.pbft_program(cfg1, 1)
    state = prog.zero()
    d = pbft.digest_of(b"v")
    for sender in (0, 2, 3):
        state, outs = prog.run(state, MessageEvent(sender=sender, msg=pbft.Prepare(view=0, digest=d), sig=bytes(64)))
        assert not any(isinstance(t.msg, pbft.Commit) for t in outs)
    state, outs = prog.run(state, MessageEvent(sender=0, msg=pbft.PrePrepare(view=0, value=b"v"), sig=b""))
    assert any(isinstance(t.msg, pbft.Commit) for t in outs)


def test_timeout_past_deadline_sends_view_change(cfg1):
    prog = pbft.pbft_program(cfg1, 1)
    state = prog.zero()
    # request arms the view-0 abandon timer
    state, _ = prog.run(state, MessageEvent(sender=cfg1.client_id, msg=pbft.Request(value=b"v"), sig=b""))
    state, outs = prog.run(state, Timeout(now=pbft.view_deadline(0, cfg1) - 1))
    assert not any(isinstance(t.msg, pbft.ViewChange) for t in outs)
    state, outs = prog.run(state, Timeout(now=pbft.view_deadline(0, cfg1)))
    vcs = [t.msg for t in outs if isinstance(t.msg, pbft.ViewChange)]
    assert len(vcs) == 1 and vcs[0].view == 0
    # repeated timeouts do not re-send the view-change
    state, outs = prog.run(state, Timeout(now=pbft.view_deadline(0, cfg1) + 500))
    assert not any(isinstance(t.msg, pbft.ViewChange) for t in outs)


def test_client_program_counts_weak_cert(cfg1):
    prog = pbft.client_program(cfg1)
    state = prog.zero()
    state, outs = prog.run(state, CallEvent(arg=("submit", b"v")))
    assert len(outs) == 1 and isinstance(outs[0].msg, pbft.Request)
    # duplicate submit is a no-op
    state, outs = prog.run(state, CallEvent(arg=("submit", b"v")))
    assert outs == ()
    state, _ = prog.run(state, MessageEvent(sender=0, msg=pbft.Reply(value=b"v"), sig=b""))
    assert not state.done
    # duplicate sender does not count twice
    state, _ = prog.run(state, MessageEvent(sender=0, msg=pbft.Reply(value=b"v"), sig=b""))
    assert not state.done
    # a disagreeing reply does not count toward the value
    state, _ = prog.run(state, MessageEvent(sender=1, msg=pbft.Reply(value=b"w"), sig=b""))
    assert not state.done
    state, _ = prog.run(state, MessageEvent(sender=2, msg=pbft.Reply(value=b"v"), sig=b""))
    assert state.done and state.done_value == pbft.vkey(b"v")


def test_adversarial_programs(cfg1):
    wrong = pbft.wrong_value_program(cfg1, 1, attacker_value=b"bad")
    state, outs = wrong.run(wrong.zero(), MessageEvent(sender=0, msg=pbft.PrePrepare(view=0, value=b"v"), sig=b""))
    preps = [t.msg for t in outs if isinstance(t.msg, pbft.Prepare)]
    assert preps and all(p.digest == pbft.digest_of(b"bad") for p in preps)

    quiet = pbft.silent_program(cfg1, 1)
    state, outs = quiet.run(quiet.zero(), MessageEvent(sender=0, msg=pbft.PrePrepare(view=0, value=b"v"), sig=b""))
    assert outs == ()


# --- broadcast register specification ----------------------------------------


def test_broadcast_spec_transitions(cfg1):
    spec = pbft.broadcast_spec(cfg1, honest=[0, 1, 2, 3])
    s0 = {"reg": None, "send": None, "terminated": []}
    assert spec.init_pred(s0)
    s1 = spec.next_fn(s0, {"kind": "send", "value": "v:aa"})
    assert s1["send"] == "v:aa"
    s2 = spec.next_fn(s1, {"kind": "set", "node": 2, "value": "v:aa"})
    assert s2["reg"] == "v:aa" and s2["terminated"] == [2]
    s3 = spec.next_fn(s2, {"kind": "terminate", "node": 0, "value": "v:aa"})
    assert s3["terminated"] == [0, 2]
    # a second set, a double send, and a disagreeing terminate all derail
    assert spec.next_fn(s2, {"kind": "set", "node": 0, "value": "v:aa"}).get("#invalid")
    assert spec.next_fn(s1, {"kind": "send", "value": "v:bb"}).get("#invalid")
    assert spec.next_fn(s2, {"kind": "terminate", "node": 0, "value": "v:bb"}).get("#invalid")


def test_broadcast_spec_fairness_closure(cfg1):
    spec = pbft.broadcast_spec(cfg1, honest=[0, 1])
    assert spec.task_enum == (("SetF",), ("TerminateF", 0), ("TerminateF", 1))
    s = {"reg": None, "send": "v:aa", "terminated": []}
    assert spec.fair_pred(("SetF",), s, {"kind": "set", "node": 0, "value": "v:aa"})
    assert not spec.fair_pred(("SetF",), s, {"kind": "send", "value": "v:aa"})
    done = {"reg": "v:aa", "send": "v:aa", "terminated": [0]}
    # terminal closure: once node 0 terminated, its task is fair on any step
    assert spec.fair_pred(("TerminateF", 0), done, {"kind": "end"})
    assert not spec.fair_pred(("TerminateF", 1), done, {"kind": "end"})
