"""Embedded checkers over completed simulation runs.

Every run is validated by: conformance of the logged prefix to the network
machine, trace refinement into the broadcast register machine, completion
measures (concrete vote measure and abstract termination measure), a
bounded-satisfaction audit (every task fires or is disabled by the
horizon), scheduler fairness, and the certificate / view-change scans that
detect the deliberate regression bugs.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

from . import pbft
from .liveness import measure_check, refinement_measure_check
from .simnet import SimResult, fairness_audit, network_spec
from .sm_core import conforms, map_prefix, refine_check


def vote_variant(result: SimResult):
    """Concrete completion measure for the per-replica vote tasks.

    DoneF(i): (number of honest commit votes for i's deciding view not yet
    delivered to i, log-steps until the next such delivery).  The first
    component drops at each delivery; the second strictly decreases on every
    other step.  ClientDoneF is the same shape over reply deliveries.
    Nodes that never decide within the horizon yield no measure (the
    bounded-satisfaction audit flags them instead).
    """
    honest = set(result.honest)
    delivery_table: dict[object, list[int]] = {}

    for i in honest:
        if i not in result.decides:
            continue
        v = result.decides[i]["view"]
        decide_index = result.decides[i]["index"]
        seen = set()
        idxs = []
        for rec in result.sends:
            if (
                rec.dst == i
                and rec.src in honest
                and rec.mkind == pbft.KIND_COMMIT
                and rec.mview == v
                and rec.auth_ok
                and rec.delivered_index is not None
                and rec.delivered_index <= decide_index
                and rec.src not in seen
            ):
                seen.add(rec.src)
                idxs.append(rec.delivered_index)
        delivery_table[("DoneF", i)] = sorted(idxs)

    client = result.cfg.client_id
    if result.client["done"]:
        done_index = result.client["index"]
        seen = set()
        idxs = []
        for rec in result.sends:
            if (
                rec.dst == client
                and rec.src in honest
                and rec.mkind == pbft.KIND_REPLY
                and rec.auth_ok
                and rec.delivered_index is not None
                and rec.delivered_index <= done_index
                and rec.src not in seen
            ):
                seen.add(rec.src)
                idxs.append(rec.delivered_index)
        delivery_table[("ClientDoneF",)] = sorted(idxs)

    def var(task, state, transition):
        if task == ("StabilizeF",):
            return None  # fires at its scheduled time; no decrease obligation
        idxs = delivery_table.get(task)
        if not idxs:
            return None
        idx = state["index"]
        pos = bisect.bisect_right(idxs, idx)
        pending = len(idxs) - pos
        if pending == 0:
            return None  # all deliveries in; fairness fires at the decide step
        return (pending, idxs[pos] - idx)

    return var


def termination_variant(result: SimResult, image):
    """Abstract completion measure for SetF / TerminateF over the refinement
    image.  Components: the count of premature view advances observed so far
    (a view abandoned before its scheduled deadline breaks the decrease),
    then the remaining abstract steps."""
    premature_indices = sorted(p["index"] for p in result.premature)
    positions = [ci for ci, _, _ in image]
    total = len(image)

    def var(task, ci, astate, atrans):
        pre = bisect.bisect_right(premature_indices, ci)
        pos = bisect.bisect_left(positions, ci)
        return (pre, total - pos)

    return var


def satisfaction_audit(verdict, spec, final_step) -> list:
    """Bounded liveness: every task either fired within the prefix or is
    disabled in the final state.  Returns the offending tasks."""
    satisfied = set(verdict.satisfied)
    missing = []
    for task in spec.task_enum:
        if task in satisfied:
            continue
        if spec.fair_pred(task, final_step.state, final_step.transition):
            continue  # disabled (or vacuously fair) at the horizon
        missing.append(task)
    return missing


def cert_threshold_scan(result: SimResult) -> list:
    """Every transmitted prepared certificate and new-view certificate must
    carry at least a quorum of distinct staples.  Detects builds that accept
    or produce under-sized certificates."""
    q = result.cfg.quorum
    problems = []
    seen = set()
    for rec in result.sends:
        key = (rec.src, rec.mkind, rec.mview)
        if key in seen:
            continue
        seen.add(key)
        msg = rec.msg
        certs = []
        if isinstance(msg, pbft.ViewChange) and msg.prepared is not None:
            certs.append(("prepared", msg.prepared.staples))
        if isinstance(msg, pbft.NewView):
            certs.append(("new_view", msg.staples))
            for st in msg.staples:
                if isinstance(st.msg, pbft.ViewChange) and st.msg.prepared is not None:
                    certs.append(("nested_prepared", st.msg.prepared.staples))
        for label, staples in certs:
            signers = {st.signer for st in staples}
            if len(signers) < q:
                problems.append(
                    {"src": rec.src, "mkind": rec.mkind, "mview": rec.mview,
                     "cert": label, "signers": len(signers), "required": q}
                )
    return problems


def single_view_change_scan(result: SimResult) -> list:
    """Each honest replica sends at most one view-change per view."""
    problems = []
    for i in result.honest:
        state = result.final_states[i]
        for tag in state.explicit_tags():
            if tag != pbft.TAG_REQ and tag[2] == pbft.VC:
                sub = state.lookup(tag)
                if sub.sent_count > 1:
                    problems.append({"node": i, "view": tag[1], "sent": sub.sent_count})
    return problems


def abstract_image_audit(result: SimResult, image) -> list:
    """The refinement image must contain exactly one register-setting
    transition, and every honest replica must terminate (via set or
    terminate) with the registered value."""
    problems = []
    sets = [t for _, _, t in image if t["kind"] == "set"]
    if len(sets) != 1:
        problems.append(f"expected exactly one set transition, saw {len(sets)}")
    terminated = {t["node"] for _, _, t in image if t["kind"] in ("set", "terminate")}
    missing = set(result.honest) - terminated
    if missing:
        problems.append(f"honest nodes without a terminating transition: {sorted(missing)}")
    return problems


def critical_path_count(result: SimResult) -> int | None:
    """Count the messages on the commit critical path: the client request to
    the leader, the proposal to a deciding quorum Q, the prepare and commit
    exchanges within Q, and Q's replies to the client: 1 + 2q + 2q^2.
    Returns None if the trace does not contain such a sub-exchange."""
    cfg = result.cfg
    q = cfg.quorum
    leader = pbft.leader_of(0, cfg)
    deciders = sorted(
        (i for i in result.honest if i in result.decides and result.decides[i]["view"] == 0),
        key=lambda i: result.decides[i]["index"],
    )
    if leader not in deciders:
        return None
    quorum = [leader] + [i for i in deciders if i != leader]
    if len(quorum) < q:
        return None
    quorum = set(quorum[:q])

    delivered = set()
    for rec in result.sends:
        if rec.delivered_index is not None and rec.auth_ok:
            delivered.add((rec.src, rec.dst, rec.mkind, rec.mview))

    client = cfg.client_id
    needed = [(client, leader, pbft.KIND_REQUEST, 0)]
    needed += [(leader, j, pbft.KIND_PREPREPARE, 0) for j in quorum]
    needed += [(j, k, pbft.KIND_PREPARE, 0) for j in quorum for k in quorum]
    needed += [(j, k, pbft.KIND_COMMIT, 0) for j in quorum for k in quorum]
    needed += [(j, client, pbft.KIND_REPLY, 0) for j in quorum]
    if any(edge not in delivered for edge in needed):
        return None
    return len(needed)


@dataclass(frozen=True)
class RunReport:
    ok: bool
    checks: dict

    def to_json(self) -> dict:
        return {"ok": self.ok, "checks": self.checks}


def check_run(result: SimResult, expect_decision: bool = True) -> RunReport:
    """All embedded checkers over one completed run."""
    checks: dict = {}
    sc = result.scenario
    spec = network_spec(sc, result.honest)
    prefix = result.prefix

    v = conforms(spec, prefix)
    checks["conforms"] = v.to_json()

    abstract = pbft.broadcast_spec(result.cfg, honest=result.honest)
    rmap = pbft.abstraction_map(result.cfg)
    try:
        rv = refine_check(rmap, prefix, abstract)
        checks["refine"] = rv.to_json()
        image = map_prefix(rmap, prefix)
    except Exception as e:  # StutterForever when nothing ever decides
        checks["refine"] = {"ok": False, "reason": f"{type(e).__name__}: {e}"}
        image = []

    mv = measure_check(prefix, spec, vote_variant(result))
    checks["measure"] = mv.to_json()
    missing = satisfaction_audit(mv, spec, prefix[len(prefix) - 1])
    checks["satisfaction"] = {"ok": not missing, "missing": [repr(t) for t in missing]}

    if image:
        rmv = refinement_measure_check(
            prefix, rmap, None, termination_variant(result, image), None, abstract
        )
        checks["refinement_measure"] = rmv.to_json()
        abs_missing = _abstract_satisfaction(rmv, abstract, image)
        checks["abstract_satisfaction"] = {
            "ok": not abs_missing, "missing": [repr(t) for t in abs_missing]
        }
        img_problems = abstract_image_audit(result, image)
        checks["image"] = {"ok": not img_problems, "problems": img_problems}
    else:
        ok = not expect_decision
        checks["refinement_measure"] = {"ok": ok, "reason": "no abstract steps"}
        checks["abstract_satisfaction"] = {"ok": ok, "reason": "no abstract steps"}
        checks["image"] = {"ok": ok, "reason": "no abstract steps"}

    fa = fairness_audit(result)
    checks["fairness"] = {"ok": fa["ok"], "problems": fa["problems"]}

    checks["timing"] = {"ok": not result.premature, "premature": result.premature}

    certs = cert_threshold_scan(result)
    checks["cert_threshold"] = {"ok": not certs, "problems": certs}

    vcs = single_view_change_scan(result)
    checks["single_view_change"] = {"ok": not vcs, "problems": vcs}

    ok = all(c.get("ok", False) for c in checks.values())
    return RunReport(ok=ok, checks=checks)


def _abstract_satisfaction(verdict, abstract, image) -> list:
    """Bounded satisfaction on the abstract side: every broadcast task fires
    in the image or is disabled at the final abstract state."""
    satisfied = set(verdict.satisfied)
    _, final_state, final_trans = image[-1]
    missing = []
    for task in abstract.task_enum:
        if task in satisfied:
            continue
        if abstract.fair_pred(task, final_state, final_trans):
            continue
        missing.append(task)
    return missing
