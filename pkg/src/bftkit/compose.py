"""Composition of sub-protocols: parallel composition of specifications and
executable composition via tagged synchronous dispatch over default maps.

The composed state is a default map: a finite set of explicit sub-protocol
states plus an implicit zero state for every other tag.  Timeouts execute
only on explicit entries, justified by the zero-state no-op obligation
(zero_noop_check).  A split function may inject additional Call inputs that
run synchronously within the same step, in ascending tag order; injection
is processed to a fixed point under a bounded depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .runtime_api import CallEvent, MessageEvent, Timeout, Transmit
from .sm_core import SpecMachine, Verdict


class UnknownTag(Exception):
    """An input names a tag outside the composition's tag domain."""


class DispatchDepthExceeded(Exception):
    """Injected Calls did not reach a fixed point within the depth bound."""


class DefaultMap:
    """Finite explicit map over tags backed by a zero function.

    Canonical form: no explicit entry equals its zero value.  Lookup of an
    absent tag yields zero_fn(tag) without materializing it.
    """

    def __init__(self, zero_fn: Callable[[object], object], explicit: dict | None = None):
        self.zero_fn = zero_fn
        self.explicit: dict = {}
        if explicit:
            for tag, sub in explicit.items():
                if sub != zero_fn(tag):
                    self.explicit[tag] = sub

    def lookup(self, tag: object) -> object:
        if tag in self.explicit:
            return self.explicit[tag]
        return self.zero_fn(tag)

    def with_entry(self, tag: object, sub: object) -> "DefaultMap":
        new = dict(self.explicit)
        if sub == self.zero_fn(tag):
            new.pop(tag, None)
        else:
            new[tag] = sub
        out = DefaultMap.__new__(DefaultMap)
        out.zero_fn = self.zero_fn
        out.explicit = new
        return out

    def explicit_tags(self) -> list:
        return sorted(self.explicit.keys())

    def is_canonical(self) -> bool:
        return all(sub != self.zero_fn(tag) for tag, sub in self.explicit.items())

    def __eq__(self, other):
        return isinstance(other, DefaultMap) and self.explicit == other.explicit

    def __repr__(self):
        return f"DefaultMap({self.explicit!r})"


# Composed inputs: Timeout, or a message/call addressed to one tag.


@dataclass(frozen=True)
class TaggedMessage:
    tag: object
    sender: int
    msg: object
    sig: bytes


@dataclass(frozen=True)
class TaggedCall:
    tag: object
    arg: object


# split(pre_state, input) -> sequence of (tag, call_argument)
SplitFn = Callable[[DefaultMap, object], Sequence[tuple[object, object]]]

# A sub-implementation: run(sub_state, sub_event) -> (sub_state, transmits).
# Sub-events are Timeout, MessageEvent, or CallEvent from runtime_api.
SubRun = Callable[[object, object], tuple[object, Iterable[Transmit]]]


@dataclass(frozen=True)
class Composition:
    """Executable composition over a tag domain."""

    impl_of: Callable[[object], SubRun]
    zero_of: Callable[[object], object]
    split: SplitFn
    in_domain: Callable[[object], bool]
    max_depth: int = 8


def _exec_on_tag(comp: Composition, state: DefaultMap, tag: object, sub_event) -> tuple[DefaultMap, list[Transmit]]:
    run = comp.impl_of(tag)
    sub = state.lookup(tag)
    new_sub, outs = run(sub, sub_event)
    tagged = [Transmit(to=t.to, msg=t.msg, tag=tag) for t in outs]
    return state.with_entry(tag, new_sub), tagged


def sync_dispatch(comp: Composition, state: DefaultMap, input) -> tuple[DefaultMap, tuple[Transmit, ...]]:
    """Execute one composed step.

    Timeout is logically delivered to all tags but executed only on explicit
    entries.  Messages and calls go to their named tag.  The split function,
    evaluated against the pre-step state, injects further Calls which run in
    ascending tag order; Calls injected by injected Calls are processed in
    subsequent rounds up to max_depth.
    """
    pre = state
    transmits: list[Transmit] = []

    if isinstance(input, Timeout):
        for tag in pre.explicit_tags():
            state, outs = _exec_on_tag(comp, state, tag, input)
            transmits.extend(outs)
    elif isinstance(input, TaggedMessage):
        if not comp.in_domain(input.tag):
            raise UnknownTag(f"message tag {input.tag!r} outside composition domain")
        state, outs = _exec_on_tag(
            comp, state, input.tag, MessageEvent(sender=input.sender, msg=input.msg, sig=input.sig)
        )
        transmits.extend(outs)
    elif isinstance(input, TaggedCall):
        if not comp.in_domain(input.tag):
            raise UnknownTag(f"call tag {input.tag!r} outside composition domain")
        state, outs = _exec_on_tag(comp, state, input.tag, CallEvent(arg=input.arg))
        transmits.extend(outs)
    else:
        raise TypeError(f"unsupported composed input {input!r}")

    frontier = [input]
    for depth in range(comp.max_depth + 1):
        injected: list[TaggedCall] = []
        for trigger in frontier:
            for tag, arg in comp.split(pre, trigger):
                if not comp.in_domain(tag):
                    raise UnknownTag(f"split injected call to unknown tag {tag!r}")
                injected.append(TaggedCall(tag=tag, arg=arg))
        if not injected:
            break
        if depth == comp.max_depth:
            raise DispatchDepthExceeded(f"injection did not settle within depth {comp.max_depth}")
        injected.sort(key=lambda c: c.tag)
        for call in injected:
            state, outs = _exec_on_tag(comp, state, call.tag, CallEvent(arg=call.arg))
            transmits.extend(outs)
        frontier = injected

    assert state.is_canonical()
    return state, tuple(transmits)


def zero_noop_check(run: SubRun, zero: object, timeouts: Iterable[Timeout]) -> Verdict:
    """ok iff the sub-implementation, in its zero state, does nothing on every
    sampled timeout: state stays zero and no transmits are emitted."""
    for i, to in enumerate(timeouts):
        new_state, outs = run(zero, to)
        outs = list(outs)
        if new_state != zero or outs:
            return Verdict(False, i, "zero_noop", f"timeout {to!r} mutated zero state or transmitted")
    return Verdict(True)


@dataclass(frozen=True)
class ProtocolInvariant:
    """A pure predicate over pairs of component transitions (never states)."""

    pred: Callable[[object, object], bool]


def par_compose(a: SpecMachine, b: SpecMachine, p: ProtocolInvariant | None = None) -> SpecMachine:
    """Parallel composition: paired states, paired transitions, disjoint union
    of task sets.  Purely syntactic; no new liveness obligations appear."""

    def init(s):
        return a.init_pred(s[0]) and b.init_pred(s[1])

    def nxt(s, t):
        return (a.next_fn(s[0], t[0]), b.next_fn(s[1], t[1]))

    def invar(s, t):
        ok = a.invar_pred(s[0], t[0]) and b.invar_pred(s[1], t[1])
        if ok and p is not None:
            ok = p.pred(t[0], t[1])
        return ok

    def fair(f, s, t):
        side, inner = f
        if side == 0:
            return a.fair_pred(inner, s[0], t[0])
        return b.fair_pred(inner, s[1], t[1])

    tasks = tuple((0, f) for f in a.task_enum) + tuple((1, f) for f in b.task_enum)
    return SpecMachine(
        init_pred=init,
        next_fn=nxt,
        invar_pred=invar,
        fair_pred=fair,
        task_enum=tasks,
        name=f"({a.name} x {b.name})",
    )


def compose_refinement(rc1, rc2):
    """Pairwise refinement: maps component-wise; a composed step stutters only
    when both components stutter."""
    from .sm_core import RefinementFn

    def map_fn(s, t):
        a1, at1 = rc1.map_fn(s[0], t[0])
        a2, at2 = rc2.map_fn(s[1], t[1])
        trans = None if (at1 is None and at2 is None) else (at1, at2)
        return (a1, a2), trans

    return RefinementFn(map_fn=map_fn, trace_only=rc1.trace_only or rc2.trace_only)
