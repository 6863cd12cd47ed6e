"""Specifications, executions, traces and refinement checking.

A specification is four functions over states and transitions plus a task
set.  Finite execution prefixes stand in for infinite executions: the three
safety clauses (initial state, deterministic next-state, invariant) are
checked here; fairness is checked separately, as bounded fairness, by the
liveness module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence


@dataclass(frozen=True)
class SpecMachine:
    """A specification: Init/Next/Invar/Fair over State x Transition.

    next_fn must be total and deterministic.  task_enum enumerates every
    task value for which fair_pred may hold.
    """

    init_pred: Callable[[object], bool]
    next_fn: Callable[[object, object], object]
    invar_pred: Callable[[object, object], bool]
    fair_pred: Callable[[object, object, object], bool]
    task_enum: tuple = ()
    name: str = ""


@dataclass(frozen=True)
class WeakSpec:
    """A terminal specification: trivially true invariant, weak fairness only."""

    init_pred: Callable[[object], bool]
    next_fn: Callable[[object, object], object]
    weakfair_pred: Callable[[object, object, object], bool]
    task_enum: tuple = ()
    name: str = ""


@dataclass(frozen=True)
class Step:
    state: object
    transition: object


class ExecutionPrefix:
    """A non-empty finite sequence of (state, transition) pairs."""

    def __init__(self, steps: Sequence[Step]):
        if not steps:
            raise ValueError("execution prefix must be non-empty")
        self.steps: tuple[Step, ...] = tuple(steps)

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, i):
        return self.steps[i]

    def __iter__(self):
        return iter(self.steps)

    def trace(self) -> tuple:
        """Project onto transitions only."""
        return tuple(s.transition for s in self.steps)

    def prefix(self, n: int) -> "ExecutionPrefix":
        return ExecutionPrefix(self.steps[:n])

    # serialization: newline-delimited JSON, one object per step
    def to_ndjson(self) -> str:
        lines = []
        for i, s in enumerate(self.steps):
            lines.append(
                json.dumps(
                    {"index": i, "state": s.state, "transition": s.transition},
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_ndjson(cls, text: str) -> "ExecutionPrefix":
        steps = []
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            steps.append(Step(state=obj["state"], transition=obj["transition"]))
        return cls(steps)


@dataclass(frozen=True)
class RefinementFn:
    """Maps concrete (state, transition) pairs to abstract ones.

    map_fn returns (abstract_state, abstract_transition); an abstract
    transition of None marks a stuttering step.  With trace_only set,
    stuttering steps are collapsed before checking, which realizes a modular
    refinement that exposes only abstract transitions.
    """

    map_fn: Callable[[object, object], tuple[object, object | None]]
    trace_only: bool = False


@dataclass(frozen=True)
class Verdict:
    ok: bool
    index: int | None = None
    clause: str | None = None
    reason: str | None = None

    def to_json(self) -> dict:
        return {"ok": self.ok, "index": self.index, "clause": self.clause, "reason": self.reason}


class StutterForever(Exception):
    """A trace-only refinement collapsed an entire prefix to zero abstract steps."""


def conforms(spec: SpecMachine, prefix: ExecutionPrefix) -> Verdict:
    """Check safety clauses of conformance on a finite prefix.

    ok iff the first state satisfies init_pred, every consecutive pair of
    steps satisfies next_fn, and invar_pred holds at every step.  Fairness
    is out of scope here (see liveness.measure_check / fairness auditing).
    """
    if not spec.init_pred(prefix[0].state):
        return Verdict(False, 0, "init", "init_pred false at first state")
    for i, step in enumerate(prefix):
        if not spec.invar_pred(step.state, step.transition):
            return Verdict(False, i, "invar", f"invariant false at step {i}")
        if i + 1 < len(prefix):
            expected = spec.next_fn(step.state, step.transition)
            if expected != prefix[i + 1].state:
                return Verdict(False, i, "next", f"next_fn mismatch between steps {i} and {i+1}")
    return Verdict(True)


def terminalize(
    ws: WeakSpec,
    transition_enum: Callable[[object], Iterable] | None = None,
    disabled_pred: Callable[[object, object], bool] | None = None,
) -> SpecMachine:
    """Close a terminal specification into an ordinary one.

    Fair(f, s, t) = WeakFair(f, s, t) or "no transition from s satisfies
    WeakFair(f, s, .)".  The universal clause needs either an enumerator of
    candidate transitions (finite test machines) or an equivalent
    task-disabledness predicate (production machines with infinite
    transition types).
    """
    if transition_enum is None and disabled_pred is None:
        raise ValueError("terminalize needs a transition enumerator or a disabledness predicate")

    def fair(f, s, t):
        if ws.weakfair_pred(f, s, t):
            return True
        if disabled_pred is not None:
            return disabled_pred(f, s)
        return all(not ws.weakfair_pred(f, s, cand) for cand in transition_enum(s))

    return SpecMachine(
        init_pred=ws.init_pred,
        next_fn=ws.next_fn,
        invar_pred=lambda s, t: True,
        fair_pred=fair,
        task_enum=ws.task_enum,
        name=ws.name,
    )


def map_prefix(r: RefinementFn, concrete: ExecutionPrefix) -> list[tuple[int, object, object]]:
    """Elementwise image under the refinement.

    Returns (concrete_index, abstract_state, abstract_transition) triples.
    In trace_only mode stuttering steps (abstract transition None) are
    dropped; their abstract state must match the surrounding retained states,
    which is asserted by the subsequent conformance check.
    """
    image = []
    for i, step in enumerate(concrete):
        a_state, a_trans = r.map_fn(step.state, step.transition)
        image.append((i, a_state, a_trans))
    if not r.trace_only:
        return image
    retained = [entry for entry in image if entry[2] is not None]
    if not retained:
        raise StutterForever("refinement image contains no abstract steps")
    return retained


def refine_check(r: RefinementFn, concrete: ExecutionPrefix, abstract_spec: SpecMachine) -> Verdict:
    """Check that the image of a conforming concrete prefix conforms to the
    abstract specification (safety clauses only)."""
    image = map_prefix(r, concrete)
    abstract = ExecutionPrefix([Step(state=s, transition=t) for (_, s, t) in image])
    verdict = conforms(abstract_spec, abstract)
    if verdict.ok:
        return verdict
    # report the concrete index responsible
    ci = image[verdict.index][0] if verdict.index is not None else None
    return Verdict(False, ci, verdict.clause, f"abstract {verdict.reason} (concrete step {ci})")
