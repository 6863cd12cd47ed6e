"""Tasks, well-founded completion measures, and per-step measure checking.

A completion measure is a fixed-arity tuple of naturals compared
lexicographically, so there are no infinite strictly decreasing chains.
For every task pending at a step, either the measure strictly decreases
into the next step or the task's fairness predicate fires; that local
obligation certifies liveness over a trace without reasoning about
infinite executions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .sm_core import ExecutionPrefix, RefinementFn, SpecMachine, map_prefix

Measure = tuple  # fixed-arity tuple of naturals

# var(task, state, transition) -> Measure, or None while the task is not
# activated (no decrease obligation before activation).
VariantFn = Callable[[object, object, object], "Measure | None"]


class ArityMismatch(Exception):
    pass


def lex_less(a: Measure, b: Measure) -> bool:
    """Strict lexicographic order on equal-arity tuples of naturals."""
    if len(a) != len(b):
        raise ArityMismatch(f"arity {len(a)} vs {len(b)}")
    return a < b


@dataclass(frozen=True)
class MeasureFailure:
    task: object
    step_index: int
    measure_before: Measure | None
    measure_after: Measure | None
    fair_fired: bool

    def to_json(self) -> dict:
        return {
            "task": repr(self.task),
            "step_index": self.step_index,
            "measure_before": list(self.measure_before) if self.measure_before else None,
            "measure_after": list(self.measure_after) if self.measure_after else None,
            "fair_fired": self.fair_fired,
        }


@dataclass(frozen=True)
class MeasureVerdict:
    ok: bool
    failures: tuple[MeasureFailure, ...] = ()
    satisfied: tuple = ()  # tasks whose fairness fired within the prefix

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "failures": [f.to_json() for f in self.failures],
            "satisfied": [repr(t) for t in self.satisfied],
        }


def measure_check(prefix: ExecutionPrefix, spec: SpecMachine, var: VariantFn) -> MeasureVerdict:
    """Check the decrease-or-fair obligation for every task over a prefix.

    A task becomes pending at the first step where its variant is defined
    (activation) and is removed from the pending set once its fairness
    predicate fires.  For a pending task at step i, require
    lex_less(var(f, s_{i+1}, t_{i+1}), var(f, s_i, t_i)) or
    fair_pred(f, s_i, t_i).
    """
    failures: list[MeasureFailure] = []
    satisfied: list = []
    satisfied_set: set = set()
    for i in range(len(prefix)):
        s_i, t_i = prefix[i].state, prefix[i].transition
        for task in spec.task_enum:
            if task in satisfied_set:
                continue
            if spec.fair_pred(task, s_i, t_i):
                satisfied.append(task)
                satisfied_set.add(task)
                continue
            if i + 1 >= len(prefix):
                continue
            m_i = var(task, s_i, t_i)
            if m_i is None:
                continue  # not activated (or exempt) at this step
            s_n, t_n = prefix[i + 1].state, prefix[i + 1].transition
            m_n = var(task, s_n, t_n)
            if m_n is None:
                continue  # deactivated across the step (protocol-defined)
            if not lex_less(m_n, m_i):
                failures.append(MeasureFailure(task, i, m_i, m_n, False))
    return MeasureVerdict(ok=not failures, failures=tuple(failures), satisfied=tuple(satisfied))


# Abstract-side variant: var_a(task, concrete_index, abstract_state,
# abstract_transition) -> Measure | None.  The concrete index is threaded
# through because trace-only refinements collapse stuttering steps.
AbstractVariantFn = Callable[[object, int, object, object], "Measure | None"]


def refinement_measure_check(
    prefix: ExecutionPrefix,
    r: RefinementFn,
    var_c: VariantFn | None,
    var_a: AbstractVariantFn,
    spec_c: SpecMachine | None,
    spec_a: SpecMachine,
) -> MeasureVerdict:
    """Check the decrease-or-fair obligation for abstract tasks along the
    image of a concrete prefix.

    When var_c and spec_c are supplied, the concrete obligation is checked
    first, as a precondition; its failures are reported ahead of any
    abstract ones.
    """
    if var_c is not None and spec_c is not None:
        concrete = measure_check(prefix, spec_c, var_c)
        if not concrete.ok:
            return concrete
    image = map_prefix(r, prefix)  # (concrete_index, a_state, a_trans)
    failures: list[MeasureFailure] = []
    satisfied: list = []
    satisfied_set: set = set()
    for k in range(len(image)):
        ci, a_s, a_t = image[k]
        for task in spec_a.task_enum:
            if task in satisfied_set:
                continue
            if spec_a.fair_pred(task, a_s, a_t):
                satisfied.append(task)
                satisfied_set.add(task)
                continue
            if k + 1 >= len(image):
                continue
            m_k = var_a(task, ci, a_s, a_t)
            if m_k is None:
                continue
            ci_n, a_s_n, a_t_n = image[k + 1]
            m_n = var_a(task, ci_n, a_s_n, a_t_n)
            if m_n is None:
                continue
            if not lex_less(m_n, m_k):
                failures.append(MeasureFailure(task, ci, m_k, m_n, False))
    return MeasureVerdict(ok=not failures, failures=tuple(failures), satisfied=tuple(satisfied))
