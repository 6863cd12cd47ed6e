"""Application-facing runtime contract: events in, state plus transmits out.

A node program is a pure update callback over immutable state.  Hosts (the
simulator and the TCP runtime) deliver three kinds of events: timeouts
carrying the local clock, authenticated remote messages, and local calls.
Every transmit is validated (stapled signatures re-verified) before it
leaves the node; a bad staple aborts the step loudly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import authn

BROADCAST = "broadcast"


@dataclass(frozen=True)
class Timeout:
    now: int  # milliseconds


@dataclass(frozen=True)
class MessageEvent:
    sender: authn.NodeID
    msg: object
    sig: bytes  # root signature of the carrying envelope; storable for stapling


@dataclass(frozen=True)
class CallEvent:
    arg: object


Event = object  # Timeout | MessageEvent | CallEvent


@dataclass(frozen=True)
class Transmit:
    to: object  # NodeID or BROADCAST
    msg: object
    tag: object = None  # originating sub-protocol tag, set by dispatch


@dataclass(frozen=True)
class NodeProgram:
    """zero builds the initial state; run handles one event.

    run must be total: defined and terminating on every (state, event).
    mcodec supplies the canonical encoding and the stapled extractor.
    """

    zero: Callable[[object], object]
    run: Callable[[object, Event], tuple[object, tuple[Transmit, ...]]]
    mcodec: authn.MessageCodec


def step(
    prog: NodeProgram,
    registry: authn.KeyRegistry,
    state: object,
    ev: Event,
) -> tuple[object, tuple[Transmit, ...]]:
    """Run one event through the update callback and validate every transmit.

    Raises StapleInvalidAtTransmit (from authn) if an outgoing message
    carries a staple that does not verify over its canonical re-encoding.
    """
    new_state, outs = prog.run(state, ev)
    for t in outs:
        authn.validate_transmit(registry, t.msg, prog.mcodec)
    return new_state, tuple(outs)
