"""Toolkit for engineering Byzantine fault tolerant protocols.

Composable event-driven protocol state machines with stapled signatures, a
deterministic partially synchronous network simulator with a constrained
adversary, completion-measure liveness checking, and a single-slot PBFT
implementation validated by trace refinement against a broadcast register.
"""

__version__ = "0.1.0"
