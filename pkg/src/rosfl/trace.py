"""Conformance checks over a recorded message trace.

Validates the per-batch dataflow quad (ActUp -> ActDown -> GradUp ->
GradDown), that weights move only at round boundaries, and that no
payload could carry raw inputs, labels, outputs, or skip activations.
"""

from __future__ import annotations

from collections import defaultdict

from .errors import ProtocolMisuseError
from .transport import Trace, TraceEvent
from .wire import CONTROL_KINDS, Kind

_QUAD = (Kind.ACT_UP, Kind.ACT_DOWN, Kind.GRAD_UP, Kind.GRAD_DOWN)

# the only tensors the schema ever carries: one boundary tensor per
# Act/Grad message, or part-prefixed parameters in Weights messages
_ALLOWED_PART_PREFIXES = ("head/", "tail/", "body/")


def validate_trace(trace: Trace, n_clients: int, rounds: int) -> None:
    events = sorted(trace.events, key=lambda e: e.seq)

    by_batch: dict[tuple, list[TraceEvent]] = defaultdict(list)
    weights_up_seq: dict[tuple[int, int], int] = {}
    weights_down_seq: dict[tuple[int, int], int] = {}
    data_seq: dict[tuple[int, int], list[int]] = defaultdict(list)

    for ev in events:
        if ev.kind in CONTROL_KINDS:
            if ev.tensor_names:
                raise ProtocolMisuseError(f"control message {ev.kind.name} carries tensors")
            continue
        if ev.kind in (Kind.WEIGHTS_UP, Kind.WEIGHTS_DOWN):
            for name in ev.tensor_names:
                if not name.startswith(_ALLOWED_PART_PREFIXES):
                    raise ProtocolMisuseError(
                        f"weights message carries unexpected tensor {name!r}")
            key = (ev.round_index, ev.client_id)
            if ev.kind == Kind.WEIGHTS_UP:
                weights_up_seq.setdefault(key, ev.seq)
            else:
                weights_down_seq.setdefault(key, ev.seq)
            continue
        # activation / gradient traffic
        if ev.tensor_names != ("boundary",):
            raise ProtocolMisuseError(
                f"{ev.kind.name} must carry exactly the boundary tensor, "
                f"got {ev.tensor_names}")
        by_batch[(ev.round_index, ev.client_id, ev.epoch, ev.batch)].append(ev)
        data_seq[(ev.round_index, ev.client_id)].append(ev.seq)

    for key, evs in by_batch.items():
        kinds = tuple(e.kind for e in sorted(evs, key=lambda e: e.seq))
        if kinds != _QUAD:
            raise ProtocolMisuseError(
                f"batch {key}: observed {[k.name for k in kinds]}, "
                f"expected ActUp/ActDown/GradUp/GradDown")

    # weights only at round boundaries: every data message of (k, n) sits
    # after that client's round-k-1 broadcast and before its round-k upload
    for (k, n), seqs in data_seq.items():
        up = weights_up_seq.get((k, n))
        if up is not None and max(seqs) > up:
            raise ProtocolMisuseError(
                f"client {n}: data traffic of round {k} after its weights upload")
        down = weights_down_seq.get((k - 1, n))
        if down is not None and min(seqs) < down:
            raise ProtocolMisuseError(
                f"client {n}: data traffic of round {k} before its round-{k - 1} broadcast")


def assert_no_private_tensors(trace: Trace) -> None:
    """Static-ish schema property: only boundary tensors and part-prefixed
    parameters ever appear on the wire."""
    for ev in trace.events:
        for name in ev.tensor_names:
            ok = name == "boundary" or name.startswith(_ALLOWED_PART_PREFIXES)
            if not ok:
                raise ProtocolMisuseError(f"unexpected tensor {name!r} on the wire")
