"""Deterministic discrete-event message bus with an ordered trace recorder."""

from __future__ import annotations

import dataclasses
import heapq
import json
import random
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from importlib import resources
from typing import Any


class KernelError(Exception):
    code = "kernel-error"


class MalformedMessage(KernelError):
    code = "malformed-message"


class TickBudgetExhausted(KernelError):
    code = "tick-budget-exhausted"

    def __init__(self, tick: int) -> None:
        super().__init__(f"tick budget exhausted at tick {tick}")
        self.tick = tick


class Kind(str, Enum):
    SLICE_REQUEST = "SliceRequest"
    ADMIT_ACK = "AdmitAck"
    COUNTER_ACCEPT = "CounterAccept"
    ADMITTED_REQUEST = "AdmittedRequest"
    TIMER = "Timer"
    PROGRAM_COORDINATOR = "ProgramCoordinator"
    DECOMPOSITION = "Decomposition"
    MEDIATION_REQUEST = "MediationRequest"
    MEDIATION_RESULT = "MediationResult"
    INTERCONNECT_REQUEST = "InterconnectRequest"
    INTERCONNECT_RESERVED = "InterconnectReserved"
    INTERCONNECT_RELEASE = "InterconnectRelease"
    INTERCONNECT_RELEASED = "InterconnectReleased"
    SUB_REQUEST = "SubRequest"
    MAP_ACK = "MapAck"
    TEMPLATE_SELECTED = "TemplateSelected"
    SLATE_CONFIG = "SlateConfig"
    SLATE_ACK = "SlateAck"
    CHAIN_REQUEST = "ChainRequest"
    CHAIN_INSTALLED = "ChainInstalled"
    NSSI_OPERATIONAL = "NssiOperational"
    NSSI_FAILED = "NssiFailed"
    NSSI_TEARDOWN = "NssiTeardown"
    NSSI_RELEASED = "NssiReleased"
    NSI_OPERATIONAL = "NsiOperational"
    BROKER_UPDATE = "BrokerUpdate"
    INSTANTIATION_FAILED = "InstantiationFailed"
    LATE_REJECT = "LateReject"
    MODIFY_REQUEST = "ModifyRequest"
    SCALE_RESULT = "ScaleResult"
    MODIFY_ACK = "ModifyAck"
    ESCALATE_TO_CONDUCTOR = "EscalateToConductor"
    RE_DECOMPOSITION = "ReDecomposition"
    DEGRADE = "Degrade"
    DEGRADATION_EVENT = "DegradationEvent"
    INJECT = "Inject"
    DECOMMISSION_CMD = "DecommissionCmd"
    NSI_DECOMMISSIONED = "NsiDecommissioned"


# (required keys, optional keys) per kind; every kind has exactly one shape.
_NSSI = {"nsi", "nssi", "domain"}
PAYLOAD_SHAPES: dict[Kind, tuple[frozenset[str], frozenset[str]]] = {
    Kind.SLICE_REQUEST: ({"nsi", "tenant", "requirements", "schedule"}, {"accept_counter"}),
    Kind.ADMIT_ACK: ({"nsi", "verdict", "reason", "rate"}, {"counter"}),
    Kind.COUNTER_ACCEPT: ({"nsi"}, set()),
    Kind.ADMITTED_REQUEST: ({"nsi", "tenant", "requirements", "policy"}, set()),
    Kind.TIMER: ({"nsi", "action"}, set()),
    Kind.PROGRAM_COORDINATOR: ({"nsi", "sla", "policy"}, set()),
    Kind.DECOMPOSITION: ({"nsi", "plan"}, set()),
    Kind.MEDIATION_REQUEST: ({"nsi", "domain", "descriptors"}, set()),
    Kind.MEDIATION_RESULT: ({"nsi", "domain", "ok"}, {"capability", "error"}),
    Kind.INTERCONNECT_REQUEST: ({"nsi", "pair", "bandwidth_mbps", "qos"}, {"purpose"}),
    Kind.INTERCONNECT_RESERVED: ({"nsi", "pair", "ok"}, {"link", "reservation", "error", "purpose"}),
    Kind.INTERCONNECT_RELEASE: ({"nsi", "reservations"}, set()),
    Kind.INTERCONNECT_RELEASED: ({"nsi", "reservations"}, set()),
    Kind.SUB_REQUEST: (_NSSI | {"subrequest"}, set()),
    Kind.MAP_ACK: (_NSSI | {"mapping"}, set()),
    Kind.TEMPLATE_SELECTED: (_NSSI | {"template"}, set()),
    Kind.SLATE_CONFIG: (_NSSI | {"placements", "path"}, {"purpose"}),
    Kind.SLATE_ACK: (_NSSI | {"ok", "slates"}, {"purpose"}),
    Kind.CHAIN_REQUEST: (_NSSI | {"paths"}, {"purpose"}),
    Kind.CHAIN_INSTALLED: (_NSSI | {"ok", "chain"}, {"purpose"}),
    Kind.NSSI_OPERATIONAL: (_NSSI | {"report"}, set()),
    Kind.NSSI_FAILED: (_NSSI | {"cause", "detail"}, set()),
    Kind.NSSI_TEARDOWN: (_NSSI, set()),
    Kind.NSSI_RELEASED: (_NSSI, set()),
    Kind.NSI_OPERATIONAL: ({"nsi"}, set()),
    Kind.BROKER_UPDATE: ({"nsi", "status"}, {"detail"}),
    Kind.INSTANTIATION_FAILED: ({"nsi", "failed_domains", "cause"}, set()),
    Kind.LATE_REJECT: ({"nsi", "reason"}, set()),
    Kind.MODIFY_REQUEST: ({"nsi", "modification"}, {"domain", "nssi", "level", "budgets"}),
    Kind.SCALE_RESULT: (_NSSI | {"outcome", "level"}, {"report", "budget_index"}),
    Kind.MODIFY_ACK: ({"nsi", "outcome", "level"}, set()),
    Kind.ESCALATE_TO_CONDUCTOR: ({"nsi", "failure"}, set()),
    Kind.RE_DECOMPOSITION: ({"nsi", "plan"}, {"error"}),
    Kind.DEGRADE: ({"target", "values"}, set()),
    Kind.DEGRADATION_EVENT: ({"nsi", "target", "values"}, set()),
    Kind.INJECT: ({"fault", "target"}, set()),
    Kind.DECOMMISSION_CMD: ({"nsi"}, set()),
    Kind.NSI_DECOMMISSIONED: ({"nsi"}, set()),
}
PAYLOAD_SHAPES = {k: (frozenset(r), frozenset(o)) for k, (r, o) in PAYLOAD_SHAPES.items()}

EXTERNAL_SENDERS = ("tenant", "env")


def jsonable(value: Any) -> Any:
    """Canonical JSON-ready form: Fractions as strings, sets sorted, enums by value."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        return value
    if isinstance(value, Fraction):
        return str(value)
    if hasattr(value, "to_dict"):
        return jsonable(value.to_dict())
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Mapping):
        return {str(k): jsonable(v) for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))}
    if isinstance(value, (set, frozenset)):
        return sorted(jsonable(v) for v in value)
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    raise TypeError(f"cannot serialize {type(value).__name__}")


def canonical(value: Any) -> str:
    return json.dumps(jsonable(value), sort_keys=True, separators=(",", ":"))


def stratum(participant: str) -> str:
    return participant.split(":", 1)[0]


@dataclass(frozen=True)
class Message:
    seq: int
    tick: int
    sender: str
    receiver: str
    kind: Kind
    payload: Mapping[str, Any]

    @property
    def nsi(self) -> str | None:
        return self.payload.get("nsi")


@dataclass
class TraceEvent:
    seq: int
    tick: int
    msg: int
    sender: str
    receiver: str
    kind: str
    payload: Any
    transitions: list[list[str]] = field(default_factory=list)
    ledger: list[list[Any]] = field(default_factory=list)

    def to_line(self) -> str:
        record = {
            "seq": self.seq,
            "tick": self.tick,
            "msg": self.msg,
            "sender": self.sender,
            "receiver": self.receiver,
            "kind": self.kind,
            "payload": self.payload,
            "transitions": self.transitions,
            "ledger": self.ledger,
        }
        return json.dumps(record, sort_keys=False, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "TraceEvent":
        d = json.loads(line)
        return cls(**d)


def validate_message(kind: Any, payload: Mapping[str, Any]) -> Kind:
    try:
        kind = Kind(kind)
    except ValueError:
        raise MalformedMessage(f"unknown kind {kind!r}") from None
    if not isinstance(payload, Mapping):
        raise MalformedMessage(f"{kind.value}: payload must be a mapping")
    required, optional = PAYLOAD_SHAPES[kind]
    keys = set(payload)
    if not required <= keys:
        raise MalformedMessage(f"{kind.value}: missing {sorted(required - keys)}")
    if not keys <= required | optional:
        raise MalformedMessage(f"{kind.value}: unexpected {sorted(keys - required - optional)}")
    return kind


Handler = Callable[[Message], None]


class Kernel:
    """Single mutation site: delivers messages one at a time in a total order.

    Ordering key is (delivery tick, posting tick, sender id, seq): a message
    posted with delay 0 lands after everything already due this tick, and
    simultaneous posts from different senders are delivered in sender-id order.
    """

    def __init__(self, seed: int = 0, latencies: Mapping[str, int] | None = None) -> None:
        self.now = 0
        self.rng = random.Random(seed)
        self.latencies = dict(latencies or {})
        self.handlers: dict[str, Handler] = {}
        self.stratum_handlers: dict[str, Handler] = {}
        self.trace: list[TraceEvent] = []
        self._queue: list[tuple[int, int, str, int, Message, str]] = []
        self._seq = 0
        self._current: TraceEvent | None = None
        self.observers: list[Callable[[TraceEvent], None]] = []
        # called with each message just before its handler runs
        self.interceptors: list[Callable[[Message], None]] = []

    def register(self, participant: str, handler: Handler) -> None:
        self.handlers[participant] = handler

    def register_stratum(self, prefix: str, handler: Handler) -> None:
        """Fallback for any `prefix:*` participant without its own handler."""
        self.stratum_handlers[prefix] = handler

    def unregister(self, participant: str) -> None:
        self.handlers.pop(participant, None)

    def default_delay(self, sender: str, receiver: str) -> int:
        key = f"{stratum(sender)}->{stratum(receiver)}"
        return int(self.latencies.get(key, 1))

    def post(
        self,
        sender: str,
        receiver: str,
        kind: Kind | str,
        payload: Mapping[str, Any],
        delay: int | None = None,
    ) -> Message:
        kind = validate_message(kind, payload)
        if delay is None:
            delay = self.default_delay(sender, receiver)
        if not isinstance(delay, int) or delay < 0:
            raise MalformedMessage(f"invalid delay {delay!r}")
        self._seq += 1
        msg = Message(self._seq, self.now + delay, sender, receiver, kind, dict(payload))
        wire = canonical(msg.payload)
        heapq.heappush(self._queue, (msg.tick, self.now, sender, msg.seq, msg, wire))
        return msg

    @property
    def pending(self) -> int:
        return len(self._queue)

    def record_transition(self, entity: str, before: Any, after: Any) -> None:
        if self._current is not None:
            self._current.transitions.append([entity, jsonable(before), jsonable(after)])

    def record_ledger(self, op: str, reservation: Any) -> None:
        if self._current is not None:
            self._current.ledger.append(
                [op, reservation.id, reservation.target, reservation.owner, reservation.nsi,
                 {c: str(a) for c, a in reservation.amounts}]
            )

    def step(self) -> TraceEvent:
        tick, _, _, _, msg, wire = heapq.heappop(self._queue)
        self.now = tick
        # receivers see the wire form only, never the sender's objects
        msg = dataclasses.replace(msg, payload=json.loads(wire))
        event = TraceEvent(
            seq=len(self.trace) + 1,
            tick=tick,
            msg=msg.seq,
            sender=msg.sender,
            receiver=msg.receiver,
            kind=msg.kind.value,
            payload=json.loads(wire),
        )
        self._current = event
        try:
            for hook in self.interceptors:
                hook(msg)
            handler = self.handlers.get(msg.receiver) or self.stratum_handlers.get(stratum(msg.receiver))
            if handler is None:
                raise KernelError(f"no participant {msg.receiver!r} for {msg.kind.value}")
            handler(msg)
        finally:
            self._current = None
        self.trace.append(event)
        for obs in self.observers:
            obs(event)
        return event

    def run_until_quiescent(self, max_ticks: int = 10_000) -> int:
        while self._queue:
            if self._queue[0][0] > max_ticks:
                raise TickBudgetExhausted(self.now)
            self.step()
        return self.now

    def trace_lines(self) -> list[str]:
        return [e.to_line() for e in self.trace]

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace_lines())


# --------------------------------------------------------------------------
# Sequence conformance
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Pattern:
    name: str
    precedes: tuple[tuple[str, str], ...] = ()
    required: tuple[str, ...] = ()
    forbidden: tuple[str, ...] = ()
    scope: tuple[str, ...] = ("nsi",)
    anchor: str | None = None
    figure: str = ""

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Pattern":
        pairs: list[tuple[str, str]] = [tuple(p) for p in data.get("precedes", [])]
        chain = data.get("chain", [])
        pairs.extend(zip(chain, chain[1:]))
        known = {k.value for k in Kind}
        for kind in [k for p in pairs for k in p] + list(data.get("required", [])) + list(data.get("forbidden", [])):
            if kind not in known:
                raise ValueError(f"pattern {data.get('name')}: unknown kind {kind}")
        return cls(
            name=data["name"],
            precedes=tuple(pairs),
            required=tuple(data.get("required", [])),
            forbidden=tuple(data.get("forbidden", [])),
            scope=tuple(data.get("scope", ["nsi"])),
            anchor=data.get("anchor"),
            figure=data.get("figure", ""),
        )


@dataclass
class Verdict:
    ok: bool
    pattern: str = ""
    scope: tuple[Any, ...] | None = None
    violation: tuple[str, str] | None = None
    missing: str | None = None
    forbidden: str | None = None
    detail: str = ""


def load_pattern(name: str) -> Pattern:
    text = resources.files("fedslice.patterns").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return Pattern.from_dict(json.loads(text))


def _event_fields(ev: Any) -> tuple[str, Mapping[str, Any]]:
    if isinstance(ev, TraceEvent):
        return ev.kind, ev.payload
    if isinstance(ev, Mapping):
        return ev["kind"], ev.get("payload", {})
    if isinstance(ev, str):
        d = json.loads(ev)
        return d["kind"], d.get("payload", {})
    raise TypeError(type(ev).__name__)


def assert_sequence(trace: Iterable[Any], pattern: Pattern | Mapping[str, Any]) -> Verdict:
    if not isinstance(pattern, Pattern):
        pattern = Pattern.from_dict(pattern)
    groups: dict[tuple[Any, ...], list[str]] = {}
    for ev in trace:
        kind, payload = _event_fields(ev)
        if any(k not in payload for k in pattern.scope):
            continue
        key = tuple(json.dumps(payload[k], sort_keys=True) for k in pattern.scope)
        groups.setdefault(key, []).append(kind)
    expects_something = bool(pattern.required or pattern.precedes or pattern.anchor)
    checked = 0
    for key in sorted(groups):
        kinds = groups[key]
        if pattern.anchor is not None:
            if pattern.anchor not in kinds:
                continue
            kinds = kinds[kinds.index(pattern.anchor):]
        checked += 1
        scope = tuple(json.loads(k) for k in key)
        seen: set[str] = set()
        for kind in kinds:
            if kind in pattern.forbidden:
                return Verdict(False, pattern.name, scope, forbidden=kind, detail=f"forbidden {kind}")
            for a, b in pattern.precedes:
                if b == kind and a not in seen:
                    return Verdict(False, pattern.name, scope, violation=(a, b), detail=f"{b} without preceding {a}")
            seen.add(kind)
        for kind in pattern.required:
            if kind not in seen:
                return Verdict(False, pattern.name, scope, missing=kind, detail=f"missing {kind}")
    if checked == 0 and expects_something and (pattern.required or pattern.anchor):
        return Verdict(False, pattern.name, detail="no events in scope")
    return Verdict(True, pattern.name)
