"""Core slice types, lifecycle state machine and end-to-end QoS composition."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any

PROB_TOL = 1e-12


class ModelError(ValueError):
    """Raised for malformed domain values."""


class LifecycleError(RuntimeError):
    """Raised when a lifecycle event is not allowed in the current state."""

    def __init__(self, state: "State", event: "Event") -> None:
        super().__init__(f"event {event.value!r} not allowed in state {state.value!r}")
        self.state = state
        self.event = event


def q(value: Any) -> Fraction:
    """Exact rational from an int, str or float (floats go through their repr)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ModelError(f"not a number: {value!r}")
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ModelError(f"not finite: {value!r}")
        return Fraction(repr(value))
    try:
        return Fraction(value)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"not a number: {value!r}") from exc


def qstr(value: Fraction) -> str:
    return str(value)


class Isolation(str, Enum):
    SHARED = "shared"
    DEDICATED = "dedicated"


class State(str, Enum):
    REQUESTED = "Requested"
    ADMITTED = "Admitted"
    DECOMPOSED = "Decomposed"
    INSTANTIATING = "Instantiating"
    OPERATIONAL = "Operational"
    MODIFYING = "Modifying"
    DEGRADED = "Degraded"
    DECOMMISSIONED = "Decommissioned"


class Event(str, Enum):
    ADMIT = "admit"
    DECOMPOSE = "decompose"
    INSTANTIATE = "instantiate"
    OPERATE = "operate"
    FAIL = "fail"
    MODIFY = "modify"
    MODIFIED = "modified"
    DEGRADE = "degrade"
    RESTORE = "restore"
    REJECT = "reject"
    DECOMMISSION = "decommission"


S, E = State, Event

# Anything absent is rejected. Decommissioned has no outgoing entries.
TRANSITIONS: dict[tuple[State, Event], State] = {
    (S.REQUESTED, E.ADMIT): S.ADMITTED,
    (S.REQUESTED, E.REJECT): S.DECOMMISSIONED,
    (S.ADMITTED, E.DECOMPOSE): S.DECOMPOSED,
    (S.ADMITTED, E.REJECT): S.DECOMMISSIONED,
    (S.DECOMPOSED, E.INSTANTIATE): S.INSTANTIATING,
    (S.DECOMPOSED, E.REJECT): S.DECOMMISSIONED,
    (S.INSTANTIATING, E.OPERATE): S.OPERATIONAL,
    (S.INSTANTIATING, E.FAIL): S.ADMITTED,
    (S.OPERATIONAL, E.MODIFY): S.MODIFYING,
    (S.OPERATIONAL, E.DEGRADE): S.DEGRADED,
    (S.MODIFYING, E.MODIFIED): S.OPERATIONAL,
    (S.MODIFYING, E.DEGRADE): S.DEGRADED,
    (S.DEGRADED, E.RESTORE): S.OPERATIONAL,
    (S.DEGRADED, E.DEGRADE): S.DEGRADED,
}
for _state in State:
    if _state is not S.DECOMMISSIONED:
        TRANSITIONS[(_state, E.DECOMMISSION)] = S.DECOMMISSIONED
del S, E, _state


def next_state(state: State, event: Event) -> State:
    try:
        return TRANSITIONS[(state, event)]
    except KeyError:
        raise LifecycleError(state, event) from None


# --------------------------------------------------------------------------
# QoS composition
# --------------------------------------------------------------------------


def end_to_end_latency(segments: Iterable[Any]) -> Fraction:
    values = [q(s) for s in segments]
    if not values:
        raise ModelError("no segments")
    if any(v < 0 for v in values):
        raise ModelError("negative segment")
    return sum(values, Fraction(0))


# jitter composes additively, same as latency
end_to_end_jitter = end_to_end_latency


def end_to_end_error_rate(segments: Iterable[float]) -> float:
    survive = 1.0
    for e in segments:
        e = float(e)
        if not 0.0 <= e <= 1.0:
            raise ModelError("invalid probability")
        survive *= 1.0 - e
    return min(1.0, max(0.0, 1.0 - survive))


# loss composes like error rate
end_to_end_loss = end_to_end_error_rate


def prob_le(value: float, bound: float) -> bool:
    return value <= bound + PROB_TOL


# --------------------------------------------------------------------------
# Requirements and graphs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Endpoint:
    domain: str
    attachment: str


@dataclass(frozen=True)
class ServiceRequirements:
    bandwidth_mbps: Fraction
    latency_budget_ms: Fraction
    jitter_budget_ms: Fraction
    max_error_rate: float
    max_packet_loss: float
    compute_vcpu: int
    memory_gb: Fraction
    storage_gb: Fraction
    coverage: frozenset[str]
    endpoints: tuple[Endpoint, ...]
    isolation: Isolation = Isolation.SHARED
    service_type: str = ""

    def violations(self) -> list[str]:
        out = []
        for name in ("bandwidth_mbps", "latency_budget_ms", "jitter_budget_ms", "memory_gb", "storage_gb"):
            if getattr(self, name) < 0:
                out.append(f"{name} negative")
        if not isinstance(self.compute_vcpu, int) or self.compute_vcpu < 0:
            out.append("compute_vcpu must be a nonnegative integer")
        for name in ("max_error_rate", "max_packet_loss"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                out.append(f"{name} not a probability")
        if not self.coverage:
            out.append("coverage empty")
        for ep in self.endpoints:
            if ep.domain not in self.coverage:
                out.append(f"endpoint {ep.attachment} in domain {ep.domain} outside coverage")
        return out

    def validate(self) -> "ServiceRequirements":
        problems = self.violations()
        if problems:
            raise ModelError("malformed requirements: " + "; ".join(problems))
        return self

    def scaled(self, factor: Fraction) -> "ServiceRequirements":
        return ServiceRequirements(
            bandwidth_mbps=self.bandwidth_mbps * factor,
            latency_budget_ms=self.latency_budget_ms,
            jitter_budget_ms=self.jitter_budget_ms,
            max_error_rate=self.max_error_rate,
            max_packet_loss=self.max_packet_loss,
            compute_vcpu=math.floor(self.compute_vcpu * factor),
            memory_gb=self.memory_gb * factor,
            storage_gb=self.storage_gb * factor,
            coverage=self.coverage,
            endpoints=self.endpoints,
            isolation=self.isolation,
            service_type=self.service_type,
        )

    def with_extra_compute(self, vcpu: int = 0, memory_gb: Fraction = Fraction(0), storage_gb: Fraction = Fraction(0)) -> "ServiceRequirements":
        return ServiceRequirements(
            bandwidth_mbps=self.bandwidth_mbps,
            latency_budget_ms=self.latency_budget_ms,
            jitter_budget_ms=self.jitter_budget_ms,
            max_error_rate=self.max_error_rate,
            max_packet_loss=self.max_packet_loss,
            compute_vcpu=self.compute_vcpu + vcpu,
            memory_gb=self.memory_gb + memory_gb,
            storage_gb=self.storage_gb + storage_gb,
            coverage=self.coverage,
            endpoints=self.endpoints,
            isolation=self.isolation,
            service_type=self.service_type,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "bandwidth_mbps": qstr(self.bandwidth_mbps),
            "latency_budget_ms": qstr(self.latency_budget_ms),
            "jitter_budget_ms": qstr(self.jitter_budget_ms),
            "max_error_rate": self.max_error_rate,
            "max_packet_loss": self.max_packet_loss,
            "compute_vcpu": self.compute_vcpu,
            "memory_gb": qstr(self.memory_gb),
            "storage_gb": qstr(self.storage_gb),
            "coverage": sorted(self.coverage),
            "endpoints": [[ep.domain, ep.attachment] for ep in self.endpoints],
            "isolation": self.isolation.value,
            "service_type": self.service_type,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | "ServiceRequirements") -> "ServiceRequirements":
        if isinstance(data, ServiceRequirements):
            return data
        try:
            vcpu = data.get("compute_vcpu", 0)
            if isinstance(vcpu, bool) or not isinstance(vcpu, int):
                raise ModelError("compute_vcpu must be an integer")
            endpoints = []
            for ep in data.get("endpoints", []):
                if isinstance(ep, Mapping):
                    endpoints.append(Endpoint(str(ep["domain"]), str(ep["attachment"])))
                else:
                    endpoints.append(Endpoint(str(ep[0]), str(ep[1])))
            return cls(
                bandwidth_mbps=q(data.get("bandwidth_mbps", 0)),
                latency_budget_ms=q(data["latency_budget_ms"]),
                jitter_budget_ms=q(data.get("jitter_budget_ms", data["latency_budget_ms"])),
                max_error_rate=float(data.get("max_error_rate", 1.0)),
                max_packet_loss=float(data.get("max_packet_loss", 1.0)),
                compute_vcpu=vcpu,
                memory_gb=q(data.get("memory_gb", 0)),
                storage_gb=q(data.get("storage_gb", 0)),
                coverage=frozenset(str(d) for d in data.get("coverage", [])),
                endpoints=tuple(endpoints),
                isolation=Isolation(data.get("isolation", "shared")),
                service_type=str(data.get("service_type", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ModelError):
                raise
            raise ModelError(f"malformed requirements: {exc}") from exc


@dataclass(frozen=True)
class VnfSpec:
    id: str
    type: str
    vcpu: Fraction = Fraction(0)
    memory_gb: Fraction = Fraction(0)
    storage_gb: Fraction = Fraction(0)
    technology: str | None = None
    alt_technologies: tuple[str, ...] = ()
    pinned_subdomain: str | None = None

    @property
    def demand(self) -> dict[str, Fraction]:
        return {"vcpu": self.vcpu, "memory_gb": self.memory_gb, "storage_gb": self.storage_gb}


@dataclass(frozen=True)
class LogicalLinkSpec:
    id: str
    src: str
    dst: str
    bandwidth_mbps: Fraction = Fraction(0)
    latency_ms: Fraction | None = None
    loss: float | None = None


@dataclass(frozen=True)
class SliceResourceGraph:
    vnfs: tuple[VnfSpec, ...]
    links: tuple[LogicalLinkSpec, ...]
    endpoints: tuple[str, ...] = ()

    def vnf(self, vnf_id: str) -> VnfSpec:
        for v in self.vnfs:
            if v.id == vnf_id:
                return v
        raise KeyError(vnf_id)

    def with_vnf(self, new: VnfSpec) -> "SliceResourceGraph":
        return SliceResourceGraph(
            tuple(new if v.id == new.id else v for v in self.vnfs), self.links, self.endpoints
        )

    def terminals(self) -> list[str]:
        """Nodes whose pairwise routes define the graph's end-to-end figure."""
        if len(self.endpoints) >= 2:
            return list(self.endpoints)
        if self.vnfs:
            return list(self.endpoints) + [self.vnfs[-1].id]
        return list(self.endpoints)

    def tree_route(self, a: str, b: str) -> list[str]:
        """Logical link ids on the route a→b (graph assumed to be a tree)."""
        adj: dict[str, list[tuple[str, str]]] = {}
        for link in self.links:
            adj.setdefault(link.src, []).append((link.dst, link.id))
            adj.setdefault(link.dst, []).append((link.src, link.id))
        stack = [(a, [])]
        seen = {a}
        while stack:
            node, path = stack.pop()
            if node == b:
                return path
            for nxt, lid in adj.get(node, []):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append((nxt, path + [lid]))
        raise ModelError(f"no route {a}->{b}")


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_graph(graph: SliceResourceGraph) -> ValidationReport:
    import networkx as nx

    report = ValidationReport()
    vnf_ids = [v.id for v in graph.vnfs]
    known = set(vnf_ids) | set(graph.endpoints)
    if len(known) != len(vnf_ids) + len(set(graph.endpoints)):
        report.violations.append("duplicate id")
    for v in graph.vnfs:
        if min(v.vcpu, v.memory_gb, v.storage_gb) < 0:
            report.violations.append(f"negative demand on {v.id}")
    g = nx.Graph()
    g.add_nodes_from(known)
    for link in graph.links:
        if link.bandwidth_mbps < 0 or (link.latency_ms is not None and link.latency_ms < 0):
            report.violations.append(f"negative demand on {link.id}")
        missing = [n for n in (link.src, link.dst) if n not in known]
        if missing:
            report.violations.append(f"dangling endpoint {link.id}: {', '.join(missing)}")
        else:
            g.add_edge(link.src, link.dst)
    if g.number_of_nodes() > 1 and not nx.is_connected(g):
        report.violations.append("disconnected")
    return report


# --------------------------------------------------------------------------
# Lifecycle records
# --------------------------------------------------------------------------


@dataclass
class InterconnectRef:
    link_id: str
    domains: tuple[str, str]
    bandwidth_mbps: Fraction
    reservation: str | None
    state: str = "Negotiating"


@dataclass
class NssiRecord:
    nssi_id: str
    parent_nsi: str
    domain_id: str
    state: State = State.REQUESTED
    embedding: dict[str, tuple[str, str]] = field(default_factory=dict)
    paths: dict[str, list[str]] = field(default_factory=dict)
    allocated: dict[str, dict[str, Fraction]] = field(default_factory=dict)

    def apply(self, event: Event) -> State:
        self.state = next_state(self.state, event)
        return self.state

    def to_dict(self) -> dict[str, Any]:
        return {
            "nssi_id": self.nssi_id,
            "parent_nsi": self.parent_nsi,
            "domain_id": self.domain_id,
            "state": self.state.value,
            "embedding": {k: list(v) for k, v in sorted(self.embedding.items())},
            "paths": {k: list(v) for k, v in sorted(self.paths.items())},
            "allocated": {
                k: {c: qstr(a) for c, a in sorted(v.items())} for k, v in sorted(self.allocated.items())
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NssiRecord":
        return cls(
            nssi_id=data["nssi_id"],
            parent_nsi=data["parent_nsi"],
            domain_id=data["domain_id"],
            state=State(data["state"]),
            embedding={k: (v[0], v[1]) for k, v in data["embedding"].items()},
            paths={k: list(v) for k, v in data["paths"].items()},
            allocated={k: {c: q(a) for c, a in v.items()} for k, v in data["allocated"].items()},
        )


@dataclass
class NsiRecord:
    nsi_id: str
    tenant_id: str
    requirements: ServiceRequirements
    state: State = State.REQUESTED
    nssis: list[str] = field(default_factory=list)
    interconnects: list[InterconnectRef] = field(default_factory=list)
    schedule: tuple[int, int | None] = (0, None)

    def apply(self, event: Event, nssi_states: Iterable[State] = ()) -> State:
        new = next_state(self.state, event)
        if new is State.OPERATIONAL:
            if any(s is not State.OPERATIONAL for s in nssi_states):
                raise LifecycleError(self.state, event)
            if any(ic.state != "Reserved" for ic in self.interconnects):
                raise LifecycleError(self.state, event)
        self.state = new
        return new

    def to_dict(self) -> dict[str, Any]:
        return {
            "nsi_id": self.nsi_id,
            "tenant_id": self.tenant_id,
            "state": self.state.value,
            "nssis": list(self.nssis),
            "interconnects": [
                {
                    "link_id": ic.link_id,
                    "domains": list(ic.domains),
                    "bandwidth_mbps": qstr(ic.bandwidth_mbps),
                    "reservation": ic.reservation,
                    "state": ic.state,
                }
                for ic in self.interconnects
            ],
            "requirements": self.requirements.to_dict(),
            "schedule": [self.schedule[0], self.schedule[1]],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NsiRecord":
        return cls(
            nsi_id=data["nsi_id"],
            tenant_id=data["tenant_id"],
            requirements=ServiceRequirements.from_dict(data["requirements"]),
            state=State(data["state"]),
            nssis=list(data["nssis"]),
            interconnects=[
                InterconnectRef(
                    link_id=ic["link_id"],
                    domains=(ic["domains"][0], ic["domains"][1]),
                    bandwidth_mbps=q(ic["bandwidth_mbps"]),
                    reservation=ic["reservation"],
                    state=ic["state"],
                )
                for ic in data["interconnects"]
            ],
            schedule=(data["schedule"][0], data["schedule"][1]),
        )
