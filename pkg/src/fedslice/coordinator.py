"""Per-NSI federated lifecycle: capability mediation, WAN stitching, monitoring and repair."""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any

from .conductor import CONDUCTOR, BROKER, DecompositionPlan, equal_probability_share, split_budgets
from .embedding import Budget, Metrics, routes_metrics
from .kernel import Kernel, Kind, Message
from .model import PROB_TOL, Event, InterconnectRef, NsiRecord, ServiceRequirements, State, prob_le, q
from .substrate import Substrate, SubstrateError

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Unified Cloud Mediator
# --------------------------------------------------------------------------


class MediationError(Exception):
    code = "mediation-failed"


class UnknownDialect(MediationError):
    code = "unknown-dialect"


@dataclass(frozen=True)
class CanonicalCapability:
    vcpu_equiv: Fraction = Fraction(0)
    memory_gb: Fraction = Fraction(0)
    storage_gb: Fraction = Fraction(0)
    vnf_types: frozenset[str] = frozenset()
    latency_range_ms: tuple[Fraction, Fraction] | None = None

    def __add__(self, other: "CanonicalCapability") -> "CanonicalCapability":
        ranges = [r for r in (self.latency_range_ms, other.latency_range_ms) if r is not None]
        merged = (min(r[0] for r in ranges), max(r[1] for r in ranges)) if ranges else None
        return CanonicalCapability(
            self.vcpu_equiv + other.vcpu_equiv,
            self.memory_gb + other.memory_gb,
            self.storage_gb + other.storage_gb,
            self.vnf_types | other.vnf_types,
            merged,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "vcpu_equiv": str(self.vcpu_equiv),
            "memory_gb": str(self.memory_gb),
            "storage_gb": str(self.storage_gb),
            "vnf_types": sorted(self.vnf_types),
            "latency_range_ms": None if self.latency_range_ms is None else [str(x) for x in self.latency_range_ms],
        }


def _range(d: Mapping[str, Any], key: str) -> tuple[Fraction, Fraction] | None:
    r = d.get(key)
    return None if r is None else (q(r[0]), q(r[1]))


def _canonical(d: Mapping[str, Any]) -> CanonicalCapability:
    return CanonicalCapability(
        q(d.get("vcpu", 0)), q(d.get("memory_gb", 0)), q(d.get("storage_gb", 0)),
        frozenset(d.get("vnf_types", ())), _range(d, "latency_range_ms"),
    )


def _dialect1(d: Mapping[str, Any]) -> CanonicalCapability:
    # cores at a 2 GHz reference clock
    return CanonicalCapability(
        q(d.get("cores", 0)) * q(d.get("ghz", 2)) / 2, q(d.get("ram_gb", 0)), q(d.get("disk_gb", 0)),
        frozenset(d.get("functions", ())), _range(d, "delay_ms"),
    )


def _dialect2(d: Mapping[str, Any]) -> CanonicalCapability:
    return CanonicalCapability(
        q(d.get("vcpu", 0)) * q(d.get("clock_mhz", 2000)) / 2000,
        q(d.get("memory_mb", 0)) / 1024,
        q(d.get("storage_mb", 0)) / 1024,
        frozenset(d.get("supports", ())),
        _range(d, "latency_us") and tuple(x / 1000 for x in _range(d, "latency_us")),  # type: ignore[arg-type]
    )


DIALECTS: dict[str, Callable[[Mapping[str, Any]], CanonicalCapability]] = {
    "canonical": _canonical,
    "d1": _dialect1,
    "d2": _dialect2,
}


def mediate(descriptor: Mapping[str, Any]) -> CanonicalCapability:
    if not descriptor:
        return CanonicalCapability()
    dialect = descriptor.get("dialect")
    normalizer = DIALECTS.get(dialect) if isinstance(dialect, str) else None
    if normalizer is None:
        raise UnknownDialect(f"unknown dialect {dialect!r}")
    return normalizer(descriptor)


# --------------------------------------------------------------------------
# Unified Connectivity Resource Manager
# --------------------------------------------------------------------------


class InterconnectError(Exception):
    code = "interconnect-failed"


class NoWanCapacity(InterconnectError):
    code = "no-wan-capacity"


class QosUnreachable(InterconnectError):
    code = "qos-unreachable"


class IcState(str, Enum):
    NEGOTIATING = "Negotiating"
    RESERVED = "Reserved"
    RELEASED = "Released"


@dataclass
class InterconnectReservation:
    link: str
    bandwidth_mbps: Fraction
    endpoints: tuple[str, str]
    reservation: str | None
    state: IcState = IcState.NEGOTIATING


def _link_metrics(w: Mapping[str, Any]) -> Metrics:
    return Metrics(q(w["latency_ms"]), q(w["jitter_ms"]), float(w["error_rate"]), float(w["loss"]))


def meets(m: Metrics, need: Metrics) -> bool:
    return (
        m.latency_ms <= need.latency_ms
        and m.jitter_ms <= need.jitter_ms
        and prob_le(m.error_rate, need.error_rate)
        and prob_le(m.loss, need.loss)
    )


def select_wan_link(links: Iterable[Mapping[str, Any]], bandwidth: Fraction, need: Metrics | None) -> Mapping[str, Any]:
    """Filter by free bandwidth, then by QoS need, then take the lowest latency (id breaks ties)."""
    roomy = [w for w in links if q(w["free_bandwidth_mbps"]) >= bandwidth]
    if not roomy:
        raise NoWanCapacity(f"no WAN link with {bandwidth} Mbps free")
    good = [w for w in roomy if need is None or meets(_link_metrics(w), need)]
    if not good:
        raise QosUnreachable("no WAN link meets the QoS need")
    return min(good, key=lambda w: (q(w["latency_ms"]), w["id"]))


def negotiate_interconnect(
    substrate: Substrate,
    trust: frozenset[frozenset[str]],
    pair: tuple[str, str],
    bandwidth: Fraction,
    need: Metrics | None,
    nsi: str,
) -> InterconnectReservation:
    if frozenset(pair) not in trust:
        raise NoWanCapacity(f"pair {pair} is not trusted")
    links = [w for w in substrate.wan_snapshot() if set(w["domains"]) == set(pair)]
    chosen = select_wan_link(links, bandwidth, need)
    rid = substrate.allocate(chosen["id"], f"{nsi}/wan/{pair[0]}-{pair[1]}", {"bandwidth_mbps": bandwidth}, nsi=nsi)
    return InterconnectReservation(
        chosen["id"], bandwidth, (chosen["borders"][pair[0]], chosen["borders"][pair[1]]), rid, IcState.RESERVED
    )


# --------------------------------------------------------------------------
# Health
# --------------------------------------------------------------------------


@dataclass
class HealthReport:
    domains: dict[str, dict[str, Any]] = field(default_factory=dict)
    interconnects: dict[str, dict[str, Any]] = field(default_factory=dict)
    end_to_end: Metrics = field(default_factory=Metrics)
    violations: list[dict[str, Any]] = field(default_factory=list)

    @property
    def all_clear(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "domains": self.domains,
            "interconnects": self.interconnects,
            "end_to_end": self.end_to_end.to_dict(),
            "violations": self.violations,
        }


def compose(parts: Sequence[Metrics]) -> Metrics:
    return Metrics(
        sum((m.latency_ms for m in parts), Fraction(0)),
        sum((m.jitter_ms for m in parts), Fraction(0)),
        1.0 - math.prod(1.0 - m.error_rate for m in parts),
        1.0 - math.prod(1.0 - m.loss for m in parts),
    )


def sla_budget(req: ServiceRequirements) -> Budget:
    return Budget(req.latency_budget_ms, req.jitter_budget_ms, req.max_error_rate, req.max_packet_loss)


def residual_budget(sla: ServiceRequirements, others: Sequence[Metrics]) -> Budget | None:
    """Budget left for one domain once every other contribution is fixed at its value."""
    lat = sla.latency_budget_ms - sum((m.latency_ms for m in others), Fraction(0))
    jit = sla.jitter_budget_ms - sum((m.jitter_ms for m in others), Fraction(0))
    if lat < 0 or jit < 0:
        return None
    err = equal_probability_share(sla.max_error_rate, [m.error_rate for m in others], 1)
    loss = equal_probability_share(sla.max_packet_loss, [m.loss for m in others], 1)
    if err is None or loss is None:
        return None
    return Budget(lat, jit, err, loss)


# --------------------------------------------------------------------------
# Coordinator
# --------------------------------------------------------------------------

MAX_REPAIR_ROUNDS = 8


class CoordinatorError(Exception):
    code = "coordinator-error"


class UnknownNsi(CoordinatorError):
    code = "unknown-nsi"


class CrossDomainCoordinator:
    """Drives one federated NSI through instantiation, repair and decommission.

    Also hosts that NSI's mediator and UCRM participants.
    """

    def __init__(
        self,
        kernel: Kernel,
        substrate: Substrate,
        nsi_id: str,
        tenant: str,
        trust: frozenset[frozenset[str]],
    ) -> None:
        self.kernel = kernel
        self.substrate = substrate
        self.nsi_id = nsi_id
        self.tenant = tenant
        self.trust = trust
        self.participant = f"coord:{nsi_id}"
        self.mediator_id = f"mediator:{nsi_id}"
        self.ucrm_id = f"ucrm:{nsi_id}"
        kernel.register(self.participant, self.handle)
        kernel.register(self.mediator_id, self._on_mediator)
        kernel.register(self.ucrm_id, self._on_ucrm)

        self.record: NsiRecord | None = None
        self.sla: ServiceRequirements | None = None
        self.policy: dict[str, Any] = {}
        self.plan: DecompositionPlan | None = None
        self.budgets: dict[str, Budget] = {}
        self.wan_budget: dict[tuple[str, str], Metrics] = {}
        self.nssi: dict[str, str] = {}
        self.sent: set[str] = set()
        self.reports: dict[str, dict[str, Any]] = {}
        self.capabilities: dict[str, CanonicalCapability] = {}
        self.ics: dict[tuple[str, str], InterconnectRef] = {}
        self.phase = "idle"
        self.pending: set[tuple[Any, ...]] = set()
        self.failures: list[tuple[str, str]] = []
        self.after: str | None = None
        self.next_plan: DecompositionPlan | None = None
        self.episode: dict[str, Any] | None = None
        self.recheck = False
        self.health_log: list[HealthReport] = []

    # -- helpers --------------------------------------------------------------

    @property
    def tenant_id(self) -> str:
        return f"tenant:{self.tenant}"

    def _post(self, receiver: str, kind: Kind, payload: Mapping[str, Any]) -> None:
        self.kernel.post(self.participant, receiver, kind, payload)

    def _transition(self, event: Event, nssi_states: Iterable[State] = ()) -> None:
        assert self.record is not None
        before = self.record.state
        self.record.apply(event, nssi_states)
        self.kernel.record_transition(self.nsi_id, before, self.record.state)

    @property
    def state(self) -> State | None:
        return None if self.record is None else self.record.state

    def _sync_record(self) -> None:
        assert self.record is not None
        self.record.nssis = [self.nssi[d] for d in sorted(self.nssi)]
        self.record.interconnects = [self.ics[p] for p in sorted(self.ics)]

    # -- participant: mediator ----------------------------------------------

    def _on_mediator(self, msg: Message) -> None:
        p = msg.payload
        total = CanonicalCapability()
        try:
            for desc in p["descriptors"]:
                total = total + mediate(desc)
        except MediationError as exc:
            self.kernel.post(self.mediator_id, msg.sender, Kind.MEDIATION_RESULT,
                             {"nsi": p["nsi"], "domain": p["domain"], "ok": False, "error": f"{exc.code}: {exc}"})
            return
        self.kernel.post(self.mediator_id, msg.sender, Kind.MEDIATION_RESULT,
                         {"nsi": p["nsi"], "domain": p["domain"], "ok": True, "capability": total})

    # -- participant: UCRM --------------------------------------------------------

    def _on_ucrm(self, msg: Message) -> None:
        p = msg.payload
        if msg.kind is Kind.INTERCONNECT_REQUEST:
            pair = (p["pair"][0], p["pair"][1])
            need = Metrics.from_dict(p["qos"]) if p["qos"] is not None else None
            extra = {"purpose": p["purpose"]} if "purpose" in p else {}
            try:
                res = negotiate_interconnect(self.substrate, self.trust, pair, q(p["bandwidth_mbps"]), need, p["nsi"])
            except (InterconnectError, SubstrateError) as exc:
                code = exc.code if isinstance(exc, InterconnectError) else NoWanCapacity.code
                self.kernel.post(self.ucrm_id, msg.sender, Kind.INTERCONNECT_RESERVED,
                                 {"nsi": p["nsi"], "pair": list(pair), "ok": False, "error": code, **extra})
                return
            self.kernel.post(self.ucrm_id, msg.sender, Kind.INTERCONNECT_RESERVED,
                             {"nsi": p["nsi"], "pair": list(pair), "ok": True, "link": res.link,
                              "reservation": res.reservation, **extra})
        elif msg.kind is Kind.INTERCONNECT_RELEASE:
            self.substrate.release_all(p["reservations"])
            self.kernel.post(self.ucrm_id, msg.sender, Kind.INTERCONNECT_RELEASED,
                             {"nsi": p["nsi"], "reservations": p["reservations"]})
        else:
            raise CoordinatorError(f"ucrm cannot handle {msg.kind.value}")

    # -- participant: coordinator ------------------------------------------------

    def handle(self, msg: Message) -> None:
        handler = {
            Kind.PROGRAM_COORDINATOR: self._on_program,
            Kind.DECOMPOSITION: self._on_decomposition,
            Kind.MEDIATION_RESULT: self._on_mediation,
            Kind.INTERCONNECT_RESERVED: self._on_reserved,
            Kind.NSSI_OPERATIONAL: self._on_nssi,
            Kind.NSSI_FAILED: self._on_nssi,
            Kind.NSSI_RELEASED: self._on_released,
            Kind.INTERCONNECT_RELEASED: self._on_released,
            Kind.LATE_REJECT: self._on_late_reject,
            Kind.MODIFY_REQUEST: self._on_modify,
            Kind.SCALE_RESULT: self._on_scale_result,
            Kind.RE_DECOMPOSITION: self._on_redecomposition,
            Kind.DEGRADATION_EVENT: self._on_degradation,
            Kind.DECOMMISSION_CMD: self._on_decommission,
        }.get(msg.kind)
        if handler is None:
            raise CoordinatorError(f"coordinator cannot handle {msg.kind.value}")
        handler(msg)

    def _on_program(self, msg: Message) -> None:
        p = msg.payload
        self.sla = ServiceRequirements.from_dict(p["sla"])
        self.policy = dict(p["policy"])
        schedule = self.policy.get("schedule", [0, None])
        self.record = NsiRecord(self.nsi_id, self.tenant, self.sla, schedule=(schedule[0], schedule[1]))
        self._transition(Event.ADMIT)

    def _on_decomposition(self, msg: Message) -> None:
        if self.state is not State.ADMITTED:
            return
        plan = DecompositionPlan.from_dict(msg.payload["plan"])
        self._transition(Event.DECOMPOSE)
        self._transition(Event.INSTANTIATE)
        self._begin(plan)

    def _on_late_reject(self, msg: Message) -> None:
        if self.state is State.ADMITTED:
            self._transition(Event.REJECT)
            self.phase = "closed"

    # -- instantiation phases ----------------------------------------------------

    def _begin(self, plan: DecompositionPlan) -> None:
        self.plan = plan
        self.budgets = {s.domain: s.budget for s in plan.per_domain}
        self.wan_budget = {s.pair: s.qos for s in plan.stitching}
        self.nssi = {d: f"{self.nsi_id}/{d}/v{plan.version}" for d in plan.path}
        self.sent = set()
        self.reports = {}
        self.ics = {}
        self.failures = []
        self.phase = "mediating"
        self.pending = {("med", d) for d in plan.path}
        for d in plan.path:
            descriptors = [s.vendor for s in self.substrate.domain_slates(d)]
            self._post(self.mediator_id, Kind.MEDIATION_REQUEST, {"nsi": self.nsi_id, "domain": d, "descriptors": descriptors})

    def _on_mediation(self, msg: Message) -> None:
        p = msg.payload
        key = ("med", p["domain"])
        if self.phase != "mediating" or key not in self.pending:
            return
        self.pending.discard(key)
        if p["ok"]:
            c = p["capability"]
            self.capabilities[p["domain"]] = CanonicalCapability(
                q(c["vcpu_equiv"]), q(c["memory_gb"]), q(c["storage_gb"]), frozenset(c["vnf_types"])
            )
        else:
            self.failures.append((p["domain"], "policy"))
        if not self.pending:
            if self.failures:
                self._attempt_failed()
            else:
                self._stitch()

    def _stitch(self) -> None:
        assert self.plan is not None
        self.phase = "stitching"
        if not self.plan.stitching:
            self._dispatch()
            return
        for s in self.plan.stitching:
            self.pending.add(("ic", s.pair))
            self.ics[s.pair] = InterconnectRef(s.link, s.pair, s.bandwidth_mbps, None, IcState.NEGOTIATING.value)
            self._post(self.ucrm_id, Kind.INTERCONNECT_REQUEST,
                       {"nsi": self.nsi_id, "pair": list(s.pair), "bandwidth_mbps": s.bandwidth_mbps, "qos": s.qos})

    def _on_reserved(self, msg: Message) -> None:
        p = msg.payload
        pair = (p["pair"][0], p["pair"][1])
        key = ("ic", pair) if p.get("purpose") != "reselect" else ("reselect", pair)
        if key not in self.pending or self.state is State.DECOMMISSIONED:
            if p["ok"]:
                self._post(self.ucrm_id, Kind.INTERCONNECT_RELEASE, {"nsi": self.nsi_id, "reservations": [p["reservation"]]})
            return
        self.pending.discard(key)
        if key[0] == "reselect":
            self._on_reselected(pair, p)
            return
        ic = self.ics[pair]
        if p["ok"]:
            ic.link, ic.reservation, ic.state = p["link"], p["reservation"], IcState.RESERVED.value
        else:
            ic.state = IcState.RELEASED.value
            self.failures.append((f"{pair[0]}-{pair[1]}", "qos" if p["error"] == QosUnreachable.code else "capacity"))
        if not self.pending:
            if self.failures:
                self._attempt_failed()
            else:
                self._dispatch()

    def _dispatch(self) -> None:
        assert self.plan is not None
        self.phase = "dispatching"
        for d in self.plan.path:
            self.sent.add(d)
            self.pending.add(("nssi", d))
            self._post(f"smf:{d}", Kind.SUB_REQUEST,
                       {"nsi": self.nsi_id, "nssi": self.nssi[d], "domain": d, "subrequest": self.plan.share(d)})

    def _on_nssi(self, msg: Message) -> None:
        p = msg.payload
        d = p["domain"]
        if self.phase != "dispatching" or ("nssi", d) not in self.pending or self.nssi.get(d) != p["nssi"]:
            return
        self.pending.discard(("nssi", d))
        if msg.kind is Kind.NSSI_OPERATIONAL:
            self.reports[d] = p["report"]
        else:
            self.failures.append((d, p["cause"]))
        if not self.pending:
            if self.failures:
                self._attempt_failed()
            else:
                self._instantiated()

    def _instantiated(self) -> None:
        assert self.plan is not None
        self.phase = "operational"
        self._sync_record()
        if self.episode is None:
            self._transition(Event.OPERATE, [State.OPERATIONAL] * len(self.nssi))
            self._post(self.tenant_id, Kind.NSI_OPERATIONAL, {"nsi": self.nsi_id})
            self._post(BROKER, Kind.BROKER_UPDATE, {"nsi": self.nsi_id, "status": "operational"})
            return
        new_sla = self.episode.get("new_sla")
        if new_sla is not None:
            self.sla = new_sla
            assert self.record is not None
            self.record.requirements = new_sla
        self._locus_resolved(4)

    def _attempt_failed(self) -> None:
        if self.episode is not None:
            self._teardown("reinstantiate-failed")
        else:
            self._teardown("fail")

    # -- teardown --------------------------------------------------------------

    def _teardown(self, after: str) -> None:
        self.phase = "tearing"
        self.after = after
        self.pending = set()
        for d in sorted(self.sent):
            self.pending.add(("rel", d))
            self.kernel.post(self.participant, f"lcm:{d}", Kind.NSSI_TEARDOWN,
                             {"nsi": self.nsi_id, "nssi": self.nssi[d], "domain": d})
        reserved = sorted(ic.reservation for ic in self.ics.values() if ic.state == IcState.RESERVED.value and ic.reservation)
        if reserved:
            self.pending.add(("wanrel", tuple(reserved)))
            self._post(self.ucrm_id, Kind.INTERCONNECT_RELEASE, {"nsi": self.nsi_id, "reservations": reserved})
        if not self.pending:
            self._torn_down()

    def _on_released(self, msg: Message) -> None:
        p = msg.payload
        if msg.kind is Kind.NSSI_RELEASED:
            key: tuple[Any, ...] = ("rel", p["domain"])
        else:
            key = ("wanrel", tuple(sorted(p["reservations"])))
        if key not in self.pending:
            return
        self.pending.discard(key)
        if not self.pending:
            if self.phase == "tearing":
                self._torn_down()
            elif self.phase == "rewiring":
                self._rewired()

    def _torn_down(self) -> None:
        for ic in self.ics.values():
            ic.state = IcState.RELEASED.value
        self.sent = set()
        after, self.after = self.after, None
        if after == "fail":
            self.phase = "idle"
            self._transition(Event.FAIL)
            domains = sorted({d for d, _ in self.failures if self.plan and d in self.plan.path})
            cause = self.failures[0][1] if self.failures else "capacity"
            self._post(CONDUCTOR, Kind.INSTANTIATION_FAILED, {"nsi": self.nsi_id, "failed_domains": domains, "cause": cause})
        elif after == "decommission":
            self._closed()
        elif after == "reinstantiate":
            assert self.next_plan is not None
            plan, self.next_plan = self.next_plan, None
            self._begin(plan)
        elif after == "reinstantiate-failed":
            assert self.episode is not None
            domains = sorted({d for d, _ in self.failures if self.plan and d in self.plan.path})
            cause = self.failures[0][1] if self.failures else "capacity"
            self.phase = "idle"
            self._escalate(domains, cause)

    def _closed(self) -> None:
        self.phase = "closed"
        self.ics = {}
        self._transition(Event.DECOMMISSION)
        if self.episode is not None:
            self._post(self.episode["requester"], Kind.MODIFY_ACK, {"nsi": self.nsi_id, "outcome": "aborted", "level": None})
            self.episode = None
        self._post(CONDUCTOR, Kind.NSI_DECOMMISSIONED, {"nsi": self.nsi_id})
        self._post(BROKER, Kind.BROKER_UPDATE, {"nsi": self.nsi_id, "status": "decommissioned"})

    # -- decommission -------------------------------------------------------------

    def decommission(self) -> None:
        if self.record is None or self.record.state is State.DECOMMISSIONED:
            raise UnknownNsi(self.nsi_id)
        if self.phase == "tearing":
            self.after = "decommission"
            return
        self._teardown("decommission")

    def _on_decommission(self, msg: Message) -> None:
        try:
            self.decommission()
        except UnknownNsi:
            log.info("ignoring decommission of %s", self.nsi_id)

    # -- monitoring ---------------------------------------------------------------

    def _attr(self, link_id: str) -> tuple[Fraction, Fraction, float, float]:
        l = self.substrate.links[link_id]
        return (l.latency_ms, l.jitter_ms, l.error_rate, l.loss)

    def domain_metrics(self, d: str) -> Metrics:
        return routes_metrics(self.reports[d]["routes"], self._attr)

    def monitor(self) -> HealthReport:
        """Re-measure every domain and WAN leg from current substrate attributes."""
        if self.plan is None or self.sla is None or self.state not in (
            State.OPERATIONAL, State.DEGRADED, State.MODIFYING
        ):
            return HealthReport()
        report = HealthReport()
        parts = []
        for d in self.plan.path:
            m = self.domain_metrics(d)
            parts.append(m)
            budget = self.budgets[d]
            over = sorted(
                t for t in self.reports[d]["slates"] + self.reports[d]["links"] if self.substrate.oversubscription(t)
            )
            report.domains[d] = {"metrics": m.to_dict(), "budget": budget.to_dict(), "oversubscribed": over}
            if over:
                report.violations.append({"locus": "domain", "domain": d, "cause": "capacity", "target": over[0]})
            elif not m.within(budget):
                report.violations.append({"locus": "domain", "domain": d, "cause": "qos"})
        for pair in sorted(self.ics):
            ic = self.ics[pair]
            l = self.substrate.links[ic.link]
            m = Metrics(l.latency_ms, l.jitter_ms, l.error_rate, l.loss)
            parts.append(m)
            over = bool(self.substrate.oversubscription(ic.link))
            ok = meets(m, self.wan_budget[pair])
            report.interconnects[f"{pair[0]}-{pair[1]}"] = {"link": ic.link, "metrics": m.to_dict(), "oversubscribed": over}
            if over or not ok:
                report.violations.append({"locus": "interconnect", "pair": list(pair), "link": ic.link,
                                          "cause": "capacity" if over else "qos"})
        report.end_to_end = compose(parts)
        if not report.end_to_end.within(sla_budget(self.sla)):
            report.violations.append({"locus": "end-to-end", "cause": "qos"})
        self.health_log.append(report)
        return report

    # -- modification ladder -----------------------------------------------------

    def _on_modify(self, msg: Message) -> None:
        p = msg.payload
        m = p["modification"]
        d = m.get("domain")
        if (
            self.state is not State.OPERATIONAL
            or self.phase != "operational"
            or self.episode is not None
            or d not in self.nssi
        ):
            self.kernel.post(self.participant, msg.sender, Kind.MODIFY_ACK,
                             {"nsi": self.nsi_id, "outcome": "rejected", "level": None})
            return
        self._transition(Event.MODIFY)
        self.episode = {"type": "scale", "requester": msg.sender, "modification": dict(m), "domain": d,
                        "max_level": 0, "attempt": 0, "rounds": 0}
        self._ask_domain(d, m, 0, [self.budgets[d]])

    def _ask_domain(self, d: str, modification: Mapping[str, Any], level: int, budgets: Sequence[Budget]) -> None:
        assert self.episode is not None
        self.episode["asked"] = level
        self.episode["domain"] = d
        self._post(f"lcm:{d}", Kind.MODIFY_REQUEST,
                   {"nsi": self.nsi_id, "nssi": self.nssi[d], "domain": d, "modification": modification,
                    "level": level, "budgets": list(budgets)})

    def reshare_candidates(self, d: str) -> list[tuple[tuple[str, ...], Budget, dict[str, Budget]]]:
        """Level-3 budgets for domain d, one per usable WAN combination (current first).

        Other domains are held at their measured metrics; d gets the remainder.
        """
        assert self.plan is not None and self.sla is not None
        if len(self.plan.path) < 2:
            return []
        options = []
        for s in self.plan.stitching:
            current = self.ics[s.pair].link
            links = []
            for w in self.substrate.wan_snapshot():
                if set(w["domains"]) != set(s.pair) or frozenset(s.pair) not in self.trust:
                    continue
                credit = s.bandwidth_mbps if w["id"] == current else Fraction(0)
                if q(w["free_bandwidth_mbps"]) + credit >= s.bandwidth_mbps:
                    links.append(w)
            options.append(links)
        current_combo = tuple(self.ics[s.pair].link for s in self.plan.stitching)
        combos = list(itertools.product(*options))
        combos.sort(key=lambda c: (
            tuple(w["id"] for w in c) != current_combo,
            sum((q(w["latency_ms"]) for w in c), Fraction(0)),
            tuple(w["id"] for w in c),
        ))
        others = {o: self.domain_metrics(o) for o in self.plan.path if o != d}
        seen: set[Budget] = set()
        out = []
        for combo in combos:
            fixed = [_link_metrics(w) for w in combo] + [others[o] for o in sorted(others)]
            budget = residual_budget(self.sla, fixed)
            if budget is None or budget in seen:
                continue
            seen.add(budget)
            tight = {o: Budget(m.latency_ms, m.jitter_ms, m.error_rate, m.loss) for o, m in others.items()}
            out.append((tuple(w["id"] for w in combo), budget, tight))
        return out

    def _on_scale_result(self, msg: Message) -> None:
        p = msg.payload
        ep = self.episode
        d = p["domain"]
        if ep is None or ep.get("domain") != d or self.nssi.get(d) != p["nssi"] or self.phase != "operational":
            return
        if "report" in p:
            self.reports[d] = p["report"]
        if p["outcome"] == "resolved":
            level = int(p["level"])
            if level == 3:
                combo, budget, tight = ep["reshare"][int(p["budget_index"])]
                self.budgets.update(tight)
                self.budgets[d] = budget
                self._rewire(combo, level)
                return
            self._locus_resolved(level)
            return
        if ep["asked"] < 3:
            cands = self.reshare_candidates(d)
            if cands:
                ep["reshare"] = cands
                self._ask_domain(d, ep["modification"], 3, [c[1] for c in cands])
                return
        self._escalate([d], ep.get("cause", "capacity"))

    def wan_reselect(self) -> tuple[tuple[str, ...], dict[str, Budget]] | None:
        """Level 3 for a WAN locus: first WAN combination whose re-split budgets hold every domain."""
        assert self.plan is not None and self.sla is not None
        options = []
        for s in self.plan.stitching:
            current = self.ics[s.pair].link
            links = []
            for w in self.substrate.wan_snapshot():
                if set(w["domains"]) != set(s.pair) or frozenset(s.pair) not in self.trust:
                    continue
                credit = s.bandwidth_mbps if w["id"] == current else Fraction(0)
                if q(w["free_bandwidth_mbps"]) + credit >= s.bandwidth_mbps:
                    links.append(w)
            options.append(links)
        atts = {sub.domain: sub.attachments for sub in self.plan.per_domain}
        actual = {d: self.domain_metrics(d) for d in self.plan.path}
        combos = sorted(
            itertools.product(*options),
            key=lambda c: (sum((q(w["latency_ms"]) for w in c), Fraction(0)), tuple(w["id"] for w in c)),
        )
        for combo in combos:
            budgets = split_budgets(self.sla, self.plan.path, atts, [_link_metrics(w) for w in combo])
            if budgets is None:
                continue
            if all(actual[d].within(budgets[d]) for d in self.plan.path):
                return tuple(w["id"] for w in combo), budgets
        return None

    def _rewire(self, combo: Sequence[str], level: int) -> None:
        """Move stitched pairs whose chosen WAN link changed; make before break."""
        assert self.plan is not None and self.episode is not None
        self.episode["rewire_level"] = level
        self.phase = "rewiring"
        self.pending = set()
        for s, link_id in zip(self.plan.stitching, combo):
            l = self.substrate.links[link_id]
            need = Metrics(l.latency_ms, l.jitter_ms, l.error_rate, l.loss)
            self.wan_budget[s.pair] = need
            if self.ics[s.pair].link == link_id:
                continue
            self.pending.add(("reselect", s.pair))
            self._post(self.ucrm_id, Kind.INTERCONNECT_REQUEST,
                       {"nsi": self.nsi_id, "pair": list(s.pair), "bandwidth_mbps": s.bandwidth_mbps,
                        "qos": need, "purpose": "reselect"})
        if not self.pending:
            self._rewired()

    def _on_reselected(self, pair: tuple[str, str], p: Mapping[str, Any]) -> None:
        old = self.ics[pair]
        if p["ok"]:
            self.ics[pair] = InterconnectRef(p["link"], pair, old.bandwidth_mbps, p["reservation"], IcState.RESERVED.value)
            l = self.substrate.links[p["link"]]
            self.wan_budget[pair] = Metrics(l.latency_ms, l.jitter_ms, l.error_rate, l.loss)
            self.pending.add(("wanrel", (old.reservation,)))
            self._post(self.ucrm_id, Kind.INTERCONNECT_RELEASE, {"nsi": self.nsi_id, "reservations": [old.reservation]})
        if not self.pending:
            self._rewired()

    def _rewired(self) -> None:
        assert self.episode is not None
        self.phase = "operational"
        self._sync_record()
        self._locus_resolved(self.episode.pop("rewire_level"))

    def _escalate(self, domains: Sequence[str], cause: str) -> None:
        assert self.episode is not None and self.sla is not None
        ep = self.episode
        ep["attempt"] += 1
        if ep["type"] == "scale" and "new_sla" not in ep:
            delta = ep["modification"].get("delta", {})
            ep["new_sla"] = self.sla.with_extra_compute(
                vcpu=math.ceil(q(delta.get("vcpu", 0))),
                memory_gb=q(delta.get("memory_gb", 0)),
                storage_gb=q(delta.get("storage_gb", 0)),
            )
        req = ep.get("new_sla", self.sla)
        failure = {"domains": list(domains), "cause": cause, "requirements": req, "attempt": ep["attempt"]}
        self._post(CONDUCTOR, Kind.ESCALATE_TO_CONDUCTOR, {"nsi": self.nsi_id, "failure": failure})

    def _on_redecomposition(self, msg: Message) -> None:
        p = msg.payload
        if self.episode is None or self.state is State.DECOMMISSIONED:
            return
        if p["plan"] is None:
            if not self.sent and self.phase != "operational":
                # the old realization is already gone
                self._teardown("decommission")
                return
            self._exhausted()
            return
        plan = DecompositionPlan.from_dict(p["plan"])
        if self.sent:
            self.next_plan = plan
            self._teardown("reinstantiate")
        else:
            self._begin(plan)

    def _exhausted(self) -> None:
        ep = self.episode
        assert ep is not None
        self.episode = None
        self.phase = "operational"
        if ep["type"] == "scale":
            self._transition(Event.MODIFIED)
            self._post(ep["requester"], Kind.MODIFY_ACK, {"nsi": self.nsi_id, "outcome": "exhausted", "level": None})
        else:
            self._post(BROKER, Kind.BROKER_UPDATE, {"nsi": self.nsi_id, "status": "exhausted"})
            self._post(ep["requester"], Kind.MODIFY_ACK, {"nsi": self.nsi_id, "outcome": "exhausted", "level": None})
        self._after_episode()

    def _locus_resolved(self, level: int) -> None:
        ep = self.episode
        assert ep is not None
        ep["max_level"] = max(ep["max_level"], level)
        self.phase = "operational"
        if ep["type"] == "scale":
            self.episode = None
            self._transition(Event.MODIFIED)
            self._post(ep["requester"], Kind.MODIFY_ACK, {"nsi": self.nsi_id, "outcome": "resolved", "level": level})
            self._after_episode()
            return
        ep["rounds"] += 1
        health = self.monitor()
        if health.all_clear:
            self.episode = None
            self._transition(Event.RESTORE)
            self._post(ep["requester"], Kind.MODIFY_ACK, {"nsi": self.nsi_id, "outcome": "resolved", "level": ep["max_level"]})
            self._post(BROKER, Kind.BROKER_UPDATE, {"nsi": self.nsi_id, "status": "restored"})
            self._after_episode()
        elif ep["rounds"] >= MAX_REPAIR_ROUNDS:
            self._exhausted()
        else:
            self._handle_locus(health)

    def _after_episode(self) -> None:
        if self.recheck:
            self.recheck = False
            self._check_health()

    # -- degradation ------------------------------------------------------------

    def _on_degradation(self, msg: Message) -> None:
        if self.state not in (State.OPERATIONAL, State.DEGRADED):
            if self.state is State.MODIFYING:
                self.recheck = True
            return
        if self.phase != "operational" or self.episode is not None:
            self.recheck = True
            return
        self._check_health()

    def _check_health(self) -> None:
        if self.phase != "operational" or self.episode is not None:
            return
        health = self.monitor()
        if health.all_clear:
            if self.state is State.DEGRADED:
                self._transition(Event.RESTORE)
                self._post(BROKER, Kind.BROKER_UPDATE, {"nsi": self.nsi_id, "status": "restored"})
            return
        if self.state is State.OPERATIONAL:
            self._transition(Event.DEGRADE)
            self._post(BROKER, Kind.BROKER_UPDATE, {"nsi": self.nsi_id, "status": "degraded"})
        self.episode = {"type": "degradation", "requester": self.tenant_id, "max_level": 0, "attempt": 0, "rounds": 0}
        self._handle_locus(health)

    def _handle_locus(self, health: HealthReport) -> None:
        ep = self.episode
        assert ep is not None
        v = health.violations[0]
        ep["cause"] = v["cause"]
        if v["locus"] == "domain":
            d = v["domain"]
            mod = {"type": "capacity", "target": v["target"]} if v["cause"] == "capacity" else {"type": "repair"}
            ep["modification"] = mod
            self._ask_domain(d, mod, 0, [self.budgets[d]])
            return
        found = self.wan_reselect()
        if found is not None:
            combo, budgets = found
            self.budgets = dict(budgets)
            self._rewire(combo, 3)
            return
        self._escalate([], v["cause"])
