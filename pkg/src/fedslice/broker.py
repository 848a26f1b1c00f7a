"""Tenant-facing admission, negotiation, scheduling and billing.

The broker only ever sees a `Repository` of abstracted capability snapshots;
it has no handle on the substrate itself.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any

from .kernel import Kernel, Kind, Message
from .model import ModelError, ServiceRequirements, q
from .repository import Repository

log = logging.getLogger(__name__)

BROKER = "broker"
CONDUCTOR = "conductor"


class BrokerError(Exception):
    code = "broker-error"


class MalformedRequirements(BrokerError):
    code = "malformed-requirements"


class UnknownTenant(BrokerError):
    code = "unknown-tenant"


class UnknownNsi(BrokerError):
    code = "unknown-nsi"


class PastStart(BrokerError):
    code = "past-start"


class BadSchedule(BrokerError):
    code = "end-before-start"


class Verdict(str, Enum):
    ADMIT = "admit"
    REJECT = "reject"
    COUNTER_OFFER = "counter_offer"


@dataclass(frozen=True)
class AdmissionDecision:
    verdict: Verdict
    reason: str
    counter: ServiceRequirements | None = None
    priced_rate: Fraction = Fraction(0)

    def __post_init__(self) -> None:
        if (self.counter is not None) != (self.verdict is Verdict.COUNTER_OFFER):
            raise ValueError("counter must be present exactly for counter offers")


@dataclass(frozen=True)
class BillingEntry:
    nsi: str
    start: int
    end: int
    rate: Fraction
    amount: Fraction


class BillingLedger:
    """Append-only list of charge entries."""

    def __init__(self) -> None:
        self._entries: list[BillingEntry] = []

    @property
    def entries(self) -> tuple[BillingEntry, ...]:
        return tuple(self._entries)

    def append(self, nsi: str, start: int, end: int, rate: Fraction) -> BillingEntry:
        entry = BillingEntry(nsi, start, end, rate, rate * (end - start))
        self._entries.append(entry)
        return entry

    def total(self, nsi: str | None = None) -> Fraction:
        return sum((e.amount for e in self._entries if nsi is None or e.nsi == nsi), Fraction(0))


@dataclass(frozen=True)
class TenantPolicy:
    id: str
    max_slices: int | None = None
    services: frozenset[str] | None = None


@dataclass(frozen=True)
class BrokerPolicy:
    tenants: Mapping[str, TenantPolicy] = field(default_factory=dict)
    rates: Mapping[str, Fraction] = field(default_factory=dict)
    default_rate: Fraction = Fraction(1)

    def rate(self, service_type: str) -> Fraction:
        return self.rates.get(service_type, self.default_rate)


TERMINAL = {"rejected", "decommissioned", "abandoned"}


@dataclass
class BrokerNsi:
    nsi: str
    tenant: str
    requirements: ServiceRequirements
    decision: AdmissionDecision
    status: str = "pending"
    schedule: tuple[int, int | None] = (0, None)
    accept_counter: bool = False


def aggregate_scale(req: ServiceRequirements, repo: Repository) -> Fraction:
    """Largest s <= 1 such that s * demand fits the repository aggregates.

    Federation totals bound compute; each coverage domain must hold an even
    share of compute and carry the full bandwidth on some intra-domain link.
    """
    ratios: list[Fraction] = [Fraction(1)]
    cover = sorted(req.coverage)
    if any(d not in repo.domains for d in cover):
        return Fraction(0)
    demand = {"vcpu": Fraction(req.compute_vcpu), "memory_gb": req.memory_gb, "storage_gb": req.storage_gb}
    for c, want in demand.items():
        if want <= 0:
            continue
        total = sum((max(Fraction(0), q(s["free"][c])) for s in repo.domains.values()), Fraction(0))
        ratios.append(total / want)
        share = want / len(cover)
        for d in cover:
            ratios.append(max(Fraction(0), q(repo.domains[d]["free"][c])) / share)
    if req.bandwidth_mbps > 0:
        for d in cover:
            bw = repo.domains[d].get("max_free_link_bandwidth_mbps")
            if bw is not None:
                ratios.append(max(Fraction(0), q(bw)) / req.bandwidth_mbps)
    return min(ratios)


class ServiceBroker:
    def __init__(
        self,
        kernel: Kernel,
        policy: BrokerPolicy,
        repository_source: Callable[[], Repository] | None = None,
    ) -> None:
        self.kernel = kernel
        self.policy = policy
        self.repository_source = repository_source
        self.repository = Repository()
        self.nsis: dict[str, BrokerNsi] = {}
        self.ledger = BillingLedger()
        self.open: dict[str, int] = {}
        self.degraded_ticks: dict[str, int] = {}
        self._degraded_since: dict[str, int] = {}
        kernel.register(BROKER, self.handle)

    # -- repository -------------------------------------------------------------

    def refresh_repository(
        self,
        snapshots: Iterable[Mapping[str, Any]] | Repository,
        wan: Iterable[Mapping[str, Any]] = (),
        trust: Iterable[Iterable[str]] = (),
    ) -> None:
        """Replace the repository wholesale."""
        if isinstance(snapshots, Repository):
            self.repository = snapshots
        else:
            self.repository = Repository.build(snapshots, wan, trust)

    # -- admission ---------------------------------------------------------------

    def active_slices(self, tenant: str) -> int:
        return sum(1 for n in self.nsis.values() if n.tenant == tenant and n.status not in TERMINAL)

    def submit_request(
        self, tenant: str, requirements: ServiceRequirements | Mapping[str, Any]
    ) -> AdmissionDecision:
        if tenant not in self.policy.tenants:
            raise UnknownTenant(tenant)
        if not isinstance(requirements, ServiceRequirements):
            try:
                requirements = ServiceRequirements.from_dict(requirements)
            except ModelError as exc:
                raise MalformedRequirements(str(exc)) from exc
        problems = requirements.violations()
        if problems:
            raise MalformedRequirements("; ".join(problems))
        rate = self.policy.rate(requirements.service_type)
        tp = self.policy.tenants[tenant]
        if tp.services is not None and requirements.service_type not in tp.services:
            return AdmissionDecision(Verdict.REJECT, "policy: service type not allowed", priced_rate=rate)
        if tp.max_slices is not None and self.active_slices(tenant) >= tp.max_slices:
            return AdmissionDecision(Verdict.REJECT, "policy: slice quota reached", priced_rate=rate)
        repo = self.repository
        for d in sorted(requirements.coverage):
            snap = repo.domains.get(d)
            if snap is None or requirements.service_type not in snap["service_types"]:
                return AdmissionDecision(Verdict.REJECT, f"capability: {d} cannot serve", priced_rate=rate)
        scale = aggregate_scale(requirements, repo)
        if scale >= 1:
            return AdmissionDecision(Verdict.ADMIT, "within aggregate capacity", priced_rate=rate)
        if scale > 0:
            counter = requirements.scaled(scale)
            if counter.compute_vcpu > 0 or requirements.compute_vcpu == 0:
                return AdmissionDecision(Verdict.COUNTER_OFFER, f"capacity: scale {scale}", counter, rate)
        return AdmissionDecision(Verdict.REJECT, "capacity", priced_rate=rate)

    def schedule_slice(self, nsi: str, start: int, end: int | None = None) -> None:
        entry = self.nsis.get(nsi)
        if entry is None or entry.status != "admitted":
            raise UnknownNsi(nsi)
        if start < self.kernel.now:
            raise PastStart(f"start {start} < now {self.kernel.now}")
        if end is not None and end < start:
            raise BadSchedule(f"end {end} < start {start}")
        entry.schedule = (start, end)
        policy = {"schedule": [start, end], "tenant": entry.tenant, "rate": entry.decision.priced_rate}
        self.kernel.post(BROKER, CONDUCTOR, Kind.ADMITTED_REQUEST,
                         {"nsi": nsi, "tenant": entry.tenant, "requirements": entry.requirements, "policy": policy},
                         delay=max(start - self.kernel.now, self.kernel.default_delay(BROKER, CONDUCTOR)))
        if end is not None:
            self.kernel.post(BROKER, BROKER, Kind.TIMER, {"nsi": nsi, "action": "decommission"},
                             delay=end - self.kernel.now)

    # -- billing -------------------------------------------------------------------

    def accrue_charges(self, nsi: str, tick: int) -> BillingEntry | None:
        """Close the open billable interval at `tick`; it reopens if the NSI stays billable."""
        entry = self.nsis.get(nsi)
        if entry is None:
            raise UnknownNsi(nsi)
        start = self.open.pop(nsi, None)
        if start is None:
            return None
        billed = self.ledger.append(nsi, start, tick, entry.decision.priced_rate)
        if entry.status == "operational":
            self.open[nsi] = tick
        return billed

    def close_all(self, tick: int) -> None:
        for nsi in sorted(self.open):
            self.accrue_charges(nsi, tick)
        for nsi in sorted(self._degraded_since):
            self.degraded_ticks[nsi] = self.degraded_ticks.get(nsi, 0) + tick - self._degraded_since[nsi]
        self._degraded_since.clear()

    def _status(self, nsi: str, status: str) -> None:
        entry = self.nsis.get(nsi)
        if entry is None:
            return
        now = self.kernel.now
        if status == "operational":
            entry.status = "operational"
            self.open.setdefault(nsi, now)
        elif status == "degraded":
            entry.status = "degraded"
            self.accrue_charges(nsi, now)
            self._degraded_since.setdefault(nsi, now)
        elif status == "restored":
            entry.status = "operational"
            self.open.setdefault(nsi, now)
            self._close_degraded(nsi, now)
        elif status == "decommissioned":
            entry.status = "decommissioned"
            self.accrue_charges(nsi, now)
            self._close_degraded(nsi, now)

    def _close_degraded(self, nsi: str, now: int) -> None:
        since = self._degraded_since.pop(nsi, None)
        if since is not None:
            self.degraded_ticks[nsi] = self.degraded_ticks.get(nsi, 0) + now - since

    # -- messages ------------------------------------------------------------------

    def handle(self, msg: Message) -> None:
        p = msg.payload
        nsi = p["nsi"]
        if msg.kind is Kind.SLICE_REQUEST:
            self._on_request(msg)
        elif msg.kind is Kind.COUNTER_ACCEPT:
            entry = self.nsis.get(nsi)
            if entry is not None and entry.status == "countered" and entry.decision.counter is not None:
                entry.requirements = entry.decision.counter
                entry.status = "admitted"
                self._schedule(entry)
        elif msg.kind is Kind.LATE_REJECT:
            if nsi in self.nsis:
                self.nsis[nsi].status = "rejected"
        elif msg.kind is Kind.BROKER_UPDATE:
            self._status(nsi, p["status"])
        elif msg.kind is Kind.TIMER:
            self._decommission(nsi)
        elif msg.kind is Kind.DECOMMISSION_CMD:
            self._decommission(nsi)
        else:
            raise BrokerError(f"broker cannot handle {msg.kind.value}")

    def _on_request(self, msg: Message) -> None:
        p = msg.payload
        nsi, tenant = p["nsi"], p["tenant"]
        reply = f"tenant:{tenant}"
        if nsi in self.nsis:
            self.kernel.post(BROKER, reply, Kind.ADMIT_ACK,
                             {"nsi": nsi, "verdict": Verdict.REJECT, "reason": "duplicate-nsi", "rate": "0"})
            return
        if self.repository_source is not None:
            self.refresh_repository(self.repository_source())
        try:
            decision = self.submit_request(tenant, p["requirements"])
        except BrokerError as exc:
            self.kernel.post(BROKER, reply, Kind.ADMIT_ACK,
                             {"nsi": nsi, "verdict": Verdict.REJECT, "reason": exc.code, "rate": "0"})
            return
        req = ServiceRequirements.from_dict(p["requirements"])
        sched = p["schedule"]
        entry = BrokerNsi(nsi, tenant, req, decision, schedule=(sched["start"], sched.get("end")),
                          accept_counter=bool(p.get("accept_counter", False)))
        self.nsis[nsi] = entry
        ack: dict[str, Any] = {"nsi": nsi, "verdict": decision.verdict, "reason": decision.reason,
                               "rate": decision.priced_rate}
        if decision.counter is not None:
            ack["counter"] = decision.counter
        self.kernel.post(BROKER, reply, Kind.ADMIT_ACK, ack)
        if decision.verdict is Verdict.ADMIT:
            entry.status = "admitted"
            self._schedule(entry)
        elif decision.verdict is Verdict.COUNTER_OFFER:
            entry.status = "countered"
        else:
            entry.status = "rejected"

    def _schedule(self, entry: BrokerNsi) -> None:
        start, end = entry.schedule
        start = max(start, self.kernel.now)
        if end is not None:
            end = max(end, start)
        try:
            self.schedule_slice(entry.nsi, start, end)
        except BrokerError as exc:
            log.warning("cannot schedule %s: %s", entry.nsi, exc)
            entry.status = "rejected"

    def _decommission(self, nsi: str) -> None:
        entry = self.nsis.get(nsi)
        if entry is None or entry.status in TERMINAL:
            return
        if entry.status == "countered":
            entry.status = "abandoned"
            return
        self.kernel.post(BROKER, CONDUCTOR, Kind.DECOMMISSION_CMD, {"nsi": nsi})
