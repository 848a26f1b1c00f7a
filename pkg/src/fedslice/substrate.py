"""Federated infrastructure as a capacity model: slates, links and their ledgers."""

from __future__ import annotations

import copy
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any

from .model import q

COMPUTE_COMPONENTS = ("vcpu", "memory_gb", "storage_gb")
LINK_COMPONENTS = ("bandwidth_mbps",)
TECHNOLOGIES = ("ran", "transport", "core", "cloud")


class SubstrateError(Exception):
    code = "substrate-error"


class UnknownId(SubstrateError):
    code = "unknown-id"


class UnknownReservation(SubstrateError):
    code = "unknown-reservation"


class DoubleRelease(SubstrateError):
    code = "double-release"


class IsolationViolation(SubstrateError):
    code = "isolation"


class InsufficientCapacity(SubstrateError):
    code = "insufficient-capacity"

    def __init__(self, target: str, component: str, wanted: Fraction, free: Fraction) -> None:
        super().__init__(f"{target}: {component} wanted {wanted}, free {free}")
        self.target = target
        self.component = component


class SlateKind(str, Enum):
    COMPUTE = "compute"
    STORAGE = "storage"
    CONNECTIVITY = "connectivity"


class LinkScope(str, Enum):
    INTRA = "intra_domain"
    WAN = "inter_domain_wan"


@dataclass
class SubDomain:
    id: str
    technology: str


@dataclass
class Node:
    id: str
    domain: str
    subdomain: str
    kind: str = "nfvi"  # nfvi | pnf | border | access


@dataclass
class Slate:
    id: str
    kind: SlateKind
    domain: str
    subdomain: str
    node: str | None
    capacity: dict[str, Fraction]
    dedicated: bool = False
    vendor: dict[str, Any] = field(default_factory=dict)
    links: tuple[str, ...] = ()

    @property
    def components(self) -> tuple[str, ...]:
        return COMPUTE_COMPONENTS


@dataclass
class SubstrateLink:
    id: str
    a: str
    b: str
    capacity: dict[str, Fraction]
    latency_ms: Fraction
    jitter_ms: Fraction = Fraction(0)
    loss: float = 0.0
    error_rate: float = 0.0
    scope: LinkScope = LinkScope.INTRA
    domain: str | None = None
    domains: tuple[str, str] | None = None

    @property
    def components(self) -> tuple[str, ...]:
        return LINK_COMPONENTS

    @property
    def bandwidth_mbps(self) -> Fraction:
        return self.capacity["bandwidth_mbps"]


@dataclass
class Domain:
    id: str
    owner: str
    subdomains: dict[str, SubDomain]
    nodes: dict[str, Node]
    service_types: tuple[str, ...] = ()
    vnf_types: tuple[str, ...] = ()


@dataclass(frozen=True)
class Reservation:
    id: str
    target: str
    owner: str
    nsi: str
    amounts: tuple[tuple[str, Fraction], ...]
    exclusive: bool = False

    def amount(self, component: str) -> Fraction:
        return dict(self.amounts).get(component, Fraction(0))


@dataclass(frozen=True)
class LedgerOp:
    op: str  # allocate | release
    reservation: Reservation


class Substrate:
    """Single source of capacity truth for the whole federation."""

    def __init__(self) -> None:
        self.domains: dict[str, Domain] = {}
        self.slates: dict[str, Slate] = {}
        self.links: dict[str, SubstrateLink] = {}
        self.reservations: dict[str, Reservation] = {}
        self._released: set[str] = set()
        self._counter = 0
        # dedicated slates stay bound to the first NSI that ever used them
        self.bound: dict[str, str] = {}
        self.listeners: list[Callable[[LedgerOp], None]] = []

    # -- construction -----------------------------------------------------

    def add_domain(self, domain: Domain) -> None:
        if domain.id in self.domains:
            raise SubstrateError(f"duplicate domain {domain.id}")
        self.domains[domain.id] = domain

    def add_slate(self, slate: Slate) -> None:
        self.slates[slate.id] = slate

    def add_link(self, link: SubstrateLink) -> None:
        self.links[link.id] = link

    def clone(self) -> "Substrate":
        listeners, self.listeners = self.listeners, []
        try:
            dup = copy.deepcopy(self)
        finally:
            self.listeners = listeners
        return dup

    # -- lookups ----------------------------------------------------------

    def target(self, target_id: str) -> Slate | SubstrateLink:
        if target_id in self.slates:
            return self.slates[target_id]
        if target_id in self.links:
            return self.links[target_id]
        raise UnknownId(f"unknown id {target_id}")

    def reservations_on(self, target_id: str) -> list[Reservation]:
        return [r for r in self.reservations.values() if r.target == target_id]

    def allocated(self, target_id: str) -> dict[str, Fraction]:
        tgt = self.target(target_id)
        totals = {c: Fraction(0) for c in tgt.components}
        for r in self.reservations_on(target_id):
            for c, a in r.amounts:
                totals[c] += a
        return totals

    def free(self, target_id: str) -> dict[str, Fraction]:
        """Remaining capacity; negative when oversubscribed."""
        tgt = self.target(target_id)
        used = self.allocated(target_id)
        return {c: tgt.capacity.get(c, Fraction(0)) - used[c] for c in tgt.components}

    def oversubscription(self, target_id: str) -> dict[str, Fraction]:
        return {c: -v for c, v in self.free(target_id).items() if v < 0}

    def nsis_on(self, target_id: str) -> set[str]:
        return {r.nsi for r in self.reservations_on(target_id)}

    def locked_by(self, target_id: str) -> str | None:
        """The NSI holding a target exclusively, if any."""
        tgt = self.target(target_id)
        holders = self.reservations_on(target_id)
        if isinstance(tgt, Slate) and tgt.dedicated and target_id in self.bound:
            return self.bound[target_id]
        if not holders:
            return None
        if isinstance(tgt, Slate) and tgt.dedicated:
            return self.bound.get(target_id, holders[0].nsi)
        for r in holders:
            if r.exclusive:
                return r.nsi
        return None

    def admits(self, target_id: str, nsi: str, exclusive: bool = False) -> bool:
        """Whether isolation rules let `nsi` allocate on the target."""
        owner = self.locked_by(target_id)
        if owner is not None and owner != nsi:
            return False
        if exclusive and any(n != nsi for n in self.nsis_on(target_id)):
            return False
        return True

    def owned_by(self, nsi: str) -> list[Reservation]:
        return [r for r in self.reservations.values() if r.nsi == nsi]

    def owned_by_owner(self, owner: str) -> list[Reservation]:
        return [r for r in self.reservations.values() if r.owner == owner]

    def domain_links(self, domain_id: str) -> list[SubstrateLink]:
        return [l for l in self.links.values() if l.scope is LinkScope.INTRA and l.domain == domain_id]

    def wan_links(self) -> list[SubstrateLink]:
        return sorted((l for l in self.links.values() if l.scope is LinkScope.WAN), key=lambda l: l.id)

    def domain_slates(self, domain_id: str) -> list[Slate]:
        return sorted((s for s in self.slates.values() if s.domain == domain_id), key=lambda s: s.id)

    # -- ledger -----------------------------------------------------------

    def allocate(
        self,
        target_id: str,
        owner: str,
        amounts: Mapping[str, Any],
        nsi: str | None = None,
        exclusive: bool = False,
    ) -> str:
        tgt = self.target(target_id)
        nsi = nsi if nsi is not None else owner.split("/", 1)[0]
        wanted = {c: q(a) for c, a in amounts.items() if q(a) != 0}
        unknown = set(wanted) - set(tgt.components)
        if unknown:
            raise SubstrateError(f"{target_id}: unknown components {sorted(unknown)}")
        if not wanted or any(a < 0 for a in wanted.values()):
            raise SubstrateError("amounts must be positive in at least one component and never negative")
        if not self.admits(target_id, nsi, exclusive):
            raise IsolationViolation(f"{target_id} is isolated from {nsi}")
        free = self.free(target_id)
        for c in tgt.components:
            if c in wanted and wanted[c] > free[c]:
                raise InsufficientCapacity(target_id, c, wanted[c], free[c])
        self._counter += 1
        rid = f"r{self._counter}"
        res = Reservation(
            id=rid,
            target=target_id,
            owner=owner,
            nsi=nsi,
            amounts=tuple(sorted(wanted.items())),
            exclusive=exclusive,
        )
        self.reservations[rid] = res
        if isinstance(tgt, Slate) and tgt.dedicated:
            self.bound.setdefault(target_id, nsi)
        self._notify(LedgerOp("allocate", res))
        return rid

    def release(self, reservation_id: str) -> Reservation:
        if reservation_id in self._released:
            raise DoubleRelease(f"reservation {reservation_id} already released")
        try:
            res = self.reservations.pop(reservation_id)
        except KeyError:
            raise UnknownReservation(f"unknown reservation {reservation_id}") from None
        self._released.add(reservation_id)
        self._notify(LedgerOp("release", res))
        return res

    def release_all(self, reservation_ids: Iterable[str]) -> None:
        for rid in list(reservation_ids):
            if rid in self.reservations:
                self.release(rid)

    def _notify(self, op: LedgerOp) -> None:
        for listener in self.listeners:
            listener(op)

    # -- degradation ------------------------------------------------------

    def degrade(self, target_id: str, values: Mapping[str, Any]) -> dict[str, Any]:
        """Change QoS attributes or capacity. Oversubscription is allowed and flagged."""
        tgt = self.target(target_id)
        applied: dict[str, Any] = {}
        for key, raw in sorted(values.items()):
            if key in tgt.components:
                tgt.capacity[key] = q(raw)
                applied[key] = tgt.capacity[key]
            elif isinstance(tgt, SubstrateLink) and key in ("latency_ms", "jitter_ms"):
                setattr(tgt, key, q(raw))
                applied[key] = getattr(tgt, key)
            elif isinstance(tgt, SubstrateLink) and key in ("loss", "error_rate"):
                v = float(raw)
                if not 0.0 <= v <= 1.0:
                    raise SubstrateError(f"{key} not a probability")
                setattr(tgt, key, v)
                applied[key] = v
            else:
                raise SubstrateError(f"{target_id}: cannot degrade {key}")
        return applied

    # -- abstraction for the broker ----------------------------------------

    def capability_snapshot(self, domain_id: str) -> dict[str, Any]:
        """Aggregates and ranges only; node ids never appear."""
        if domain_id not in self.domains:
            raise UnknownId(f"unknown domain {domain_id}")
        dom = self.domains[domain_id]
        per_tech: dict[str, dict[str, dict[str, Fraction]]] = {}
        total = {c: Fraction(0) for c in COMPUTE_COMPONENTS}
        free = {c: Fraction(0) for c in COMPUTE_COMPONENTS}
        for slate in self.domain_slates(domain_id):
            if slate.kind is SlateKind.CONNECTIVITY:
                continue
            tech = dom.subdomains[slate.subdomain].technology
            agg = per_tech.setdefault(
                tech,
                {"total": {c: Fraction(0) for c in COMPUTE_COMPONENTS}, "free": {c: Fraction(0) for c in COMPUTE_COMPONENTS}},
            )
            slate_free = self.free(slate.id)
            for c in COMPUTE_COMPONENTS:
                cap = slate.capacity.get(c, Fraction(0))
                agg["total"][c] += cap
                total[c] += cap
                f = max(Fraction(0), slate_free[c])
                agg["free"][c] += f
                free[c] += f
        links = self.domain_links(domain_id)
        lat = [l.latency_ms for l in links]
        loss = [l.loss for l in links]
        bw_free = [max(Fraction(0), self.free(l.id)["bandwidth_mbps"]) for l in links]
        return {
            "domain": domain_id,
            "technologies": {t: per_tech[t] for t in sorted(per_tech)},
            "total": total,
            "free": free,
            "latency_range_ms": [min(lat), max(lat)] if lat else [Fraction(0), Fraction(0)],
            "loss_range": [min(loss), max(loss)] if loss else [0.0, 0.0],
            "max_free_link_bandwidth_mbps": max(bw_free) if bw_free else None,
            "service_types": sorted(dom.service_types),
            "vnf_types": sorted(dom.vnf_types),
        }

    def wan_snapshot(self) -> list[dict[str, Any]]:
        out = []
        for link in self.wan_links():
            assert link.domains is not None
            out.append(
                {
                    "id": link.id,
                    "domains": list(link.domains),
                    "borders": {link.domains[0]: link.a, link.domains[1]: link.b},
                    "free_bandwidth_mbps": self.free(link.id)["bandwidth_mbps"],
                    "latency_ms": link.latency_ms,
                    "jitter_ms": link.jitter_ms,
                    "loss": link.loss,
                    "error_rate": link.error_rate,
                }
            )
        return out
