"""Wires every participant of one simulated federation onto a kernel."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

from .broker import ServiceBroker
from .conductor import CONDUCTOR, ServiceConductor
from .coordinator import CrossDomainCoordinator
from .kernel import Kernel, Kind, Message
from .model import Isolation, ServiceRequirements
from .oracle import NsiView, World
from .orchestrator import DomainOrchestrator
from .repository import Repository
from .scenario import Scenario
from .substrate import Substrate, SubstrateError

log = logging.getLogger(__name__)

SUBSTRATE = "substrate"
FAULTS = "faults"
ENV = "env"


@dataclass
class Snapshot:
    """Federation state captured just before a message was handled."""

    kind: str
    tick: int
    msg: int
    nsi: str | None
    substrate: Substrate
    payload: dict[str, Any]
    view: NsiView | None = None
    extra: dict[str, Any] = field(default_factory=dict)


class Federation:
    def __init__(
        self,
        scenario: Scenario,
        seed: int | None = None,
        exact: bool | None = None,
        greedy: bool | None = None,
        snapshots: bool = False,
    ) -> None:
        knobs = scenario.knobs
        self.scenario = scenario
        self.seed = knobs.seed if seed is None else seed
        self.kernel = Kernel(self.seed, knobs.latencies)
        self.substrate = scenario.build_substrate()
        self.substrate.listeners.append(lambda op: self.kernel.record_ledger(op.op, op.reservation))
        self.catalogs = scenario.catalogs()
        self.trust = frozenset(frozenset(p) for p in scenario.trust)
        self.faults: set[tuple[str, str]] = set()
        self.exact = knobs.exact_embedding if exact is None else exact
        self.orchestrators = {
            d: DomainOrchestrator(self.kernel, self.substrate, d, self.catalogs[d], self.exact, self.faults)
            for d in sorted(self.catalogs)
        }
        self.broker = ServiceBroker(self.kernel, scenario.broker_policy(), lambda: self.repository(None))
        self.conductor = ServiceConductor(
            self.kernel,
            self.repository,
            self._spawn,
            knobs.greedy_decomposition if greedy is None else greedy,
        )
        self.coordinators: dict[str, CrossDomainCoordinator] = {}
        self.accept_counter: dict[str, bool] = {}
        self.request_count = 0
        self.requested_at: dict[str, int] = {}
        self.inbox: list[Message] = []
        self.snapshots: list[Snapshot] = []
        self.capture = snapshots
        self.kernel.register(SUBSTRATE, self._on_substrate)
        self.kernel.register(FAULTS, self._on_faults)
        self.kernel.register(ENV, self._on_external)
        self.kernel.register_stratum("tenant", self._on_external)
        self.kernel.register_stratum("coord", self._on_orphan)
        self.kernel.interceptors.append(self._intercept)

    # -- shared views ------------------------------------------------------------

    def repository(self, exclude_nsi: str | None = None) -> Repository:
        sub = self.substrate
        if exclude_nsi is not None:
            sub = sub.clone()
            sub.release_all([r.id for r in sub.owned_by(exclude_nsi)])
        return Repository.build(
            [sub.capability_snapshot(d) for d in sorted(sub.domains)], sub.wan_snapshot(), self.trust
        )

    def world(self, substrate: Substrate | None = None) -> World:
        return World(substrate if substrate is not None else self.substrate.clone(), self.catalogs, self.trust)

    def _spawn(self, conductor: ServiceConductor, nsi: str, tenant: str) -> CrossDomainCoordinator:
        coord = CrossDomainCoordinator(self.kernel, self.substrate, nsi, tenant, self.trust)
        self.coordinators[nsi] = coord
        return coord

    def nsi_view(self, nsi: str) -> NsiView | None:
        """The live realization of an NSI, or None while it has none."""
        coord = self.coordinators.get(nsi)
        if coord is None or coord.plan is None or coord.sla is None or coord.phase != "operational":
            return None
        graphs, placements, paths = {}, {}, {}
        for d in coord.plan.path:
            ctx = self.orchestrators[d].nssis.get(coord.nssi[d])
            if ctx is None or ctx.graph is None or ctx.embedding is None:
                return None
            graphs[d] = ctx.graph
            placements[d] = dict(ctx.embedding.placements)
            paths[d] = {k: tuple(v) for k, v in ctx.embedding.paths.items()}
        return NsiView(
            nsi=nsi,
            sla=coord.sla,
            path=tuple(coord.plan.path),
            links=tuple(coord.ics[s.pair].link for s in coord.plan.stitching),
            nssi=dict(coord.nssi),
            budgets=dict(coord.budgets),
            graphs=graphs,
            placements=placements,
            paths=paths,
            exclusive=coord.sla.isolation is Isolation.DEDICATED,
            coverage=frozenset(coord.sla.coverage),
        )

    # -- participants ---------------------------------------------------------------

    def _on_substrate(self, msg: Message) -> None:
        if msg.kind is not Kind.DEGRADE:
            raise SubstrateError(f"substrate cannot handle {msg.kind.value}")
        target = msg.payload["target"]
        try:
            applied = self.substrate.degrade(target, msg.payload["values"])
        except SubstrateError as exc:
            log.warning("degrade %s ignored: %s", target, exc)
            return
        for nsi in sorted(self.substrate.nsis_on(target)):
            self.kernel.post(SUBSTRATE, f"coord:{nsi}", Kind.DEGRADATION_EVENT,
                             {"nsi": nsi, "target": target, "values": applied})

    def _on_faults(self, msg: Message) -> None:
        p = msg.payload
        self.faults.add((p["fault"], p["target"]))

    def _on_external(self, msg: Message) -> None:
        self.inbox.append(msg)
        p = msg.payload
        if msg.kind is Kind.ADMIT_ACK and p["verdict"] == "counter_offer" and self.accept_counter.get(p["nsi"]):
            self.kernel.post(msg.receiver, "broker", Kind.COUNTER_ACCEPT, {"nsi": p["nsi"]})

    def _on_orphan(self, msg: Message) -> None:
        if msg.kind is Kind.MODIFY_REQUEST:
            self.kernel.post(msg.receiver, msg.sender, Kind.MODIFY_ACK,
                             {"nsi": msg.payload["nsi"], "outcome": "rejected", "level": None})

    # -- snapshots --------------------------------------------------------------------

    def _intercept(self, msg: Message) -> None:
        p = msg.payload
        if msg.kind is Kind.SLICE_REQUEST:
            self.accept_counter[p["nsi"]] = bool(p.get("accept_counter", False))
            self.request_count += 1
            self.requested_at.setdefault(p["nsi"], self.kernel.now)
        if not self.capture:
            return
        if msg.kind is Kind.ADMITTED_REQUEST and msg.receiver == CONDUCTOR:
            self._snap(msg)
        elif msg.kind is Kind.NSI_OPERATIONAL:
            snap = self._snap(msg)
            for r in [r for r in snap.substrate.reservations.values() if r.nsi == p["nsi"]]:
                snap.substrate.release(r.id)
            coord = self.coordinators[p["nsi"]]
            snap.extra["sla"] = coord.sla
        elif msg.kind in (Kind.MODIFY_REQUEST, Kind.DEGRADATION_EVENT) and msg.receiver.startswith("coord:"):
            self._snap(msg, view=self.nsi_view(p["nsi"]))
        elif msg.sender == ENV or msg.sender.startswith("tenant:"):
            self._snap(msg)

    def _snap(self, msg: Message, view: NsiView | None = None) -> Snapshot:
        snap = Snapshot(msg.kind.value, self.kernel.now, msg.seq, msg.payload.get("nsi"),
                        self.substrate.clone(), dict(msg.payload), view)
        self.snapshots.append(snap)
        return snap

    def requirements_of(self, snap: Snapshot) -> ServiceRequirements:
        if "sla" in snap.extra:
            return snap.extra["sla"]
        req = snap.payload["requirements"]
        return req if isinstance(req, ServiceRequirements) else ServiceRequirements.from_dict(req)
