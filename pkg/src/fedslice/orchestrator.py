"""Per-domain slice orchestration: SMF, slice LCM, sub-domain MANO and SDN control."""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any

from .embedding import (
    FRESH,
    VIA_VIM,
    VIA_VNFM,
    Budget,
    DomainEmbedder,
    Embedding,
    EmbeddingInfeasible,
    Freedom,
    SliceTemplate,
    SubRequest,
    embed,
    routes_metrics,
    terminal_routes,
)
from .kernel import Kernel, Kind, Message
from .model import Event, Isolation, NssiRecord, SliceResourceGraph, State, VnfSpec, q
from .substrate import COMPUTE_COMPONENTS, Substrate

log = logging.getLogger(__name__)


class OrchestratorError(Exception):
    code = "orchestrator-error"


class UnsupportedServiceType(OrchestratorError):
    code = "unsupported-service-type"


class NoMatchingTemplate(OrchestratorError):
    code = "no-matching-template"


class UnknownNssi(OrchestratorError):
    code = "unknown-nssi"


@dataclass(frozen=True)
class Catalog:
    """service_type → technology → VNF types, plus the slice templates."""

    service_types: Mapping[str, Mapping[str, tuple[str, ...]]]
    templates: tuple[SliceTemplate, ...]


@dataclass
class RequirementSet:
    service_type: str
    per_technology: dict[str, tuple[str, ...]]

    @property
    def vnf_types(self) -> frozenset[str]:
        return frozenset(t for types in self.per_technology.values() for t in types)

    def to_dict(self) -> dict[str, Any]:
        return {"service_type": self.service_type, "per_technology": {k: list(v) for k, v in sorted(self.per_technology.items())}}


@dataclass(frozen=True)
class Outcome:
    resolved: bool
    level: int | None
    budget_index: int | None = None


@dataclass
class NssiContext:
    record: NssiRecord
    coordinator: str
    subrequest: SubRequest
    requirement: RequirementSet | None = None
    template: SliceTemplate | None = None
    graph: SliceResourceGraph | None = None
    embedding: Embedding | None = None
    reservations: dict[str, str] = field(default_factory=dict)
    pending_acks: int = 0
    ack_ok: bool = True
    purpose: str = "instantiate"
    pending_outcome: Outcome | None = None


def _exclusive(sub: SubRequest) -> bool:
    return sub.isolation is Isolation.DEDICATED


class DomainOrchestrator:
    """One administrative domain's orchestration stack, wired as kernel participants."""

    def __init__(
        self,
        kernel: Kernel,
        substrate: Substrate,
        domain_id: str,
        catalog: Catalog,
        exact: bool = False,
        faults: set[tuple[str, str]] | None = None,
    ) -> None:
        self.kernel = kernel
        self.substrate = substrate
        self.domain_id = domain_id
        self.catalog = catalog
        self.exact = exact
        self.faults = faults if faults is not None else set()
        self.nssis: dict[str, NssiContext] = {}
        self.aborted: set[str] = set()
        self.chains: dict[str, list[dict[str, Any]]] = {}
        d = domain_id
        self.smf_id, self.lcm_id = f"smf:{d}", f"lcm:{d}"
        self.nfvo_id, self.vnfm_id, self.vim_id, self.sdn_id = f"nfvo:{d}", f"vnfm:{d}", f"vim:{d}", f"sdn:{d}"
        kernel.register(self.smf_id, self._on_smf)
        kernel.register(self.lcm_id, self._on_lcm)
        kernel.register(self.nfvo_id, self._on_nfvo)
        kernel.register(self.vnfm_id, self._on_vnfm)
        kernel.register(self.vim_id, self._on_vim)
        kernel.register(self.sdn_id, self._on_sdn)
        self._nfvo_pending: dict[str, list[dict[str, Any]]] = {}

    # ------------------------------------------------------------------
    # Pure operations
    # ------------------------------------------------------------------

    def smf_map(self, sub: SubRequest) -> tuple[RequirementSet, dict[str, Any]]:
        if sub.domain != self.domain_id:
            raise OrchestratorError(f"sub-request for {sub.domain} sent to {self.domain_id}")
        per_tech = self.catalog.service_types.get(sub.service_type)
        if per_tech is None:
            raise UnsupportedServiceType(sub.service_type)
        req = RequirementSet(sub.service_type, {t: tuple(v) for t, v in sorted(per_tech.items())})
        return req, self.capability_feedback()

    def capability_feedback(self) -> dict[str, Any]:
        snap = self.substrate.capability_snapshot(self.domain_id)
        return {"free": snap["free"], "latency_range_ms": snap["latency_range_ms"], "vnf_types": snap["vnf_types"]}

    def lcm_select_template(self, req: RequirementSet) -> SliceTemplate:
        matches = [
            t for t in self.catalog.templates
            if t.service_type == req.service_type and req.vnf_types <= t.vnf_types
        ]
        if not matches:
            raise NoMatchingTemplate(req.service_type)
        return min(matches, key=lambda t: t.template_id)

    def lcm_embed(
        self,
        graph: SliceResourceGraph,
        budget: Budget,
        nsi: str,
        owner: str,
        exclusive: bool = False,
        freedom: Freedom | None = None,
    ) -> tuple[Embedding, dict[str, str]]:
        """Embed and reserve atomically; ledgers are untouched on failure."""
        emb = embed(self.substrate, self.domain_id, graph, budget, nsi, owner, exclusive, freedom, self.exact)
        made = DomainEmbedder(self.substrate, self.domain_id).reserve(graph, emb, nsi, owner, exclusive)
        return emb, made

    def mano_plan(self, graph: SliceResourceGraph, emb: Embedding, only: set[str] | None = None) -> list[dict[str, Any]]:
        """Per-placement NFVO routing: VIM for scaling a live VNF, VNFM for a new one."""
        out = []
        for vnf in graph.vnfs:
            if only is not None and vnf.id not in only:
                continue
            managers = [m for m, c in (("compute", "vcpu"), ("compute", "memory_gb"), ("storage", "storage_gb")) if vnf.demand[c] > 0]
            out.append(
                {
                    "vnf": vnf.id,
                    "slate": emb.placements[vnf.id],
                    "path": emb.tags.get(vnf.id, VIA_VNFM),
                    "managers": sorted(set(managers)),
                }
            )
        return out

    def sdn_chain(self, graph: SliceResourceGraph, emb: Embedding) -> list[dict[str, Any]]:
        chain = []
        for link in graph.links:
            hops = list(emb.paths[link.id])
            nodes = set()
            for h in hops:
                l = self.substrate.links[h]
                nodes.update((l.a, l.b))
            pnf = sorted(n for n in nodes if self.domain_node_kind(n) == "pnf")
            chain.append({"link": link.id, "src": link.src, "dst": link.dst, "hops": hops, "pnf": pnf})
        return chain

    def domain_node_kind(self, node: str) -> str | None:
        n = self.substrate.domains[self.domain_id].nodes.get(node)
        return n.kind if n else None

    def _release(self, ctx: NssiContext) -> None:
        self.substrate.release_all(ctx.reservations.values())
        ctx.reservations = {}

    def local_modify(
        self,
        nssi_id: str,
        modification: Mapping[str, Any],
        budgets: Sequence[Budget] | None = None,
        reshare: bool = False,
    ) -> Outcome:
        """Try slate-local (0), same-sub-domain re-embedding (1), cross-sub-domain remap (2).

        `budgets` replaces the NSSI's current budget; several candidates are
        tried in order. With `reshare` a success counts as level 3 since the
        budget came from a federation-wide re-split.
        """
        ctx = self.nssis.get(nssi_id)
        if ctx is None or ctx.record.state is State.DECOMMISSIONED or ctx.graph is None or ctx.embedding is None:
            raise UnknownNssi(nssi_id)
        graph, affected = self._modified_graph(ctx, modification)
        current = dict(ctx.embedding.placements)
        candidates: list[tuple[Budget, int | None]]
        if budgets is None:
            candidates = [(ctx.subrequest.budget, None)]
        else:
            candidates = [(b, i) for i, b in enumerate(budgets)]
        for budget, index in candidates:
            for level in (0, 1, 2):
                freedom = Freedom(str(level), current, frozenset(affected))
                try:
                    emb = embed(self.substrate, self.domain_id, graph, budget, ctx.record.parent_nsi,
                                nssi_id, _exclusive(ctx.subrequest), freedom, self.exact)
                except EmbeddingInfeasible:
                    continue
                self._commit(ctx, graph, emb, budget)
                return Outcome(True, 3 if reshare else level, index if reshare else None)
        return Outcome(False, None)

    def _modified_graph(self, ctx: NssiContext, modification: Mapping[str, Any]) -> tuple[SliceResourceGraph, set[str]]:
        assert ctx.graph is not None and ctx.embedding is not None
        kind = modification.get("type")
        if kind == "scale":
            vnf = ctx.graph.vnf(modification["vnf"])
            delta = {c: q(modification.get("delta", {}).get(c, 0)) for c in COMPUTE_COMPONENTS}
            new = replace(
                vnf,
                vcpu=max(Fraction(0), vnf.vcpu + delta["vcpu"]),
                memory_gb=max(Fraction(0), vnf.memory_gb + delta["memory_gb"]),
                storage_gb=max(Fraction(0), vnf.storage_gb + delta["storage_gb"]),
            )
            return ctx.graph.with_vnf(new), {vnf.id}
        if kind == "capacity" and modification.get("target") in self.substrate.slates:
            on = {v for v, s in ctx.embedding.placements.items() if s == modification["target"]}
            return ctx.graph, on
        return ctx.graph, {v.id for v in ctx.graph.vnfs}

    def _commit(self, ctx: NssiContext, graph: SliceResourceGraph, emb: Embedding, budget: Budget) -> None:
        self._release(ctx)
        ctx.reservations = DomainEmbedder(self.substrate, self.domain_id).reserve(
            graph, emb, ctx.record.parent_nsi, ctx.record.nssi_id, _exclusive(ctx.subrequest)
        )
        ctx.graph, ctx.embedding = graph, emb
        ctx.subrequest = replace(ctx.subrequest, budget=budget)
        ctx.record.embedding = {v: (s, self.substrate.slates[s].node or "") for v, s in emb.placements.items()}
        ctx.record.paths = {k: list(v) for k, v in emb.paths.items()}
        ctx.record.allocated = self._allocated(ctx)

    def _allocated(self, ctx: NssiContext) -> dict[str, dict[str, Fraction]]:
        out: dict[str, dict[str, Fraction]] = {}
        for rid in ctx.reservations.values():
            r = self.substrate.reservations[rid]
            acc = out.setdefault(r.target, {})
            for c, a in r.amounts:
                acc[c] = acc.get(c, Fraction(0)) + a
        return out

    def report(self, ctx: NssiContext) -> dict[str, Any]:
        assert ctx.graph is not None and ctx.embedding is not None
        routes = terminal_routes(ctx.graph, ctx.embedding.paths)
        metrics = routes_metrics(routes, DomainEmbedder(self.substrate, self.domain_id).link_attr)
        return {
            "budget": ctx.subrequest.budget.to_dict(),
            "metrics": metrics.to_dict(),
            "routes": routes,
            "slates": sorted(set(ctx.embedding.placements.values())),
            "links": sorted({h for hops in ctx.embedding.paths.values() for h in hops}),
            "embedding": ctx.embedding.to_dict(),
            "vnfs": {v.id: {c: str(a) for c, a in v.demand.items()} for v in ctx.graph.vnfs},
            "feedback": self.capability_feedback(),
        }

    # ------------------------------------------------------------------
    # Message handlers
    # ------------------------------------------------------------------

    def _payload(self, ctx: NssiContext, **extra: Any) -> dict[str, Any]:
        return {"nsi": ctx.record.parent_nsi, "nssi": ctx.record.nssi_id, "domain": self.domain_id, **extra}

    def _transition(self, ctx: NssiContext, event: Event) -> None:
        before = ctx.record.state
        ctx.record.apply(event)
        self.kernel.record_transition(ctx.record.nssi_id, before, ctx.record.state)

    def _fail(self, ctx: NssiContext, cause: str, detail: str, sender: str) -> None:
        self._release(ctx)
        if ctx.record.state is not State.DECOMMISSIONED:
            self._transition(ctx, Event.DECOMMISSION)
        self.kernel.post(sender, ctx.coordinator, Kind.NSSI_FAILED, self._payload(ctx, cause=cause, detail=detail))

    def _on_smf(self, msg: Message) -> None:
        p = msg.payload
        nssi_id = p["nssi"]
        if msg.kind is not Kind.SUB_REQUEST:
            raise OrchestratorError(f"smf cannot handle {msg.kind.value}")
        sub = SubRequest.from_dict(p["subrequest"])
        record = NssiRecord(nssi_id=nssi_id, parent_nsi=p["nsi"], domain_id=self.domain_id)
        ctx = NssiContext(record=record, coordinator=msg.sender, subrequest=sub)
        self.nssis[nssi_id] = ctx
        if nssi_id in self.aborted:
            return
        self._transition(ctx, Event.ADMIT)
        try:
            req, feedback = self.smf_map(sub)
        except UnsupportedServiceType as exc:
            self._fail(ctx, "policy", f"unsupported-service-type {exc}", self.smf_id)
            return
        ctx.requirement = req
        self.kernel.post(self.smf_id, self.lcm_id, Kind.MAP_ACK, self._payload(ctx, mapping={**req.to_dict(), "feedback": feedback}))

    def _on_lcm(self, msg: Message) -> None:
        p = msg.payload
        handler = {
            Kind.MAP_ACK: self._lcm_map_ack,
            Kind.TEMPLATE_SELECTED: self._lcm_template,
            Kind.SLATE_ACK: self._lcm_slate_ack,
            Kind.CHAIN_INSTALLED: self._lcm_chain,
            Kind.NSSI_TEARDOWN: self._lcm_teardown,
            Kind.MODIFY_REQUEST: self._lcm_modify,
        }.get(msg.kind)
        if handler is None:
            raise OrchestratorError(f"lcm cannot handle {msg.kind.value}")
        if msg.kind is not Kind.NSSI_TEARDOWN:
            ctx = self.nssis.get(p["nssi"])
            if ctx is None or p["nssi"] in self.aborted or ctx.record.state is State.DECOMMISSIONED:
                return
        handler(msg)

    def _lcm_map_ack(self, msg: Message) -> None:
        ctx = self.nssis[msg.payload["nssi"]]
        assert ctx.requirement is not None
        try:
            tpl = self.lcm_select_template(ctx.requirement)
        except NoMatchingTemplate as exc:
            self._fail(ctx, "policy", f"no-matching-template {exc}", self.lcm_id)
            return
        ctx.template = tpl
        self.kernel.post(self.lcm_id, self.lcm_id, Kind.TEMPLATE_SELECTED, self._payload(ctx, template=tpl.template_id))

    def _lcm_template(self, msg: Message) -> None:
        ctx = self.nssis[msg.payload["nssi"]]
        assert ctx.template is not None
        graph = ctx.template.instantiate(ctx.subrequest)
        self._transition(ctx, Event.DECOMPOSE)
        try:
            emb, made = self.lcm_embed(graph, ctx.subrequest.budget, ctx.record.parent_nsi,
                                       ctx.record.nssi_id, _exclusive(ctx.subrequest))
        except EmbeddingInfeasible as exc:
            self._fail(ctx, exc.cause, str(exc), self.lcm_id)
            return
        ctx.graph, ctx.embedding, ctx.reservations = graph, emb, made
        ctx.record.embedding = {v: (s, self.substrate.slates[s].node or "") for v, s in emb.placements.items()}
        ctx.record.paths = {k: list(v) for k, v in emb.paths.items()}
        ctx.record.allocated = self._allocated(ctx)
        self._transition(ctx, Event.INSTANTIATE)
        ctx.purpose = "instantiate"
        self.kernel.post(self.lcm_id, self.nfvo_id, Kind.SLATE_CONFIG,
                         self._payload(ctx, placements=self.mano_plan(graph, emb), path="nfvo", purpose=ctx.purpose))

    def _lcm_slate_ack(self, msg: Message) -> None:
        ctx = self.nssis[msg.payload["nssi"]]
        assert ctx.graph is not None and ctx.embedding is not None
        if not msg.payload["ok"]:
            self._fail(ctx, "capacity", "slate-ack-timeout", self.lcm_id)
            return
        self.kernel.post(self.lcm_id, self.sdn_id, Kind.CHAIN_REQUEST,
                         self._payload(ctx, paths=ctx.embedding.to_dict()["paths"], purpose=ctx.purpose))

    def _lcm_chain(self, msg: Message) -> None:
        ctx = self.nssis[msg.payload["nssi"]]
        if not msg.payload["ok"]:
            self._fail(ctx, "capacity", "path-install-failed", self.lcm_id)
            return
        self.chains[ctx.record.nssi_id] = msg.payload["chain"]
        if ctx.purpose == "instantiate":
            self._transition(ctx, Event.OPERATE)
            self.kernel.post(self.lcm_id, ctx.coordinator, Kind.NSSI_OPERATIONAL, self._payload(ctx, report=self.report(ctx)))
        else:
            outcome = ctx.pending_outcome
            assert outcome is not None
            self._transition(ctx, Event.MODIFIED)
            extra: dict[str, Any] = {}
            if outcome.budget_index is not None:
                extra["budget_index"] = outcome.budget_index
            self.kernel.post(self.lcm_id, ctx.coordinator, Kind.SCALE_RESULT,
                             self._payload(ctx, outcome="resolved", level=outcome.level, report=self.report(ctx), **extra))

    def _lcm_teardown(self, msg: Message) -> None:
        nssi_id = msg.payload["nssi"]
        ctx = self.nssis.get(nssi_id)
        self.aborted.add(nssi_id)
        if ctx is not None:
            self._release(ctx)
            if ctx.record.state is not State.DECOMMISSIONED:
                self._transition(ctx, Event.DECOMMISSION)
        self.kernel.post(self.lcm_id, msg.sender, Kind.NSSI_RELEASED,
                         {"nsi": msg.payload["nsi"], "nssi": nssi_id, "domain": self.domain_id})

    def _lcm_modify(self, msg: Message) -> None:
        p = msg.payload
        ctx = self.nssis[p["nssi"]]
        budgets = [Budget.from_dict(b) for b in p["budgets"]] if "budgets" in p else None
        if ctx.record.state is not State.OPERATIONAL:
            self.kernel.post(self.lcm_id, ctx.coordinator, Kind.SCALE_RESULT, self._payload(ctx, outcome="cannot-resolve", level=None))
            return
        self._transition(ctx, Event.MODIFY)
        before = dict(ctx.embedding.placements) if ctx.embedding else {}
        outcome = self.local_modify(ctx.record.nssi_id, p["modification"], budgets, p.get("level") == 3)
        if not outcome.resolved:
            self._transition(ctx, Event.MODIFIED)
            self.kernel.post(self.lcm_id, ctx.coordinator, Kind.SCALE_RESULT,
                             self._payload(ctx, outcome="cannot-resolve", level=None, report=self.report(ctx)))
            return
        assert ctx.graph is not None and ctx.embedding is not None
        changed = {v for v, sid in ctx.embedding.placements.items() if before.get(v) != sid}
        if p["modification"].get("type") == "scale":
            changed.add(p["modification"]["vnf"])
        ctx.purpose = "modify"
        ctx.pending_outcome = outcome
        self.kernel.post(self.lcm_id, self.nfvo_id, Kind.SLATE_CONFIG,
                         self._payload(ctx, placements=self.mano_plan(ctx.graph, ctx.embedding, changed), path="nfvo", purpose="modify"))

    def _on_nfvo(self, msg: Message) -> None:
        p = msg.payload
        nssi = p["nssi"]
        if msg.kind is Kind.SLATE_CONFIG:
            placements = p["placements"]
            self._nfvo_pending[nssi] = []
            if not placements:
                self.kernel.post(self.nfvo_id, self.lcm_id, Kind.SLATE_ACK,
                                 {**self._ids(p), "ok": True, "slates": [], "purpose": p.get("purpose", "instantiate")})
                return
            self._nfvo_expect = getattr(self, "_nfvo_expect", {})
            self._nfvo_expect[nssi] = len(placements)
            for pl in placements:
                target = self.vim_id if pl["path"] == VIA_VIM else self.vnfm_id
                self.kernel.post(self.nfvo_id, target, Kind.SLATE_CONFIG,
                                 {**self._ids(p), "placements": [pl], "path": pl["path"], "purpose": p.get("purpose", "instantiate")})
        elif msg.kind is Kind.SLATE_ACK:
            acks = self._nfvo_pending.setdefault(nssi, [])
            acks.extend({"ok": p["ok"], **s} for s in p["slates"])
            if len(acks) >= self._nfvo_expect.get(nssi, 0):
                ok = all(a["ok"] for a in acks)
                self.kernel.post(self.nfvo_id, self.lcm_id, Kind.SLATE_ACK,
                                 {**self._ids(p), "ok": ok, "slates": [{k: v for k, v in a.items() if k != "ok"} for a in acks],
                                  "purpose": p.get("purpose", "instantiate")})
        else:
            raise OrchestratorError(f"nfvo cannot handle {msg.kind.value}")

    @staticmethod
    def _ids(p: Mapping[str, Any]) -> dict[str, Any]:
        return {"nsi": p["nsi"], "nssi": p["nssi"], "domain": p["domain"]}

    def _slate_ack(self, sender: str, msg: Message, managers_key: str) -> None:
        p = msg.payload
        acks = []
        ok = True
        for pl in p["placements"]:
            failed = ("slate_ack_failure", pl["slate"]) in self.faults and p.get("purpose", "instantiate") == "instantiate"
            ok = ok and not failed
            acks.append({"slate": pl["slate"], "vnf": pl["vnf"], "path": pl["path"], managers_key: pl["managers"]})
            if not failed:
                vnf_entity = f"{p['nssi']}#{pl['vnf']}"
                if sender == self.vnfm_id:
                    self.kernel.record_transition(vnf_entity, "Instantiating", "Running")
                else:
                    self.kernel.record_transition(vnf_entity, "Running", "Scaled")
        self.kernel.post(sender, self.nfvo_id, Kind.SLATE_ACK,
                         {**self._ids(p), "ok": ok, "slates": acks, "purpose": p.get("purpose", "instantiate")})

    def _on_vnfm(self, msg: Message) -> None:
        self._slate_ack(self.vnfm_id, msg, "managers")

    def _on_vim(self, msg: Message) -> None:
        self._slate_ack(self.vim_id, msg, "managers")

    def _on_sdn(self, msg: Message) -> None:
        p = msg.payload
        ctx = self.nssis.get(p["nssi"])
        if ctx is None or ctx.graph is None or ctx.embedding is None:
            return
        failed = ("path_install_failure", self.domain_id) in self.faults and p.get("purpose", "instantiate") == "instantiate"
        chain = [] if failed else self.sdn_chain(ctx.graph, ctx.embedding)
        self.kernel.post(self.sdn_id, self.lcm_id, Kind.CHAIN_INSTALLED,
                         {**self._ids(p), "ok": not failed, "chain": chain, "purpose": p.get("purpose", "instantiate")})
