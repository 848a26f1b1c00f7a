"""Slice-resource-graph embedding inside one administrative domain."""

from __future__ import annotations

import itertools
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any

import networkx as nx

from .model import (
    Isolation,
    LogicalLinkSpec,
    SliceResourceGraph,
    VnfSpec,
    end_to_end_error_rate,
    prob_le,
    q,
    validate_graph,
)
from .substrate import COMPUTE_COMPONENTS, SlateKind, Substrate

FRESH = "fresh"
VIA_VNFM = "via_vnfm_instantiation"
VIA_VIM = "via_vim_scaling"


class EmbeddingInfeasible(Exception):
    code = "embedding-infeasible"

    def __init__(self, cause: str, detail: str = "") -> None:
        super().__init__(f"{cause}: {detail}" if detail else cause)
        self.cause = cause
        self.detail = detail


@dataclass(frozen=True)
class Budget:
    latency_ms: Fraction
    jitter_ms: Fraction
    error_rate: float
    loss: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "latency_ms": str(self.latency_ms),
            "jitter_ms": str(self.jitter_ms),
            "error_rate": self.error_rate,
            "loss": self.loss,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Budget":
        return cls(q(d["latency_ms"]), q(d["jitter_ms"]), float(d["error_rate"]), float(d["loss"]))


@dataclass(frozen=True)
class Metrics:
    latency_ms: Fraction = Fraction(0)
    jitter_ms: Fraction = Fraction(0)
    error_rate: float = 0.0
    loss: float = 0.0

    def within(self, budget: Budget) -> bool:
        return (
            self.latency_ms <= budget.latency_ms
            and self.jitter_ms <= budget.jitter_ms
            and prob_le(self.error_rate, budget.error_rate)
            and prob_le(self.loss, budget.loss)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "latency_ms": str(self.latency_ms),
            "jitter_ms": str(self.jitter_ms),
            "error_rate": self.error_rate,
            "loss": self.loss,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Metrics":
        return cls(q(d["latency_ms"]), q(d["jitter_ms"]), float(d["error_rate"]), float(d["loss"]))


@dataclass(frozen=True)
class SubRequest:
    """The share of a federated request one domain must realize."""

    domain: str
    service_type: str
    bandwidth_mbps: Fraction
    vcpu: Fraction
    memory_gb: Fraction
    storage_gb: Fraction
    budget: Budget
    attachments: tuple[str, ...]
    endpoints: tuple[str, ...] = ()
    isolation: Isolation = Isolation.SHARED

    def to_dict(self) -> dict[str, Any]:
        return {
            "domain": self.domain,
            "service_type": self.service_type,
            "bandwidth_mbps": str(self.bandwidth_mbps),
            "vcpu": str(self.vcpu),
            "memory_gb": str(self.memory_gb),
            "storage_gb": str(self.storage_gb),
            "budget": self.budget.to_dict(),
            "attachments": list(self.attachments),
            "endpoints": list(self.endpoints),
            "isolation": self.isolation.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SubRequest":
        return cls(
            domain=d["domain"],
            service_type=d["service_type"],
            bandwidth_mbps=q(d["bandwidth_mbps"]),
            vcpu=q(d["vcpu"]),
            memory_gb=q(d["memory_gb"]),
            storage_gb=q(d["storage_gb"]),
            budget=Budget.from_dict(d["budget"]),
            attachments=tuple(d["attachments"]),
            endpoints=tuple(d.get("endpoints", ())),
            isolation=Isolation(d.get("isolation", "shared")),
        )


@dataclass(frozen=True)
class TemplateVnf:
    id: str
    type: str
    technology: str | None = None
    alt_technologies: tuple[str, ...] = ()
    compute_share: Fraction = Fraction(1)
    memory_share: Fraction = Fraction(1)
    storage_share: Fraction = Fraction(1)
    pinned_subdomain: str | None = None


@dataclass(frozen=True)
class SliceTemplate:
    template_id: str
    service_type: str
    vnfs: tuple[TemplateVnf, ...]
    bandwidth_factor: Fraction = Fraction(1)

    @property
    def vnf_types(self) -> frozenset[str]:
        return frozenset(v.type for v in self.vnfs)

    @property
    def placement_hints(self) -> dict[str, str | None]:
        return {v.id: v.technology for v in self.vnfs}

    def instantiate(self, sub: SubRequest) -> SliceResourceGraph:
        vnfs = tuple(
            VnfSpec(
                id=tv.id,
                type=tv.type,
                vcpu=sub.vcpu * tv.compute_share,
                memory_gb=sub.memory_gb * tv.memory_share,
                storage_gb=sub.storage_gb * tv.storage_share,
                technology=tv.technology,
                alt_technologies=tv.alt_technologies,
                pinned_subdomain=tv.pinned_subdomain,
            )
            for tv in self.vnfs
        )
        atts = tuple(dict.fromkeys(sub.attachments))
        bw = sub.bandwidth_mbps * self.bandwidth_factor
        order = [v.id for v in vnfs]
        links: list[LogicalLinkSpec] = []
        chain = ([atts[0]] if atts else []) + order + ([atts[-1]] if len(atts) >= 2 else [])
        for i, (a, b) in enumerate(zip(chain, chain[1:])):
            links.append(LogicalLinkSpec(f"L{i}", a, b, bw))
        for j, extra in enumerate(atts[1:-1]):
            links.append(LogicalLinkSpec(f"S{j}", extra, order[0], bw))
        return SliceResourceGraph(vnfs, tuple(links), atts)


@dataclass
class Embedding:
    placements: dict[str, str]
    paths: dict[str, tuple[str, ...]]
    tags: dict[str, str] = field(default_factory=dict)
    metrics: Metrics = field(default_factory=Metrics)

    def to_dict(self) -> dict[str, Any]:
        return {
            "placements": dict(sorted(self.placements.items())),
            "paths": {k: list(v) for k, v in sorted(self.paths.items())},
            "tags": dict(sorted(self.tags.items())),
            "metrics": self.metrics.to_dict(),
        }


def graph_metrics(
    graph: SliceResourceGraph,
    paths: Mapping[str, Sequence[str]],
    link_attr: Any,
) -> Metrics:
    """Worst case over terminal pairs of the composed path attributes.

    `link_attr(link_id)` returns (latency, jitter, error, loss) of a substrate link.
    """
    terms = graph.terminals()
    if len(terms) < 2:
        return Metrics()
    worst_lat = Fraction(0)
    worst_jit = Fraction(0)
    worst_err = 0.0
    worst_loss = 0.0
    for a, b in itertools.combinations(terms, 2):
        hops = [h for lid in graph.tree_route(a, b) for h in paths[lid]]
        attrs = [link_attr(h) for h in hops]
        lat = sum((x[0] for x in attrs), Fraction(0))
        jit = sum((x[1] for x in attrs), Fraction(0))
        err = end_to_end_error_rate([x[2] for x in attrs])
        loss = end_to_end_error_rate([x[3] for x in attrs])
        worst_lat = max(worst_lat, lat)
        worst_jit = max(worst_jit, jit)
        worst_err = max(worst_err, err)
        worst_loss = max(worst_loss, loss)
    return Metrics(worst_lat, worst_jit, worst_err, worst_loss)


def terminal_routes(graph: SliceResourceGraph, paths: Mapping[str, Sequence[str]]) -> list[list[str]]:
    """Substrate hops of every terminal-pair route, the unit the monitor re-measures."""
    terms = graph.terminals()
    return [
        [h for lid in graph.tree_route(a, b) for h in paths[lid]]
        for a, b in itertools.combinations(terms, 2)
    ]


def routes_metrics(routes: Sequence[Sequence[str]], link_attr: Any) -> Metrics:
    if not routes:
        return Metrics()
    worst = Metrics()
    for hops in routes:
        attrs = [link_attr(h) for h in hops]
        m = Metrics(
            sum((x[0] for x in attrs), Fraction(0)),
            sum((x[1] for x in attrs), Fraction(0)),
            end_to_end_error_rate([x[2] for x in attrs]),
            end_to_end_error_rate([x[3] for x in attrs]),
        )
        worst = Metrics(
            max(worst.latency_ms, m.latency_ms),
            max(worst.jitter_ms, m.jitter_ms),
            max(worst.error_rate, m.error_rate),
            max(worst.loss, m.loss),
        )
    return worst


@dataclass(frozen=True)
class Freedom:
    """Which slates each VNF may use during a (re)embedding."""

    level: str  # fresh | 0 | 1 | 2
    current: Mapping[str, str] = field(default_factory=dict)
    affected: frozenset[str] = frozenset()


class DomainEmbedder:
    """Searches placements and routes over one domain's substrate view."""

    def __init__(self, substrate: Substrate, domain_id: str) -> None:
        self.substrate = substrate
        self.domain_id = domain_id
        self.domain = substrate.domains[domain_id]

    # -- helpers ------------------------------------------------------------

    def _tech(self, subdomain: str) -> str:
        return self.domain.subdomains[subdomain].technology

    def base_free(self, target: str, exclude_owner: str | None) -> dict[str, Fraction]:
        tgt = self.substrate.target(target)
        used = {c: Fraction(0) for c in tgt.components}
        for r in self.substrate.reservations_on(target):
            if r.owner == exclude_owner:
                continue
            for c, a in r.amounts:
                used[c] += a
        return {c: tgt.capacity.get(c, Fraction(0)) - used[c] for c in tgt.components}

    def _isolated_ok(self, slate_id: str, nsi: str, exclusive: bool, exclude_owner: str | None) -> bool:
        if self.substrate.bound.get(slate_id, nsi) != nsi:
            return False
        others = {r.nsi for r in self.substrate.reservations_on(slate_id) if r.owner != exclude_owner}
        others.discard(nsi)
        if not others:
            return True
        if exclusive or self.substrate.slates[slate_id].dedicated:
            return False
        return not any(
            r.exclusive for r in self.substrate.reservations_on(slate_id) if r.owner != exclude_owner
        )

    def candidates(
        self, vnf: VnfSpec, freedom: Freedom, nsi: str, exclusive: bool, exclude_owner: str | None
    ) -> list[str]:
        out = []
        current = freedom.current.get(vnf.id)
        if freedom.level != FRESH and (vnf.id not in freedom.affected or freedom.level == "0"):
            return [current] if current is not None and self._isolated_ok(current, nsi, exclusive, exclude_owner) else []
        for slate in self.substrate.domain_slates(self.domain_id):
            if slate.kind is SlateKind.CONNECTIVITY or slate.node is None:
                continue
            if freedom.level == "1":
                if current is None or slate.subdomain != self.substrate.slates[current].subdomain:
                    continue
            elif vnf.pinned_subdomain is not None:
                if slate.subdomain != vnf.pinned_subdomain:
                    continue
            elif vnf.technology is not None:
                techs = {vnf.technology}
                if freedom.level == "2":
                    techs |= set(vnf.alt_technologies)
                if self._tech(slate.subdomain) not in techs:
                    continue
            if not self._isolated_ok(slate.id, nsi, exclusive, exclude_owner):
                continue
            out.append(slate.id)
        return out

    def node_of(self, endpoint: str, placements: Mapping[str, str]) -> str:
        if endpoint in placements:
            return self.substrate.slates[placements[endpoint]].node  # type: ignore[return-value]
        return endpoint

    def link_attr(self, link_id: str) -> tuple[Fraction, Fraction, float, float]:
        l = self.substrate.links[link_id]
        return (l.latency_ms, l.jitter_ms, l.error_rate, l.loss)

    def _routing_graph(self) -> nx.MultiGraph:
        g = nx.MultiGraph()
        g.add_nodes_from(self.domain.nodes)
        for link in self.substrate.domain_links(self.domain_id):
            g.add_edge(link.a, link.b, key=link.id, latency=float(link.latency_ms))
        return g

    def simple_paths(self, u: str, v: str) -> list[tuple[str, ...]]:
        """All simple substrate paths u→v as link-id tuples, latency ascending."""
        if u == v:
            return [()]
        g = self._routing_graph()
        if u not in g or v not in g:
            return []
        out = []
        for edge_path in nx.all_simple_edge_paths(g, u, v):
            out.append(tuple(key for _, _, key in edge_path))
        out.sort(key=lambda p: (sum(self.substrate.links[h].latency_ms for h in p), len(p), p))
        return out

    def _fits(self, demand: Mapping[str, Fraction], free: Mapping[str, Fraction]) -> bool:
        return all(demand.get(c, Fraction(0)) <= free[c] for c in COMPUTE_COMPONENTS if demand.get(c, Fraction(0)) > 0)

    # -- heuristic backend ---------------------------------------------------

    def heuristic(
        self,
        graph: SliceResourceGraph,
        budget: Budget,
        nsi: str,
        owner: str,
        exclusive: bool,
        freedom: Freedom,
    ) -> Embedding:
        """First-fit decreasing placement, then min-latency bandwidth-feasible routing.

        Repairs (any level other than fresh) walk every capacity-feasible
        placement of the affected VNFs in first-fit order; routing stays greedy.
        """
        order = sorted(graph.vnfs, key=lambda v: (-v.vcpu, v.id))
        if freedom.level == FRESH:
            placement_iter: Iterable[dict[str, str]] = [self._ffd(order, freedom, nsi, exclusive, owner)]
        else:
            placement_iter = self._placements(order, freedom, nsi, exclusive, owner)
        failure = EmbeddingInfeasible("capacity", "no capacity-feasible placement")
        for placements in placement_iter:
            try:
                paths = self._route_greedy(graph, placements, owner)
            except EmbeddingInfeasible as exc:
                failure = exc
                continue
            metrics = graph_metrics(graph, paths, self.link_attr)
            if metrics.within(budget):
                return Embedding(placements, paths, metrics=metrics)
            failure = EmbeddingInfeasible("qos", f"metrics {metrics.to_dict()} exceed {budget.to_dict()}")
        raise failure

    def _ffd(
        self, order: Sequence[VnfSpec], freedom: Freedom, nsi: str, exclusive: bool, owner: str
    ) -> dict[str, str]:
        free = {s.id: self.base_free(s.id, owner) for s in self.substrate.domain_slates(self.domain_id)}
        placements: dict[str, str] = {}
        for vnf in order:
            chosen = None
            for sid in self.candidates(vnf, freedom, nsi, exclusive, owner):
                if self._fits(vnf.demand, free[sid]):
                    chosen = sid
                    break
            if chosen is None:
                raise EmbeddingInfeasible("capacity", f"no slate for {vnf.id}")
            placements[vnf.id] = chosen
            for c in COMPUTE_COMPONENTS:
                free[chosen][c] -= vnf.demand[c]
        return placements

    def _placements(
        self, order: Sequence[VnfSpec], freedom: Freedom, nsi: str, exclusive: bool, owner: str
    ) -> Iterator[dict[str, str]]:
        free0 = {s.id: self.base_free(s.id, owner) for s in self.substrate.domain_slates(self.domain_id)}
        options = [self.candidates(v, freedom, nsi, exclusive, owner) for v in order]
        for combo in itertools.product(*options):
            used: dict[str, dict[str, Fraction]] = {}
            for vnf, sid in zip(order, combo):
                acc = used.setdefault(sid, {c: Fraction(0) for c in COMPUTE_COMPONENTS})
                for c in COMPUTE_COMPONENTS:
                    acc[c] += vnf.demand[c]
            if all(self._fits(acc, free0[sid]) for sid, acc in used.items()):
                yield {v.id: sid for v, sid in zip(order, combo)}

    def _route_greedy(
        self, graph: SliceResourceGraph, placements: Mapping[str, str], owner: str
    ) -> dict[str, tuple[str, ...]]:
        bw_free = {l.id: self.base_free(l.id, owner)["bandwidth_mbps"] for l in self.substrate.domain_links(self.domain_id)}
        paths: dict[str, tuple[str, ...]] = {}
        g = self._routing_graph()
        for link in graph.links:
            u, v = self.node_of(link.src, placements), self.node_of(link.dst, placements)
            if u == v:
                paths[link.id] = ()
                continue
            h = nx.MultiGraph()
            h.add_nodes_from(g.nodes)
            for a, b, key, data in g.edges(keys=True, data=True):
                if bw_free[key] >= link.bandwidth_mbps:
                    h.add_edge(a, b, key=key, latency=data["latency"])
            try:
                node_path = nx.shortest_path(h, u, v, weight="latency")
            except (nx.NetworkXNoPath, nx.NodeNotFound):
                raise EmbeddingInfeasible("capacity", f"no path with {link.bandwidth_mbps} Mbps for {link.id}") from None
            hops = []
            for a, b in zip(node_path, node_path[1:]):
                best = min(h[a][b], key=lambda k: (self.substrate.links[k].latency_ms, k))
                hops.append(best)
            for hop in hops:
                bw_free[hop] -= link.bandwidth_mbps
            paths[link.id] = tuple(hops)
        return paths

    # -- exhaustive backend --------------------------------------------------

    def exhaustive(
        self,
        graph: SliceResourceGraph,
        budget: Budget,
        nsi: str,
        owner: str,
        exclusive: bool,
        freedom: Freedom,
    ) -> Embedding:
        """Every placement × every simple-path combination, first feasible wins."""
        bw0 = {l.id: self.base_free(l.id, owner)["bandwidth_mbps"] for l in self.substrate.domain_links(self.domain_id)}
        order = sorted(graph.vnfs, key=lambda v: (-v.vcpu, v.id))
        path_cache: dict[tuple[str, str], list[tuple[str, ...]]] = {}
        saw_capacity_fit = False
        for placements in self._placements(order, freedom, nsi, exclusive, owner):
            per_link = []
            for link in graph.links:
                key = (self.node_of(link.src, placements), self.node_of(link.dst, placements))
                if key not in path_cache:
                    path_cache[key] = self.simple_paths(*key)
                per_link.append(path_cache[key])
            for route in itertools.product(*per_link):
                load: dict[str, Fraction] = {}
                for link, hops in zip(graph.links, route):
                    for h in hops:
                        load[h] = load.get(h, Fraction(0)) + link.bandwidth_mbps
                if any(load[h] > bw0[h] for h in load if load[h] > 0):
                    continue
                saw_capacity_fit = True
                paths = {link.id: hops for link, hops in zip(graph.links, route)}
                metrics = graph_metrics(graph, paths, self.link_attr)
                if metrics.within(budget):
                    return Embedding(placements, paths, metrics=metrics)
        raise EmbeddingInfeasible("qos" if saw_capacity_fit else "capacity", "exhaustive search found no embedding")

    # -- reservation ---------------------------------------------------------

    def reserve(
        self,
        graph: SliceResourceGraph,
        emb: Embedding,
        nsi: str,
        owner: str,
        exclusive: bool,
    ) -> dict[str, str]:
        """Allocate every demand of an embedding; all or nothing."""
        made: dict[str, str] = {}
        try:
            for vnf in graph.vnfs:
                demand = {c: a for c, a in vnf.demand.items() if a > 0}
                if demand:
                    made[f"vnf:{vnf.id}"] = self.substrate.allocate(
                        emb.placements[vnf.id], owner, demand, nsi=nsi, exclusive=exclusive
                    )
            for link in graph.links:
                if link.bandwidth_mbps <= 0:
                    continue
                for i, hop in enumerate(emb.paths[link.id]):
                    made[f"link:{link.id}:{i}:{hop}"] = self.substrate.allocate(
                        hop, owner, {"bandwidth_mbps": link.bandwidth_mbps}, nsi=nsi
                    )
        except Exception:
            self.substrate.release_all(made.values())
            raise
        return made


def embed(
    substrate: Substrate,
    domain_id: str,
    graph: SliceResourceGraph,
    budget: Budget,
    nsi: str,
    owner: str,
    exclusive: bool = False,
    freedom: Freedom | None = None,
    exact: bool = False,
) -> Embedding:
    report = validate_graph(graph)
    if not report.ok:
        raise EmbeddingInfeasible("graph", "; ".join(report.violations))
    embedder = DomainEmbedder(substrate, domain_id)
    freedom = freedom or Freedom(FRESH)
    backend = embedder.exhaustive if exact else embedder.heuristic
    emb = backend(graph, budget, nsi, owner, exclusive, freedom)
    for vid, sid in emb.placements.items():
        if freedom.level == FRESH:
            emb.tags[vid] = VIA_VNFM
        elif freedom.current.get(vid) == sid:
            emb.tags[vid] = VIA_VIM
        else:
            emb.tags[vid] = VIA_VNFM
    return emb
