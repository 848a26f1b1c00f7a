"""Brute-force feasibility and escalation-level oracle for small instances.

Deliberately shares no search code with the embedder or the conductor: paths
are enumerated by a plain depth-first walk, budgets are re-derived from the
request and capacity is recomputed straight from the reservation table.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any

from .embedding import Budget, SubRequest
from .model import Isolation, ServiceRequirements, SliceResourceGraph, q, validate_graph
from .orchestrator import Catalog
from .substrate import Substrate

MAX_DOMAINS = 6
MAX_VNFS = 6
MAX_SLATES = 12
TOL = 1e-12
DIALECTS = frozenset({"canonical", "d1", "d2"})
COMPONENTS = ("vcpu", "memory_gb", "storage_gb")


class OracleError(Exception):
    code = "oracle-error"


class InstanceTooLarge(OracleError):
    code = "instance-too-large"


@dataclass(frozen=True)
class World:
    substrate: Substrate
    catalogs: Mapping[str, Catalog]
    trust: frozenset[frozenset[str]]

    def check_size(self) -> None:
        sub = self.substrate
        if len(sub.domains) > MAX_DOMAINS:
            raise InstanceTooLarge(f"{len(sub.domains)} domains > {MAX_DOMAINS}")
        if len(sub.slates) > MAX_SLATES:
            raise InstanceTooLarge(f"{len(sub.slates)} slates > {MAX_SLATES}")
        for cat in self.catalogs.values():
            for t in cat.templates:
                if len(t.vnfs) > MAX_VNFS:
                    raise InstanceTooLarge(f"template {t.template_id} has {len(t.vnfs)} VNFs > {MAX_VNFS}")


@dataclass
class DomainWitness:
    placements: dict[str, str]
    paths: dict[str, tuple[str, ...]]
    worst: tuple[Fraction, Fraction, float, float]


@dataclass
class Witness:
    path: tuple[str, ...]
    links: tuple[str, ...]
    domains: dict[str, DomainWitness]

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": list(self.path),
            "links": list(self.links),
            "domains": {
                d: {"placements": dict(sorted(w.placements.items())), "paths": {k: list(v) for k, v in sorted(w.paths.items())}}
                for d, w in sorted(self.domains.items())
            },
        }


@dataclass
class Verdict:
    feasible: bool
    witness: Witness | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"feasible": self.feasible}
        if self.witness is not None:
            out["witness"] = self.witness.to_dict()
        return out


# -- raw state arithmetic -------------------------------------------------------


def free_of(sub: Substrate, target: str, skip_owner: str | None = None, skip_nsi: str | None = None) -> dict[str, Fraction]:
    tgt = sub.slates.get(target) or sub.links[target]
    out = dict(tgt.capacity)
    for r in sub.reservations.values():
        if r.target != target or r.owner == skip_owner or r.nsi == skip_nsi:
            continue
        for c, a in r.amounts:
            out[c] = out.get(c, Fraction(0)) - a
    return out


def usable(sub: Substrate, slate_id: str, nsi: str, exclusive: bool, skip_owner: str | None) -> bool:
    """Isolation rules: dedicated slates belong to their first user, exclusive holders block others."""
    slate = sub.slates[slate_id]
    if sub.bound.get(slate_id, nsi) != nsi:
        return False
    others = [r for r in sub.reservations.values() if r.target == slate_id and r.owner != skip_owner and r.nsi != nsi]
    if not others:
        return True
    if exclusive or slate.dedicated:
        return False
    return not any(r.exclusive for r in others)


def hop_attrs(sub: Substrate, hops: Iterable[str]) -> tuple[Fraction, Fraction, float, float]:
    lat, jit, ok_err, ok_loss = Fraction(0), Fraction(0), 1.0, 1.0
    for h in hops:
        l = sub.links[h]
        lat += l.latency_ms
        jit += l.jitter_ms
        ok_err *= 1.0 - l.error_rate
        ok_loss *= 1.0 - l.loss
    return lat, jit, 1.0 - ok_err, 1.0 - ok_loss


def fits(m: Sequence[Any], b: Budget) -> bool:
    return m[0] <= b.latency_ms and m[1] <= b.jitter_ms and m[2] <= b.error_rate + TOL and m[3] <= b.loss + TOL


def node_paths(sub: Substrate, domain: str, u: str, v: str) -> list[tuple[str, ...]]:
    """Every node-simple walk u→v over the domain's internal links, as link-id tuples."""
    if u == v:
        return [()]
    adj: dict[str, list[tuple[str, str]]] = {}
    for l in sub.links.values():
        if l.domain == domain and l.domains is None:
            adj.setdefault(l.a, []).append((l.id, l.b))
            adj.setdefault(l.b, []).append((l.id, l.a))
    out: list[tuple[str, ...]] = []

    def walk(node: str, seen: set[str], acc: list[str]) -> None:
        for lid, nxt in sorted(adj.get(node, [])):
            if nxt in seen:
                continue
            if nxt == v:
                out.append(tuple(acc + [lid]))
                continue
            seen.add(nxt)
            walk(nxt, seen, acc + [lid])
            seen.discard(nxt)

    walk(u, {u}, [])
    return out


# -- one domain -------------------------------------------------------------------


def allowed_slates(
    sub: Substrate, domain: str, graph: SliceResourceGraph, nsi: str, exclusive: bool, skip_owner: str | None,
    level: str = "fresh", current: Mapping[str, str] | None = None, affected: Iterable[str] = (),
) -> dict[str, list[str]]:
    current = current or {}
    moving = set(affected)
    dom = sub.domains[domain]
    hosts = [s for s in sorted(sub.slates.values(), key=lambda s: s.id)
             if s.domain == domain and s.kind.value != "connectivity" and s.node is not None]
    out: dict[str, list[str]] = {}
    for v in graph.vnfs:
        if level != "fresh" and (level == "0" or v.id not in moving):
            opts = [current[v.id]]
        elif level == "1":
            home = sub.slates[current[v.id]].subdomain
            opts = [s.id for s in hosts if s.subdomain == home]
        else:
            opts = []
            for s in hosts:
                tech = dom.subdomains[s.subdomain].technology
                if v.pinned_subdomain is not None:
                    ok = s.subdomain == v.pinned_subdomain
                elif v.technology is not None:
                    ok = tech == v.technology or (level == "2" and tech in v.alt_technologies)
                else:
                    ok = True
                if ok:
                    opts.append(s.id)
        out[v.id] = [s for s in opts if usable(sub, s, nsi, exclusive, skip_owner)]
    return out


def domain_witness(
    sub: Substrate, domain: str, graph: SliceResourceGraph, budget: Budget, nsi: str, exclusive: bool,
    skip_owner: str | None, options: Mapping[str, Sequence[str]],
) -> DomainWitness | None:
    vnfs = list(graph.vnfs)
    free_slate = {s: free_of(sub, s, skip_owner) for opts in options.values() for s in opts}
    link_free = {l.id: free_of(sub, l.id, skip_owner)["bandwidth_mbps"]
                 for l in sub.links.values() if l.domain == domain and l.domains is None}
    terms = graph.terminals()
    pairs = list(itertools.combinations(terms, 2))
    for combo in itertools.product(*(options[v.id] for v in vnfs)):
        load: dict[str, dict[str, Fraction]] = {}
        for v, s in zip(vnfs, combo):
            acc = load.setdefault(s, {c: Fraction(0) for c in COMPONENTS})
            for c in COMPONENTS:
                acc[c] += v.demand[c]
        if any(acc[c] > 0 and acc[c] > free_slate[s].get(c, Fraction(0)) for s, acc in load.items() for c in COMPONENTS):
            continue
        place = {v.id: s for v, s in zip(vnfs, combo)}

        def node(x: str) -> str:
            return sub.slates[place[x]].node if x in place else x  # type: ignore[return-value]

        choices = [node_paths(sub, domain, node(l.src), node(l.dst)) for l in graph.links]
        for route in itertools.product(*choices):
            bw: dict[str, Fraction] = {}
            for l, hops in zip(graph.links, route):
                for h in hops:
                    bw[h] = bw.get(h, Fraction(0)) + l.bandwidth_mbps
            if any(a > 0 and a > link_free[h] for h, a in bw.items()):
                continue
            paths = {l.id: hops for l, hops in zip(graph.links, route)}
            worst = worst_pair(sub, graph, paths, pairs)
            if fits(worst, budget):
                return DomainWitness(place, paths, worst)
    return None


def worst_pair(sub: Substrate, graph: SliceResourceGraph, paths: Mapping[str, Sequence[str]],
               pairs: Sequence[tuple[str, str]] | None = None) -> tuple[Fraction, Fraction, float, float]:
    if pairs is None:
        pairs = list(itertools.combinations(graph.terminals(), 2))
    worst: tuple[Fraction, Fraction, float, float] = (Fraction(0), Fraction(0), 0.0, 0.0)
    for a, b in pairs:
        m = hop_attrs(sub, [h for lid in graph.tree_route(a, b) for h in paths[lid]])
        worst = (max(worst[0], m[0]), max(worst[1], m[1]), max(worst[2], m[2]), max(worst[3], m[3]))
    return worst


# -- federation-wide instantiation --------------------------------------------------


def _prob_share(total: float, fixed: Sequence[float], n: int) -> float | None:
    alive = math.prod(1.0 - w for w in fixed)
    if alive <= 0.0 or (1.0 - total) > alive + TOL:
        return None
    return min(1.0, max(0.0, 1.0 - min(1.0, (1.0 - total) / alive) ** (1.0 / n)))


def shares(req: ServiceRequirements, path: Sequence[str], atts: Mapping[str, Sequence[str]],
           wan: Sequence[tuple[Fraction, Fraction, float, float]]) -> dict[str, Budget] | None:
    lat = req.latency_budget_ms - sum((w[0] for w in wan), Fraction(0))
    jit = req.jitter_budget_ms - sum((w[1] for w in wan), Fraction(0))
    if lat < 0 or jit < 0:
        return None
    err = _prob_share(req.max_error_rate, [w[2] for w in wan], len(path))
    loss = _prob_share(req.max_packet_loss, [w[3] for w in wan], len(path))
    if err is None or loss is None:
        return None
    weight = {d: max(1, len(atts[d])) for d in path}
    tot = sum(weight.values())
    return {d: Budget(lat * weight[d] / tot, jit * weight[d] / tot, err, loss) for d in path}


def domain_paths(world: World, coverage: Iterable[str], skip: Iterable[str] = ()) -> list[tuple[str, ...]]:
    sub = world.substrate
    cover = set(coverage)
    banned = set(skip)
    live = sorted(d for d in sub.domains if d not in banned)
    if not cover or not cover <= set(live):
        return []
    if len(cover) == 1:
        return [tuple(cover)]
    adj: dict[str, set[str]] = {d: set() for d in live}
    for l in sub.links.values():
        if l.domains is None:
            continue
        a, b = l.domains
        if a in adj and b in adj and frozenset((a, b)) in world.trust:
            adj[a].add(b)
            adj[b].add(a)
    found: set[tuple[str, ...]] = set()

    def walk(p: list[str]) -> None:
        if p[-1] in cover and len(p) > 1 and cover <= set(p):
            found.add(tuple(p) if p[0] <= p[-1] else tuple(reversed(p)))
        for nxt in sorted(adj[p[-1]]):
            if nxt not in p:
                walk(p + [nxt])

    for start in sorted(cover):
        walk([start])
    return sorted(found)


def _template(cat: Catalog, service_type: str) -> Any:
    per = cat.service_types.get(service_type)
    if per is None:
        return None
    need = {t for types in per.values() for t in types}
    ok = [t for t in cat.templates if t.service_type == service_type and need <= {v.type for v in t.vnfs}]
    return min(ok, key=lambda t: t.template_id) if ok else None


def _dialects_ok(sub: Substrate, domain: str) -> bool:
    return all(not s.vendor or s.vendor.get("dialect") in DIALECTS for s in sub.slates.values() if s.domain == domain)


def instantiation_witness(
    world: World, nsi: str, req: ServiceRequirements,
    exclude: Iterable[tuple[tuple[str, ...], tuple[str, ...]]] = (),
    skip_domains: Iterable[str] = (),
) -> Witness | None:
    sub = world.substrate
    banned_keys = set(exclude)
    exclusive = req.isolation is Isolation.DEDICATED
    n_cache: dict[tuple[Any, ...], DomainWitness | None] = {}
    for path in domain_paths(world, req.coverage, skip_domains):
        n = len(path)
        per_pair = []
        for a, b in zip(path, path[1:]):
            per_pair.append(sorted(
                (l for l in sub.links.values()
                 if l.domains is not None and set(l.domains) == {a, b}
                 and free_of(sub, l.id)["bandwidth_mbps"] >= req.bandwidth_mbps),
                key=lambda l: l.id,
            ))
        for combo in itertools.product(*per_pair):
            key = (tuple(path), tuple(l.id for l in combo))
            if key in banned_keys:
                continue
            borders = []
            for (a, b), l in zip(zip(path, path[1:]), combo):
                ends = {l.domains[0]: l.a, l.domains[1]: l.b}  # type: ignore[index]
                borders.append((ends[a], ends[b]))
            atts: dict[str, tuple[str, ...]] = {}
            for i, d in enumerate(path):
                seq = ([borders[i - 1][1]] if i > 0 else []) + [e.attachment for e in req.endpoints if e.domain == d]
                seq += [borders[i][0]] if i < n - 1 else []
                atts[d] = tuple(dict.fromkeys(seq))
            budgets = shares(req, path, atts, [(l.latency_ms, l.jitter_ms, l.error_rate, l.loss) for l in combo])
            if budgets is None:
                continue
            found: dict[str, DomainWitness] = {}
            for d in path:
                w = _domain_fresh(world, nsi, req, d, n, budgets[d], atts[d], exclusive, n_cache)
                if w is None:
                    break
                found[d] = w
            else:
                return Witness(tuple(path), key[1], found)
    return None


def _domain_fresh(world: World, nsi: str, req: ServiceRequirements, d: str, n: int, budget: Budget,
                  atts: tuple[str, ...], exclusive: bool, cache: dict[tuple[Any, ...], DomainWitness | None]) -> DomainWitness | None:
    ck = (d, n, budget, atts)
    if ck in cache:
        return cache[ck]
    cache[ck] = None
    sub = world.substrate
    cat = world.catalogs.get(d)
    share = {"vcpu": Fraction(req.compute_vcpu) / n, "memory_gb": req.memory_gb / n, "storage_gb": req.storage_gb / n}
    if cat is None or not _dialects_ok(sub, d):
        return None
    tmpl = _template(cat, req.service_type)
    if tmpl is None:
        return None
    agg = {c: Fraction(0) for c in COMPONENTS}
    for s in sub.slates.values():
        if s.domain == d and s.kind.value != "connectivity":
            f = free_of(sub, s.id)
            for c in COMPONENTS:
                agg[c] += max(Fraction(0), f.get(c, Fraction(0)))
    if any(agg[c] < share[c] for c in COMPONENTS):
        return None
    sr = SubRequest(d, req.service_type, req.bandwidth_mbps, share["vcpu"], share["memory_gb"], share["storage_gb"],
                    budget, atts, tuple(e.attachment for e in req.endpoints if e.domain == d), req.isolation)
    graph = tmpl.instantiate(sr)
    if not validate_graph(graph).ok:
        return None
    opts = allowed_slates(sub, d, graph, nsi, exclusive, None)
    cache[ck] = domain_witness(sub, d, graph, budget, nsi, exclusive, None, opts)
    return cache[ck]


def oracle_feasible(world: World, nsi: str, req: ServiceRequirements) -> Verdict:
    world.check_size()
    w = instantiation_witness(world, nsi, req)
    return Verdict(w is not None, w)


# -- escalation ladder ------------------------------------------------------------


@dataclass
class NsiView:
    """What the ladder oracle needs to know about one live NSI."""

    nsi: str
    sla: ServiceRequirements
    path: tuple[str, ...]
    links: tuple[str, ...]
    nssi: dict[str, str]
    budgets: dict[str, Budget]
    graphs: dict[str, SliceResourceGraph]
    placements: dict[str, dict[str, str]]
    paths: dict[str, dict[str, tuple[str, ...]]]
    exclusive: bool = False
    coverage: frozenset[str] = field(default_factory=frozenset)

    @property
    def key(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        return (self.path, self.links)


def scaled_graph(graph: SliceResourceGraph, vnf_id: str, delta: Mapping[str, Any]) -> SliceResourceGraph:
    v = graph.vnf(vnf_id)
    d = {c: q(delta.get(c, 0)) for c in COMPONENTS}
    return graph.with_vnf(replace(
        v,
        vcpu=max(Fraction(0), v.vcpu + d["vcpu"]),
        memory_gb=max(Fraction(0), v.memory_gb + d["memory_gb"]),
        storage_gb=max(Fraction(0), v.storage_gb + d["storage_gb"]),
    ))


def _residual(sla: ServiceRequirements, fixed: Sequence[tuple[Fraction, Fraction, float, float]]) -> Budget | None:
    lat = sla.latency_budget_ms - sum((f[0] for f in fixed), Fraction(0))
    jit = sla.jitter_budget_ms - sum((f[1] for f in fixed), Fraction(0))
    if lat < 0 or jit < 0:
        return None
    err = _prob_share(sla.max_error_rate, [f[2] for f in fixed], 1)
    loss = _prob_share(sla.max_packet_loss, [f[3] for f in fixed], 1)
    if err is None or loss is None:
        return None
    return Budget(lat, jit, err, loss)


def _local(world: World, view: NsiView, d: str, graph: SliceResourceGraph, affected: Iterable[str], budget: Budget) -> bool:
    sub = world.substrate
    for level in ("0", "1", "2"):
        opts = allowed_slates(sub, d, graph, view.nsi, view.exclusive, view.nssi[d], level, view.placements[d], affected)
        if domain_witness(sub, d, graph, budget, view.nsi, view.exclusive, view.nssi[d], opts) is not None:
            return True
    return False


def minimal_level(
    world: World,
    view: NsiView,
    d: str,
    graph: SliceResourceGraph,
    affected: Iterable[str],
    new_sla: ServiceRequirements | None = None,
) -> int | None:
    """Lowest ladder rung at which the change in domain d can be absorbed; None if none can."""
    world.check_size()
    sub = world.substrate
    affected = frozenset(affected)
    for level in ("0", "1", "2"):
        opts = allowed_slates(sub, d, graph, view.nsi, view.exclusive, view.nssi[d], level, view.placements[d], affected)
        if domain_witness(sub, d, graph, view.budgets[d], view.nsi, view.exclusive, view.nssi[d], opts) is not None:
            return int(level)
    if len(view.path) >= 2:
        others = [worst_pair(sub, view.graphs[o], view.paths[o]) for o in sorted(view.path) if o != d]
        per_pair = []
        for (a, b), cur in zip(zip(view.path, view.path[1:]), view.links):
            if frozenset((a, b)) not in world.trust:
                per_pair.append([])
                continue
            per_pair.append([
                l for l in sorted(sub.links.values(), key=lambda l: l.id)
                if l.domains is not None and set(l.domains) == {a, b}
                and free_of(sub, l.id, skip_nsi=view.nsi)["bandwidth_mbps"] >= view.sla.bandwidth_mbps
            ])
        for combo in itertools.product(*per_pair):
            fixed = [(l.latency_ms, l.jitter_ms, l.error_rate, l.loss) for l in combo] + others
            budget = _residual(view.sla, fixed)
            if budget is not None and _local(world, view, d, graph, affected, budget):
                return 3
    fresh = world.substrate.clone()
    for r in [r for r in fresh.reservations.values() if r.nsi == view.nsi]:
        fresh.release(r.id)
    skip = [d] if d not in view.coverage else []
    again = World(fresh, world.catalogs, world.trust)
    if instantiation_witness(again, view.nsi, new_sla or view.sla, exclude=[view.key], skip_domains=skip) is not None:
        return 4
    return None


def degradation_locus(world: World, view: NsiView) -> tuple[str, frozenset[str]] | None:
    """First domain-local violation, in monitor order, and the VNFs it touches."""
    sub = world.substrate
    for d in view.path:
        used = sorted(set(view.placements[d].values()) | {h for p in view.paths[d].values() for h in p})
        over = [t for t in used if any(v < 0 for v in free_of(sub, t).values())]
        if over:
            t = over[0]
            if t in sub.slates:
                return d, frozenset(v for v, s in view.placements[d].items() if s == t)
            return d, frozenset(v.id for v in view.graphs[d].vnfs)
        if not fits(worst_pair(sub, view.graphs[d], view.paths[d]), view.budgets[d]):
            return d, frozenset(v.id for v in view.graphs[d].vnfs)
    return None
