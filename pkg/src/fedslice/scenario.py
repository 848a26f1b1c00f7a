"""Scenario files: loading, validation and construction of the simulated world."""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from .broker import BrokerPolicy, TenantPolicy
from .embedding import SliceTemplate, TemplateVnf
from .model import ModelError, ServiceRequirements, q
from .orchestrator import Catalog
from .substrate import Domain, LinkScope, Node, Slate, SlateKind, SubDomain, Substrate, SubstrateLink

SCHEMA_VERSION = "1.0"


class ScenarioError(Exception):
    code = "scenario-error"


class ParseError(ScenarioError):
    code = "parse-error"


class SchemaError(ScenarioError):
    code = "schema-violation"

    def __init__(self, errors: Sequence[tuple[list[Any], str]]) -> None:
        self.errors = [(list(p), m) for p, m in errors]
        super().__init__("; ".join(f"{fmt_path(p)}: {m}" for p, m in self.errors))


def fmt_path(path: Sequence[Any]) -> str:
    return "/" + "/".join(str(p) for p in path)


@lru_cache(maxsize=1)
def schema() -> dict[str, Any]:
    text = resources.files("fedslice").joinpath("scenario.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class Knobs:
    seed: int = 0
    max_ticks: int = 10_000
    exact_embedding: bool = False
    greedy_decomposition: bool = False
    latencies: Mapping[str, int] = field(default_factory=dict)
    patterns: tuple[str, ...] = ()


@dataclass(frozen=True)
class TimelineEntry:
    index: int
    tick: int
    type: str
    data: Mapping[str, Any]


@dataclass
class Scenario:
    name: str
    raw: dict[str, Any]
    knobs: Knobs
    timeline: list[TimelineEntry]

    @property
    def domain_ids(self) -> list[str]:
        return [d["id"] for d in self.raw["domains"]]

    @property
    def trust(self) -> list[tuple[str, str]]:
        return [(a, b) for a, b in self.raw.get("trust", [])]

    def requests(self) -> dict[str, TimelineEntry]:
        return {e.data["nsi"]: e for e in self.timeline if e.type == "request"}

    def build_substrate(self) -> Substrate:
        return build_substrate(self.raw)

    def catalogs(self) -> dict[str, Catalog]:
        return {d["id"]: build_catalog(d["catalog"]) for d in self.raw["domains"]}

    def broker_policy(self) -> BrokerPolicy:
        return build_policy(self.raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=False)


# -- builders -----------------------------------------------------------------


def build_catalog(cat: Mapping[str, Any]) -> Catalog:
    templates = []
    for t in cat["templates"]:
        vnfs = tuple(
            TemplateVnf(
                id=v["id"],
                type=v["type"],
                technology=v.get("technology"),
                alt_technologies=tuple(v.get("alt_technologies", ())),
                compute_share=q(v.get("compute_share", 1)),
                memory_share=q(v.get("memory_share", 1)),
                storage_share=q(v.get("storage_share", 1)),
                pinned_subdomain=v.get("pinned_subdomain"),
            )
            for v in t["vnfs"]
        )
        templates.append(SliceTemplate(t["template_id"], t["service_type"], vnfs, q(t.get("bandwidth_factor", 1))))
    service_types = {st: {tech: tuple(types) for tech, types in per.items()} for st, per in cat["service_types"].items()}
    return Catalog(service_types, tuple(sorted(templates, key=lambda t: t.template_id)))


def _qos(d: Mapping[str, Any]) -> dict[str, Any]:
    return {
        "latency_ms": q(d["latency_ms"]),
        "jitter_ms": q(d.get("jitter_ms", 0)),
        "loss": float(d.get("loss", 0.0)),
        "error_rate": float(d.get("error_rate", 0.0)),
    }


def build_substrate(raw: Mapping[str, Any]) -> Substrate:
    sub = Substrate()
    for d in raw["domains"]:
        cat = d["catalog"]
        vnf_types = {t for per in cat["service_types"].values() for types in per.values() for t in types}
        vnf_types |= {v["type"] for t in cat["templates"] for v in t["vnfs"]}
        nodes = {n["id"]: Node(n["id"], d["id"], n["subdomain"], n.get("kind", "nfvi")) for n in d["nodes"]}
        sub.add_domain(
            Domain(
                id=d["id"],
                owner=d.get("owner", d["id"]),
                subdomains={s["id"]: SubDomain(s["id"], s["technology"]) for s in d["subdomains"]},
                nodes=nodes,
                service_types=tuple(sorted(cat["service_types"])),
                vnf_types=tuple(sorted(vnf_types)),
            )
        )
        for s in d["slates"]:
            node = s.get("node")
            subdomain = s.get("subdomain") or nodes[node].subdomain
            sub.add_slate(
                Slate(
                    id=s["id"],
                    kind=SlateKind(s["kind"]),
                    domain=d["id"],
                    subdomain=subdomain,
                    node=node,
                    capacity={c: q(s["capacity"].get(c, 0)) for c in ("vcpu", "memory_gb", "storage_gb")},
                    dedicated=bool(s.get("dedicated", False)),
                    vendor=dict(s.get("vendor", {})),
                )
            )
        for l in d.get("links", []):
            sub.add_link(
                SubstrateLink(
                    id=l["id"], a=l["a"], b=l["b"], capacity={"bandwidth_mbps": q(l["bandwidth_mbps"])},
                    scope=LinkScope.INTRA, domain=d["id"], **_qos(l),
                )
            )
    for w in raw.get("wan_links", []):
        sub.add_link(
            SubstrateLink(
                id=w["id"], a=w["borders"][0], b=w["borders"][1],
                capacity={"bandwidth_mbps": q(w["bandwidth_mbps"])},
                scope=LinkScope.WAN, domains=(w["domains"][0], w["domains"][1]), **_qos(w),
            )
        )
    return sub


def build_policy(raw: Mapping[str, Any]) -> BrokerPolicy:
    tenants = {
        t["id"]: TenantPolicy(
            t["id"],
            t.get("max_slices"),
            frozenset(t["services"]) if "services" in t else None,
        )
        for t in raw.get("tenants", [])
    }
    pol = raw.get("policy", {})
    return BrokerPolicy(
        tenants,
        {k: q(v) for k, v in pol.get("rates", {}).items()},
        q(pol.get("default_rate", 1)),
    )


# -- validation -----------------------------------------------------------------


def _pattern_names() -> set[str]:
    root = resources.files("fedslice.patterns")
    return {p.name[:-5] for p in root.iterdir() if p.name.endswith(".json")}


def semantic_errors(raw: Mapping[str, Any]) -> list[tuple[list[Any], str]]:
    errs: list[tuple[list[Any], str]] = []
    domains: dict[str, Mapping[str, Any]] = {}
    node_home: dict[str, str] = {}
    node_kind: dict[str, str] = {}
    targets: set[str] = set()
    slate_ids: set[str] = set()

    def dup(kind: str, ident: str, seen: set[str], path: list[Any]) -> None:
        if ident in seen:
            errs.append((path, f"duplicate {kind} id {ident!r}"))
        seen.add(ident)

    seen_domains: set[str] = set()
    for i, d in enumerate(raw["domains"]):
        dp: list[Any] = ["domains", i]
        dup("domain", d["id"], seen_domains, dp + ["id"])
        domains[d["id"]] = d
        subs = {s["id"] for s in d["subdomains"]}
        local_nodes: set[str] = set()
        for j, n in enumerate(d["nodes"]):
            if n["id"] in node_home:
                errs.append((dp + ["nodes", j, "id"], f"duplicate node id {n['id']!r}"))
            node_home[n["id"]] = d["id"]
            node_kind[n["id"]] = n.get("kind", "nfvi")
            local_nodes.add(n["id"])
            if n["subdomain"] not in subs:
                errs.append((dp + ["nodes", j, "subdomain"], f"unknown subdomain {n['subdomain']!r}"))
        covered: set[str] = set()
        for j, s in enumerate(d["slates"]):
            sp = dp + ["slates", j]
            dup("slate/link", s["id"], targets, sp + ["id"])
            slate_ids.add(s["id"])
            node = s.get("node")
            if node is not None and node not in local_nodes:
                errs.append((sp + ["node"], f"unknown node {node!r} in domain {d['id']}"))
                continue
            if node is None and "subdomain" not in s:
                errs.append((sp, "slate needs a node or a subdomain"))
                continue
            if s["kind"] != "connectivity" and node is None:
                errs.append((sp + ["node"], "compute and storage slates must sit on a node"))
            subd = s.get("subdomain")
            if subd is not None and subd not in subs:
                errs.append((sp + ["subdomain"], f"unknown subdomain {subd!r}"))
                continue
            node_sub = next((n["subdomain"] for n in d["nodes"] if n["id"] == node), None)
            if subd is not None and node_sub is not None and subd != node_sub:
                errs.append((sp + ["subdomain"], f"slate subdomain {subd!r} disagrees with node subdomain {node_sub!r}"))
            covered.add(subd or node_sub)
        for j, s in enumerate(d["subdomains"]):
            if s["id"] not in covered:
                errs.append((dp + ["subdomains", j], f"subdomain {s['id']!r} has no slate"))
        for j, l in enumerate(d.get("links", [])):
            lp = dp + ["links", j]
            dup("slate/link", l["id"], targets, lp + ["id"])
            for end in ("a", "b"):
                if l[end] not in local_nodes:
                    errs.append((lp + [end], f"unknown node {l[end]!r} in domain {d['id']}"))
            if l["a"] == l["b"]:
                errs.append((lp, "link endpoints must differ"))
        cat = d["catalog"]
        for j, t in enumerate(cat["templates"]):
            tp = dp + ["catalog", "templates", j]
            if t["service_type"] not in cat["service_types"]:
                errs.append((tp + ["service_type"], f"service type {t['service_type']!r} not in catalog"))
            seen_vnfs: set[str] = set()
            for k, v in enumerate(t["vnfs"]):
                dup("vnf", v["id"], seen_vnfs, tp + ["vnfs", k, "id"])
                pin = v.get("pinned_subdomain")
                if pin is not None and pin not in subs:
                    errs.append((tp + ["vnfs", k, "pinned_subdomain"], f"unknown subdomain {pin!r}"))

    pair_borders: dict[frozenset[str], tuple[tuple[str, str], int]] = {}
    for i, w in enumerate(raw.get("wan_links", [])):
        wp: list[Any] = ["wan_links", i]
        dup("slate/link", w["id"], targets, wp + ["id"])
        a, b = w["domains"]
        if a == b:
            errs.append((wp + ["domains"], "a WAN link joins two different domains"))
        ok = True
        for k, (dom, border) in enumerate(zip(w["domains"], w["borders"])):
            if dom not in domains:
                errs.append((wp + ["domains", k], f"unknown domain {dom!r}"))
                ok = False
            elif node_home.get(border) != dom:
                errs.append((wp + ["borders", k], f"border {border!r} is not a node of {dom}"))
                ok = False
        if not ok:
            continue
        borders = {a: w["borders"][0], b: w["borders"][1]}
        key = frozenset((a, b))
        canon = (borders[min(a, b)], borders[max(a, b)])
        if key in pair_borders and pair_borders[key][0] != canon:
            errs.append((wp + ["borders"], f"parallel WAN links between {sorted(key)} must share border points"))
        pair_borders.setdefault(key, (canon, i))

    for i, pair in enumerate(raw.get("trust", [])):
        for k, dom in enumerate(pair):
            if dom not in domains:
                errs.append((["trust", i, k], f"unknown domain {dom!r}"))

    tenants: set[str] = set()
    for i, t in enumerate(raw.get("tenants", [])):
        dup("tenant", t["id"], tenants, ["tenants", i, "id"])

    for i, name in enumerate(raw.get("knobs", {}).get("patterns", [])):
        if name not in _pattern_names():
            errs.append((["knobs", "patterns", i], f"unknown pattern {name!r}"))

    last = 0
    nsis: set[str] = set()
    for i, e in enumerate(raw.get("timeline", [])):
        ep: list[Any] = ["timeline", i]
        if e["tick"] < last:
            errs.append((ep + ["tick"], f"tick {e['tick']} goes backwards from {last}"))
        last = max(last, e["tick"])
        kind = e["type"]
        if kind == "request":
            if e["nsi"] in nsis:
                errs.append((ep + ["nsi"], f"duplicate nsi {e['nsi']!r}"))
            nsis.add(e["nsi"])
            if tenants and e["tenant"] not in tenants:
                errs.append((ep + ["tenant"], f"unknown tenant {e['tenant']!r}"))
            req = e["requirements"]
            for k, dom in enumerate(req["coverage"]):
                if dom not in domains:
                    errs.append((ep + ["requirements", "coverage", k], f"unknown domain {dom!r}"))
            for k, end in enumerate(req["endpoints"]):
                if end["domain"] not in req["coverage"]:
                    errs.append((ep + ["requirements", "endpoints", k, "domain"], "endpoint domain outside coverage"))
                elif node_home.get(end["attachment"]) != end["domain"]:
                    errs.append((ep + ["requirements", "endpoints", k, "attachment"],
                                 f"unknown attachment {end['attachment']!r} in {end['domain']}"))
            try:
                ServiceRequirements.from_dict(req).validate()
            except ModelError as exc:
                errs.append((ep + ["requirements"], str(exc)))
            sched = e.get("schedule")
            if sched is not None and "end" in sched and sched["end"] <= sched["start"]:
                errs.append((ep + ["schedule", "end"], "end must be after start"))
        elif kind in ("modify", "decommission"):
            if e["nsi"] not in nsis:
                errs.append((ep + ["nsi"], f"unknown nsi {e['nsi']!r}"))
            if kind == "modify" and e["modification"]["domain"] not in domains:
                errs.append((ep + ["modification", "domain"], f"unknown domain {e['modification']['domain']!r}"))
        elif kind == "degrade":
            if e["target"] not in targets:
                errs.append((ep + ["target"], f"unknown slate or link {e['target']!r}"))
            else:
                is_slate = e["target"] in slate_ids
                allowed = {"vcpu", "memory_gb", "storage_gb"} if is_slate else {
                    "bandwidth_mbps", "latency_ms", "jitter_ms", "loss", "error_rate"}
                for key in sorted(set(e["values"]) - allowed):
                    errs.append((ep + ["values", key], f"{key} does not apply to {e['target']}"))
        elif kind == "inject":
            universe = slate_ids if e["fault"] == "slate_ack_failure" else set(domains)
            if e["target"] not in universe:
                errs.append((ep + ["target"], f"unknown target {e['target']!r} for {e['fault']}"))
    return errs


def from_dict(raw: Any, name: str = "<scenario>") -> Scenario:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        raise SchemaError([(list(e.absolute_path), e.message) for e in errors])
    sem = semantic_errors(raw)
    if sem:
        raise SchemaError(sem)
    k = raw.get("knobs", {})
    knobs = Knobs(
        seed=int(k.get("seed", 0)),
        max_ticks=int(k.get("max_ticks", 10_000)),
        exact_embedding=bool(k.get("exact_embedding", False)),
        greedy_decomposition=bool(k.get("greedy_decomposition", False)),
        latencies=dict(k.get("latencies", {})),
        patterns=tuple(k.get("patterns", ())),
    )
    timeline = [
        TimelineEntry(i, e["tick"], e["type"], {x: y for x, y in e.items() if x not in ("tick", "type")})
        for i, e in enumerate(raw.get("timeline", []))
    ]
    return Scenario(raw.get("name", name), raw, knobs, timeline)


def loads(text: str, name: str = "<scenario>") -> Scenario:
    if not text.strip():
        raise ParseError(f"{name}: empty file")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{name}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return from_dict(raw, name)


def load(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ParseError(f"{p}: no such file") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{p}: not UTF-8 text") from exc
    return loads(text, str(p))


def bundled_names() -> list[str]:
    root = resources.files("fedslice.scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_bundled(name: str) -> Scenario:
    text = resources.files("fedslice.scenarios").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return loads(text, name)
