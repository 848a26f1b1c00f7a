"""Small hand-checkable scenario documents shared by the test modules."""

from __future__ import annotations

import copy
from typing import Any

from fedslice.scenario import Scenario, from_dict

# criterion number -> (passed, one-line summary); filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def link(lid: str, a: str, b: str, bw: Any = 1000, lat: Any = 1, **qos: Any) -> dict[str, Any]:
    out = {"id": lid, "a": a, "b": b, "bandwidth_mbps": bw, "latency_ms": lat}
    out.update(qos)
    return out


def domain(did: str, border: str | None = "bw", vcpu: int = 8, slates_per_sub: int = 1,
           techs: tuple[str, ...] = ("ran", "core")) -> dict[str, Any]:
    """Access node, one nfvi node per technology, optional border; a line of links."""
    subs = [{"id": f"{did}.{t}", "technology": t} for t in techs]
    nodes = [{"id": f"{did}.ap", "subdomain": subs[0]["id"], "kind": "access"}]
    nodes += [{"id": f"{did}.n{t}", "subdomain": f"{did}.{t}"} for t in techs]
    chain = [f"{did}.ap"] + [f"{did}.n{t}" for t in techs]
    if border:
        nodes.append({"id": f"{did}.{border}", "subdomain": subs[-1]["id"], "kind": "border"})
        chain.append(f"{did}.{border}")
    slates = [
        {"id": f"{did}.{t}.s{i + 1}", "kind": "compute", "node": f"{did}.n{t}",
         "capacity": {"vcpu": vcpu, "memory_gb": 16, "storage_gb": 100}}
        for t in techs for i in range(slates_per_sub)
    ]
    links = [link(f"{did}.l{i + 1}", a, b) for i, (a, b) in enumerate(zip(chain, chain[1:]))]
    share = f"1/{len(techs)}"
    vnfs = [{"id": f"{t}-fn", "type": f"{t}-fn", "technology": t,
             "compute_share": share, "memory_share": share, "storage_share": share} for t in techs]
    return {
        "id": did,
        "subdomains": subs,
        "nodes": nodes,
        "slates": slates,
        "links": links,
        "catalog": {
            "service_types": {"embb": {t: [f"{t}-fn"] for t in techs}},
            "templates": [{"template_id": f"{did}-t1", "service_type": "embb", "vnfs": vnfs}],
        },
    }


def requirements(coverage: tuple[str, ...] = ("A", "B"), **kw: Any) -> dict[str, Any]:
    out = {
        "bandwidth_mbps": 100,
        "latency_budget_ms": 50,
        "jitter_budget_ms": 20,
        "max_error_rate": 0.01,
        "max_packet_loss": 0.01,
        "compute_vcpu": 4,
        "memory_gb": 4,
        "storage_gb": 20,
        "coverage": list(coverage),
        "endpoints": [{"domain": d, "attachment": f"{d}.ap"} for d in coverage],
        "service_type": "embb",
    }
    out.update(kw)
    return out


def two_domain_raw(timeline: list[dict[str, Any]] | None = None, **knobs: Any) -> dict[str, Any]:
    """Domains A and B joined by one WAN link; one request then a decommission."""
    raw = {
        "schema_version": "1.0",
        "name": "two-domains",
        "knobs": {"seed": 1, "max_ticks": 2000, **knobs},
        "domains": [domain("A"), domain("B")],
        "wan_links": [{"id": "W1", "domains": ["A", "B"], "borders": ["A.bw", "B.bw"],
                       "bandwidth_mbps": 500, "latency_ms": 5}],
        "trust": [["A", "B"]],
        "tenants": [{"id": "acme"}],
        "policy": {"default_rate": 2},
        "timeline": timeline if timeline is not None else [
            {"tick": 0, "type": "request", "nsi": "n1", "tenant": "acme", "requirements": requirements()},
            {"tick": 50, "type": "decommission", "nsi": "n1"},
        ],
    }
    return raw


def scenario(raw: dict[str, Any]) -> Scenario:
    return from_dict(copy.deepcopy(raw), raw.get("name", "test"))
