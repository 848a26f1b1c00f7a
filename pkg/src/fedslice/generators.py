"""Seeded random scenarios small enough for the brute-force oracle."""

from __future__ import annotations

import random
from typing import Any

from .scenario import Scenario, from_dict

TECHS = ("ran", "transport", "core", "cloud")
MAX_VNFS = 4
DIALECT_SAMPLES = (
    {"dialect": "canonical", "vcpu": 4, "memory_gb": 8},
    {"dialect": "d1", "cores": 4, "ram_gb": 8},
    {"dialect": "d2", "vcpu": 4, "memory_mb": 8192},
)


def _link(rng: random.Random, lid: str, a: str, b: str) -> dict[str, Any]:
    return {
        "id": lid,
        "a": a,
        "b": b,
        "bandwidth_mbps": rng.choice([50, 100, 200, 400]),
        "latency_ms": rng.randint(1, 4),
        "jitter_ms": rng.choice(["0", "1/2", "1"]),
        "loss": rng.choice([0.0, 0.0001, 0.001]),
        "error_rate": rng.choice([0.0, 0.00001, 0.0001]),
    }


def _domain(
    rng: random.Random, did: str, borders: list[str], slate_room: int, vnf_room: int, odd_dialects: bool
) -> dict[str, Any]:
    techs = rng.sample(TECHS, rng.randint(1, 2))
    subs = [{"id": f"{did}.{t}", "technology": t} for t in techs]
    nodes = [{"id": f"{did}.ap", "subdomain": subs[0]["id"], "kind": "access"}]
    nodes += [{"id": f"{did}.n{t}", "subdomain": f"{did}.{t}", "kind": "nfvi"} for t in techs]
    nodes += [{"id": b, "subdomain": subs[-1]["id"], "kind": "border"} for b in borders]
    slates = []
    for t in techs:
        count = 2 if slate_room > len(techs) and rng.random() < 0.4 else 1
        slate_room -= count
        for i in range(count):
            s: dict[str, Any] = {
                "id": f"{did}.{t}.s{i + 1}",
                "kind": "compute",
                "node": f"{did}.n{t}",
                "capacity": {
                    "vcpu": rng.randint(2, 8),
                    "memory_gb": rng.randint(2, 16),
                    "storage_gb": rng.randint(10, 100),
                },
            }
            if rng.random() < 0.2:
                s["dedicated"] = True
            roll = rng.random()
            if roll < 0.2:
                s["vendor"] = dict(rng.choice(DIALECT_SAMPLES))
            elif odd_dialects and roll < 0.25:
                s["vendor"] = {"dialect": "legacy-x", "cpus": 4}
            slates.append(s)
    links = []
    chain = [f"{did}.ap"] + [f"{did}.n{t}" for t in techs]
    for a, b in zip(chain, chain[1:]):
        links.append(_link(rng, f"{did}.l{len(links) + 1}", a, b))
        if rng.random() < 0.3:
            links.append(_link(rng, f"{did}.l{len(links) + 1}", a, b))
    for b in borders:
        links.append(_link(rng, f"{did}.l{len(links) + 1}", chain[-1], b))
    vnf_count = rng.randint(1, max(1, min(2, vnf_room)))
    vnfs = []
    for i in range(vnf_count):
        tech = rng.choice(techs)
        v: dict[str, Any] = {
            "id": f"f{i + 1}",
            "type": f"{tech}-fn",
            "technology": tech,
            "compute_share": f"1/{vnf_count}",
            "memory_share": f"1/{vnf_count}",
            "storage_share": f"1/{vnf_count}",
        }
        others = [t for t in techs if t != tech]
        if others and rng.random() < 0.3:
            v["alt_technologies"] = others
        vnfs.append(v)
    per_tech: dict[str, list[str]] = {}
    for v in vnfs:
        per_tech.setdefault(v["technology"], []).append(v["type"])
    return {
        "id": did,
        "subdomains": subs,
        "nodes": nodes,
        "slates": slates,
        "links": links,
        "catalog": {
            "service_types": {"embb": per_tech},
            "templates": [{"template_id": f"{did}-t1", "service_type": "embb", "vnfs": vnfs}],
        },
    }


def random_raw(
    seed: int,
    max_domains: int = 4,
    episodes: bool = False,
    odd_dialects: bool = True,
    spacing: int = 5,
) -> dict[str, Any]:
    """A schema-valid scenario document.

    Requests arrive `spacing` ticks apart. With `episodes` a scale and a QoS degradation
    hit the first request before the second one arrives when spacing allows."""
    rng = random.Random(seed)
    n = rng.randint(1, max_domains)
    ids = [chr(ord("A") + i) for i in range(n)]
    edges: list[tuple[str, str]] = []
    for i in range(1, n):
        edges.append((ids[rng.randrange(i)], ids[i]))
    if n >= 3 and rng.random() < 0.5:
        a, b = rng.sample(ids, 2)
        if (a, b) not in edges and (b, a) not in edges:
            edges.append((a, b))
    borders: dict[str, list[str]] = {d: [] for d in ids}
    wans = []
    for k, (a, b) in enumerate(edges):
        ba, bb = f"{a}.b{k}", f"{b}.b{k}"
        borders[a].append(ba)
        borders[b].append(bb)
        wans.append({
            "id": f"W{k}",
            "domains": [a, b],
            "borders": [ba, bb],
            "bandwidth_mbps": rng.choice([100, 200, 500]),
            "latency_ms": rng.randint(2, 10),
            "jitter_ms": rng.randint(0, 2),
            "loss": rng.choice([0.0, 0.0005]),
            "error_rate": rng.choice([0.0, 0.00005]),
        })
    room = 12 // n
    domains: list[dict[str, Any]] = []
    for i, d in enumerate(ids):
        used = sum(len(x["catalog"]["templates"][0]["vnfs"]) for x in domains)
        vnf_room = MAX_VNFS - used - (n - i - 1)
        domains.append(_domain(rng, d, borders[d], room, vnf_room, odd_dialects))
    trust = [[a, b] for a, b in edges if rng.random() < 0.9]

    def requirements() -> dict[str, Any]:
        coverage = sorted(rng.sample(ids, rng.randint(1, min(2, n))))
        return {
            "bandwidth_mbps": rng.choice([10, 50, 100, 200]),
            "latency_budget_ms": rng.randint(15, 80),
            "jitter_budget_ms": rng.randint(5, 30),
            "max_error_rate": rng.choice([0.001, 0.01]),
            "max_packet_loss": rng.choice([0.005, 0.05]),
            "compute_vcpu": rng.randint(1, 10),
            "memory_gb": rng.randint(1, 8),
            "storage_gb": rng.randint(5, 60),
            "coverage": coverage,
            "endpoints": [{"domain": d, "attachment": f"{d}.ap"} for d in coverage],
            "isolation": "dedicated" if rng.random() < 0.2 else "shared",
            "service_type": "embb",
        }

    timeline: list[dict[str, Any]] = []
    nsis = [f"s{i + 1}" for i in range(rng.randint(1, 3))]
    for i, nsi in enumerate(nsis):
        entry: dict[str, Any] = {"tick": spacing * i, "type": "request", "nsi": nsi, "tenant": "t0",
                                 "requirements": requirements()}
        if rng.random() < 0.3:
            entry["accept_counter"] = True
        timeline.append(entry)
    if episodes:
        first = timeline[0]["requirements"]
        d = rng.choice(first["coverage"])
        vnf = rng.choice(next(x for x in domains if x["id"] == d)["catalog"]["templates"][0]["vnfs"])["id"]
        timeline.append({"tick": 40, "type": "modify", "nsi": nsis[0],
                         "modification": {"type": "scale", "domain": d, "vnf": vnf,
                                          "delta": {"vcpu": rng.randint(1, 4)}}})
        links = [l for x in domains for l in x["links"]]
        target = rng.choice(links)
        timeline.append({"tick": 70, "type": "degrade", "target": target["id"],
                         "values": {"latency_ms": rng.randint(5, 40)}})
    timeline.sort(key=lambda e: e["tick"])
    end = max(200, spacing * len(nsis) + 100)
    for nsi in nsis:
        timeline.append({"tick": end, "type": "decommission", "nsi": nsi})
    return {
        "schema_version": "1.0",
        "name": f"random-{seed}",
        "knobs": {"seed": seed, "max_ticks": 5000},
        "domains": domains,
        "wan_links": wans,
        "trust": trust,
        "tenants": [{"id": "t0"}],
        "policy": {"default_rate": 1},
        "timeline": timeline,
    }


def random_scenario(seed: int, exact: bool = False, **kwargs: Any) -> Scenario:
    raw = random_raw(seed, **kwargs)
    raw["knobs"]["exact_embedding"] = exact
    return from_dict(raw, raw["name"])
