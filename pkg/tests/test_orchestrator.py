from __future__ import annotations

import json
from fractions import Fraction

import pytest

from builders import requirements, scenario, two_domain_raw
from fedslice.embedding import (
    VIA_VIM,
    VIA_VNFM,
    Budget,
    EmbeddingInfeasible,
    SliceTemplate,
    SubRequest,
    TemplateVnf,
)
from fedslice.federation import Federation
from fedslice.kernel import Kernel
from fedslice.model import LogicalLinkSpec, SliceResourceGraph, VnfSpec
from fedslice.orchestrator import (
    Catalog,
    DomainOrchestrator,
    NoMatchingTemplate,
    RequirementSet,
    UnknownNssi,
    UnsupportedServiceType,
)
from fedslice.runner import external_messages, run
from fedslice.scenario import load_bundled

TINY_CORE = {"id": "A.core.s1", "kind": "compute", "node": "A.ncore",
             "capacity": {"vcpu": 1, "memory_gb": 1, "storage_gb": 1}}
ROOMY = Budget(Fraction(100), Fraction(100), 0.5, 0.5)


def slate(sid, node, vcpu, mem=16, storage=100):
    return {"id": sid, "kind": "compute", "node": node,
            "capacity": {"vcpu": vcpu, "memory_gb": mem, "storage_gb": storage}}


def one_domain_raw(slates, alt=False):
    timeline = [
        {"tick": 0, "type": "request", "nsi": "n1", "tenant": "acme",
         "requirements": requirements(coverage=("A",), compute_vcpu=2)},
        {"tick": 100, "type": "decommission", "nsi": "n1"},
    ]
    raw = two_domain_raw(timeline)
    a = raw["domains"][0]
    a["slates"] = slates
    if alt:
        for v in a["catalog"]["templates"][0]["vnfs"]:
            if v["technology"] == "ran":
                v["alt_technologies"] = ["core"]
    return raw


def live(raw, until=20):
    fed = Federation(scenario(raw))
    for x in external_messages(fed.scenario):
        fed.kernel.post(x.sender, x.receiver, x.kind, x.payload, delay=x.tick)
    while fed.kernel.now < until:
        fed.kernel.step()
    return fed


def orchestrator(raw, domain="A"):
    scn = scenario(raw)
    return DomainOrchestrator(Kernel(), scn.build_substrate(), domain, scn.catalogs()[domain])


def sub(domain="A", service_type="embb", vcpu=2):
    return SubRequest(domain, service_type, Fraction(10), Fraction(vcpu), Fraction(2), Fraction(10),
                      ROOMY, (f"{domain}.ap",), (f"{domain}.ap",))


def pair_graph(a=(3, 1), b=(2, 3)):
    vnfs = (VnfSpec("a", "x", Fraction(a[0]), Fraction(a[1]), Fraction(1), technology="ran"),
            VnfSpec("b", "y", Fraction(b[0]), Fraction(b[1]), Fraction(1), technology="ran"))
    return SliceResourceGraph(vnfs, (LogicalLinkSpec("L0", "a", "b", Fraction(10)),))


class TestSmfAndTemplate:
    def test_maps_service_type_to_vnf_types_per_technology(self):
        orch = orchestrator(two_domain_raw())
        req, feedback = orch.smf_map(sub())
        assert req.per_technology == {"core": ("core-fn",), "ran": ("ran-fn",)}
        assert set(feedback) == {"free", "latency_range_ms", "vnf_types"}

    def test_mapping_is_deterministic(self):
        orch = orchestrator(two_domain_raw())
        assert orch.smf_map(sub())[0] == orch.smf_map(sub())[0]

    def test_unknown_service_type(self):
        with pytest.raises(UnsupportedServiceType):
            orchestrator(two_domain_raw()).smf_map(sub(service_type="urllc"))

    def test_lowest_template_id_wins(self):
        orch = orchestrator(two_domain_raw())
        t = orch.catalog.templates[0]
        orch.catalog = Catalog(orch.catalog.service_types,
                               (SliceTemplate("z-last", t.service_type, t.vnfs), t))
        req, _ = orch.smf_map(sub())
        assert orch.lcm_select_template(req).template_id == "A-t1"

    def test_no_template_covers_requirement(self):
        orch = orchestrator(two_domain_raw())
        with pytest.raises(NoMatchingTemplate):
            orch.lcm_select_template(RequirementSet("embb", {"ran": ("mystery-fn",)}))


class TestEmbed:
    def test_ffd_splits_two_threes_across_fours(self):
        raw = one_domain_raw([slate("A.ran.s1", "A.nran", 4), slate("A.ran.s2", "A.nran", 4), TINY_CORE])
        orch = orchestrator(raw)
        emb, _ = orch.lcm_embed(pair_graph((3, 1), (3, 1)), ROOMY, "n1", "o1")
        assert sorted(emb.placements.values()) == ["A.ran.s1", "A.ran.s2"]
        assert set(emb.tags.values()) == {VIA_VNFM}

    def test_exact_backend_finds_what_ffd_misses(self):
        # FFD puts a on s1 first and then b fits nowhere; a on s2, b on s1 works
        slates = [slate("A.ran.s1", "A.nran", 5, mem=3), slate("A.ran.s2", "A.nran", 3, mem=1), TINY_CORE]
        orch = orchestrator(one_domain_raw(slates))
        with pytest.raises(EmbeddingInfeasible) as info:
            orch.lcm_embed(pair_graph(), ROOMY, "n1", "o1")
        assert info.value.cause == "capacity"
        orch.exact = True
        emb, _ = orch.lcm_embed(pair_graph(), ROOMY, "n1", "o1")
        assert emb.placements == {"a": "A.ran.s2", "b": "A.ran.s1"}

    def test_failed_embedding_leaves_ledger_untouched(self):
        orch = orchestrator(two_domain_raw())
        before = dict(orch.substrate.reservations)
        with pytest.raises(EmbeddingInfeasible):
            orch.lcm_embed(pair_graph((50, 1), (1, 1)), ROOMY, "n1", "o1")
        assert orch.substrate.reservations == before

    def test_tight_latency_budget_is_a_qos_failure(self):
        orch = orchestrator(two_domain_raw())
        t = orch.catalog.templates[0]
        graph = t.instantiate(sub())
        tight = Budget(Fraction(1, 2), Fraction(100), 0.5, 0.5)
        with pytest.raises(EmbeddingInfeasible) as info:
            orch.lcm_embed(graph, tight, "n1", "o1")
        assert info.value.cause == "qos"

    def test_chain_follows_graph_order(self):
        orch = orchestrator(two_domain_raw())
        graph = orch.catalog.templates[0].instantiate(sub())
        emb, _ = orch.lcm_embed(graph, ROOMY, "n1", "o1")
        chain = orch.sdn_chain(graph, emb)
        assert [(c["src"], c["dst"]) for c in chain] == [("A.ap", "ran-fn"), ("ran-fn", "core-fn")]
        for c in chain:
            assert all(h in orch.substrate.links for h in c["hops"])


class TestLocalModify:
    def modify(self, fed, delta):
        orch = fed.orchestrators["A"]
        nssi = fed.coordinators["n1"].nssi["A"]
        return orch, nssi, orch.local_modify(nssi, {"type": "scale", "vnf": "ran-fn", "delta": {"vcpu": delta}})

    def test_headroom_on_same_slate_is_level_zero(self):
        fed = live(one_domain_raw([slate("A.ran.s1", "A.nran", 8), slate("A.core.s1", "A.ncore", 8)]))
        orch, nssi, out = self.modify(fed, 1)
        assert (out.resolved, out.level) == (True, 0)
        plan = orch.mano_plan(orch.nssis[nssi].graph, orch.nssis[nssi].embedding)
        assert {p["vnf"]: p["path"] for p in plan}["ran-fn"] == VIA_VIM

    def test_sibling_slate_is_level_one_and_old_reservation_freed(self):
        slates = [slate("A.ran.s1", "A.nran", 2), slate("A.ran.s2", "A.nran", 8), slate("A.core.s1", "A.ncore", 8)]
        fed = live(one_domain_raw(slates))
        orch, nssi, out = self.modify(fed, 3)
        assert (out.resolved, out.level) == (True, 1)
        assert orch.nssis[nssi].embedding.placements["ran-fn"] == "A.ran.s2"
        assert fed.substrate.allocated("A.ran.s1").get("vcpu", 0) == 0
        assert fed.substrate.allocated("A.ran.s2")["vcpu"] == 4

    def test_other_technology_is_level_two(self):
        slates = [slate("A.ran.s1", "A.nran", 2), slate("A.core.s1", "A.ncore", 8)]
        fed = live(one_domain_raw(slates, alt=True))
        orch, nssi, out = self.modify(fed, 3)
        assert (out.resolved, out.level) == (True, 2)
        assert orch.nssis[nssi].embedding.placements["ran-fn"] == "A.core.s1"

    def test_nowhere_to_go_cannot_resolve_and_keeps_old_state(self):
        slates = [slate("A.ran.s1", "A.nran", 2), slate("A.core.s1", "A.ncore", 8)]
        fed = live(one_domain_raw(slates))
        before = dict(fed.substrate.reservations)
        orch, nssi, out = self.modify(fed, 3)
        assert (out.resolved, out.level) == (False, None)
        assert fed.substrate.reservations == before

    def test_reserved_total_matches_new_demand(self):
        fed = live(one_domain_raw([slate("A.ran.s1", "A.nran", 8), slate("A.core.s1", "A.ncore", 8)]))
        self.modify(fed, 2)
        held = sum((dict(r.amounts).get("vcpu", 0) for r in fed.substrate.owned_by("n1")), Fraction(0))
        assert held == 2 + 2

    def test_unknown_nssi(self):
        orch = orchestrator(two_domain_raw())
        with pytest.raises(UnknownNssi):
            orch.local_modify("nope", {"type": "scale", "vnf": "ran-fn"})


class TestMano:
    def test_injected_slate_failure_fails_whole_nssi(self):
        result = run(load_bundled("all_or_nothing"))
        kinds = [json.loads(l)["kind"] for l in result.trace if json.loads(l)["payload"].get("nsi") == "doomed"]
        assert "NssiFailed" in kinds
        assert result.federation.substrate.owned_by("doomed") == []

    def test_fresh_instantiation_goes_through_vnfm(self):
        result = run(scenario(two_domain_raw()))
        paths = {p["path"] for l in result.trace if json.loads(l)["kind"] == "SlateConfig"
                 for p in json.loads(l)["payload"]["placements"]}
        assert paths == {VIA_VNFM}
