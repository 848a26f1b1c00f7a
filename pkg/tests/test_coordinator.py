from __future__ import annotations

import json
from fractions import Fraction

import pytest

from builders import requirements, scenario, two_domain_raw
from fedslice.coordinator import (
    CanonicalCapability,
    NoWanCapacity,
    QosUnreachable,
    UnknownDialect,
    UnknownNsi,
    compose,
    mediate,
    negotiate_interconnect,
    select_wan_link,
)
from fedslice.embedding import Metrics
from fedslice.model import State
from fedslice.federation import Federation
from fedslice.runner import external_messages, run
from fedslice.scenario import load_bundled


def wan(lid, lat, free, **kw):
    return {"id": lid, "latency_ms": lat, "jitter_ms": 0, "error_rate": 0.0, "loss": 0.0,
            "free_bandwidth_mbps": free, **kw}


def kinds(result, nsi=None):
    out = []
    for line in result.trace:
        ev = json.loads(line)
        if nsi is None or ev["payload"].get("nsi") == nsi:
            out.append(ev["kind"])
    return out


def parallel_raw(timeline=None):
    raw = two_domain_raw(timeline)
    raw["wan_links"] = [
        {"id": "W1", "domains": ["A", "B"], "borders": ["A.bw", "B.bw"], "bandwidth_mbps": 100, "latency_ms": 5},
        {"id": "W2", "domains": ["A", "B"], "borders": ["A.bw", "B.bw"], "bandwidth_mbps": 10, "latency_ms": 3},
    ]
    return raw


class TestMediate:
    def test_dialects_describing_same_box_agree(self):
        # 4 cores at 2 GHz against 4 vcpu at 2000 MHz; 8 GB as GB and as MB
        a = mediate({"dialect": "d1", "cores": 4, "ghz": 2, "ram_gb": 8})
        b = mediate({"dialect": "d2", "vcpu": 4, "clock_mhz": 2000, "memory_mb": 8192})
        assert a.vcpu_equiv == b.vcpu_equiv == 4
        assert a.memory_gb == b.memory_gb == 8

    def test_faster_clock_counts_more(self):
        assert mediate({"dialect": "d1", "cores": 4, "ghz": 3}).vcpu_equiv == 6
        assert mediate({"dialect": "d2", "vcpu": 2, "clock_mhz": 3000}).vcpu_equiv == 3

    def test_empty_descriptor_is_zero(self):
        assert mediate({}) == CanonicalCapability()

    @pytest.mark.parametrize("desc", [{"dialect": "legacy-x", "cpus": 4}, {"cores": 4}, {"dialect": 7}])
    def test_unregistered_dialect_raises(self, desc):
        with pytest.raises(UnknownDialect):
            mediate(desc)

    def test_capabilities_add_up(self):
        a = mediate({"dialect": "canonical", "vcpu": 2, "vnf_types": ["x"], "latency_range_ms": [1, 3]})
        b = mediate({"dialect": "canonical", "vcpu": 3, "vnf_types": ["y"], "latency_range_ms": [2, 5]})
        total = a + b
        assert total.vcpu_equiv == 5
        assert total.vnf_types == {"x", "y"}
        assert total.latency_range_ms == (1, 5)


class TestSelectWanLink:
    LINKS = [wan("slow", 5, 100), wan("fast", 3, 10)]

    def test_capacity_filter_before_latency(self):
        assert select_wan_link(self.LINKS, Fraction(50), None)["id"] == "slow"

    def test_lowest_latency_when_both_fit(self):
        assert select_wan_link(self.LINKS, Fraction(10), None)["id"] == "fast"

    def test_nothing_roomy_enough(self):
        with pytest.raises(NoWanCapacity):
            select_wan_link(self.LINKS, Fraction(500), None)

    def test_qos_need_unmet(self):
        need = Metrics(Fraction(2), Fraction(5), 1.0, 1.0)
        with pytest.raises(QosUnreachable):
            select_wan_link(self.LINKS, Fraction(10), need)

    def test_latency_tie_broken_by_id(self):
        links = [wan("b", 3, 100), wan("a", 3, 100)]
        assert select_wan_link(links, Fraction(1), None)["id"] == "a"


class TestNegotiate:
    def test_reserves_chosen_link_atomically(self):
        sub = scenario(parallel_raw()).build_substrate()
        trust = frozenset({frozenset({"A", "B"})})
        ic = negotiate_interconnect(sub, trust, ("A", "B"), Fraction(50), None, "n1")
        assert ic.link == "W1"
        assert ic.endpoints == ("A.bw", "B.bw")
        assert ic.state.value == "Reserved"
        [res] = sub.owned_by("n1")
        assert res.target == "W1" and dict(res.amounts) == {"bandwidth_mbps": 50}

    def test_untrusted_pair_reserves_nothing(self):
        sub = scenario(parallel_raw()).build_substrate()
        with pytest.raises(NoWanCapacity):
            negotiate_interconnect(sub, frozenset(), ("A", "B"), Fraction(5), None, "n1")
        assert sub.owned_by("n1") == []


class TestInstantiation:
    def test_all_phases_in_order_on_three_domains(self):
        result = run(load_bundled("figure2_three_domains"))
        assert result.conforms
        seq = kinds(result, "nsi-1")
        firsts = [seq.index(k) for k in ("MediationRequest", "InterconnectRequest", "SubRequest",
                                         "NssiOperational", "NsiOperational", "BrokerUpdate")]
        assert firsts == sorted(firsts)

    def test_single_domain_skips_interconnects(self):
        result = run(load_bundled("single_domain_degenerate"))
        seq = kinds(result)
        assert "InterconnectRequest" not in seq
        assert "NsiOperational" in seq

    def test_failed_domain_leaves_no_reservations(self):
        result = run(load_bundled("all_or_nothing"))
        fed = result.federation
        assert "NsiOperational" not in kinds(result, "doomed")
        assert "LateReject" in kinds(result, "doomed")
        assert fed.substrate.owned_by("doomed") == []

    def test_interconnect_prefers_lowest_latency_roomy_link(self):
        result = run(scenario(parallel_raw()))
        coord = result.federation.coordinators["n1"]
        assert coord.state is State.DECOMMISSIONED
        reserved = [json.loads(l) for l in result.trace if json.loads(l)["kind"] == "InterconnectReserved"]
        assert reserved[0]["payload"]["link"] == "W1"  # request needs 100, W2 only has 10


class TestMonitor:
    def degraded_run(self, target, values):
        timeline = [
            {"tick": 0, "type": "request", "nsi": "n1", "tenant": "acme", "requirements": requirements()},
            {"tick": 30, "type": "degrade", "target": target, "values": values},
            {"tick": 60, "type": "decommission", "nsi": "n1"},
        ]
        return run(scenario(two_domain_raw(timeline)))

    def test_wan_latency_past_budget_blames_interconnect(self):
        result = self.degraded_run("W1", {"latency_ms": 45})
        reports = result.federation.coordinators["n1"].health_log
        loci = {v["locus"] for r in reports for v in r.violations}
        assert "interconnect" in loci

    def test_slate_oversubscription_blames_its_domain(self):
        result = self.degraded_run("A.ran.s1", {"vcpu": "1/2"})
        reports = result.federation.coordinators["n1"].health_log
        first = next(r for r in reports if r.violations)
        assert first.violations[0] == {"locus": "domain", "domain": "A", "cause": "capacity", "target": "A.ran.s1"}

    def test_healthy_slice_reports_all_clear(self):
        fed = Federation(scenario(two_domain_raw()))
        for x in external_messages(fed.scenario):
            fed.kernel.post(x.sender, x.receiver, x.kind, x.payload, delay=x.tick)
        while fed.kernel.now < 20:
            fed.kernel.step()
        report = fed.coordinators["n1"].monitor()
        assert report.all_clear
        assert set(report.domains) == {"A", "B"} and set(report.interconnects) == {"A-B"}

    def test_end_to_end_is_composition_of_parts(self):
        result = self.degraded_run("W1", {"latency_ms": 6})
        rep = result.federation.coordinators["n1"].health_log[0]
        parts = [Metrics.from_dict(d["metrics"]) for d in rep.domains.values()]
        parts += [Metrics.from_dict(i["metrics"]) for i in rep.interconnects.values()]
        assert rep.end_to_end == compose(parts)


class TestDecommission:
    def test_operational_slice_leaves_no_reservations(self):
        result = run(load_bundled("figure2_three_domains"))
        fed = result.federation
        assert fed.substrate.owned_by("nsi-1") == []
        assert fed.coordinators["nsi-1"].state is State.DECOMMISSIONED

    def test_decommission_while_instantiating_releases_partials(self):
        timeline = [
            {"tick": 0, "type": "request", "nsi": "n1", "tenant": "acme", "requirements": requirements()},
            {"tick": 4, "type": "decommission", "nsi": "n1"},
        ]
        result = run(scenario(two_domain_raw(timeline)))
        assert result.federation.substrate.owned_by("n1") == []
        assert "NsiOperational" not in kinds(result, "n1")

    def test_second_decommission_raises(self):
        result = run(load_bundled("figure2_three_domains"))
        with pytest.raises(UnknownNsi):
            result.federation.coordinators["nsi-1"].decommission()
