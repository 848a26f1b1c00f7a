from __future__ import annotations

import json

import pytest

from builders import requirements, scenario, two_domain_raw
from fedslice.kernel import TickBudgetExhausted, assert_sequence, load_pattern
from fedslice.runner import (
    check,
    check_conservation,
    check_isolation,
    check_reclamation,
    external_inputs,
    external_messages,
    reduce_metrics,
    replay,
    run,
)
from fedslice.scenario import load_bundled

BUNDLED = [
    "figure2_three_domains",
    "single_domain_degenerate",
    "scenario1_scale",
    "scenario2_remap",
    "admission_negotiation",
    "decommission_reclaim",
    "all_or_nothing",
]


def events(trace):
    return [json.loads(l) for l in trace]


def relined(evs):
    return [json.dumps(e, separators=(",", ":"), sort_keys=True) for e in evs]


class TestRun:
    def test_happy_path_instantiates_everything(self):
        m = run(load_bundled("figure2_three_domains")).metrics
        assert m["instantiation_success_rate"] == "1"
        assert m["admission_rate"] == "1"

    def test_degradation_shows_up_in_escalation_counts(self):
        m = run(load_bundled("scenario1_scale")).metrics
        assert sum(v for k, v in m["escalations"].items() if k != "exhausted") > 0
        assert m["sla_violation_ticks"]["nsi-1"] > 0

    def test_remap_counts_at_level_four(self):
        m = run(load_bundled("scenario2_remap")).metrics
        assert m["escalations"]["4"] == 1

    def test_rejections_lower_admission_rate(self):
        m = run(load_bundled("admission_negotiation")).metrics
        assert m["admitted"] < m["requests"]

    def test_tick_budget(self):
        with pytest.raises(TickBudgetExhausted):
            run(scenario(two_domain_raw(max_ticks=10)))

    def test_same_seed_same_bytes(self):
        scn = load_bundled("scenario2_remap")
        assert run(scn, seed=7).trace_text == run(scn, seed=7).trace_text

    def test_trace_lines_are_canonical_json(self):
        for line in run(load_bundled("figure2_three_domains")).trace:
            ev = json.loads(line)
            assert set(ev) == {"seq", "tick", "msg", "sender", "receiver", "kind", "payload", "transitions", "ledger"}
            assert json.dumps(ev, separators=(",", ":")) == line


class TestReplay:
    @pytest.mark.parametrize("name", BUNDLED)
    def test_replay_reproduces_trace(self, name):
        scn = load_bundled(name)
        first = run(scn)
        assert replay(scn, first.trace).trace == first.trace

    def test_inputs_recovered_from_trace_equal_timeline(self):
        scn = load_bundled("scenario1_scale")
        assert external_inputs(run(scn).trace) == external_messages(scn)


class TestMetrics:
    @pytest.mark.parametrize("name", BUNDLED)
    def test_reducer_matches_live_metrics(self, name):
        result = run(load_bundled(name))
        assert reduce_metrics(result.trace, result.scenario) == result.metrics

    def test_billing_charges_operational_ticks(self):
        # rate 2, request at 0, decommission at 50
        result = run(scenario(two_domain_raw()))
        evs = events(result.trace)
        up = next(e["tick"] for e in evs if e["kind"] == "BrokerUpdate" and e["payload"]["status"] == "operational")
        down = next(e["tick"] for e in evs if e["kind"] == "BrokerUpdate" and e["payload"]["status"] == "decommissioned")
        assert result.metrics["billing"]["n1"] == str(2 * (down - up))


class TestCheck:
    @pytest.mark.parametrize("name", BUNDLED)
    def test_bundled_scenarios_are_all_green(self, name):
        verdicts = check(run(load_bundled(name)))
        assert all(v.ok for v in verdicts.values()), {k: v.detail for k, v in verdicts.items() if not v.ok}

    def test_swapped_events_break_conformance(self):
        trace = run(load_bundled("figure2_three_domains")).trace
        evs = events(trace)
        i = next(k for k, e in enumerate(evs) if e["kind"] == "AdmitAck")
        j = next(k for k, e in enumerate(evs) if e["kind"] == "NsiOperational")
        evs[i], evs[j] = evs[j], evs[i]
        assert assert_sequence(trace, load_pattern("figure4")).ok
        assert not assert_sequence(relined(evs), load_pattern("figure4")).ok

    def test_inflated_allocation_breaks_conservation(self):
        result = run(scenario(two_domain_raw()))
        evs = events(result.trace)
        for e in evs:
            for op in e["ledger"]:
                if op[0] == "allocate" and "vcpu" in op[5]:
                    op[5]["vcpu"] = "999"
                    break
            else:
                continue
            break
        assert check_conservation(result.trace, result.scenario).ok
        assert not check_conservation(relined(evs), result.scenario).ok

    def test_dropped_release_breaks_reclamation(self):
        result = run(scenario(two_domain_raw()))
        evs = events(result.trace)
        for e in evs:
            e["ledger"] = [op for op in e["ledger"] if op[0] != "release"]
        assert check_reclamation(result.trace).ok
        assert not check_reclamation(relined(evs)).ok

    def test_second_tenant_on_dedicated_slate_breaks_isolation(self):
        raw = two_domain_raw()
        for d in raw["domains"]:
            for s in d["slates"]:
                s["dedicated"] = True
        result = run(scenario(raw))
        evs = events(result.trace)
        for e in evs:
            grab = next((op for op in e["ledger"] if op[0] == "allocate" and "vcpu" in op[5]), None)
            if grab is not None:
                e["ledger"].append(["allocate", "r-x", grab[2], "intruder/x", "intruder", grab[5]])
                break
        assert check_isolation(result.trace, result.scenario).ok
        assert not check_isolation(relined(evs), result.scenario).ok
