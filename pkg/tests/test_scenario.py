from __future__ import annotations

import ast
import copy
import inspect
import json
import textwrap

import pytest

import fedslice.scenario as scenario_module
from builders import requirements, scenario, two_domain_raw
from fedslice.model import ServiceRequirements
from fedslice.runner import external_messages
from fedslice.scenario import (
    ParseError,
    SchemaError,
    bundled_names,
    from_dict,
    load,
    load_bundled,
    loads,
    schema,
)

BUNDLED = [
    "figure2_three_domains",
    "single_domain_degenerate",
    "scenario1_scale",
    "scenario2_remap",
    "admission_negotiation",
    "decommission_reclaim",
    "all_or_nothing",
]


def schema_properties():
    found = set()

    def walk(node):
        if isinstance(node, dict):
            for k, v in node.items():
                if k == "properties" and isinstance(v, dict):
                    found.update(v)
                walk(v)
        elif isinstance(node, list):
            for x in node:
                walk(x)

    walk(schema())
    return found


def keys_read(obj):
    """String keys used as `x["k"]` or `x.get("k")` in the source of obj."""
    tree = ast.parse(textwrap.dedent(inspect.getsource(obj)))
    out = set()
    for n in ast.walk(tree):
        if isinstance(n, ast.Subscript) and isinstance(n.slice, ast.Constant) and isinstance(n.slice.value, str):
            out.add(n.slice.value)
        if (isinstance(n, ast.Call) and isinstance(n.func, ast.Attribute) and n.func.attr == "get"
                and n.args and isinstance(n.args[0], ast.Constant) and isinstance(n.args[0].value, str)):
            out.add(n.args[0].value)
    return out


def schema_errors(raw):
    with pytest.raises(SchemaError) as info:
        from_dict(raw)
    return {f"/{'/'.join(map(str, p))}": m for p, m in info.value.errors}


class TestLoad:
    def test_three_domain_topology(self):
        scn = load_bundled("figure2_three_domains")
        assert scn.domain_ids == ["A", "B", "C"]
        assert len(scn.raw["wan_links"]) == 2

    def test_every_bundled_scenario_is_listed_and_loads(self):
        assert set(BUNDLED) <= set(bundled_names())
        for name in BUNDLED:
            assert load_bundled(name).name == name

    def test_load_from_file(self, tmp_path):
        f = tmp_path / "s.json"
        f.write_text(json.dumps(two_domain_raw()))
        assert load(f).domain_ids == ["A", "B"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load(tmp_path / "nope.json")

    @pytest.mark.parametrize("text", ["", "   \n", "{", "[1,"])
    def test_unparseable_text(self, text):
        with pytest.raises(ParseError):
            loads(text)

    def test_parse_error_has_location(self):
        with pytest.raises(ParseError, match="line 2"):
            loads('{\n  "a": }')

    def test_knobs_default(self):
        raw = two_domain_raw()
        del raw["knobs"]
        k = from_dict(raw).knobs
        assert (k.seed, k.exact_embedding, k.patterns) == (0, False, ())

    def test_round_trip_through_json(self):
        scn = load_bundled("scenario2_remap")
        assert loads(scn.to_json(), scn.name).raw == scn.raw


class TestValidation:
    def test_dangling_slate_node_names_its_path(self):
        raw = two_domain_raw()
        raw["domains"][1]["slates"][0]["node"] = "B.ghost"
        errors = schema_errors(raw)
        assert "/domains/1/slates/0/node" in errors

    def test_missing_required_field(self):
        raw = two_domain_raw()
        del raw["domains"][0]["catalog"]
        assert "/domains/0" in schema_errors(raw)

    def test_wrong_type(self):
        raw = two_domain_raw()
        raw["wan_links"][0]["latency_ms"] = "fast"
        assert any(p.startswith("/wan_links/0") for p in schema_errors(raw))

    def test_backwards_ticks(self):
        raw = two_domain_raw()
        raw["timeline"].reverse()
        assert any(p.startswith("/timeline") for p in schema_errors(raw))

    def test_unknown_trust_domain(self):
        raw = two_domain_raw()
        raw["trust"].append(["A", "Z"])
        assert any(p.startswith("/trust") for p in schema_errors(raw))

    def test_duplicate_slate_id(self):
        raw = two_domain_raw()
        raw["domains"][0]["slates"].append(copy.deepcopy(raw["domains"][0]["slates"][0]))
        assert any("slates" in p for p in schema_errors(raw))

    def test_request_for_unknown_tenant(self):
        raw = two_domain_raw()
        raw["timeline"][0]["tenant"] = "ghost"
        assert any(p.startswith("/timeline/0") for p in schema_errors(raw))

    def test_unknown_pattern_name(self):
        raw = two_domain_raw(patterns=["figure99"])
        assert any(p.startswith("/knobs") for p in schema_errors(raw))

    def test_error_message_lists_every_violation(self):
        raw = two_domain_raw()
        raw["domains"][1]["slates"][0]["node"] = "B.ghost"
        raw["trust"].append(["A", "Z"])
        with pytest.raises(SchemaError) as info:
            from_dict(raw)
        assert len(info.value.errors) >= 2
        assert str(info.value).count("; ") >= 1


class TestBuild:
    def test_substrate_matches_document(self):
        scn = scenario(two_domain_raw())
        sub = scn.build_substrate()
        assert set(sub.domains) == {"A", "B"}
        assert len(sub.slates) == 4
        assert "W1" in sub.links

    def test_policy_rates_are_exact(self):
        raw = two_domain_raw()
        raw["policy"]["rates"] = {"embb": "3/2"}
        pol = scenario(raw).broker_policy()
        assert pol.rate("embb") == pytest.approx(1.5) and str(pol.rate("embb")) == "3/2"
        assert pol.rate("other") == 2

    def test_timeline_becomes_external_messages(self):
        msgs = external_messages(load_bundled("scenario1_scale"))
        assert [m.kind.value for m in msgs] == ["SliceRequest", "ModifyRequest", "Degrade", "DecommissionCmd"]
        assert [m.tick for m in msgs] == sorted(m.tick for m in msgs)


def test_every_field_read_is_in_the_schema():
    props = schema_properties()
    read = keys_read(scenario_module) | keys_read(external_messages) | keys_read(ServiceRequirements.from_dict)
    assert read - props == set()
