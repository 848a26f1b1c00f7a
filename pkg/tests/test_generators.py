from __future__ import annotations

import json

from hypothesis import given, settings
from hypothesis import strategies as st

from fedslice.generators import MAX_VNFS, random_raw, random_scenario
from fedslice.oracle import MAX_DOMAINS, MAX_SLATES
from fedslice.scenario import from_dict

seeds = st.integers(0, 10_000)


class TestRandomInstances:
    @given(seeds)
    def test_schema_valid(self, seed):
        raw = random_raw(seed, episodes=True)
        from_dict(raw, raw["name"])

    @given(seeds)
    def test_within_oracle_limits(self, seed):
        raw = random_raw(seed)
        vnfs = sum(len(t["vnfs"]) for d in raw["domains"] for t in d["catalog"]["templates"])
        slates = sum(len(d["slates"]) for d in raw["domains"])
        assert len(raw["domains"]) <= min(4, MAX_DOMAINS)
        assert vnfs <= MAX_VNFS
        assert slates <= MAX_SLATES

    @given(seeds)
    def test_same_seed_same_document(self, seed):
        assert json.dumps(random_raw(seed)) == json.dumps(random_raw(seed))

    @given(seeds)
    def test_every_request_is_decommissioned(self, seed):
        tl = random_raw(seed)["timeline"]
        asked = {e["nsi"] for e in tl if e["type"] == "request"}
        done = {e["nsi"] for e in tl if e["type"] == "decommission"}
        assert asked == done

    @given(seeds, st.sampled_from([5, 100]))
    def test_spacing_sets_request_ticks(self, seed, spacing):
        ticks = [e["tick"] for e in random_raw(seed, spacing=spacing)["timeline"] if e["type"] == "request"]
        assert ticks == [spacing * i for i in range(len(ticks))]

    @given(seeds)
    def test_episodes_target_first_request(self, seed):
        tl = random_raw(seed, episodes=True)["timeline"]
        first = tl[0]
        mod = next(e for e in tl if e["type"] == "modify")
        assert mod["nsi"] == first["nsi"]
        assert mod["modification"]["domain"] in first["requirements"]["coverage"]
        assert any(e["type"] == "degrade" for e in tl)

    @settings(max_examples=20)
    @given(seeds)
    def test_odd_dialects_can_be_switched_off(self, seed):
        raw = random_raw(seed, odd_dialects=False)
        dialects = {s.get("vendor", {}).get("dialect") for d in raw["domains"] for s in d["slates"]}
        assert "legacy-x" not in dialects

    def test_exact_flag_reaches_knobs(self):
        assert random_scenario(3, exact=True).knobs.exact_embedding
        assert not random_scenario(3).knobs.exact_embedding
