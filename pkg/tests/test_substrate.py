from __future__ import annotations

import json
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedslice.substrate import (
    DoubleRelease,
    InsufficientCapacity,
    IsolationViolation,
    SubstrateError,
    UnknownId,
    UnknownReservation,
)

from builders import domain, scenario, two_domain_raw


def fresh(dedicated: bool = False):
    raw = two_domain_raw()
    if dedicated:
        raw["domains"][0]["slates"][0]["dedicated"] = True
    return scenario(raw).build_substrate()


class TestAllocate:
    def test_boundary(self):
        sub = fresh()
        sub.allocate("A.ran.s1", "n1/A", {"vcpu": 8})
        with pytest.raises(InsufficientCapacity) as info:
            sub.allocate("A.ran.s1", "n2/A", {"vcpu": 1})
        assert info.value.component == "vcpu"

    def test_release_restores_exactly(self):
        sub = fresh()
        before = sub.free("A.ran.s1")
        rid = sub.allocate("A.ran.s1", "n1/A", {"vcpu": Fraction(7, 3), "memory_gb": "1/7"})
        assert sub.free("A.ran.s1") != before
        sub.release(rid)
        assert sub.free("A.ran.s1") == before

    def test_atomic_failure(self):
        sub = fresh()
        with pytest.raises(InsufficientCapacity):
            sub.allocate("A.ran.s1", "n1/A", {"vcpu": 1, "memory_gb": 17})
        assert sub.reservations_on("A.ran.s1") == []

    def test_unknown_target(self):
        with pytest.raises(UnknownId):
            fresh().allocate("nope", "n1/A", {"vcpu": 1})

    @pytest.mark.parametrize("amounts", [{}, {"vcpu": 0}, {"vcpu": -1}, {"bandwidth_mbps": 1}])
    def test_bad_amounts(self, amounts):
        with pytest.raises(SubstrateError):
            fresh().allocate("A.ran.s1", "n1/A", amounts)

    def test_link_bandwidth(self):
        sub = fresh()
        sub.allocate("W1", "n1/ucrm", {"bandwidth_mbps": 500})
        with pytest.raises(InsufficientCapacity):
            sub.allocate("W1", "n2/ucrm", {"bandwidth_mbps": 1})


class TestRelease:
    def test_unknown(self):
        with pytest.raises(UnknownReservation):
            fresh().release("r999")

    def test_double(self):
        sub = fresh()
        rid = sub.allocate("A.ran.s1", "n1/A", {"vcpu": 1})
        sub.release(rid)
        with pytest.raises(DoubleRelease):
            sub.release(rid)

    def test_listeners_see_both_sides(self):
        sub = fresh()
        seen = []
        sub.listeners.append(lambda op: seen.append((op.op, op.reservation.target)))
        sub.release(sub.allocate("A.ran.s1", "n1/A", {"vcpu": 1}))
        assert seen == [("allocate", "A.ran.s1"), ("release", "A.ran.s1")]


class TestIsolation:
    def test_dedicated_slate_rejects_second_nsi(self):
        sub = fresh(dedicated=True)
        sub.allocate("A.ran.s1", "n1/A", {"vcpu": 1})
        with pytest.raises(IsolationViolation):
            sub.allocate("A.ran.s1", "n2/A", {"vcpu": 1})
        sub.allocate("A.ran.s1", "n1/A-again", {"vcpu": 1})

    def test_dedicated_binding_survives_release(self):
        sub = fresh(dedicated=True)
        sub.release(sub.allocate("A.ran.s1", "n1/A", {"vcpu": 1}))
        assert not sub.admits("A.ran.s1", "n2")

    def test_exclusive_request_needs_empty_target(self):
        sub = fresh()
        sub.allocate("A.ran.s1", "n1/A", {"vcpu": 1})
        with pytest.raises(IsolationViolation):
            sub.allocate("A.ran.s1", "n2/A", {"vcpu": 1}, exclusive=True)

    def test_exclusive_holder_blocks_others(self):
        sub = fresh()
        sub.allocate("A.ran.s1", "n1/A", {"vcpu": 1}, exclusive=True)
        assert sub.locked_by("A.ran.s1") == "n1"
        assert not sub.admits("A.ran.s1", "n2")


class TestDegrade:
    def test_shrink_below_allocation_is_flagged(self):
        sub = fresh()
        sub.allocate("A.ran.s1", "n1/A", {"vcpu": 6})
        sub.degrade("A.ran.s1", {"vcpu": 4})
        assert sub.oversubscription("A.ran.s1") == {"vcpu": Fraction(2)}

    def test_link_latency(self):
        sub = fresh()
        applied = sub.degrade("W1", {"latency_ms": 50})
        assert applied == {"latency_ms": Fraction(50)}
        assert sub.links["W1"].latency_ms == 50

    def test_unused_link_affects_nobody(self):
        sub = fresh()
        sub.degrade("A.l1", {"latency_ms": 9})
        assert sub.nsis_on("A.l1") == set()

    def test_slate_has_no_latency(self):
        with pytest.raises(SubstrateError):
            fresh().degrade("A.ran.s1", {"latency_ms": 3})

    def test_unknown(self):
        with pytest.raises(UnknownId):
            fresh().degrade("zz", {"vcpu": 1})


class TestCapabilitySnapshot:
    def test_free_sum(self):
        raw = two_domain_raw()
        raw["domains"][0] = domain("A", vcpu=4, slates_per_sub=2, techs=("ran",))
        sub = scenario(raw).build_substrate()
        assert sub.capability_snapshot("A")["free"]["vcpu"] == 8
        sub.allocate("A.ran.s1", "n1/A", {"vcpu": 3})
        assert sub.capability_snapshot("A")["free"]["vcpu"] == 5

    def test_hides_nodes(self):
        sub = fresh()
        text = json.dumps(sub.capability_snapshot("A"), default=str)
        for node in sub.domains["A"].nodes:
            assert node not in text
        for slate in sub.slates:
            assert slate not in text

    def test_unknown_domain(self):
        with pytest.raises(UnknownId):
            fresh().capability_snapshot("Z")


ops = st.lists(
    st.tuples(
        st.booleans(),
        st.sampled_from(["A.ran.s1", "A.core.s1", "W1"]),
        st.fractions(min_value=Fraction(1, 4), max_value=9, max_denominator=8),
        st.integers(0, 50),
    ),
    max_size=100,
)


@given(ops)
def test_random_sequences_against_shadow_ledger(sequence):
    sub = fresh()
    shadow: dict[str, tuple[str, Fraction]] = {}
    for is_alloc, target, amount, pick in sequence:
        comp = "bandwidth_mbps" if target == "W1" else "vcpu"
        if is_alloc or not shadow:
            cap = sub.target(target).capacity[comp]
            used = sum((a for t, a in shadow.values() if t == target), Fraction(0))
            try:
                rid = sub.allocate(target, f"n{pick % 3}/x", {comp: amount})
            except InsufficientCapacity:
                assert used + amount > cap
                continue
            assert used + amount <= cap
            shadow[rid] = (target, amount)
        else:
            rid = sorted(shadow)[pick % len(shadow)]
            sub.release(rid)
            del shadow[rid]
        for t in ("A.ran.s1", "A.core.s1", "W1"):
            comp = "bandwidth_mbps" if t == "W1" else "vcpu"
            used = sum((a for tt, a in shadow.values() if tt == t), Fraction(0))
            assert sub.allocated(t)[comp] == used
            assert used <= sub.target(t).capacity[comp]
    for rid in list(shadow):
        sub.release(rid)
    assert sub.reservations == {}
