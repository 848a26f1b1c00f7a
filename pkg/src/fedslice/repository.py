"""Abstracted capability repository shared by the broker and the conductor.

Holds per-domain aggregates, WAN link summaries and the trust matrix. It never
carries node-level topology, so holders of a repository cannot see inside a
domain.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any


@dataclass(frozen=True)
class Repository:
    domains: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    wan: tuple[Mapping[str, Any], ...] = ()
    trust: frozenset[frozenset[str]] = frozenset()

    @classmethod
    def build(
        cls,
        snapshots: Iterable[Mapping[str, Any]],
        wan: Iterable[Mapping[str, Any]] = (),
        trust: Iterable[Iterable[str]] = (),
    ) -> "Repository":
        return cls(
            {s["domain"]: s for s in snapshots},
            tuple(sorted(wan, key=lambda w: w["id"])),
            frozenset(frozenset(p) for p in trust),
        )

    def trusted(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.trust

    def wan_between(self, a: str, b: str) -> list[Mapping[str, Any]]:
        """Trusted WAN links joining a and b, sorted by id."""
        if not self.trusted(a, b):
            return []
        return [w for w in self.wan if set(w["domains"]) == {a, b}]
