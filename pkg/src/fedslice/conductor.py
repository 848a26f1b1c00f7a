"""Federation-wide decomposition of admitted requests into per-domain sub-requests."""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

import networkx as nx

from .embedding import Budget, Metrics, SubRequest
from .kernel import Kernel, Kind, Message
from .model import PROB_TOL, ServiceRequirements, q
from .repository import Repository

log = logging.getLogger(__name__)

CONDUCTOR = "conductor"
BROKER = "broker"


class ConductorError(Exception):
    code = "conductor-error"


class NoFeasibleCombination(ConductorError):
    code = "no-feasible-combination"


class CoordinatorExists(ConductorError):
    code = "coordinator-already-exists"


class UnknownNsi(ConductorError):
    code = "unknown-nsi"


@dataclass(frozen=True)
class Stitch:
    pair: tuple[str, str]
    link: str
    bandwidth_mbps: Fraction
    borders: tuple[str, str]
    qos: Metrics

    def to_dict(self) -> dict[str, Any]:
        return {
            "pair": list(self.pair),
            "link": self.link,
            "bandwidth_mbps": str(self.bandwidth_mbps),
            "borders": list(self.borders),
            "qos": self.qos.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Stitch":
        return cls(
            (d["pair"][0], d["pair"][1]),
            d["link"],
            q(d["bandwidth_mbps"]),
            (d["borders"][0], d["borders"][1]),
            Metrics.from_dict(d["qos"]),
        )


@dataclass(frozen=True)
class DecompositionPlan:
    nsi_id: str
    path: tuple[str, ...]
    per_domain: tuple[SubRequest, ...]
    stitching: tuple[Stitch, ...] = ()
    version: int = 1

    @property
    def domains(self) -> tuple[str, ...]:
        return self.path

    @property
    def links(self) -> tuple[str, ...]:
        return tuple(s.link for s in self.stitching)

    @property
    def key(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        return (self.path, self.links)

    def share(self, domain: str) -> SubRequest:
        for sub in self.per_domain:
            if sub.domain == domain:
                return sub
        raise KeyError(domain)

    def to_dict(self) -> dict[str, Any]:
        return {
            "nsi_id": self.nsi_id,
            "path": list(self.path),
            "per_domain": [s.to_dict() for s in self.per_domain],
            "stitching": [s.to_dict() for s in self.stitching],
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DecompositionPlan":
        return cls(
            d["nsi_id"],
            tuple(d["path"]),
            tuple(SubRequest.from_dict(s) for s in d["per_domain"]),
            tuple(Stitch.from_dict(s) for s in d["stitching"]),
            int(d["version"]),
        )


# --------------------------------------------------------------------------
# Pure planning functions
# --------------------------------------------------------------------------


def domain_graph(repo: Repository, excluded: Iterable[str] = ()) -> nx.Graph:
    skip = set(excluded)
    g = nx.Graph()
    g.add_nodes_from(d for d in repo.domains if d not in skip)
    for w in repo.wan:
        a, b = w["domains"]
        if a in g and b in g and repo.trusted(a, b):
            g.add_edge(a, b)
    return g


def domain_paths(
    repo: Repository, coverage: Iterable[str], excluded: Iterable[str] = (), greedy: bool = False
) -> list[tuple[str, ...]]:
    """Simple domain paths whose two ends are coverage domains and that visit all of them.

    Each path appears once, oriented so that path[0] <= path[-1].
    """
    cover = sorted(set(coverage))
    g = domain_graph(repo, excluded)
    if not cover or any(c not in g for c in cover):
        return []
    if len(cover) == 1:
        return [(cover[0],)]
    if greedy:
        path: list[str] = [cover[0]]
        for u, v in zip(cover, cover[1:]):
            try:
                hop = nx.shortest_path(g, u, v)
            except nx.NetworkXNoPath:
                return []
            path.extend(hop[1:])
        if len(set(path)) != len(path):
            return []
        return [tuple(path) if path[0] <= path[-1] else tuple(reversed(path))]
    need = set(cover)
    out = []
    for u, v in itertools.combinations(cover, 2):
        for p in nx.all_simple_paths(g, u, v):
            if need <= set(p):
                out.append(tuple(p))
    return sorted(set(out))


def attachments_for(
    path: Sequence[str], req: ServiceRequirements, borders: Sequence[tuple[str, str]]
) -> dict[str, tuple[str, ...]]:
    """Attachment points each domain of the path must join: entry border, endpoints, exit border."""
    out = {}
    for i, d in enumerate(path):
        atts: list[str] = []
        if i > 0:
            atts.append(borders[i - 1][1])
        atts.extend(e.attachment for e in req.endpoints if e.domain == d)
        if i < len(path) - 1:
            atts.append(borders[i][0])
        out[d] = tuple(dict.fromkeys(atts))
    return out


def equal_probability_share(total: float, fixed: Iterable[float], n: int) -> float | None:
    """Per-domain probability s with 1-(1-s)^n * prod(1-fixed) == total, or None."""
    survive_fixed = 1.0
    for w in fixed:
        survive_fixed *= 1.0 - w
    target = 1.0 - total
    if survive_fixed <= 0.0 or target > survive_fixed + PROB_TOL:
        return None
    ratio = min(1.0, target / survive_fixed)
    return min(1.0, max(0.0, 1.0 - ratio ** (1.0 / n)))


def split_budgets(
    req: ServiceRequirements,
    path: Sequence[str],
    attachments: Mapping[str, Sequence[str]],
    wan: Sequence[Metrics],
) -> dict[str, Budget] | None:
    """Per-domain QoS budgets after subtracting the fixed WAN contributions.

    Latency and jitter residuals are split in proportion to each domain's
    attachment-point count; error and loss get equal multiplicative shares.
    """
    lat = req.latency_budget_ms - sum((w.latency_ms for w in wan), Fraction(0))
    jit = req.jitter_budget_ms - sum((w.jitter_ms for w in wan), Fraction(0))
    if lat < 0 or jit < 0:
        return None
    n = len(path)
    err = equal_probability_share(req.max_error_rate, [w.error_rate for w in wan], n)
    loss = equal_probability_share(req.max_packet_loss, [w.loss for w in wan], n)
    if err is None or loss is None:
        return None
    weights = {d: max(1, len(attachments[d])) for d in path}
    total = sum(weights.values())
    return {d: Budget(lat * weights[d] / total, jit * weights[d] / total, err, loss) for d in path}


def _wan_metrics(w: Mapping[str, Any]) -> Metrics:
    return Metrics(q(w["latency_ms"]), q(w["jitter_ms"]), float(w["error_rate"]), float(w["loss"]))


def build_plan(
    nsi_id: str,
    req: ServiceRequirements,
    repo: Repository,
    path: Sequence[str],
    links: Sequence[Mapping[str, Any]],
    version: int = 1,
) -> DecompositionPlan | None:
    """The plan for one (domain path, WAN links) choice, or None if it fails the aggregate filters."""
    n = len(path)
    borders = []
    for (a, b), w in zip(zip(path, path[1:]), links):
        if q(w["free_bandwidth_mbps"]) < req.bandwidth_mbps:
            return None
        borders.append((w["borders"][a], w["borders"][b]))
    atts = attachments_for(path, req, borders)
    wan = [_wan_metrics(w) for w in links]
    budgets = split_budgets(req, path, atts, wan)
    if budgets is None:
        return None
    vcpu = Fraction(req.compute_vcpu) / n
    mem = req.memory_gb / n
    sto = req.storage_gb / n
    subs = []
    for d in path:
        snap = repo.domains[d]
        if req.service_type not in snap["service_types"]:
            return None
        free = snap["free"]
        if free["vcpu"] < vcpu or free["memory_gb"] < mem or free["storage_gb"] < sto:
            return None
        subs.append(
            SubRequest(
                domain=d,
                service_type=req.service_type,
                bandwidth_mbps=req.bandwidth_mbps,
                vcpu=vcpu,
                memory_gb=mem,
                storage_gb=sto,
                budget=budgets[d],
                attachments=atts[d],
                endpoints=tuple(e.attachment for e in req.endpoints if e.domain == d),
                isolation=req.isolation,
            )
        )
    stitching = tuple(
        Stitch((a, b), w["id"], req.bandwidth_mbps, bd, m)
        for (a, b), w, bd, m in zip(zip(path, path[1:]), links, borders, wan)
    )
    return DecompositionPlan(nsi_id, tuple(path), tuple(subs), stitching, version)


def ranked_plans(
    nsi_id: str,
    req: ServiceRequirements,
    repo: Repository,
    version: int = 1,
    exclude: Iterable[tuple[tuple[str, ...], tuple[str, ...]]] = (),
    failed: Iterable[str] = (),
    excluded_domains: Iterable[str] = (),
    greedy: bool = False,
) -> list[DecompositionPlan]:
    """Every feasible plan, best first.

    Order: fewer failed domains, fewer domains, more total free compute,
    lexicographic path, lower WAN latency, WAN link ids.
    """
    skip = set(exclude)
    bad = set(failed)
    scored = []
    for path in domain_paths(repo, req.coverage, excluded_domains, greedy):
        options = [repo.wan_between(a, b) for a, b in zip(path, path[1:])]
        if greedy:
            options = [sorted(o, key=lambda w: (q(w["latency_ms"]), w["id"]))[:1] for o in options]
        for links in itertools.product(*options):
            key = (tuple(path), tuple(w["id"] for w in links))
            if key in skip:
                continue
            plan = build_plan(nsi_id, req, repo, path, links, version)
            if plan is None:
                continue
            free = [repo.domains[d]["free"] for d in path]
            rank = (
                len(bad & set(path)),
                len(path),
                -sum((f["vcpu"] for f in free), Fraction(0)),
                -sum((f["memory_gb"] for f in free), Fraction(0)),
                -sum((f["storage_gb"] for f in free), Fraction(0)),
                tuple(path),
                sum((q(w["latency_ms"]) for w in links), Fraction(0)),
                key[1],
            )
            scored.append((rank, plan))
    scored.sort(key=lambda x: x[0])
    return [p for _, p in scored]


def decompose(
    nsi_id: str,
    req: ServiceRequirements,
    repo: Repository,
    version: int = 1,
    greedy: bool = False,
    **kwargs: Any,
) -> DecompositionPlan:
    plans = ranked_plans(nsi_id, req, repo, version, greedy=greedy, **kwargs)
    if not plans:
        raise NoFeasibleCombination(nsi_id)
    return plans[0]


def plan_within_budget(plan: DecompositionPlan, req: ServiceRequirements) -> bool:
    """Recompose the plan's shares with the WAN legs and compare against the request."""
    lat = sum((s.budget.latency_ms for s in plan.per_domain), Fraction(0)) + sum(
        (s.qos.latency_ms for s in plan.stitching), Fraction(0)
    )
    jit = sum((s.budget.jitter_ms for s in plan.per_domain), Fraction(0)) + sum(
        (s.qos.jitter_ms for s in plan.stitching), Fraction(0)
    )
    survive_err = math.prod(1 - s.budget.error_rate for s in plan.per_domain) * math.prod(
        1 - s.qos.error_rate for s in plan.stitching
    )
    survive_loss = math.prod(1 - s.budget.loss for s in plan.per_domain) * math.prod(
        1 - s.qos.loss for s in plan.stitching
    )
    return (
        lat <= req.latency_budget_ms
        and jit <= req.jitter_budget_ms
        and 1 - survive_err <= req.max_error_rate + PROB_TOL
        and 1 - survive_loss <= req.max_packet_loss + PROB_TOL
    )


# --------------------------------------------------------------------------
# Kernel participant
# --------------------------------------------------------------------------


@dataclass
class _NsiEntry:
    tenant: str
    requirements: ServiceRequirements
    policy: dict[str, Any]
    plan: DecompositionPlan | None = None
    tried: set[tuple[tuple[str, ...], tuple[str, ...]]] = field(default_factory=set)
    failed: set[str] = field(default_factory=set)
    escalation_tried: set[tuple[tuple[str, ...], tuple[str, ...]]] = field(default_factory=set)
    closed: bool = False


class ServiceConductor:
    """Decomposes admitted requests and owns the per-NSI coordinators."""

    def __init__(
        self,
        kernel: Kernel,
        repository_source: Callable[[str | None], Repository],
        coordinator_factory: Callable[["ServiceConductor", str, str], Any],
        greedy: bool = False,
    ) -> None:
        self.kernel = kernel
        self.repository_source = repository_source
        self.coordinator_factory = coordinator_factory
        self.greedy = greedy
        self.entries: dict[str, _NsiEntry] = {}
        self.coordinators: dict[str, Any] = {}
        self.cancelled: set[str] = set()
        kernel.register(CONDUCTOR, self.handle)

    def spawn_coordinator(self, plan: DecompositionPlan, tenant: str) -> Any:
        if plan.nsi_id in self.coordinators:
            raise CoordinatorExists(plan.nsi_id)
        handle = self.coordinator_factory(self, plan.nsi_id, tenant)
        self.coordinators[plan.nsi_id] = handle
        return handle

    def re_decompose(self, nsi_id: str, failure: Mapping[str, Any]) -> DecompositionPlan:
        """A new plan (version + 1) avoiding the current realization and failed transit domains."""
        entry = self.entries.get(nsi_id)
        if entry is None or entry.closed or entry.plan is None:
            raise UnknownNsi(nsi_id)
        if "requirements" in failure:
            entry.requirements = ServiceRequirements.from_dict(failure["requirements"])
        if failure.get("attempt", 1) == 1:
            entry.escalation_tried = set()
        entry.escalation_tried.add(entry.plan.key)
        failed = set(failure.get("domains", ()))
        cover = set(entry.requirements.coverage)
        repo = self.repository_source(nsi_id)
        plans = ranked_plans(
            nsi_id,
            entry.requirements,
            repo,
            entry.plan.version + 1,
            exclude=entry.escalation_tried,
            failed=failed & cover,
            excluded_domains=failed - cover,
            greedy=self.greedy,
        )
        if not plans:
            raise NoFeasibleCombination(nsi_id)
        entry.plan = plans[0]
        entry.escalation_tried.add(plans[0].key)
        return plans[0]

    # -- handlers -----------------------------------------------------------

    def handle(self, msg: Message) -> None:
        p = msg.payload
        nsi = p["nsi"]
        if msg.kind is Kind.ADMITTED_REQUEST:
            self._admitted(nsi, p)
        elif msg.kind is Kind.INSTANTIATION_FAILED:
            self._retry(nsi, p)
        elif msg.kind is Kind.ESCALATE_TO_CONDUCTOR:
            self._escalate(nsi, p)
        elif msg.kind is Kind.DECOMMISSION_CMD:
            coord = self.coordinators.get(nsi)
            entry = self.entries.get(nsi)
            if coord is not None and entry is not None and not entry.closed:
                self.kernel.post(CONDUCTOR, coord.participant, Kind.DECOMMISSION_CMD, {"nsi": nsi})
            elif entry is None and nsi not in self.cancelled:
                self.cancelled.add(nsi)
                self.kernel.post(CONDUCTOR, BROKER, Kind.BROKER_UPDATE, {"nsi": nsi, "status": "decommissioned"})
        elif msg.kind is Kind.NSI_DECOMMISSIONED:
            if nsi in self.entries:
                self.entries[nsi].closed = True
        else:
            raise ConductorError(f"conductor cannot handle {msg.kind.value}")

    def _admitted(self, nsi: str, p: Mapping[str, Any]) -> None:
        if nsi in self.cancelled or nsi in self.entries:
            return
        req = ServiceRequirements.from_dict(p["requirements"])
        entry = _NsiEntry(p["tenant"], req, dict(p["policy"]))
        self.entries[nsi] = entry
        try:
            plan = decompose(nsi, req, self.repository_source(None), greedy=self.greedy)
        except NoFeasibleCombination as exc:
            entry.closed = True
            self.kernel.post(CONDUCTOR, BROKER, Kind.LATE_REJECT, {"nsi": nsi, "reason": exc.code})
            return
        entry.plan = plan
        entry.tried.add(plan.key)
        coord = self.spawn_coordinator(plan, entry.tenant)
        self.kernel.post(CONDUCTOR, coord.participant, Kind.PROGRAM_COORDINATOR,
                         {"nsi": nsi, "sla": req, "policy": entry.policy})
        self.kernel.post(CONDUCTOR, coord.participant, Kind.DECOMPOSITION, {"nsi": nsi, "plan": plan})

    def _retry(self, nsi: str, p: Mapping[str, Any]) -> None:
        entry = self.entries.get(nsi)
        if entry is None or entry.closed:
            return
        entry.failed.update(p["failed_domains"])
        assert entry.plan is not None
        plans = ranked_plans(
            nsi, entry.requirements, self.repository_source(None), entry.plan.version + 1,
            exclude=entry.tried, failed=entry.failed, greedy=self.greedy,
        )
        coord = self.coordinators[nsi]
        if not plans:
            entry.closed = True
            reason = f"{NoFeasibleCombination.code}: {p['cause']}"
            self.kernel.post(CONDUCTOR, coord.participant, Kind.LATE_REJECT, {"nsi": nsi, "reason": reason})
            self.kernel.post(CONDUCTOR, BROKER, Kind.LATE_REJECT, {"nsi": nsi, "reason": reason})
            return
        entry.plan = plans[0]
        entry.tried.add(plans[0].key)
        self.kernel.post(CONDUCTOR, coord.participant, Kind.DECOMPOSITION, {"nsi": nsi, "plan": plans[0]})

    def _escalate(self, nsi: str, p: Mapping[str, Any]) -> None:
        coord = self.coordinators.get(nsi)
        try:
            plan = self.re_decompose(nsi, p["failure"])
        except ConductorError as exc:
            if coord is not None:
                self.kernel.post(CONDUCTOR, coord.participant, Kind.RE_DECOMPOSITION,
                                 {"nsi": nsi, "plan": None, "error": exc.code})
            return
        self.kernel.post(CONDUCTOR, coord.participant, Kind.RE_DECOMPOSITION, {"nsi": nsi, "plan": plan})
