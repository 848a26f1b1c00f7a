"""Plays a scenario through a federation, then measures and audits the trace."""

from __future__ import annotations

import json
import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

from .federation import ENV, FAULTS, SUBSTRATE, Federation, Snapshot
from .kernel import Kind, Verdict, assert_sequence, canonical, load_pattern
from .model import ServiceRequirements, q
from .oracle import (
    InstanceTooLarge,
    degradation_locus,
    instantiation_witness,
    minimal_level,
    oracle_feasible,
    scaled_graph,
)
from .scenario import Scenario
from .substrate import LedgerOp

EXTERNAL_KINDS = (Kind.SLICE_REQUEST, Kind.MODIFY_REQUEST, Kind.DEGRADE, Kind.INJECT, Kind.DECOMMISSION_CMD)
BROKER = "broker"


@dataclass(frozen=True)
class External:
    tick: int
    sender: str
    receiver: str
    kind: Kind
    payload: Mapping[str, Any]


def _plain(payload: Mapping[str, Any]) -> dict[str, Any]:
    return json.loads(canonical(payload))


def external_messages(scenario: Scenario) -> list[External]:
    """Timeline entries as kernel messages, stably ordered by (tick, sender)."""
    tenant_of: dict[str, str] = {}
    out = []
    for e in scenario.timeline:
        d = e.data
        if e.type == "request":
            tenant_of[d["nsi"]] = d["tenant"]
            sched = dict(d.get("schedule", {"start": e.tick}))
            payload: dict[str, Any] = {
                "nsi": d["nsi"],
                "tenant": d["tenant"],
                "requirements": ServiceRequirements.from_dict(d["requirements"]).to_dict(),
                "schedule": sched,
            }
            if "accept_counter" in d:
                payload["accept_counter"] = d["accept_counter"]
            out.append(External(e.tick, f"tenant:{d['tenant']}", BROKER, Kind.SLICE_REQUEST, payload))
        elif e.type == "modify":
            out.append(External(e.tick, ENV, f"coord:{d['nsi']}", Kind.MODIFY_REQUEST,
                                {"nsi": d["nsi"], "modification": d["modification"]}))
        elif e.type == "degrade":
            out.append(External(e.tick, ENV, SUBSTRATE, Kind.DEGRADE, {"target": d["target"], "values": d["values"]}))
        elif e.type == "inject":
            out.append(External(e.tick, ENV, FAULTS, Kind.INJECT, {"fault": d["fault"], "target": d["target"]}))
        elif e.type == "decommission":
            out.append(External(e.tick, f"tenant:{tenant_of[d['nsi']]}", BROKER, Kind.DECOMMISSION_CMD, {"nsi": d["nsi"]}))
    out.sort(key=lambda x: (x.tick, x.sender))
    return [External(x.tick, x.sender, x.receiver, x.kind, _plain(x.payload)) for x in out]


def external_inputs(trace: Iterable[str | Mapping[str, Any]]) -> list[External]:
    """The environment's and tenants' own messages, in delivery order; derived replies are left out."""
    out = []
    kinds = {k.value for k in EXTERNAL_KINDS}
    for line in trace:
        ev = json.loads(line) if isinstance(line, str) else line
        sender = ev["sender"]
        if ev["kind"] in kinds and (sender == ENV or sender.startswith("tenant:")):
            out.append(External(ev["tick"], sender, ev["receiver"], Kind(ev["kind"]), ev["payload"]))
    return out


class UtilizationTracker:
    """Running compute allocation per domain, fed by the substrate ledger."""

    def __init__(self, fed: Federation) -> None:
        self.sub = fed.substrate
        self.total = {d: Fraction(0) for d in self.sub.domains}
        for s in self.sub.slates.values():
            self.total[s.domain] += s.capacity.get("vcpu", Fraction(0))
        self.used = {d: Fraction(0) for d in self.sub.domains}
        self.peak = {d: Fraction(0) for d in self.sub.domains}
        self.sub.listeners.append(self)

    def __call__(self, op: LedgerOp) -> None:
        r = op.reservation
        slate = self.sub.slates.get(r.target)
        if slate is None:
            return
        sign = 1 if op.op == "allocate" else -1
        self.used[slate.domain] += sign * r.amount("vcpu")
        if self.total[slate.domain] > 0:
            self.peak[slate.domain] = max(self.peak[slate.domain], self.used[slate.domain] / self.total[slate.domain])


@dataclass
class RunResult:
    scenario: Scenario
    federation: Federation
    trace: list[str]
    metrics: dict[str, Any]
    patterns: dict[str, Verdict] = field(default_factory=dict)

    @property
    def conforms(self) -> bool:
        return all(v.ok for v in self.patterns.values())

    @property
    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)


def run(
    scenario: Scenario,
    seed: int | None = None,
    exact: bool | None = None,
    snapshots: bool = False,
    inputs: Sequence[External] | None = None,
) -> RunResult:
    fed = Federation(scenario, seed=seed, exact=exact, snapshots=snapshots)
    tracker = UtilizationTracker(fed)
    for x in external_messages(scenario) if inputs is None else inputs:
        fed.kernel.post(x.sender, x.receiver, x.kind, x.payload, delay=x.tick)
    fed.kernel.run_until_quiescent(scenario.knobs.max_ticks)
    fed.broker.close_all(fed.kernel.now)
    lines = fed.kernel.trace_lines()
    patterns = {name: assert_sequence(lines, load_pattern(name)) for name in scenario.knobs.patterns}
    return RunResult(scenario, fed, lines, live_metrics(fed, tracker), patterns)


def replay(scenario: Scenario, trace: Iterable[str], seed: int | None = None, exact: bool | None = None) -> RunResult:
    return run(scenario, seed=seed, exact=exact, inputs=external_inputs(trace))


# -- metrics -----------------------------------------------------------------------


def _ratio(num: int, den: int) -> str | None:
    return None if den == 0 else str(Fraction(num, den))


def _levels(acks: Iterable[tuple[str, Any]]) -> dict[str, int]:
    counts = {str(i): 0 for i in range(5)}
    counts["exhausted"] = 0
    for outcome, level in acks:
        if outcome == "resolved":
            counts[str(level)] += 1
        elif outcome == "exhausted":
            counts["exhausted"] += 1
    return counts


def live_metrics(fed: Federation, tracker: UtilizationTracker) -> dict[str, Any]:
    """Metrics read off the participants' own state."""
    requests = fed.request_count
    requested_at = fed.requested_at
    admitted = len(fed.conductor.entries)
    first_up: dict[str, int] = {}
    acks = []
    for m in fed.inbox:
        if m.kind is Kind.NSI_OPERATIONAL:
            first_up.setdefault(m.payload["nsi"], m.tick)
        elif m.kind is Kind.MODIFY_ACK:
            acks.append((m.payload["outcome"], m.payload["level"]))
    waits = [t - requested_at[n] for n, t in first_up.items() if n in requested_at]
    ledger = fed.broker.ledger
    billed = sorted({e.nsi for e in ledger.entries})
    return {
        "requests": requests,
        "admitted": admitted,
        "admission_rate": _ratio(admitted, requests),
        "instantiated": len(first_up),
        "instantiation_success_rate": _ratio(len(first_up), admitted),
        "escalations": _levels(acks),
        "mean_ticks_to_operational": str(Fraction(sum(waits), len(waits))) if waits else None,
        "peak_utilization": {d: str(v) for d, v in sorted(tracker.peak.items())},
        "sla_violation_ticks": {n: t for n, t in sorted(fed.broker.degraded_ticks.items()) if t},
        "billing": {n: str(ledger.total(n)) for n in billed},
        "billing_total": str(ledger.total()),
        "final_tick": fed.kernel.now,
    }


def reduce_metrics(trace: Iterable[str], scenario: Scenario) -> dict[str, Any]:
    """The same metrics, recomputed from trace lines and the static scenario only."""
    events = [json.loads(line) for line in trace]
    slate_domain: dict[str, str] = {}
    total: dict[str, Fraction] = {}
    for d in scenario.raw["domains"]:
        total[d["id"]] = Fraction(0)
        for s in d["slates"]:
            slate_domain[s["id"]] = d["id"]
            total[d["id"]] += q(s["capacity"].get("vcpu", 0))
    used = {d: Fraction(0) for d in total}
    peak = {d: Fraction(0) for d in total}
    requests = 0
    requested_at: dict[str, int] = {}
    cancelled: set[str] = set()
    admitted: set[str] = set()
    first_up: dict[str, int] = {}
    acks = []
    rate: dict[str, Fraction] = {}
    open_at: dict[str, int] = {}
    billing: dict[str, Fraction] = {}
    degraded_at: dict[str, int] = {}
    degraded: dict[str, int] = {}
    now = 0
    for ev in events:
        now = ev["tick"]
        kind, p, rcv = ev["kind"], ev["payload"], ev["receiver"]
        for op, _rid, target, _owner, _nsi, amounts in ev["ledger"]:
            dom = slate_domain.get(target)
            if dom is None:
                continue
            used[dom] += (1 if op == "allocate" else -1) * q(amounts.get("vcpu", 0))
            if total[dom] > 0:
                peak[dom] = max(peak[dom], used[dom] / total[dom])
        if kind == "SliceRequest" and rcv == BROKER and ev["sender"].startswith("tenant:"):
            requests += 1
            requested_at.setdefault(p["nsi"], now)
        elif kind == "AdmitAck":
            rate.setdefault(p["nsi"], q(p["rate"]))
        elif kind == "DecommissionCmd" and rcv == "conductor" and p["nsi"] not in admitted:
            cancelled.add(p["nsi"])
        elif kind == "AdmittedRequest" and rcv == "conductor" and p["nsi"] not in cancelled:
            admitted.add(p["nsi"])
        elif kind == "NsiOperational" and rcv.startswith("tenant:"):
            first_up.setdefault(p["nsi"], now)
        elif kind == "ModifyAck" and (rcv == ENV or rcv.startswith("tenant:")):
            acks.append((p["outcome"], p["level"]))
        elif kind == "BrokerUpdate" and rcv == BROKER and p["nsi"] in rate:
            n, status = p["nsi"], p["status"]
            if status in ("operational", "restored") and n not in open_at:
                open_at[n] = now
                billing.setdefault(n, Fraction(0))
            if status in ("degraded", "decommissioned") and n in open_at:
                billing[n] += rate[n] * (now - open_at.pop(n))
            if status == "degraded":
                degraded_at.setdefault(n, now)
            if status in ("restored", "decommissioned") and n in degraded_at:
                degraded[n] = degraded.get(n, 0) + now - degraded_at.pop(n)
    for n, t in open_at.items():
        billing[n] = billing.get(n, Fraction(0)) + rate[n] * (now - t)
    for n, t in degraded_at.items():
        degraded[n] = degraded.get(n, 0) + now - t
    waits = [t - requested_at[n] for n, t in first_up.items() if n in requested_at]
    return {
        "requests": requests,
        "admitted": len(admitted),
        "admission_rate": _ratio(len(admitted), requests),
        "instantiated": len(first_up),
        "instantiation_success_rate": _ratio(len(first_up), len(admitted)),
        "escalations": _levels(acks),
        "mean_ticks_to_operational": str(Fraction(sum(waits), len(waits))) if waits else None,
        "peak_utilization": {d: str(v) for d, v in sorted(peak.items())},
        "sla_violation_ticks": {n: t for n, t in sorted(degraded.items()) if t},
        "billing": {n: str(v) for n, v in sorted(billing.items())},
        "billing_total": str(sum(billing.values(), Fraction(0))),
        "final_tick": now,
    }


# -- audits -------------------------------------------------------------------------


@dataclass
class Check:
    ok: bool
    detail: str = ""
    skipped: bool = False
    compared: int = 0

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"ok": self.ok, "detail": self.detail}
        if self.skipped:
            out["skipped"] = True
        return out


def check_conservation(trace: Iterable[str], scenario: Scenario) -> Check:
    """No allocation ever pushes a ledger above the capacity in force at that moment."""
    cap: dict[str, dict[str, Fraction]] = {}
    for d in scenario.raw["domains"]:
        for s in d["slates"]:
            cap[s["id"]] = {c: q(v) for c, v in s["capacity"].items()}
        for l in d.get("links", []):
            cap[l["id"]] = {"bandwidth_mbps": q(l["bandwidth_mbps"])}
    for w in scenario.raw.get("wan_links", []):
        cap[w["id"]] = {"bandwidth_mbps": q(w["bandwidth_mbps"])}
    held: dict[str, dict[str, Fraction]] = {t: {} for t in cap}
    for line in trace:
        ev = json.loads(line)
        if ev["kind"] == "Degrade" and ev["receiver"] == SUBSTRATE and ev["payload"]["target"] in cap:
            limits = cap[ev["payload"]["target"]]
            for c, v in ev["payload"]["values"].items():
                if c in ("vcpu", "memory_gb", "storage_gb", "bandwidth_mbps"):
                    limits[c] = q(v)
        for op, _rid, target, _owner, _nsi, amounts in ev["ledger"]:
            acc = held[target]
            for c, a in amounts.items():
                acc[c] = acc.get(c, Fraction(0)) + (q(a) if op == "allocate" else -q(a))
                if op == "allocate" and acc[c] > cap[target].get(c, Fraction(0)):
                    return Check(False, f"seq {ev['seq']}: {target}.{c} holds {acc[c]} > {cap[target].get(c, 0)}")
                if acc[c] < 0:
                    return Check(False, f"seq {ev['seq']}: {target}.{c} negative")
    return Check(True)


def live_reservations(trace: Iterable[str]) -> dict[str, tuple[str, str, dict[str, Fraction]]]:
    held: dict[str, tuple[str, str, dict[str, Fraction]]] = {}
    for line in trace:
        ev = json.loads(line)
        for op, rid, target, _owner, nsi, amounts in ev["ledger"]:
            if op == "allocate":
                held[rid] = (target, nsi, {c: q(a) for c, a in amounts.items()})
            else:
                held.pop(rid, None)
    return held


def final_states(trace: Iterable[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in trace:
        for entity, _before, after in json.loads(line)["transitions"]:
            out[entity] = after
    return out


def check_reclamation(trace: Sequence[str]) -> Check:
    """Every NSI that ended, ended with zero reservations."""
    states = final_states(trace)
    held = live_reservations(trace)
    leftovers = Counter(nsi for _t, nsi, _a in held.values())
    for nsi, count in sorted(leftovers.items()):
        if states.get(nsi) not in ("Operational", "Degraded", "Modifying"):
            return Check(False, f"{nsi} ended as {states.get(nsi)} but holds {count} reservations")
    return Check(True, f"{len(held)} reservations held by live NSIs")


def check_isolation(trace: Iterable[str], scenario: Scenario) -> Check:
    dedicated = {s["id"] for d in scenario.raw["domains"] for s in d["slates"] if s.get("dedicated")}
    users: dict[str, set[str]] = {}
    for line in trace:
        for op, _rid, target, _owner, nsi, _a in json.loads(line)["ledger"]:
            if op == "allocate" and target in dedicated:
                users.setdefault(target, set()).add(nsi)
                if len(users[target]) > 1:
                    return Check(False, f"{target} used by {sorted(users[target])}")
    return Check(True)


def _acks_after(trace: Sequence[str], seq: int, nsi: str) -> tuple[str, Any] | None:
    for line in trace:
        ev = json.loads(line)
        if ev["seq"] <= seq or ev["kind"] != "ModifyAck" or ev["payload"]["nsi"] != nsi:
            continue
        if ev["receiver"] == ENV or ev["receiver"].startswith("tenant:"):
            return ev["payload"]["outcome"], ev["payload"]["level"]
    return None


def _trace_seq(trace: Sequence[str], msg: int) -> int:
    for line in trace:
        ev = json.loads(line)
        if ev["msg"] == msg:
            return ev["seq"]
    return 0


def expected_level(fed: Federation, snap: Snapshot) -> tuple[str, int | None] | None:
    """Oracle verdict for the change a snapshot was taken in front of; None when not applicable."""
    view = snap.view
    if view is None:
        return None
    world = fed.world(snap.substrate)
    if snap.kind == "ModifyRequest":
        mod = snap.payload["modification"]
        d = mod.get("domain")
        if mod.get("type") != "scale" or d not in view.graphs:
            return None
        delta = mod.get("delta", {})
        graph = scaled_graph(view.graphs[d], mod["vnf"], delta)
        new_sla = view.sla.with_extra_compute(
            vcpu=math.ceil(q(delta.get("vcpu", 0))),
            memory_gb=q(delta.get("memory_gb", 0)),
            storage_gb=q(delta.get("storage_gb", 0)),
        )
        return "scale", minimal_level(world, view, d, graph, {mod["vnf"]}, new_sla)
    locus = degradation_locus(world, view)
    if locus is None:
        return None
    d, affected = locus
    return "degradation", minimal_level(world, view, d, view.graphs[d], affected)


def check_escalation(result: RunResult) -> Check:
    fed = result.federation
    compared = 0
    for snap in fed.snapshots:
        if snap.kind not in ("ModifyRequest", "DegradationEvent") or snap.view is None:
            continue
        try:
            exp = expected_level(fed, snap)
        except InstanceTooLarge as exc:
            return Check(True, str(exc), skipped=True)
        if exp is None:
            continue
        got = _acks_after(result.trace, _trace_seq(result.trace, snap.msg), snap.nsi or "")
        if got is None:
            return Check(False, f"{snap.kind} for {snap.nsi} at tick {snap.tick} never acknowledged")
        want = exp[1]
        level = got[1] if got[0] == "resolved" else None
        if level != want:
            return Check(False, f"{snap.kind} for {snap.nsi} at tick {snap.tick}: level {level}, oracle {want}")
        compared += 1
    return Check(True, f"{compared} episodes at oracle level", compared=compared)


def check_soundness(result: RunResult) -> Check:
    fed = result.federation
    count = 0
    for snap in fed.snapshots:
        if snap.kind != "NsiOperational":
            continue
        world = fed.world(snap.substrate)
        try:
            world.check_size()
        except InstanceTooLarge as exc:
            return Check(True, str(exc), skipped=True)
        if instantiation_witness(world, snap.nsi or "", fed.requirements_of(snap)) is None:
            return Check(False, f"{snap.nsi} went operational at tick {snap.tick} without an oracle witness")
        count += 1
    return Check(True, f"{count} instantiations witnessed", compared=count)


def _windows(trace: Sequence[str]) -> tuple[dict[str, tuple[int, int, str]], list[int]]:
    """Per NSI: (admitted seq, outcome seq, outcome kind). Also the seqs of environment events."""
    start: dict[str, int] = {}
    out: dict[str, tuple[int, int, str]] = {}
    env: list[int] = []
    for line in trace:
        ev = json.loads(line)
        nsi = ev["payload"].get("nsi")
        if ev["sender"] == ENV:
            env.append(ev["seq"])
        elif ev["kind"] == "AdmittedRequest" and ev["receiver"] == "conductor":
            start.setdefault(nsi, ev["seq"])
        elif ev["kind"] in ("NsiOperational", "LateReject") and nsi in start and nsi not in out:
            out[nsi] = (start[nsi], ev["seq"], ev["kind"])
    for nsi, s in start.items():
        out.setdefault(nsi, (s, len(trace) + 1, ""))
    return out, env


def check_completeness(result: RunResult) -> Check:
    """Exact mode only: an admitted request the federation gives up on must be oracle-infeasible.

    Requests whose admission-to-outcome window overlaps another request's window or an
    environment event are not compared, since the snapshot no longer describes what the
    conductor saw."""
    fed = result.federation
    if not fed.exact:
        return Check(True, "heuristic mode", skipped=True)
    windows, env = _windows(result.trace)
    compared = skipped = 0
    for snap in fed.snapshots:
        if snap.kind != "AdmittedRequest" or snap.nsi not in windows:
            continue
        lo, hi, outcome = windows[snap.nsi]
        busy = any(a < hi and lo < b for n, (a, b, _) in windows.items() if n != snap.nsi)
        if busy or any(lo < e < hi for e in env) or not outcome:
            skipped += 1
            continue
        world = fed.world(snap.substrate)
        try:
            world.check_size()
        except InstanceTooLarge as exc:
            return Check(True, str(exc), skipped=True)
        feasible = instantiation_witness(world, snap.nsi, fed.requirements_of(snap)) is not None
        if feasible != (outcome == "NsiOperational"):
            verdict = "feasible" if feasible else "infeasible"
            return Check(False, f"{snap.nsi}: federation {outcome} but oracle says {verdict}")
        compared += 1
    return Check(True, f"{compared} compared, {skipped} overlapping", compared=compared)


def check(result: RunResult) -> dict[str, Check]:
    """Every audit over one run; a fresh run with snapshots is made when the given one has none."""
    if not result.federation.capture:
        result = run(result.scenario, seed=result.federation.seed, snapshots=True,
                     exact=result.federation.exact, inputs=external_inputs(result.trace))
    trace = result.trace
    verdicts = {
        "conservation": check_conservation(trace, result.scenario),
        "reclamation": check_reclamation(trace),
        "isolation": check_isolation(trace, result.scenario),
    }
    for name, v in result.patterns.items():
        verdicts[f"conformance:{name}"] = Check(v.ok, v.detail)
    verdicts["escalation_minimality"] = check_escalation(result)
    verdicts["soundness"] = check_soundness(result)
    verdicts["completeness"] = check_completeness(result)
    reduced = reduce_metrics(trace, result.scenario)
    diff = sorted(k for k in reduced if reduced[k] != result.metrics.get(k))
    verdicts["metrics_reconciliation"] = Check(not diff, f"mismatch in {diff}" if diff else "")
    billing_ok = reduced["billing"] == result.metrics["billing"] and reduced["billing_total"] == result.metrics["billing_total"]
    verdicts["billing_reconciliation"] = Check(billing_ok, "" if billing_ok else
                                               f"{reduced['billing']} vs {result.metrics['billing']}")
    return verdicts


# -- one-off oracle questions ----------------------------------------------------------


class NoOracleQuestion(ValueError):
    code = "no-oracle-question"


def oracle_event(scenario: Scenario, index: int, seed: int | None = None, exact: bool | None = None) -> dict[str, Any]:
    """Ask the oracle about timeline entry `index` in the state the federation was in when it arrived."""
    if not 0 <= index < len(scenario.timeline):
        raise NoOracleQuestion(f"event {index} out of range (timeline has {len(scenario.timeline)} entries)")
    entry = scenario.timeline[index]
    if entry.type not in ("request", "modify", "degrade"):
        raise NoOracleQuestion(f"event {index} is a {entry.type}; only requests, modifications and degradations apply")
    result = run(scenario, seed=seed, exact=exact, snapshots=True)
    fed = result.federation
    out: dict[str, Any] = {"event": index, "type": entry.type, "tick": entry.tick}
    if entry.type == "request":
        nsi = entry.data["nsi"]
        snaps = [x for x in fed.snapshots if x.nsi == nsi and x.kind in ("AdmittedRequest", "SliceRequest")]
        snap = next((x for x in snaps if x.kind == "AdmittedRequest"), snaps[0])
        out["nsi"] = nsi
        out["evaluated_at_tick"] = snap.tick
        out.update(oracle_feasible(fed.world(snap.substrate), nsi, fed.requirements_of(snap)).to_dict())
        return out
    if entry.type == "modify":
        nsi = entry.data["nsi"]
        snap = next((x for x in fed.snapshots if x.kind == "ModifyRequest" and x.nsi == nsi
                     and x.tick >= entry.tick and x.view is not None), None)
        out["nsi"] = nsi
        exp = expected_level(fed, snap) if snap is not None else None
        out["applicable"] = exp is not None
        out["minimal_level"] = exp[1] if exp is not None else None
        return out
    target = entry.data["target"]
    out["target"] = target
    out["episodes"] = []
    for snap in fed.snapshots:
        if snap.kind == "DegradationEvent" and snap.payload.get("target") == target and snap.tick >= entry.tick:
            exp = expected_level(fed, snap)
            out["episodes"].append({"nsi": snap.nsi, "tick": snap.tick, "applicable": exp is not None,
                                    "minimal_level": exp[1] if exp is not None else None})
    return out
