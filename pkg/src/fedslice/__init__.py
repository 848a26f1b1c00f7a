"""Deterministic simulator of federated multi-domain network slice orchestration."""

from __future__ import annotations

from .federation import Federation
from .kernel import Kernel, Kind, Message, assert_sequence, load_pattern
from .model import ServiceRequirements
from .oracle import oracle_feasible
from .runner import RunResult, check, replay, run
from .scenario import Scenario, load, load_bundled, loads

__all__ = [
    "Federation",
    "Kernel",
    "Kind",
    "Message",
    "RunResult",
    "Scenario",
    "ServiceRequirements",
    "assert_sequence",
    "check",
    "load",
    "load_bundled",
    "load_pattern",
    "loads",
    "oracle_feasible",
    "replay",
    "run",
]

__version__ = "0.1.0"
