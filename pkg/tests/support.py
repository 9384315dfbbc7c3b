"""Shared helpers for the test suites: fixture loading and small builders."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any

from eipadapt.enactment import Harness, build_harness, load_scenario, make_stubs
from eipadapt.mapping import (
    ONE_WAY,
    PROVIDED,
    REQUIRED,
    InterfaceSpec,
    MappingReport,
    OperationSpec,
    infer_mappings,
    load_interface,
)
from eipadapt.protocol import ChoreographySpec, ProtocolSpec, load_choreography, load_protocol
from eipadapt.schema import MessageSchema, name_similarity, schema_from_json
from eipadapt.synthesis import AdapterSpec, CDSpec, merged_view, synthesize_adapter, synthesize_cds

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"

SERVICE_FILES = {"Client": "client", "SmartCart": "smartcart", "SelfCheckoutMachine": "selfcheckout"}


def msg(qname: str, root: dict[str, Any]) -> MessageSchema:
    return schema_from_json({"qname": qname, "root": root})


def op(name: str, direction: str, schema: MessageSchema) -> OperationSpec:
    return OperationSpec(name, direction, ONE_WAY, schema)


def provided(name: str, schema: MessageSchema) -> OperationSpec:
    return op(name, PROVIDED, schema)


def required(name: str, schema: MessageSchema) -> OperationSpec:
    return op(name, REQUIRED, schema)


@dataclass
class Loaded:
    choreo: ChoreographySpec
    services: dict[str, tuple[InterfaceSpec, ProtocolSpec]]
    cds: list[CDSpec]
    reports: dict[str, MappingReport]
    adapters: list[AdapterSpec]

    def adapter(self, adapter_id: str) -> AdapterSpec:
        return next(a for a in self.adapters if a.id == adapter_id)

    def cd(self, cd_id: str) -> CDSpec:
        return next(c for c in self.cds if c.id == cd_id)


def load_project(name: str) -> Loaded:
    root = FIXTURES / name
    choreo = load_choreography(root / "choreography.json")
    cds = synthesize_cds(choreo)
    services, reports, adapters = {}, {}, []
    for role in sorted(choreo.roles):
        iface = load_interface(root / f"{SERVICE_FILES[role]}.interface.json")
        proto = load_protocol(root / f"{SERVICE_FILES[role]}.protocol.json", iface.service_name)
        services[role] = (iface, proto)
        mine = sorted((cd for cd in cds if role in cd.role_pair), key=lambda c: c.id)
        report = infer_mappings(iface, merged_view(role, mine))
        reports[role] = report
        for index, cd in enumerate(mine):
            adapters.append(synthesize_adapter(report, iface, proto, cd, role, index == 0, mine))
    return Loaded(choreo, services, cds, reports, adapters)


def harness_for(loaded: Loaded, scripts: dict, reactions: dict, seed: int = 7, bypass: bool = False) -> Harness:
    stubs = make_stubs(loaded.services, scripts, reactions)
    return build_harness(loaded.choreo, stubs, loaded.cds, loaded.adapters, seed, bypass)


def scenario_harness(name: str, scenario: str, seed: int = 7, bypass: bool = False) -> Harness:
    loaded = load_project(name)
    scripts, reactions = load_scenario(FIXTURES / name / "scenarios" / f"{scenario}.json")
    return harness_for(loaded, scripts, reactions, seed, bypass)


def brute_force_injections(t1: MessageSchema, t2: MessageSchema) -> tuple[Fraction | None, list[dict[str, str]]]:
    """Every kind-preserving injection of t1's leaves into t2's, scored.

    Returns the best total score and the optimal assignments in
    lexicographic order of target document positions.
    """
    src = t1.leaves()
    tgt = t2.leaves()
    best: Fraction | None = None
    optimal: list[dict[str, str]] = []
    for chosen in itertools.permutations(range(len(tgt)), len(src)):
        if any(src[i][1] != tgt[j][1] for i, j in enumerate(chosen)):
            continue
        score = sum(
            (name_similarity(src[i][0].leaf_name, tgt[j][0].leaf_name) for i, j in enumerate(chosen)),
            Fraction(0),
        )
        assignment = {str(src[i][0]): str(tgt[j][0]) for i, j in enumerate(chosen)}
        if best is None or score > best:
            best, optimal = score, [assignment]
        elif score == best:
            optimal.append(assignment)
    return best, optimal
