"""Coordination delegate projection and adapter synthesis.

A coordination delegate (CD) sits between two roles and lets through only
the interactions the choreography permits for that pair.  An adapter sits
between a concrete service and a CD, built from a mapping report by a fixed
set of rules: drop what has no mapping, aggregate what is scattered, split
what is bundled, and reorder split parts the provider wants in another order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .errors import (
    AmbiguityError,
    ConfigurationError,
    InvariantViolation,
    NoInteractionError,
    UnsatisfiableAdaptationError,
)
from .mapping import (
    AMBIGUOUS,
    ONE_WAY,
    PROVIDED,
    REQUIRED,
    DataMapping,
    InterfaceSpec,
    MappingReport,
    OperationSpec,
    canonical_json,
)
from .patterns import (
    Aggregator,
    MessageFilter,
    PathMap,
    PatternInstance,
    Resequencer,
    SplitPart,
    Splitter,
    pattern_from_json,
    pattern_to_json,
    validate_chain,
)
from .protocol import (
    RECEIVE,
    SEND,
    ChoreographySpec,
    Label,
    ProtocolSpec,
    Task,
    Transition,
    bfs_order,
    protocol_from_json,
)
from .schema import FieldPath, MessageSchema

# --------------------------------------------------------------------------
# coordination delegates
# --------------------------------------------------------------------------


def cd_id_for(role_a: str, role_b: str) -> str:
    return f"CD_{role_a}_{role_b}"


@dataclass(frozen=True)
class CDSpec:
    id: str
    role_pair: tuple[str, str]
    # written from the first role's point of view: send means first -> second
    enforcement: ProtocolSpec
    schemas: Mapping[str, MessageSchema] = field(compare=False)

    @property
    def forward_map(self) -> dict[str, str]:
        return {lb.operation: lb.operation for lb in self.enforcement.labels}

    def protocol_for(self, role: str) -> ProtocolSpec:
        """The enforcement machine as seen by ``role`` (send = role calls the CD)."""
        if role == self.role_pair[0]:
            return self.enforcement
        if role == self.role_pair[1]:
            return self.enforcement.flipped()
        raise ConfigurationError(f"{role} is not served by {self.id}")

    def label_for(self, sender: str, qname: str) -> Label:
        op = self.schemas[qname].operation
        return Label(op, SEND if sender == self.role_pair[0] else RECEIVE, qname)

    def view_for(self, role: str) -> InterfaceSpec:
        """The CD's interface as a counterpart of ``role``.

        The CD provides the operations ``role`` initiates and requires
        the ones it must deliver to ``role``.
        """
        ops = []
        for label in sorted({lb for lb in self.protocol_for(role).labels}):
            direction = PROVIDED if label.polarity == SEND else REQUIRED
            ops.append(OperationSpec(label.operation, direction, ONE_WAY, self.schemas[label.message]))
        return InterfaceSpec(self.id, tuple(ops))

    def to_json(self) -> dict[str, Any]:
        from .schema import schema_to_json

        return {
            "id": self.id,
            "rolePair": list(self.role_pair),
            "enforcement": self.enforcement.to_json(),
            "forwardMap": self.forward_map,
            "messages": [schema_to_json(self.schemas[q]) for q in sorted(self.schemas)],
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "CDSpec":
        from .schema import schema_from_json

        schemas = {s.qname: s for s in (schema_from_json(m) for m in obj["messages"])}
        return cls(obj["id"], tuple(obj["rolePair"]), protocol_from_json(obj["enforcement"]), schemas)


def merged_view(role: str, cds: Iterable[CDSpec]) -> InterfaceSpec:
    ops: list[OperationSpec] = []
    for cd in sorted(cds, key=lambda c: c.id):
        if role in cd.role_pair:
            ops.extend(cd.view_for(role).operations)
    return InterfaceSpec(f"CDs[{role}]", tuple(ops))


def synthesize_cd(choreo: ChoreographySpec, role_a: str, role_b: str) -> CDSpec:
    """Project the choreography onto one role pair.

    Tasks outside the pair are contracted to epsilon moves, the result is
    determinized by subset construction and minimized by partition
    refinement.  States are named by breadth-first discovery order.
    """
    for role in (role_a, role_b):
        if role not in choreo.roles:
            raise ConfigurationError(f"role {role} does not occur in the choreography")
    pair = {role_a, role_b}
    pair_tasks = [t for t in choreo.tasks if {t.initiator, t.target} == pair]
    if not pair_tasks:
        raise NoInteractionError(f"{role_a} and {role_b} share no task")
    cd = cd_id_for(role_a, role_b)

    schemas: dict[str, MessageSchema] = {}
    label_of: dict[tuple[str, str, str], Label] = {}
    for t in pair_tasks:
        qname = f"{cd}.{t.operation}.{t.message.message}"
        known = schemas.get(qname)
        if known is not None and known.root != t.message.root:
            raise InvariantViolation(f"tasks disagree on the schema of {qname}")
        schemas[qname] = t.message.requalified(qname)
        label = Label(t.operation, SEND if t.initiator == role_a else RECEIVE, qname)
        for other in label_of.values():
            if other.operation == label.operation and other != label:
                raise InvariantViolation(f"operation {t.operation} is used both ways or with two messages")
        label_of[t.key] = label

    nfa = choreo.nfa(keep=lambda t: {t.initiator, t.target} == pair)

    def moves(subset: frozenset[str]) -> list[tuple[Label, frozenset[str]]]:
        grouped: dict[Label, set[str]] = {}
        for key, targets in nfa.moves(subset).items():
            grouped.setdefault(label_of[key], set()).update(targets)
        return [(lb, nfa.closure(grouped[lb])) for lb in sorted(grouped)]

    start = nfa.initial()
    subsets = bfs_order(start, lambda s: [nxt for _, nxt in moves(s)])
    delta = {s: dict(moves(s)) for s in subsets}
    finals = {s for s in subsets if nfa.is_final(s)}
    return CDSpec(cd, (role_a, role_b), _minimize(subsets, start, finals, delta), schemas)


def _minimize(states: list, initial: Any, finals: set, delta: Mapping[Any, Mapping[Label, Any]]) -> ProtocolSpec:
    # Moore refinement; the DFA is partial, a missing move is its own class
    block = {s: int(s in finals) for s in states}
    while True:
        signature = {
            s: (block[s], tuple(sorted((lb, block[t]) for lb, t in delta[s].items())))
            for s in states
        }
        ids: dict[Any, int] = {}
        refined = {s: ids.setdefault(signature[s], len(ids)) for s in states}
        if len(ids) == len(set(block.values())):
            break
        block = refined
    reps = {}
    for s in states:
        reps.setdefault(block[s], s)

    def succ(b: int) -> list[int]:
        return [block[t] for _, t in sorted(delta[reps[b]].items())]

    order = bfs_order(block[initial], succ)
    name = {b: f"s{i}" for i, b in enumerate(order)}
    transitions = tuple(
        Transition(name[b], lb, name[block[t]])
        for b in order
        for lb, t in sorted(delta[reps[b]].items())
    )
    return ProtocolSpec(
        tuple(name[b] for b in order),
        name[block[initial]],
        frozenset(name[block[s]] for s in finals),
        transitions,
    )


def synthesize_cds(choreo: ChoreographySpec) -> list[CDSpec]:
    """One CD per role pair that shares a task, ordered by first appearance."""
    pairs: list[tuple[str, str]] = []
    for t in _tasks_in_flow_order(choreo):
        if not any({t.initiator, t.target} == set(p) for p in pairs):
            pairs.append((t.initiator, t.target))
    return [synthesize_cd(choreo, a, b) for a, b in pairs]


def _tasks_in_flow_order(choreo: ChoreographySpec) -> list[Task]:
    order = bfs_order(choreo.start, lambda n: choreo.successors[n])
    return [choreo.nodes[n].task for n in order if choreo.nodes[n].task is not None]


# --------------------------------------------------------------------------
# adapters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InboundBinding:
    operation: str
    entry: str


@dataclass(frozen=True)
class OutboundBinding:
    exit: str
    operation: str
    message: str


@dataclass(frozen=True)
class AdapterSpec:
    id: str
    consumer_side: str
    provider_side: str
    chain: tuple[PatternInstance, ...]
    inbound_binding: tuple[InboundBinding, ...]
    outbound_binding: tuple[OutboundBinding, ...]
    reverse: "AdapterSpec | None" = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "chain", tuple(self.chain))
        object.__setattr__(self, "inbound_binding", tuple(self.inbound_binding))
        object.__setattr__(self, "outbound_binding", tuple(self.outbound_binding))

    @property
    def needed(self) -> bool:
        """False when both directions are plain rebindings (no pattern at all)."""
        return bool(self.chain) or (self.reverse is not None and self.reverse.needed)

    def directions(self) -> list["AdapterSpec"]:
        return [self] + ([self.reverse] if self.reverse is not None else [])

    def entry_qnames(self) -> list[str]:
        return [b.entry for b in self.inbound_binding]

    def validate(self, registry: Mapping[str, MessageSchema] | None = None) -> None:
        """Check the chain's qname flow and that each exit has one binding."""
        exits = validate_chain(list(self.chain), self.entry_qnames(), registry)
        bound = [b.exit for b in self.outbound_binding]
        if len(set(bound)) != len(bound):
            raise InvariantViolation(f"{self.id}: an exit qname is bound twice")
        if set(exits) != set(bound):
            raise InvariantViolation(
                f"{self.id}: chain exits {sorted(set(exits))} differ from bound exits {sorted(set(bound))}"
            )
        if registry is not None:
            for b in self.outbound_binding:
                src, dst = registry.get(b.exit), registry.get(b.message)
                if src is not None and dst is not None and src.root != dst.root:
                    raise InvariantViolation(f"{self.id}: {b.exit} cannot be rebound to {b.message}")
        if self.reverse is not None:
            self.reverse.validate(registry)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "consumerSide": self.consumer_side,
            "providerSide": self.provider_side,
            "chain": [pattern_to_json(p) for p in self.chain],
            "inboundBinding": [{"operation": b.operation, "entry": b.entry} for b in self.inbound_binding],
            "outboundBinding": [
                {"exit": b.exit, "operation": b.operation, "message": b.message} for b in self.outbound_binding
            ],
            "reverse": self.reverse.to_json() if self.reverse is not None else None,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "AdapterSpec":
        return cls(
            obj["id"],
            obj["consumerSide"],
            obj["providerSide"],
            tuple(pattern_from_json(p) for p in obj["chain"]),
            tuple(InboundBinding(b["operation"], b["entry"]) for b in obj["inboundBinding"]),
            tuple(OutboundBinding(b["exit"], b["operation"], b["message"]) for b in obj["outboundBinding"]),
            cls.from_json(obj["reverse"]) if obj.get("reverse") else None,
        )


def _sent(iface: InterfaceSpec) -> list[tuple[OperationSpec, MessageSchema]]:
    out = []
    for op in iface.operations:
        if op.direction == REQUIRED:
            out.append((op, op.input))
        elif op.output is not None:
            out.append((op, op.output))
    return out


def _expected(iface: InterfaceSpec) -> list[tuple[OperationSpec, MessageSchema]]:
    out = []
    for op in iface.operations:
        if op.direction == PROVIDED:
            out.append((op, op.input))
        elif op.output is not None:
            out.append((op, op.output))
    return out


def _pm(pairs: Iterable[tuple[FieldPath, FieldPath]]) -> PathMap:
    return tuple(pairs)


def _check_unambiguous(report: MappingReport, involved: set[str]) -> None:
    pending = []
    for amb in report.ambiguities:
        touched = {q for opt in amb.options for ch in opt for q in (ch.sub, ch.sup)}
        if touched & involved:
            pending.append(amb)
    for m in report.live_mappings:
        if m.status == AMBIGUOUS and {m.sub, m.sup} & involved and not any(a.scope == m.ambiguity for a in pending):
            pending.extend(a for a in report.ambiguities if a.scope == m.ambiguity)
    if pending:
        text = "\n".join(a.describe() for a in pending)
        raise AmbiguityError(
            "ambiguous mappings must be resolved first; confirm one alternative with a hint:\n" + text,
            pending,
        )


def select_patterns(
    report: MappingReport,
    consumer: InterfaceSpec,
    provider: InterfaceSpec,
    consumer_protocol: ProtocolSpec | None = None,
    provider_protocol: ProtocolSpec | None = None,
    adapter_id: str | None = None,
) -> AdapterSpec:
    """Derive the pattern chain carrying ``consumer``'s sends to ``provider``.

    Rules fire in a fixed order: filter, aggregate, split, resequence.
    Parts of a split are ordered by where their first source field sits in
    the consumer message; a resequencer is added when the provider
    protocol forces a different first-occurrence order on them.
    """
    sent = _sent(consumer)
    expected = _expected(provider)
    s_names = [m.qname for _, m in sent]
    e_names = [m.qname for _, m in expected]
    s_schema = {m.qname: m for _, m in sent}
    e_schema = {m.qname: m for _, m in expected}
    op_of = {m.qname: op.name for op, m in [*sent, *expected]}
    # The consumer protocol does not influence the chain: aggregation
    # waits for every feeder whatever order they are sent in.
    del consumer_protocol

    relevant: list[DataMapping] = [
        m for m in report.live_mappings
        if (m.sub in s_schema and m.sup in e_schema) or (m.sup in s_schema and m.sub in e_schema)
    ]
    _check_unambiguous(report, set(s_names) | set(e_names))

    chain: list[PatternInstance] = []
    mapped = {q for m in relevant for q in (m.sub, m.sup)}
    dropped = [s for s in s_names if s not in mapped]
    if dropped:
        chain.append(MessageFilter(frozenset(dropped)))

    # aggregation: several consumer messages feed one provider message
    feeding: dict[str, list[DataMapping]] = {}
    for m in relevant:
        if m.relation == "sub" and m.sub in s_schema:
            feeding.setdefault(m.sup, []).append(m)
    produced: dict[str, list[tuple[str, PathMap]]] = {}
    aggregated: set[str] = set()
    for e in e_names:
        feeders = sorted(feeding.get(e, []), key=lambda m: s_names.index(m.sub))
        if not feeders:
            continue
        covered = {c.target for m in feeders for c in m.correspondences.pairs}
        for path, _ in e_schema[e].leaves():
            if path not in covered:
                raise UnsatisfiableAdaptationError(
                    f"no consumer message supplies {e}#{path}; "
                    "add the field to a consumer message or confirm a correspondence",
                    f"{e}#{path}",
                )
        if len(feeders) == 1:
            m = feeders[0]
            produced.setdefault(m.sub, []).append((e, _pm((c.source, c.target) for c in m.correspondences.pairs)))
            continue
        for m in feeders:
            if m.sub in aggregated:
                raise AmbiguityError(
                    f"{m.sub} feeds several provider messages; reject the unwanted correspondences", []
                )
            aggregated.add(m.sub)
        chain.append(
            Aggregator(
                tuple(m.sub for m in feeders),
                e,
                tuple((m.sub, _pm((c.source, c.target) for c in m.correspondences.pairs)) for m in feeders),
            )
        )

    # splitting and renaming: one consumer message yields provider messages
    for m in relevant:
        if m.relation == "sub" and m.sup in s_schema:
            produced.setdefault(m.sup, []).append((m.sub, _pm((c.target, c.source) for c in m.correspondences.pairs)))
        elif m.relation == "equiv":
            if m.sub in s_schema:
                produced.setdefault(m.sub, []).append((m.sup, _pm((c.source, c.target) for c in m.correspondences.pairs)))
            else:
                produced.setdefault(m.sup, []).append((m.sub, _pm((c.target, c.source) for c in m.correspondences.pairs)))

    outbound: list[OutboundBinding] = []
    splitters: list[Splitter] = []
    for s in s_names:
        if s in aggregated and s in produced:
            raise UnsatisfiableAdaptationError(
                f"{s} would have to be both aggregated and split, which one chain cannot do", None
            )
        parts = produced.get(s)
        if not parts:
            continue
        position = {p: i for i, (p, _) in enumerate(s_schema[s].leaves())}
        parts = sorted(parts, key=lambda part: min(position[src] for src, _ in part[1]))
        if len(parts) == 1 and all(src == dst for src, dst in parts[0][1]) and \
                len(parts[0][1]) == s_schema[s].leaf_count == e_schema[parts[0][0]].leaf_count:
            target = parts[0][0]
            outbound.append(OutboundBinding(s, op_of[target], target))
            continue
        splitters.append(Splitter(s, tuple(SplitPart(t, pm) for t, pm in parts)))
    chain.extend(splitters)

    for sp in splitters:
        targets = [p.target for p in sp.parts]
        if len(targets) < 2 or provider_protocol is None:
            continue
        order = provider_protocol.forced_order(targets)
        if order is not None and order != targets:
            chain.append(Resequencer(tuple(order)))

    for stage in chain:
        if isinstance(stage, Aggregator):
            outbound.append(OutboundBinding(stage.target, op_of[stage.target], stage.target))
        elif isinstance(stage, Splitter):
            outbound.extend(OutboundBinding(p.target, op_of[p.target], p.target) for p in stage.parts)
    inbound = tuple(InboundBinding(op_of[s], s) for s in s_names)
    spec = AdapterSpec(
        adapter_id or f"{consumer.service_name}->{provider.service_name}",
        consumer.service_name,
        provider.service_name,
        tuple(chain),
        inbound,
        tuple(sorted(outbound, key=lambda b: b.exit)),
    )
    return spec


def restrict(iface: InterfaceSpec, keep: Iterable[str]) -> InterfaceSpec:
    """The operations of ``iface`` carrying at least one of the ``keep`` messages."""
    wanted = set(keep)
    ops = tuple(op for op in iface.operations if any(m.qname in wanted for _, m in op.messages()))
    return InterfaceSpec(iface.service_name, ops)


def attachment_messages(report: MappingReport, service: InterfaceSpec, cd: CDSpec, first: bool) -> set[str]:
    """Service messages routed through ``cd``.

    A message belongs to the CD its mappings point at; messages without
    any mapping are handled by the service's first CD (so that they are
    filtered somewhere rather than lost).
    """
    own = {r.qname for r in service.messages()}
    cd_msgs = set(cd.schemas)
    keep = set()
    for m in report.live_mappings:
        if m.sub in own and m.sup in cd_msgs:
            keep.add(m.sub)
        if m.sup in own and m.sub in cd_msgs:
            keep.add(m.sup)
    if first:
        keep |= set(report.unmapped) & own
    return keep


def synthesize_adapter(
    report: MappingReport,
    service: InterfaceSpec,
    service_protocol: ProtocolSpec | None,
    cd: CDSpec,
    role: str,
    first: bool,
    all_cds: Iterable[CDSpec] = (),
) -> AdapterSpec:
    """Adapter for one (service, CD) attachment, both directions.

    The primary direction is service to CD when the service sends
    anything through this CD, and CD to service otherwise.
    """
    for other in all_cds:
        if other.id == cd.id:
            continue
        clash = attachment_messages(report, service, cd, False) & attachment_messages(report, service, other, False)
        if clash:
            raise ConfigurationError(f"{sorted(clash)} map into both {cd.id} and {other.id}")
    mine = restrict(service, attachment_messages(report, service, cd, first))
    view = cd.view_for(role)
    cd_proto = cd.protocol_for(role).flipped()
    adapter_id = f"{service.service_name}-{cd.id}"
    outgoing = select_patterns(report, mine, view, service_protocol, cd_proto, adapter_id)
    incoming = select_patterns(report, view, mine, cd_proto, service_protocol, adapter_id)
    if outgoing.inbound_binding or not incoming.inbound_binding:
        primary, secondary = outgoing, incoming
    else:
        primary, secondary = incoming, outgoing
    reverse = secondary if secondary.inbound_binding else None
    return AdapterSpec(
        primary.id,
        primary.consumer_side,
        primary.provider_side,
        primary.chain,
        primary.inbound_binding,
        primary.outbound_binding,
        reverse,
    )


# --------------------------------------------------------------------------
# emission
# --------------------------------------------------------------------------


def synthesis_report(spec: AdapterSpec) -> list[str]:
    """One line per pattern instance and one per correspondence it consumes."""
    lines: list[str] = []
    for direction in spec.directions():
        for stage in direction.chain:
            if isinstance(stage, MessageFilter):
                lines.append(f"MessageFilter drops {', '.join(sorted(stage.drop_set))}: no mapping inferred")
            elif isinstance(stage, Aggregator):
                lines.append(f"Aggregator merges {' + '.join(stage.expected)} into {stage.target}")
                for source, pm in stage.merge_map:
                    lines.extend(f"  uses {source}#{s} -> {stage.target}#{d}" for s, d in pm)
            elif isinstance(stage, Splitter):
                targets = ", ".join(p.target for p in stage.parts)
                lines.append(f"Splitter splits {stage.source} into {targets}")
                for part in stage.parts:
                    lines.extend(f"  uses {stage.source}#{s} -> {part.target}#{d}" for s, d in part.path_map)
            else:
                lines.append(f"Resequencer releases in provider order {', '.join(stage.order)}")
    return lines


def emit_adapter(
    spec: AdapterSpec, registry: Mapping[str, MessageSchema] | None = None
) -> tuple[str, str]:
    """Validate, then return (canonical artifact text, synthesis report text)."""
    spec.validate(registry)
    report = synthesis_report(spec)
    return canonical_json(spec.to_json()), "\n".join(report) + ("\n" if report else "")


def load_adapter(text: str) -> AdapterSpec:
    return AdapterSpec.from_json(json.loads(text))
