"""Deterministic in-process enactment of a choreography.

Scripted service stubs talk to coordination delegates through their
adapters.  One seeded scheduler picks which ready actor moves next, so a
seed fully determines the trace.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import AnalysisError, ConfigurationError, InvariantViolation, RoutingError, WiringError
from .mapping import REQUIRED, InterfaceSpec
from .patterns import Channel, Headers, PatternState, RuntimeMessage, run_chain
from .protocol import SEND, ChoreographySpec, ProtocolSpec
from .schema import MessageSchema, coerce_payload, jsonable, validate_payload
from .synthesis import AdapterSpec, CDSpec

QUIESCENT = "quiescent"

SENT = "sent"
FORWARDED = "forwarded"
DROPPED = "dropped"
BLOCKED = "blocked"
DEAD_LETTER = "dead-letter"
DELIVERED = "delivered"
BOOTSTRAP = "bootstrap"


@dataclass(frozen=True)
class ScriptAction:
    operation: str
    payload: Mapping[str, Any]
    # "quiescent": wait until nothing else in the system can move
    when: str | None = None


@dataclass(frozen=True)
class Reaction:
    on: str
    operation: str
    payload: Mapping[str, Any]


@dataclass(frozen=True)
class ServiceStub:
    role: str
    interface: InterfaceSpec
    protocol: ProtocolSpec
    script: tuple[ScriptAction, ...] = ()
    reactions: tuple[Reaction, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "script", tuple(self.script))
        object.__setattr__(self, "reactions", tuple(self.reactions))
        # Only the alphabet is checked: scripts that break the protocol's
        # order are exactly what the coordination delegates must contain.
        sendable = {lb.operation for lb in self.protocol.labels if lb.polarity == SEND}
        for action in [*self.script, *self.reactions]:
            op = action.operation
            if op not in sendable:
                raise InvariantViolation(f"{self.role} cannot send {op}: not in its protocol")
            if action_schema(self.interface, op) is None:
                raise InvariantViolation(f"{self.role} has no required operation {op}")
        for action in self.script:
            if action.when not in (None, QUIESCENT):
                raise InvariantViolation(f"unknown script condition {action.when!r}")

    @property
    def service(self) -> str:
        return self.interface.service_name


def action_schema(iface: InterfaceSpec, operation: str) -> MessageSchema | None:
    for op in iface.operations:
        if op.name == operation and op.direction == REQUIRED:
            return op.input
    return None


def payload_digest(payload: Any) -> str:
    text = json.dumps(jsonable(payload), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    kind: str
    source: str
    target: str
    operation: str = ""
    qname: str = ""
    digest: str = ""
    detail: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "tick": self.tick,
            "kind": self.kind,
            "from": self.source,
            "to": self.target,
            "operation": self.operation,
            "qname": self.qname,
            "payloadDigest": self.digest,
            "detail": dict(self.detail),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "TraceEvent":
        return cls(
            obj["tick"], obj["kind"], obj["from"], obj["to"],
            obj.get("operation", ""), obj.get("qname", ""), obj.get("payloadDigest", ""),
            obj.get("detail", {}),
        )


@dataclass
class Trace:
    events: list[TraceEvent]
    complete: bool = True
    pending: int = 0
    # delivered payloads by tick, kept in memory for value checks
    payloads: dict[int, dict[str, Any]] = field(default_factory=dict, compare=False)

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def dumps(self) -> str:
        lines = [json.dumps(e.to_json(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
                 for e in self.events]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Trace":
        events = [TraceEvent.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
        boot = events[0].detail if events and events[0].kind == BOOTSTRAP else {}
        return cls(events, bool(boot.get("complete", True)), int(boot.get("pending", 0)))


# --------------------------------------------------------------------------
# harness
# --------------------------------------------------------------------------


@dataclass
class _Executor:
    name: str
    spec: AdapterSpec
    source: str  # a role or a CD id
    dest_kind: str  # "cd" or "stub"
    dest: str
    state: PatternState = field(default_factory=PatternState)
    inbox: deque = field(default_factory=deque)

    @property
    def bindings(self) -> dict[str, Any]:
        return {b.exit: b for b in self.spec.outbound_binding}


@dataclass
class _StubRun:
    stub: ServiceStub
    inbox: deque = field(default_factory=deque)
    script: deque = field(default_factory=deque)
    received: list[RuntimeMessage] = field(default_factory=list)


@dataclass
class _CDRun:
    spec: CDSpec
    state: str
    inbox: deque = field(default_factory=deque)


class Harness:
    """Stubs, CDs and adapter executors wired like the adapter-based architecture."""

    def __init__(
        self,
        choreo: ChoreographySpec,
        stubs: Mapping[str, ServiceStub],
        cds: Iterable[CDSpec],
        adapters: Iterable[AdapterSpec],
        seed: int,
        bypass: bool = False,
    ):
        self.choreo = choreo
        self.stubs = dict(stubs)
        self.cds = {cd.id: cd for cd in cds}
        self.adapters = list(adapters)
        self.seed = seed
        self.bypass = bypass
        self.registry: dict[str, MessageSchema] = {}
        self.executors: dict[str, _Executor] = {}
        self.routes: dict[tuple[str, str], str] = {}
        self._wire()
        self.reset()

    @property
    def adapter_count(self) -> int:
        return sum(1 for a in self.adapters if a.needed)

    def _wire(self) -> None:
        for role in sorted(self.choreo.roles):
            if role not in self.stubs:
                raise WiringError(f"role {role} is not bound to any service stub")
        for role in sorted(self.stubs):
            if role not in self.choreo.roles:
                raise WiringError(f"stub bound to unknown role {role}")
        service_role = {s.service: r for r, s in self.stubs.items()}
        for stub in self.stubs.values():
            for ref in stub.interface.messages():
                self.registry[ref.qname] = ref.schema
        for cd in self.cds.values():
            self.registry.update(cd.schemas)

        for cd in sorted(self.cds.values(), key=lambda c: c.id):
            for role in cd.role_pair:
                service = self.stubs[role].service
                found = [a for a in self.adapters if {a.consumer_side, a.provider_side} == {service, cd.id}]
                if not found:
                    raise WiringError(f"no adapter between {service} and {cd.id}")
                if len(found) > 1:
                    raise WiringError(f"several adapters between {service} and {cd.id}")
                adapter = found[0]
                try:
                    adapter.validate(self.registry)
                except (InvariantViolation, ConfigurationError) as exc:
                    raise WiringError(f"adapter {adapter.id}: {exc}") from None
                for index, direction in enumerate(adapter.directions()):
                    name = f"adapter:{adapter.id}#{index}"
                    if direction.consumer_side == cd.id:
                        ex = _Executor(name, direction, cd.id, "stub", service_role[direction.provider_side])
                    else:
                        ex = _Executor(name, direction, role, "cd", cd.id)
                    self.executors[name] = ex
                    for b in direction.inbound_binding:
                        key = (ex.source, b.entry)
                        if key in self.routes:
                            raise WiringError(f"{b.entry} from {ex.source} is routed twice")
                        self.routes[key] = name

        for role, stub in sorted(self.stubs.items()):
            for op in stub.interface.operations:
                if op.direction == REQUIRED and (role, op.input.qname) not in self.routes:
                    raise WiringError(f"operation {op.name} of {stub.service} reaches no CD")
        for cd in self.cds.values():
            for label in cd.enforcement.labels:
                receiver = cd.role_pair[1] if label.polarity == SEND else cd.role_pair[0]
                if (cd.id, label.message) not in self.routes:
                    raise WiringError(f"{cd.id} has no channel delivering {label.operation} to {receiver}")

    def reset(self) -> None:
        self.stub_runs = {r: _StubRun(s, script=deque(s.script)) for r, s in self.stubs.items()}
        self.cd_runs = {i: _CDRun(cd, cd.enforcement.initial) for i, cd in self.cds.items()}
        for ex in self.executors.values():
            ex.state = PatternState()
            ex.inbox.clear()
        self._tick = 0
        self._events: list[TraceEvent] = []
        self._payloads: dict[int, dict[str, Any]] = {}

    # -- scheduling -----------------------------------------------------

    def _busy_besides_gated(self) -> bool:
        if any(ex.inbox for ex in self.executors.values()) or any(c.inbox for c in self.cd_runs.values()):
            return True
        for run in self.stub_runs.values():
            if run.inbox or (run.script and run.script[0].when != QUIESCENT):
                return True
        return False

    def ready(self) -> list[str]:
        names = []
        quiet = not self._busy_besides_gated()
        for role, run in self.stub_runs.items():
            if run.inbox or (run.script and (run.script[0].when != QUIESCENT or quiet)):
                names.append(f"stub:{role}")
        names += [n for n, ex in self.executors.items() if ex.inbox]
        names += [f"cd:{i}" for i, c in self.cd_runs.items() if c.inbox]
        return sorted(names)

    def step(self, name: str) -> None:
        kind, _, key = name.partition(":")
        if kind == "stub":
            self._step_stub(self.stub_runs[key])
        elif kind == "cd":
            self._step_cd(self.cd_runs[key])
        else:
            self._step_executor(self.executors[name])

    def pending(self) -> int:
        count = sum(ex.state.buffered() + len(ex.inbox) for ex in self.executors.values())
        count += sum(len(c.inbox) for c in self.cd_runs.values())
        return count + sum(len(r.inbox) for r in self.stub_runs.values())

    # -- events ---------------------------------------------------------

    def _emit(self, kind: str, source: str, target: str, msg: RuntimeMessage | None,
              operation: str = "", **detail: Any) -> int:
        self._tick += 1
        qname = msg.qname if msg is not None else ""
        if msg is not None and not operation:
            operation = qname.split(".")[1]
        digest = payload_digest(msg.payload) if msg is not None else ""
        self._events.append(TraceEvent(self._tick, kind, source, target, operation, qname, digest, detail))
        return self._tick

    # -- actors ---------------------------------------------------------

    def _step_stub(self, run: _StubRun) -> None:
        role = run.stub.role
        if run.inbox:
            source, msg = run.inbox.popleft()
            tick = self._emit(DELIVERED, source, role, msg)
            self._payloads[tick] = msg.payload
            run.received.append(msg)
            op = self.registry[msg.qname].operation
            for reaction in run.stub.reactions:
                if reaction.on == op:
                    run.script.appendleft(ScriptAction(reaction.operation, reaction.payload))
            return
        action = run.script.popleft()
        schema = action_schema(run.stub.interface, action.operation)
        assert schema is not None
        payload = coerce_payload(schema, dict(action.payload))
        headers = Headers(correlation_id=f"{role}#1", sender=role, timestamp=self._tick + 1)
        msg = RuntimeMessage(schema.qname, payload, headers)
        ex = self.executors[self.routes[(role, schema.qname)]]
        self._emit(SENT, role, ex.dest, msg, action.operation)
        ex.inbox.append(msg)

    def _step_executor(self, ex: _Executor) -> None:
        msg = ex.inbox.popleft()
        inbound, outbound = Channel(f"{ex.name}/in"), Channel(f"{ex.name}/out")
        inbound.put(msg)

        def listen(kind: str, m: RuntimeMessage, stage: int, reason: str) -> None:
            self._emit(kind, ex.spec.id, ex.dest, m, stage=stage, reason=reason)

        run_chain(list(ex.spec.chain), inbound, outbound, ex.state, listener=listen)
        bindings = ex.bindings
        for out in outbound.drain():
            binding = bindings.get(out.qname)
            if binding is None:
                self._emit(DEAD_LETTER, ex.spec.id, ex.dest, out, reason="no outbound binding")
                continue
            rebound = RuntimeMessage(binding.message, out.payload, out.headers)
            try:
                validate_payload(self.registry[binding.message], rebound.payload)
            except InvariantViolation as exc:
                self._emit(DEAD_LETTER, ex.spec.id, ex.dest, rebound, reason=str(exc))
                continue
            if ex.dest_kind == "cd":
                self.cd_runs[ex.dest].inbox.append((ex.source, rebound))
            else:
                self.stub_runs[ex.dest].inbox.append((ex.source, rebound))

    def _step_cd(self, run: _CDRun) -> None:
        sender, msg = run.inbox.popleft()
        cd = run.spec
        receiver = cd.role_pair[1] if sender == cd.role_pair[0] else cd.role_pair[0]
        label = cd.label_for(sender, msg.qname)
        nxt = cd.enforcement.step(run.state, label)
        if nxt is None and not self.bypass:
            self._emit(BLOCKED, cd.id, receiver, msg, initiator=sender, state=run.state,
                       reason=f"{label.operation} is not enabled in state {run.state}")
            return
        if nxt is not None:
            run.state = nxt
        self._emit(FORWARDED, cd.id, receiver, msg, initiator=sender)
        route = self.routes.get((cd.id, msg.qname))
        if route is None:
            raise RoutingError(f"{cd.id} cannot deliver {msg.qname}")
        self.executors[route].inbox.append(msg)


def build_harness(
    choreo: ChoreographySpec,
    stubs: Mapping[str, ServiceStub],
    cds: Iterable[CDSpec],
    adapters: Iterable[AdapterSpec],
    seed: int,
    bypass: bool = False,
) -> Harness:
    return Harness(choreo, stubs, cds, adapters, seed, bypass)


def enact(harness: Harness, max_ticks: int = 10_000) -> Trace:
    """Run until nothing can move or ``max_ticks`` scheduler steps were taken."""
    if max_ticks <= 0:
        raise ConfigurationError("max_ticks must be positive")
    harness.reset()
    rng = random.Random(harness.seed)
    steps = 0
    complete = True
    while True:
        ready = harness.ready()
        if not ready:
            break
        if steps >= max_ticks:
            complete = False
            break
        harness.step(rng.choice(ready))
        steps += 1
    boot = TraceEvent(
        0, BOOTSTRAP, "harness", "*",
        detail={
            "seed": harness.seed,
            "roles": {r: s.service for r, s in sorted(harness.stubs.items())},
            "cds": sorted(harness.cds),
            "adapters": sorted(a.id for a in harness.adapters if a.needed),
            "bypass": harness.bypass,
            "complete": complete,
            "pending": harness.pending(),
        },
    )
    return Trace([boot, *harness._events], complete, harness.pending(), dict(harness._payloads))


# --------------------------------------------------------------------------
# conformance
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    event: TraceEvent
    state: tuple[str, ...]
    reason: str

    def to_json(self) -> dict[str, Any]:
        return {"event": self.event.to_json(), "state": list(self.state), "reason": self.reason}


@dataclass(frozen=True)
class ConformanceReport:
    violations: tuple[Violation, ...]
    prevented: tuple[TraceEvent, ...]
    exercised: tuple[str, ...]
    total_tasks: int
    complete: bool = True

    @property
    def verdict(self) -> str:
        return "violations" if self.violations else "conformant"

    @property
    def coverage(self) -> str:
        return f"{len(self.exercised)}/{self.total_tasks}"

    def to_json(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict,
            "violations": [v.to_json() for v in self.violations],
            "prevented": [e.to_json() for e in self.prevented],
            "coverage": {"exercised": list(self.exercised), "total": self.total_tasks},
            "traceComplete": self.complete,
        }

    def text(self) -> str:
        lines = [f"verdict: {self.verdict}", f"coverage: {self.coverage} tasks ({', '.join(self.exercised)})"]
        if not self.complete:
            lines.append("warning: trace is incomplete, analysis is partial")
        for v in self.violations:
            e = v.event
            lines.append(f"violation at tick {e.tick}: {e.detail.get('initiator')} -> {e.target} "
                         f"{e.operation}: {v.reason}")
        for e in self.prevented:
            lines.append(f"prevented at tick {e.tick}: {e.detail.get('initiator')} -> {e.target} {e.operation}")
        return "\n".join(lines) + "\n"


def check_conformance(trace: Trace, choreo: ChoreographySpec) -> ConformanceReport:
    """Replay the forwarded interactions against the choreography flow graph."""
    nfa = choreo.nfa()
    known = {t.key for t in choreo.tasks}
    state = nfa.initial()
    violations: list[Violation] = []
    prevented: list[TraceEvent] = []
    exercised: set[str] = set()
    for event in trace.events:
        if event.kind not in (FORWARDED, BLOCKED):
            continue
        key = (event.detail.get("initiator", ""), event.target, event.operation)
        if key not in known:
            raise AnalysisError(f"tick {event.tick}: {key} is not a task of the choreography")
        if event.kind == BLOCKED:
            prevented.append(event)
            continue
        nodes = nfa.moves(state).get(key)
        if not nodes:
            violations.append(Violation(event, tuple(sorted(state)),
                                        f"{event.operation} is not allowed by the choreography here"))
            continue
        exercised.update(choreo.nodes[n].task.name for n in nodes)  # type: ignore[union-attr]
        state = nfa.closure(nodes)
    return ConformanceReport(
        tuple(violations), tuple(prevented), tuple(sorted(exercised)), len(choreo.task_names()), trace.complete
    )


# --------------------------------------------------------------------------
# scenario files
# --------------------------------------------------------------------------


def scenario_from_json(obj: Mapping[str, Any]) -> tuple[dict[str, list[ScriptAction]], dict[str, list[Reaction]]]:
    scripts = {
        role: [ScriptAction(a["send"], a.get("payload", {}), a.get("when")) for a in actions]
        for role, actions in obj.get("scripts", {}).items()
    }
    reactions = {
        role: [Reaction(r["on"], r["send"], r.get("payload", {})) for r in rules]
        for role, rules in obj.get("reactions", {}).items()
    }
    return scripts, reactions


def load_scenario(path: Path | str) -> tuple[dict[str, list[ScriptAction]], dict[str, list[Reaction]]]:
    return scenario_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def make_stubs(
    services: Mapping[str, tuple[InterfaceSpec, ProtocolSpec]],
    scripts: Mapping[str, list[ScriptAction]],
    reactions: Mapping[str, list[Reaction]],
) -> dict[str, ServiceStub]:
    unknown = sorted((set(scripts) | set(reactions)) - set(services))
    if unknown:
        raise WiringError(f"scenario scripts roles without a service: {unknown}")
    return {
        role: ServiceStub(role, iface, proto, tuple(scripts.get(role, ())), tuple(reactions.get(role, ())))
        for role, (iface, proto) in services.items()
    }
