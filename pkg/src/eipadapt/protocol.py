"""Protocol automata and choreography flow graphs.

A :class:`ProtocolSpec` is a deterministic automaton whose labels are
``(operation, polarity, message qname)``.  A :class:`ChoreographySpec` is a
flow graph of tasks and exclusive gateways; it is read as an NFA whose
labelled moves are tasks and whose epsilon moves are gateways and plumbing
nodes.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .errors import InvariantViolation, SchemaParseError
from .schema import MessageSchema, is_identifier

SEND = "send"
RECEIVE = "receive"


@dataclass(frozen=True, order=True)
class Label:
    operation: str
    polarity: str
    message: str

    def __post_init__(self) -> None:
        if self.polarity not in (SEND, RECEIVE):
            raise InvariantViolation(f"polarity must be send or receive, got {self.polarity!r}")

    def flipped(self) -> "Label":
        return Label(self.operation, RECEIVE if self.polarity == SEND else SEND, self.message)

    def __str__(self) -> str:
        mark = "!" if self.polarity == SEND else "?"
        return f"{self.operation}{mark}"


@dataclass(frozen=True)
class Transition:
    source: str
    label: Label
    target: str


@dataclass(frozen=True)
class ProtocolSpec:
    states: tuple[str, ...]
    initial: str
    finals: frozenset[str]
    transitions: tuple[Transition, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "finals", frozenset(self.finals))
        object.__setattr__(self, "transitions", tuple(self.transitions))
        known = set(self.states)
        if len(known) != len(self.states):
            raise InvariantViolation("protocol states are not distinct")
        if self.initial not in known:
            raise InvariantViolation(f"initial state {self.initial!r} is not a state")
        if not self.finals <= known:
            raise InvariantViolation("final states must be states")
        seen: dict[tuple[str, Label], str] = {}
        for t in self.transitions:
            if t.source not in known or t.target not in known:
                raise InvariantViolation(f"transition {t} uses an unknown state")
            key = (t.source, t.label)
            if key in seen and seen[key] != t.target:
                raise InvariantViolation(f"nondeterministic on {t.label} from {t.source}")
            seen[key] = t.target
        unreachable = known - self.reachable(self.initial)
        if unreachable:
            raise InvariantViolation(f"unreachable protocol states: {sorted(unreachable)}")

    def step(self, state: str, label: Label) -> str | None:
        for t in self.transitions:
            if t.source == state and t.label == label:
                return t.target
        return None

    def enabled(self, state: str) -> list[Label]:
        return sorted({t.label for t in self.transitions if t.source == state})

    @property
    def labels(self) -> set[Label]:
        return {t.label for t in self.transitions}

    def reachable(self, start: str, avoid: Callable[[Label], bool] | None = None) -> set[str]:
        seen = {start}
        todo = [start]
        while todo:
            s = todo.pop()
            for t in self.transitions:
                if t.source == s and (avoid is None or not avoid(t.label)) and t.target not in seen:
                    seen.add(t.target)
                    todo.append(t.target)
        return seen

    def run(self, word: Iterable[Label]) -> str | None:
        state: str | None = self.initial
        for label in word:
            state = self.step(state, label)
            if state is None:
                return None
        return state

    def accepts(self, word: Iterable[Label]) -> bool:
        end = self.run(word)
        return end is not None and end in self.finals

    def flipped(self) -> "ProtocolSpec":
        return ProtocolSpec(
            self.states,
            self.initial,
            self.finals,
            tuple(Transition(t.source, t.label.flipped(), t.target) for t in self.transitions),
        )

    def precedes(self, first: str, second: str) -> bool:
        """True when no run can carry message ``second`` before message ``first``."""
        blocked = self.reachable(self.initial, avoid=lambda lb: lb.message == first)
        return not any(t.source in blocked and t.label.message == second for t in self.transitions)

    def forced_order(self, messages: Iterable[str]) -> list[str] | None:
        """The first-occurrence order the protocol imposes on ``messages``.

        Returns ``None`` unless precedence is a total order on them.
        """
        msgs = list(dict.fromkeys(messages))
        rank = {m: sum(self.precedes(o, m) for o in msgs if o != m) for m in msgs}
        ordered = sorted(msgs, key=lambda m: rank[m])
        for i, a in enumerate(ordered):
            for b in ordered[i + 1:]:
                if not self.precedes(a, b):
                    return None
        return ordered

    def to_json(self) -> dict[str, Any]:
        return {
            "states": list(self.states),
            "initial": self.initial,
            "finals": sorted(self.finals),
            "transitions": [
                {
                    "from": t.source,
                    "operation": t.label.operation,
                    "polarity": t.label.polarity,
                    "message": t.label.message,
                    "to": t.target,
                }
                for t in self.transitions
            ],
        }


def protocol_from_json(obj: Mapping[str, Any], service: str | None = None) -> ProtocolSpec:
    """Build a protocol; short message names are qualified with ``service``."""
    transitions = []
    for t in obj.get("transitions", []):
        op = t["operation"]
        message = t.get("message", f"{op}Request")
        if "." not in message:
            if service is None:
                raise SchemaParseError(f"message {message!r} needs a service to qualify it")
            message = f"{service}.{op}.{message}"
        transitions.append(Transition(t["from"], Label(op, t["polarity"], message), t["to"]))
    return ProtocolSpec(tuple(obj["states"]), obj["initial"], frozenset(obj.get("finals", [])), tuple(transitions))


def load_protocol(path: Path | str, service: str | None = None) -> ProtocolSpec:
    return protocol_from_json(_read_json(path), service)


def _read_json(path: Path | str) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaParseError(f"{path}: {exc.msg}", exc.lineno, exc.colno) from None


# --------------------------------------------------------------------------
# choreographies
# --------------------------------------------------------------------------

START = "start"
END = "end"
TASK = "task"
EXCLUSIVE = "exclusive"
NODE_KINDS = (START, END, TASK, EXCLUSIVE)


@dataclass(frozen=True)
class Task:
    name: str
    initiator: str
    target: str
    operation: str
    message: MessageSchema

    @property
    def key(self) -> tuple[str, str, str]:
        """The observable label of the task: who calls which operation on whom."""
        return (self.initiator, self.target, self.operation)


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    task: Task | None = None


@dataclass(frozen=True)
class ChoreographySpec:
    roles: frozenset[str]
    nodes: Mapping[str, Node]
    edges: tuple[tuple[str, str], ...]
    start: str
    successors: Mapping[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "roles", frozenset(self.roles))
        object.__setattr__(self, "edges", tuple(self.edges))
        succ: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise InvariantViolation(f"edge {a} -> {b} references an unknown node")
            succ[a].append(b)
        object.__setattr__(self, "successors", {n: tuple(v) for n, v in succ.items()})
        if self.start not in self.nodes or self.nodes[self.start].kind != START:
            raise InvariantViolation("choreography start must be a start node")
        for node in self.nodes.values():
            if node.kind == TASK:
                t = node.task
                assert t is not None
                if t.initiator == t.target:
                    raise InvariantViolation(f"task {t.name} names the same role twice")
                if not {t.initiator, t.target} <= self.roles:
                    raise InvariantViolation(f"task {t.name} names a role outside the choreography")
        seen = {self.start}
        todo = [self.start]
        while todo:
            for nxt in self.successors[todo.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        if seen != set(self.nodes):
            raise InvariantViolation(f"nodes not connected to start: {sorted(set(self.nodes) - seen)}")

    @property
    def tasks(self) -> list[Task]:
        return [n.task for n in self.nodes.values() if n.task is not None]

    def task_names(self) -> list[str]:
        return sorted({t.name for t in self.tasks})

    def nfa(self, keep: Callable[[Task], bool] | None = None) -> "FlowNFA":
        """Read the flow graph as an NFA; tasks rejected by ``keep`` become epsilon."""
        return FlowNFA(self, keep or (lambda t: True))


class FlowNFA:
    """Positions are node ids: "just after this node".  Moves follow edges."""

    def __init__(self, choreo: ChoreographySpec, keep: Callable[[Task], bool]):
        self.choreo = choreo
        self.keep = keep

    def _labelled(self, node_id: str) -> bool:
        node = self.choreo.nodes[node_id]
        return node.task is not None and self.keep(node.task)

    def closure(self, positions: Iterable[str]) -> frozenset[str]:
        seen = set(positions)
        todo = list(seen)
        while todo:
            p = todo.pop()
            for nxt in self.choreo.successors[p]:
                if not self._labelled(nxt) and nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        return frozenset(seen)

    def initial(self) -> frozenset[str]:
        return self.closure([self.choreo.start])

    def moves(self, positions: Iterable[str]) -> dict[tuple[str, str, str], set[str]]:
        """Labelled moves out of a position set, grouped by task key."""
        out: dict[tuple[str, str, str], set[str]] = {}
        for p in positions:
            for nxt in self.choreo.successors[p]:
                if self._labelled(nxt):
                    task = self.choreo.nodes[nxt].task
                    assert task is not None
                    out.setdefault(task.key, set()).add(nxt)
        return out

    def step(self, positions: frozenset[str], key: tuple[str, str, str]) -> frozenset[str]:
        return self.closure(self.moves(positions).get(key, set()))

    def is_final(self, positions: Iterable[str]) -> bool:
        return any(self.choreo.nodes[p].kind == END for p in positions)


def choreography_from_json(obj: Mapping[str, Any], base: Path | str = ".") -> ChoreographySpec:
    """Load a choreography file.

    Task messages are given by name plus a schema entry (``xsd``,
    ``schema`` or inline ``root``); their qnames are assigned later, when a
    coordination delegate claims the task.
    """
    from .mapping import _load_message

    base = Path(base)
    roles = frozenset(obj["roles"])
    nodes: dict[str, Node] = {}
    start = None
    for raw in obj["nodes"]:
        node_id, kind = raw["id"], raw["kind"]
        if kind not in NODE_KINDS:
            raise SchemaParseError(f"node {node_id}: unknown kind {kind!r}")
        if node_id in nodes:
            raise SchemaParseError(f"duplicate node id {node_id!r}")
        task = None
        if kind == TASK:
            op = raw["operation"]
            if not is_identifier(op):
                raise SchemaParseError(f"task {node_id}: invalid operation {op!r}")
            message = raw.get("message", f"{op}Request")
            schema = _load_message(raw["schema"], f"Choreography.{op}.{message}", base)
            task = Task(raw.get("name", node_id), raw["initiator"], raw["target"], op, schema)
        if kind == START:
            if start is not None:
                raise SchemaParseError("choreography has more than one start node")
            start = node_id
        nodes[node_id] = Node(node_id, kind, task)
    if start is None:
        raise SchemaParseError("choreography has no start node")
    edges = tuple((a, b) for a, b in obj["edges"])
    return ChoreographySpec(roles, nodes, edges, start)


def load_choreography(path: Path | str) -> ChoreographySpec:
    path = Path(path)
    return choreography_from_json(_read_json(path), path.parent)


def bfs_order(initial: Any, successors: Callable[[Any], Iterable[Any]]) -> list[Any]:
    """Breadth-first visiting order; successors are visited in the given order."""
    order = [initial]
    seen = {initial}
    queue = deque([initial])
    while queue:
        cur = queue.popleft()
        for nxt in successors(cur):
            if nxt not in seen:
                seen.add(nxt)
                order.append(nxt)
                queue.append(nxt)
    return order
