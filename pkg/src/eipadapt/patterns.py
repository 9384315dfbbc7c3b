"""Pipes-and-filters runtime for the four message routing patterns.

Pattern configurations are immutable.  Stateful patterns (Aggregator,
Resequencer) keep their buffers in a :class:`PatternState`, keyed by chain
stage and correlation token, which one chain executor owns at a time.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Iterator, Mapping, Union

from .errors import ConfigurationError, InvariantViolation, RoutingError
from .schema import FieldPath, MessageSchema, get_path, set_path

PathMap = tuple[tuple[FieldPath, FieldPath], ...]

CONSTANT_TOKEN = "*"


@dataclass(frozen=True)
class Headers:
    correlation_id: str
    sender: str
    timestamp: int = 0
    sequence_index: int | None = None


@dataclass(frozen=True)
class RuntimeMessage:
    qname: str
    payload: dict[str, Any]
    headers: Headers

    def with_headers(self, **changes: Any) -> "RuntimeMessage":
        return replace(self, headers=replace(self.headers, **changes))


class Channel:
    """FIFO pipe between two filters."""

    def __init__(self, name: str, capacity: int | None = None):
        self.name = name
        self.capacity = capacity
        self._queue: deque[RuntimeMessage] = deque()

    def put(self, msg: RuntimeMessage) -> None:
        if self.capacity is not None and len(self._queue) >= self.capacity:
            raise RoutingError(f"channel {self.name} is full")
        self._queue.append(msg)

    def get(self) -> RuntimeMessage:
        return self._queue.popleft()

    def peek(self) -> RuntimeMessage:
        return self._queue[0]

    def __len__(self) -> int:
        return len(self._queue)

    def __bool__(self) -> bool:
        return bool(self._queue)

    def __iter__(self) -> Iterator[RuntimeMessage]:
        return iter(list(self._queue))

    def drain(self) -> list[RuntimeMessage]:
        out = list(self._queue)
        self._queue.clear()
        return out

    def __repr__(self) -> str:
        return f"Channel({self.name!r}, {len(self)} queued)"


def _path_map(pairs: Iterable[tuple[Any, Any]]) -> PathMap:
    out = []
    for s, d in pairs:
        s = s if isinstance(s, FieldPath) else FieldPath.parse(s)
        d = d if isinstance(d, FieldPath) else FieldPath.parse(d)
        out.append((s, d))
    return tuple(out)


@dataclass(frozen=True)
class SplitPart:
    target: str
    path_map: PathMap

    def __post_init__(self) -> None:
        object.__setattr__(self, "path_map", _path_map(self.path_map))
        if not self.path_map:
            raise InvariantViolation(f"split part {self.target} maps no fields")


@dataclass(frozen=True)
class Splitter:
    source: str
    parts: tuple[SplitPart, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise InvariantViolation("Splitter needs at least one part")

    kind = "Splitter"

    def inputs(self) -> set[str]:
        return {self.source}

    def outputs(self) -> list[str]:
        return [p.target for p in self.parts]


@dataclass(frozen=True)
class Aggregator:
    expected: tuple[str, ...]
    target: str
    merge_map: tuple[tuple[str, PathMap], ...]
    correlation_key: str = "header"

    def __post_init__(self) -> None:
        object.__setattr__(self, "expected", tuple(self.expected))
        object.__setattr__(
            self, "merge_map", tuple((q, _path_map(pm)) for q, pm in self.merge_map)
        )
        if len(set(self.expected)) < 2:
            raise InvariantViolation("Aggregator expects at least two distinct messages")
        if len(set(self.expected)) != len(self.expected):
            raise InvariantViolation("Aggregator expected set has duplicates")
        if not {q for q, _ in self.merge_map} <= set(self.expected):
            raise InvariantViolation("merge map references a message that is not expected")
        if self.correlation_key not in ("header", "constant"):
            raise InvariantViolation(f"unknown correlation key {self.correlation_key!r}")

    kind = "Aggregator"

    def inputs(self) -> set[str]:
        return set(self.expected)

    def outputs(self) -> list[str]:
        return [self.target]


@dataclass(frozen=True)
class Resequencer:
    order: tuple[str, ...]
    release_policy: str = "strict"

    def __post_init__(self) -> None:
        object.__setattr__(self, "order", tuple(self.order))
        if not self.order:
            raise InvariantViolation("Resequencer order is empty")
        if len(set(self.order)) != len(self.order):
            raise InvariantViolation("Resequencer order has duplicates")
        if self.release_policy != "strict":
            raise InvariantViolation(f"unsupported release policy {self.release_policy!r}")

    kind = "Resequencer"

    def inputs(self) -> set[str]:
        return set(self.order)

    def outputs(self) -> list[str]:
        return list(self.order)


@dataclass(frozen=True)
class MessageFilter:
    drop_set: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "drop_set", frozenset(self.drop_set))
        if not self.drop_set:
            raise InvariantViolation("MessageFilter drop set is empty")

    kind = "MessageFilter"

    def inputs(self) -> set[str]:
        return set(self.drop_set)

    def outputs(self) -> list[str]:
        return []


PatternInstance = Union[Splitter, Aggregator, Resequencer, MessageFilter]


@dataclass
class PatternState:
    """Buffers of the stateful patterns of one chain, keyed by (stage, token)."""

    aggregates: dict[tuple[int, str], dict[str, RuntimeMessage]] = field(default_factory=dict)
    held: dict[tuple[int, str], dict[str, RuntimeMessage]] = field(default_factory=dict)
    released: dict[tuple[int, str], int] = field(default_factory=dict)

    def buffered(self) -> int:
        return sum(len(b) for b in self.aggregates.values()) + sum(len(b) for b in self.held.values())

    def is_empty(self) -> bool:
        return self.buffered() == 0


def _token(msg: RuntimeMessage, key: str = "header") -> str:
    return msg.headers.correlation_id if key == "header" else CONSTANT_TOKEN


def _project(payload: dict[str, Any], path_map: PathMap, into: dict[str, Any]) -> None:
    for src, dst in path_map:
        try:
            value = get_path(payload, src)
        except KeyError:
            raise RoutingError(f"source path {src} missing from payload") from None
        set_path(into, dst, value)


def splitter_process(cfg: Splitter, msg: RuntimeMessage) -> list[RuntimeMessage]:
    if msg.qname != cfg.source:
        raise RoutingError(f"Splitter for {cfg.source} received {msg.qname}")
    out = []
    for index, part in enumerate(cfg.parts, start=1):
        payload: dict[str, Any] = {}
        _project(msg.payload, part.path_map, payload)
        out.append(RuntimeMessage(part.target, payload, replace(msg.headers, sequence_index=index)))
    return out


def aggregator_process(
    cfg: Aggregator, state: PatternState, msg: RuntimeMessage, stage: int = 0
) -> tuple[PatternState, RuntimeMessage | None]:
    if msg.qname not in cfg.expected:
        raise RoutingError(f"Aggregator for {cfg.target} does not expect {msg.qname}")
    key = (stage, _token(msg, cfg.correlation_key))
    buffer = state.aggregates.get(key, {})
    if msg.qname in buffer:
        raise RoutingError(f"duplicate {msg.qname} before aggregation of {cfg.target} completed")
    buffer = {**buffer, msg.qname: msg}
    if set(buffer) != set(cfg.expected):
        state.aggregates[key] = buffer
        return state, None
    state.aggregates.pop(key, None)
    payload: dict[str, Any] = {}
    for source, path_map in cfg.merge_map:
        _project(buffer[source].payload, path_map, payload)
    headers = Headers(
        correlation_id=msg.headers.correlation_id,
        sender=msg.headers.sender,
        timestamp=max(m.headers.timestamp for m in buffer.values()),
    )
    return state, RuntimeMessage(cfg.target, payload, headers)


def resequencer_process(
    cfg: Resequencer, state: PatternState, msg: RuntimeMessage, stage: int = 0
) -> tuple[PatternState, list[RuntimeMessage]]:
    if msg.qname not in cfg.order:
        raise RoutingError(f"Resequencer has no slot for {msg.qname}")
    key = (stage, _token(msg))
    held = state.held.get(key, {})
    position = state.released.get(key, 0)
    if msg.qname in held or cfg.order.index(msg.qname) < position:
        raise RoutingError(f"duplicate {msg.qname} within one resequencing cycle")
    held = {**held, msg.qname: msg}
    out = []
    while position < len(cfg.order) and cfg.order[position] in held:
        out.append(held.pop(cfg.order[position]))
        position += 1
    if position == len(cfg.order):
        # cycle complete: the next message for this token starts a new one
        position = 0
    if held or position:
        state.held[key] = held
        state.released[key] = position
    else:
        state.held.pop(key, None)
        state.released.pop(key, None)
    return state, out


def filter_process(cfg: MessageFilter, msg: RuntimeMessage) -> RuntimeMessage | None:
    return None if msg.qname in cfg.drop_set else msg


Listener = Callable[[str, RuntimeMessage, int, str], None]


def _apply(
    stage: PatternInstance,
    index: int,
    state: PatternState,
    msg: RuntimeMessage,
    listener: Listener | None,
) -> list[RuntimeMessage]:
    if isinstance(stage, MessageFilter):
        kept = filter_process(stage, msg)
        if kept is None:
            if listener:
                listener("dropped", msg, index, "no mapping for message")
            return []
        return [kept]
    if msg.qname not in stage.inputs():
        return [msg]
    if isinstance(stage, Splitter):
        return splitter_process(stage, msg)
    if isinstance(stage, Aggregator):
        _, merged = aggregator_process(stage, state, msg, index)
        return [merged] if merged is not None else []
    _, released = resequencer_process(stage, state, msg, index)
    return released


def validate_chain(
    chain: list[PatternInstance],
    entry_qnames: Iterable[str],
    registry: Mapping[str, MessageSchema] | None = None,
) -> list[str]:
    """Symbolically run the chain over qnames; return the exit qnames.

    Raises ConfigurationError when a stage consumes a qname that cannot
    reach it, or when pattern path maps disagree with known schemas.
    """
    available = list(dict.fromkeys(entry_qnames))
    for index, stage in enumerate(chain):
        where = f"stage {index} ({stage.kind})"
        if isinstance(stage, MessageFilter):
            available = [q for q in available if q not in stage.drop_set]
            continue
        missing = sorted(set(stage.inputs()) - set(available))
        if missing:
            raise ConfigurationError(f"{where} consumes {missing}, which never reach it")
        if registry is not None:
            _check_paths(stage, registry, where)
        if isinstance(stage, Resequencer):
            available = [q for q in available if q not in stage.order] + list(stage.order)
            continue
        available = [q for q in available if q not in stage.inputs()] + stage.outputs()
    return available


def _check_paths(stage: PatternInstance, registry: Mapping[str, MessageSchema], where: str) -> None:
    def leaves(q: str) -> dict[FieldPath, str] | None:
        schema = registry.get(q)
        return dict(schema.leaves()) if schema is not None else None

    def check(source: str, target: str, path_map: PathMap) -> set[FieldPath]:
        src, dst = leaves(source), leaves(target)
        for s, d in path_map:
            if src is not None and s not in src:
                raise ConfigurationError(f"{where}: {source} has no leaf {s}")
            if dst is not None and d not in dst:
                raise ConfigurationError(f"{where}: {target} has no leaf {d}")
            if src is not None and dst is not None and src[s] != dst[d]:
                raise ConfigurationError(f"{where}: kind mismatch {source}#{s} -> {target}#{d}")
        return {d for _, d in path_map}

    if isinstance(stage, Splitter):
        for part in stage.parts:
            covered = check(stage.source, part.target, part.path_map)
            target = leaves(part.target)
            if target is not None and set(target) != covered:
                raise ConfigurationError(f"{where}: part {part.target} does not cover its schema")
    elif isinstance(stage, Aggregator):
        covered: set[FieldPath] = set()
        for source, path_map in stage.merge_map:
            covered |= check(source, stage.target, path_map)
        target = leaves(stage.target)
        if target is not None and set(target) != covered:
            raise ConfigurationError(f"{where}: merge map does not cover {stage.target}")


def run_chain(
    chain: list[PatternInstance],
    inbound: Channel,
    outbound: Channel,
    state: PatternState | None = None,
    *,
    dead_letter: Channel | None = None,
    listener: Listener | None = None,
    entry_qnames: Iterable[str] | None = None,
    registry: Mapping[str, MessageSchema] | None = None,
) -> PatternState:
    """Drain ``inbound`` through the chain, one message at a time.

    A stage that is not configured for a message passes it on unchanged.
    Messages a stage rejects go to ``dead_letter`` instead of raising.
    """
    if entry_qnames is not None:
        validate_chain(chain, entry_qnames, registry)
    state = state if state is not None else PatternState()
    while inbound:
        batch = [inbound.get()]
        for index, stage in enumerate(chain):
            produced: list[RuntimeMessage] = []
            for msg in batch:
                try:
                    produced.extend(_apply(stage, index, state, msg, listener))
                except RoutingError as exc:
                    if dead_letter is not None:
                        dead_letter.put(msg)
                    if listener:
                        listener("dead-letter", msg, index, str(exc))
            batch = produced
        for msg in batch:
            outbound.put(msg)
    return state


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _pm_json(path_map: PathMap) -> list[list[str]]:
    return [[str(s), str(d)] for s, d in path_map]


def pattern_to_json(p: PatternInstance) -> dict[str, Any]:
    if isinstance(p, Splitter):
        return {
            "kind": p.kind,
            "source": p.source,
            "parts": [{"target": part.target, "pathMap": _pm_json(part.path_map)} for part in p.parts],
        }
    if isinstance(p, Aggregator):
        return {
            "kind": p.kind,
            "expected": list(p.expected),
            "target": p.target,
            "mergeMap": [{"source": q, "pathMap": _pm_json(pm)} for q, pm in p.merge_map],
            "correlationKey": p.correlation_key,
        }
    if isinstance(p, Resequencer):
        return {"kind": p.kind, "order": list(p.order), "releasePolicy": p.release_policy}
    return {"kind": p.kind, "dropSet": sorted(p.drop_set)}


def pattern_from_json(obj: Mapping[str, Any]) -> PatternInstance:
    kind = obj.get("kind")
    if kind == "Splitter":
        return Splitter(obj["source"], tuple(SplitPart(p["target"], p["pathMap"]) for p in obj["parts"]))
    if kind == "Aggregator":
        return Aggregator(
            tuple(obj["expected"]),
            obj["target"],
            tuple((m["source"], m["pathMap"]) for m in obj["mergeMap"]),
            obj.get("correlationKey", "header"),
        )
    if kind == "Resequencer":
        return Resequencer(tuple(obj["order"]), obj.get("releasePolicy", "strict"))
    if kind == "MessageFilter":
        return MessageFilter(frozenset(obj["dropSet"]))
    raise ConfigurationError(f"unknown pattern kind {kind!r}")
