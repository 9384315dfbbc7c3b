"""Data-mapping inference between a service interface and its counterpart.

Inference runs in two phases over direction-compatible message pairs
(a required operation's request against a provided operation's request,
responses likewise):

1. Equivalent messages are paired one-to-one by a score-maximal matching.
2. Every remaining message acts as a potential super-type.  Among the
   remaining messages on the other side that are its sub-types, the
   selection jointly covering the most of its leaves (then scoring best)
   wins; each selected message yields one mapping.

Because sub-types compete for the leaves of their super-type, a message
whose data is already supplied by better-named messages receives no
mapping and ends up in ``unmapped``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable

from .errors import InvalidHintError, InvariantViolation, SchemaParseError
from .hints import CONFIRM, REJECT, Endpoint, Hint, HintSet
from .matching import search
from .schema import (
    Correspondence,
    CorrespondenceSet,
    FieldPath,
    MessageSchema,
    candidate_options,
    is_identifier,
    name_similarity,
    parse_schema_json,
    parse_xsd_subset,
    schema_from_json,
    subtype_of,
)

PROVIDED = "provided"
REQUIRED = "required"
ONE_WAY = "one-way"
REQUEST_RESPONSE = "request-response"

INFERRED = "inferred"
CONFIRMED = "confirmed"
REJECTED = "rejected"
AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class OperationSpec:
    name: str
    direction: str
    mep: str
    input: MessageSchema
    output: MessageSchema | None = None

    def __post_init__(self) -> None:
        if not is_identifier(self.name):
            raise InvariantViolation(f"invalid operation name {self.name!r}")
        if self.direction not in (PROVIDED, REQUIRED):
            raise InvariantViolation(f"direction must be provided or required, got {self.direction!r}")
        if self.mep not in (ONE_WAY, REQUEST_RESPONSE):
            raise InvariantViolation(f"unknown message exchange pattern {self.mep!r}")
        if (self.output is not None) != (self.mep == REQUEST_RESPONSE):
            raise InvariantViolation(f"operation {self.name}: output present iff request-response")

    @property
    def owner(self) -> str:
        return self.input.service

    def messages(self) -> Iterable[tuple[str, MessageSchema]]:
        yield "input", self.input
        if self.output is not None:
            yield "output", self.output


@dataclass(frozen=True)
class InterfaceSpec:
    service_name: str
    operations: tuple[OperationSpec, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "operations", tuple(self.operations))
        seen = set()
        for op in self.operations:
            # merged views hold operations of several owners
            key = (op.owner, op.name)
            if key in seen:
                raise InvariantViolation(f"duplicate operation {op.name!r} in {self.service_name}")
            seen.add(key)

    def messages(self) -> list["MessageRef"]:
        return [
            MessageRef(schema, op, role)
            for op in self.operations
            for role, schema in op.messages()
        ]

    def schema(self, qname: str) -> MessageSchema | None:
        for ref in self.messages():
            if ref.schema.qname == qname:
                return ref.schema
        return None

    def operation_for(self, qname: str) -> OperationSpec | None:
        for ref in self.messages():
            if ref.schema.qname == qname:
                return ref.operation
        return None


@dataclass(frozen=True)
class MessageRef:
    schema: MessageSchema
    operation: OperationSpec
    role: str

    @property
    def qname(self) -> str:
        return self.schema.qname


def _compatible(a: MessageRef, b: MessageRef) -> bool:
    return a.operation.direction != b.operation.direction and a.role == b.role


@dataclass(frozen=True)
class Choice:
    sub: str
    sup: str
    pairs: tuple[Correspondence, ...]

    def endpoint_pairs(self) -> set[frozenset[Endpoint]]:
        return {
            frozenset((Endpoint(self.sub, str(c.source)), Endpoint(self.sup, str(c.target))))
            for c in self.pairs
        }

    def to_json(self) -> dict[str, Any]:
        return {"sub": self.sub, "sup": self.sup, "pairs": [c.to_json() for c in self.pairs]}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Choice":
        return cls(obj["sub"], obj["sup"], tuple(Correspondence.from_json(p) for p in obj["pairs"]))


@dataclass(frozen=True)
class Ambiguity:
    scope: str
    options: tuple[tuple[Choice, ...], ...]

    def to_json(self) -> dict[str, Any]:
        return {"scope": self.scope, "options": [[c.to_json() for c in opt] for opt in self.options]}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Ambiguity":
        return cls(obj["scope"], tuple(tuple(Choice.from_json(c) for c in opt) for opt in obj["options"]))

    def describe(self) -> str:
        lines = [f"{self.scope}: {len(self.options)} tied alternatives"]
        for i, opt in enumerate(self.options, start=1):
            rendered = "; ".join(
                f"{ch.sub}#{c.source} -> {ch.sup}#{c.target}" for ch in opt for c in ch.pairs
            )
            lines.append(f"  [{i}] {rendered}")
        return "\n".join(lines)


@dataclass(frozen=True)
class DataMapping:
    sub: str
    sup: str
    correspondences: CorrespondenceSet
    status: str = INFERRED
    relation: str = "sub"
    operation_similarity: Fraction = Fraction(0)
    ambiguity: str | None = None

    def __post_init__(self) -> None:
        if self.sub == self.sup:
            raise InvariantViolation("a mapping needs two distinct messages")
        if self.status not in (INFERRED, CONFIRMED, REJECTED, AMBIGUOUS):
            raise InvariantViolation(f"unknown mapping status {self.status!r}")

    @property
    def live(self) -> bool:
        return self.status != REJECTED

    def endpoint_pairs(self) -> set[frozenset[Endpoint]]:
        return Choice(self.sub, self.sup, self.correspondences.pairs).endpoint_pairs()

    def to_json(self) -> dict[str, Any]:
        out = {
            "sub": self.sub,
            "sup": self.sup,
            "relation": self.relation,
            "status": self.status,
            "operationSimilarity": str(self.operation_similarity),
            "correspondences": [c.to_json() for c in self.correspondences.pairs],
        }
        if self.ambiguity is not None:
            out["ambiguity"] = self.ambiguity
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "DataMapping":
        return cls(
            obj["sub"],
            obj["sup"],
            CorrespondenceSet(tuple(Correspondence.from_json(c) for c in obj["correspondences"])),
            obj["status"],
            obj.get("relation", "sub"),
            Fraction(obj.get("operationSimilarity", "0")),
            obj.get("ambiguity"),
        )


@dataclass(frozen=True)
class MappingReport:
    service: str
    counterpart: str
    mappings: tuple[DataMapping, ...]
    unmapped: tuple[str, ...]
    ambiguities: tuple[Ambiguity, ...] = ()
    # qname -> side ("service" or "counterpart") and leaf kinds, for hint validation
    messages: dict[str, dict[str, Any]] = field(default_factory=dict)

    @property
    def live_mappings(self) -> list[DataMapping]:
        return [m for m in self.mappings if m.live]

    @property
    def ambiguous(self) -> bool:
        return bool(self.ambiguities)

    def mapping(self, sub: str, sup: str) -> DataMapping | None:
        for m in self.live_mappings:
            if m.sub == sub and m.sup == sup:
                return m
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "service": self.service,
            "counterpart": self.counterpart,
            "mappings": [m.to_json() for m in self.mappings],
            "unmapped": list(self.unmapped),
            "ambiguities": [a.to_json() for a in self.ambiguities],
            "messages": self.messages,
        }

    def dumps(self) -> str:
        return canonical_json(self.to_json())

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "MappingReport":
        return cls(
            obj["service"],
            obj["counterpart"],
            tuple(DataMapping.from_json(m) for m in obj["mappings"]),
            tuple(obj["unmapped"]),
            tuple(Ambiguity.from_json(a) for a in obj.get("ambiguities", [])),
            obj.get("messages", {}),
        )


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


def _pairs_from(sub: MessageSchema, sup: MessageSchema, assignment: dict, options: dict) -> tuple[Correspondence, ...]:
    out = []
    for path, _ in sub.leaves():
        target = assignment[(sub.qname, path)]
        score = dict(options[(sub.qname, path)])[target]
        out.append(Correspondence(path, target, score))
    return tuple(out)


def _confirmed_between(hints: HintSet, a: MessageSchema, b: MessageSchema) -> bool:
    for path, _ in a.leaves():
        if hints.confirmed_partners(Endpoint(a.qname, str(path)), b.qname):
            return True
    return False


def _has_confirm_elsewhere(hints: HintSet, a: MessageSchema, scope: Iterable[str]) -> set[str]:
    """Messages in ``scope`` that a confirm hint ties to ``a``.

    Hints about messages outside the report being built do not constrain it.
    """
    partners = set()
    for hint in hints.touching(a.qname):
        if hint.verdict != CONFIRM:
            continue
        other = hint.target if hint.source.qname == a.qname else hint.source
        partners.add(other.qname)
    return partners & set(scope)


def _status_for(pairs: Iterable[Correspondence], sub: str, sup: str, hints: HintSet) -> str:
    for c in pairs:
        if hints.verdict(Endpoint(sub, str(c.source)), Endpoint(sup, str(c.target))) == CONFIRM:
            return CONFIRMED
    return INFERRED


def _op_similarity(a: MessageRef, b: MessageRef) -> Fraction:
    return name_similarity(a.operation.name, b.operation.name)


def infer_mappings(
    service: InterfaceSpec, counterpart: InterfaceSpec, hints: HintSet | None = None
) -> MappingReport:
    hints = hints or HintSet()
    s_refs = service.messages()
    c_refs = counterpart.messages()
    refs = {r.qname: r for r in [*s_refs, *c_refs]}
    side = {**{r.qname: "service" for r in s_refs}, **{r.qname: "counterpart" for r in c_refs}}
    _validate_hint_paths(hints, {q: r.schema for q, r in refs.items()})

    subs: dict[tuple[str, str], CorrespondenceSet] = {}
    for a in s_refs:
        for b in c_refs:
            if not _compatible(a, b):
                continue
            fwd = subtype_of(a.schema, b.schema, hints)
            if fwd is not None:
                subs[(a.qname, b.qname)] = fwd
            bwd = subtype_of(b.schema, a.schema, hints)
            if bwd is not None:
                subs[(b.qname, a.qname)] = bwd

    mappings: list[DataMapping] = []
    ambiguities: list[Ambiguity] = []

    # phase 1: equivalences, matched one-to-one
    eq_options: dict[str, list[tuple[str, Fraction]]] = {}
    for a in s_refs:
        confirmed_with = _has_confirm_elsewhere(hints, a.schema, refs)
        opts = []
        for b in c_refs:
            fwd = subs.get((a.qname, b.qname))
            if fwd is None or (b.qname, a.qname) not in subs:
                continue
            if a.schema.leaf_count != b.schema.leaf_count:
                continue
            if confirmed_with and b.qname not in confirmed_with:
                continue
            b_confirmed = _has_confirm_elsewhere(hints, b.schema, refs)
            if b_confirmed and a.qname not in b_confirmed:
                continue
            opts.append((b.qname, fwd.total))
        if opts:
            eq_options[a.qname] = opts
    matched: set[str] = set()
    if eq_options:
        groups = [[q] for q in eq_options]
        forced = [bool(_has_confirm_elsewhere(hints, refs[q].schema, refs) & {b for b, _ in eq_options[q]})
                  for q in eq_options]
        result = search(groups, eq_options, forced=forced)
        assert result is not None
        chosen = result.solutions[0]
        scope = None
        if result.ambiguous:
            scope = "equivalence:" + ",".join(sorted(eq_options))
            ambiguities.append(
                Ambiguity(
                    scope,
                    tuple(
                        tuple(Choice(a, b, subs[(a, b)].pairs) for a, b in sorted(sol.items()))
                        for sol in result.solutions
                    ),
                )
            )
        for a, b in sorted(chosen.items()):
            corr = subs[(a, b)]
            pair_scope = scope
            if corr.ambiguous and scope is None:
                pair_scope = f"pair:{a}|{b}"
                ambiguities.append(
                    Ambiguity(pair_scope, tuple((Choice(a, b, alt),) for alt in corr.alternatives))
                )
            status = AMBIGUOUS if pair_scope else _status_for(corr.pairs, a, b, hints)
            mappings.append(
                DataMapping(a, b, corr, status, "equiv", _op_similarity(refs[a], refs[b]), pair_scope)
            )
            matched.update((a, b))

    # phase 2: joint containment per super-type
    remaining = [r for r in [*c_refs, *s_refs] if r.qname not in matched]
    for sup in remaining:
        pool = [
            r for r in remaining
            if side[r.qname] != side[sup.qname] and (r.qname, sup.qname) in subs
        ]
        if not pool:
            continue
        options: dict[tuple[str, FieldPath], list[tuple[FieldPath, Fraction]]] = {}
        claims: dict[FieldPath, tuple[str, FieldPath]] = {}
        for r in pool:
            for path, _ in r.schema.leaves():
                for partner in hints.confirmed_partners(Endpoint(r.qname, str(path)), sup.qname):
                    claims[FieldPath.parse(partner.path)] = (r.qname, path)
        groups = []
        forced = []
        for r in pool:
            per_leaf = candidate_options(r.schema, sup.schema, hints)
            group = []
            for path, _ in r.schema.leaves():
                key = (r.qname, path)
                options[key] = [
                    (t, sc) for t, sc in per_leaf[path]
                    if claims.get(t, key) == key
                ]
                group.append(key)
            groups.append(group)
            forced.append(_confirmed_between(hints, r.schema, sup.schema))
        result = search(groups, options, forced=forced)
        if result is None or result.covered == 0:
            continue
        selections = []
        for sol in result.solutions:
            sel = []
            for r in pool:
                if (r.qname, r.schema.leaves()[0][0]) in sol:
                    sel.append(Choice(r.qname, sup.qname, _pairs_from(r.schema, sup.schema, sol, options)))
            selections.append(tuple(sel))
        scope = None
        if result.ambiguous:
            scope = f"sup:{sup.qname}"
            ambiguities.append(Ambiguity(scope, tuple(selections)))
        for ch in selections[0]:
            status = AMBIGUOUS if scope else _status_for(ch.pairs, ch.sub, ch.sup, hints)
            mappings.append(
                DataMapping(
                    ch.sub,
                    ch.sup,
                    CorrespondenceSet(ch.pairs),
                    status,
                    "sub",
                    _op_similarity(refs[ch.sub], refs[ch.sup]),
                    scope,
                )
            )

    messages = {
        q: {"side": side[q], "leaves": [[str(p), k] for p, k in refs[q].schema.leaves()]}
        for q in refs
    }
    return _finish(service.service_name, counterpart.service_name, mappings, ambiguities, messages)


def _finish(
    service: str,
    counterpart: str,
    mappings: list[DataMapping],
    ambiguities: list[Ambiguity],
    messages: dict[str, dict[str, Any]],
) -> MappingReport:
    mappings = sorted(mappings, key=lambda m: (m.sub, m.sup))
    covered = {q for m in mappings if m.live for q in (m.sub, m.sup)}
    unmapped = tuple(sorted(q for q in messages if q not in covered))
    return MappingReport(
        service,
        counterpart,
        tuple(mappings),
        unmapped,
        tuple(sorted(ambiguities, key=lambda a: a.scope)),
        messages,
    )


def _validate_hint_paths(hints: HintSet, schemas: dict[str, MessageSchema | dict]) -> None:
    for hint in hints:
        for ep in (hint.source, hint.target):
            schema = schemas.get(ep.qname)
            if schema is None:
                continue  # hint concerns another interface pair
            if isinstance(schema, MessageSchema):
                ok = schema.kind_at(ep.path) is not None
            else:
                ok = any(p == ep.path for p, _ in schema["leaves"])
            if not ok:
                raise InvalidHintError(f"hint references nonexistent path {ep}")


# --------------------------------------------------------------------------
# post-hoc hints
# --------------------------------------------------------------------------


def apply_hints(report: MappingReport, hints: HintSet) -> MappingReport:
    """Apply user verdicts to an inferred report.

    Confirmations narrow tied alternatives and mark mappings confirmed;
    rejections discard alternatives and mark mappings rejected.  Neither
    ever introduces a correspondence absent from the report's candidates.
    """
    if not hints:
        return report
    _validate_hint_paths(hints, report.messages)
    relevant = [h for h in hints if h.source.qname in report.messages and h.target.qname in report.messages]
    confirms = {h.key for h in relevant if h.verdict == CONFIRM}
    rejects = {h.key for h in relevant if h.verdict == REJECT}
    _check_confirm_structure([h for h in relevant if h.verdict == CONFIRM])

    known = set()
    for m in report.mappings:
        known |= m.endpoint_pairs()
    for amb in report.ambiguities:
        for opt in amb.options:
            for ch in opt:
                known |= ch.endpoint_pairs()
    for key in confirms:
        if key not in known:
            a, b = sorted(key)
            raise InvalidHintError(
                f"confirmed pair {a} -> {b} is not an inferred correspondence; "
                "pass it to inference instead"
            )

    by_scope = {a.scope: a for a in report.ambiguities}
    new_mappings: list[DataMapping] = []
    new_ambiguities: list[Ambiguity] = []

    for m in report.mappings:
        if m.ambiguity is None:
            pairs = m.endpoint_pairs()
            if m.status == REJECTED or pairs & rejects:
                new_mappings.append(replace(m, status=REJECTED))
            elif pairs & confirms:
                new_mappings.append(replace(m, status=CONFIRMED))
            else:
                new_mappings.append(m)

    for scope, amb in sorted(by_scope.items()):
        template = {(m.sub, m.sup): m for m in report.mappings if m.ambiguity == scope}
        options = [
            opt for opt in amb.options
            if not any(ch.endpoint_pairs() & rejects for ch in opt)
        ]
        for key in confirms:
            narrowed = [opt for opt in options if any(key in ch.endpoint_pairs() for ch in opt)]
            if narrowed:
                options = narrowed
        if not options:
            new_mappings.extend(replace(m, status=REJECTED, ambiguity=None) for m in template.values())
            continue
        touched = any(ch.endpoint_pairs() & confirms for ch in options[0])
        resolved = len(options) == 1
        if not resolved:
            new_ambiguities.append(Ambiguity(scope, tuple(options)))
        for ch in options[0]:
            prior = template.get((ch.sub, ch.sup))
            relation = prior.relation if prior else "sub"
            sim = prior.operation_similarity if prior else Fraction(0)
            if resolved:
                status = CONFIRMED if touched else INFERRED
            else:
                status = AMBIGUOUS
            new_mappings.append(
                DataMapping(ch.sub, ch.sup, CorrespondenceSet(ch.pairs), status, relation, sim,
                            None if resolved else scope)
            )
        chosen = {(ch.sub, ch.sup) for ch in options[0]}
        for key, m in template.items():
            if key not in chosen:
                new_mappings.append(replace(m, status=REJECTED, ambiguity=None))

    return _finish(report.service, report.counterpart, new_mappings, new_ambiguities, report.messages)


def _check_confirm_structure(confirms: list[Hint]) -> None:
    # keyed by (endpoint, qname on the other side)
    seen: dict[tuple[Endpoint, str], Endpoint] = {}
    for h in confirms:
        for here, there in ((h.source, h.target), (h.target, h.source)):
            key = (here, there.qname)
            prior = seen.get(key)
            if prior is not None and prior != there:
                raise InvalidHintError(
                    f"{here} is confirmed against both {prior} and {there}"
                )
            seen[key] = there


# --------------------------------------------------------------------------
# interface files
# --------------------------------------------------------------------------


def _load_message(spec: Any, qname: str, base: Path) -> MessageSchema:
    if isinstance(spec, dict) and "xsd" in spec:
        text = (base / spec["xsd"]).read_text(encoding="utf-8")
        return parse_xsd_subset(text, qname)[0]
    if isinstance(spec, dict) and "schema" in spec:
        loaded = parse_schema_json((base / spec["schema"]).read_text(encoding="utf-8"))[0]
        return loaded.requalified(qname)
    if isinstance(spec, dict) and "root" in spec:
        return schema_from_json({"qname": qname, "root": spec["root"]})
    raise SchemaParseError(f"message {qname}: expected an xsd, schema or root entry")


def interface_from_json(obj: dict[str, Any], base: Path | str = ".") -> InterfaceSpec:
    base = Path(base)
    name = obj["serviceName"]
    ops = []
    for op in obj.get("operations", []):
        mep = op.get("mep", ONE_WAY)
        in_name = op.get("message", f"{op['name']}Request")
        inp = _load_message(op["input"], f"{name}.{op['name']}.{in_name}", base)
        out = None
        if "output" in op:
            out_name = op.get("outputMessage", f"{op['name']}Response")
            out = _load_message(op["output"], f"{name}.{op['name']}.{out_name}", base)
        ops.append(OperationSpec(op["name"], op["direction"], mep, inp, out))
    return InterfaceSpec(name, tuple(ops))


def load_interface(path: Path | str) -> InterfaceSpec:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaParseError(f"{path}: {exc.msg}", exc.lineno, exc.colno) from None
    return interface_from_json(obj, path.parent)
