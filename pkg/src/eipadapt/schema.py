"""Structural message types, their two file formats, and the subtyping check."""

from __future__ import annotations

import datetime as _dt
import json
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Any, Iterable, Union
from xml.parsers import expat

from .errors import InvariantViolation, SchemaParseError, UnsupportedConstructError
from .hints import CONFIRM, REJECT, Endpoint, HintSet
from .matching import best_injections

KINDS = ("string", "int", "boolean", "decimal", "date")
XSD_NAMESPACE = "http://www.w3.org/2001/XMLSchema"

_IDENT = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")


def is_identifier(name: str) -> bool:
    return bool(_IDENT.match(name))


@dataclass(frozen=True)
class Primitive:
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise UnsupportedConstructError(f"primitive kind {self.kind!r}")


@dataclass(frozen=True)
class FieldDecl:
    name: str
    node: "TypeNode"

    def __post_init__(self) -> None:
        if not is_identifier(self.name):
            raise InvariantViolation(f"invalid field name {self.name!r}")


@dataclass(frozen=True)
class Record:
    fields: tuple[FieldDecl, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(self.fields))
        seen = set()
        for f in self.fields:
            if f.name in seen:
                raise InvariantViolation(f"duplicate field name {f.name!r}")
            seen.add(f.name)
        if not self.fields:
            raise InvariantViolation("record defines no fields")

    def field(self, name: str) -> FieldDecl | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None


TypeNode = Union[Primitive, Record]


@dataclass(frozen=True, order=True)
class FieldPath:
    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments or not all(is_identifier(s) for s in self.segments):
            raise InvariantViolation(f"invalid field path {self.segments!r}")

    @classmethod
    def parse(cls, text: str) -> "FieldPath":
        return cls(tuple(text.split(".")))

    @property
    def leaf_name(self) -> str:
        return self.segments[-1]

    def __str__(self) -> str:
        return ".".join(self.segments)


def _leaves(node: TypeNode, prefix: tuple[str, ...]) -> Iterable[tuple[FieldPath, str]]:
    if isinstance(node, Primitive):
        yield FieldPath(prefix), node.kind
        return
    for f in node.fields:
        yield from _leaves(f.node, prefix + (f.name,))


@dataclass(frozen=True)
class MessageSchema:
    qname: str
    root: Record
    _leaf_cache: tuple[tuple[FieldPath, str], ...] = field(
        default=(), init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        parts = self.qname.split(".")
        if len(parts) != 3 or not all(is_identifier(p) for p in parts):
            raise InvariantViolation(
                f"qname {self.qname!r} must have the form service.operation.message"
            )
        if not isinstance(self.root, Record):
            raise InvariantViolation("schema root must be a record")
        object.__setattr__(self, "_leaf_cache", tuple(_leaves(self.root, ())))

    @property
    def service(self) -> str:
        return self.qname.split(".")[0]

    @property
    def operation(self) -> str:
        return self.qname.split(".")[1]

    @property
    def message(self) -> str:
        return self.qname.split(".")[2]

    def leaves(self) -> tuple[tuple[FieldPath, str], ...]:
        """Leaf paths with their kinds, in document order."""
        return self._leaf_cache

    @property
    def leaf_count(self) -> int:
        return len(self._leaf_cache)

    def kind_at(self, path: FieldPath | str) -> str | None:
        if isinstance(path, str):
            path = FieldPath.parse(path)
        for p, kind in self._leaf_cache:
            if p == path:
                return kind
        return None

    def requalified(self, qname: str) -> "MessageSchema":
        return MessageSchema(qname, self.root)


# --------------------------------------------------------------------------
# XSD subset
# --------------------------------------------------------------------------

_XSD_KINDS = {"string": "string", "int": "int", "boolean": "boolean",
              "decimal": "decimal", "date": "date"}
_SUPPORTED_TAGS = {"schema", "complexType", "sequence", "element"}


@dataclass
class _XmlNode:
    tag: str
    attrs: dict[str, str]
    line: int
    column: int
    children: list["_XmlNode"] = field(default_factory=list)

    @property
    def prefix(self) -> str:
        return self.tag.split(":")[0] if ":" in self.tag else ""

    @property
    def local(self) -> str:
        return self.tag.split(":")[-1]


def _parse_xml(text: str) -> _XmlNode:
    # No namespace processing: the listings use an undeclared xsd: prefix.
    parser = expat.ParserCreate()
    stack: list[_XmlNode] = []
    roots: list[_XmlNode] = []

    def start(name: str, attrs: dict[str, str]) -> None:
        node = _XmlNode(name, dict(attrs), parser.CurrentLineNumber, parser.CurrentColumnNumber + 1)
        (stack[-1].children if stack else roots).append(node)
        stack.append(node)

    def end(name: str) -> None:
        stack.pop()

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    try:
        parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise SchemaParseError(
            f"malformed XML: {expat.ErrorString(exc.code)}", exc.lineno, exc.offset + 1
        ) from None
    return roots[0]


class _XsdReader:
    def __init__(self, root: _XmlNode):
        if root.local != "schema":
            raise SchemaParseError(f"expected xsd:schema root, found {root.tag}", root.line, root.column)
        self.prefix = root.prefix
        self.root = root
        self.named: dict[str, _XmlNode] = {}
        for child in root.children:
            self._check_tag(child)
            if child.local == "complexType":
                name = child.attrs.get("name")
                if name is None:
                    raise SchemaParseError("top-level complexType needs a name", child.line, child.column)
                self.named[name] = child

    def _check_tag(self, node: _XmlNode) -> None:
        if node.prefix != self.prefix:
            raise UnsupportedConstructError(node.tag, f"line {node.line}")
        if node.local not in _SUPPORTED_TAGS:
            raise UnsupportedConstructError(f"{self.prefix}:{node.local}" if self.prefix else node.local,
                                            f"line {node.line}")

    def record(self) -> Record:
        fields = []
        for child in self.root.children:
            name = child.attrs.get("name")
            if name is None:
                raise SchemaParseError(f"{child.tag} without a name", child.line, child.column)
            if child.local == "complexType":
                fields.append(self._field(name, self._complex(child, (name,))))
            else:
                fields.append(self._field(name, self._element(child, ())))
        if not fields:
            raise InvariantViolation("schema defines no leaves")
        return Record(tuple(fields))

    def _field(self, name: str, node: TypeNode) -> FieldDecl:
        try:
            return FieldDecl(name, node)
        except InvariantViolation as exc:
            raise InvariantViolation(f"{exc} in schema") from None

    def _complex(self, node: _XmlNode, resolving: tuple[str, ...]) -> Record:
        body = [c for c in node.children]
        for c in body:
            self._check_tag(c)
        if len(body) != 1 or body[0].local != "sequence":
            raise UnsupportedConstructError(
                "complexType content other than a single sequence", f"line {node.line}"
            )
        fields = []
        for el in body[0].children:
            self._check_tag(el)
            if el.local != "element":
                raise UnsupportedConstructError(el.tag, f"line {el.line}")
            name = el.attrs.get("name")
            if name is None:
                raise SchemaParseError("element without a name", el.line, el.column)
            fields.append(self._field(name, self._element(el, resolving)))
        if not fields:
            raise InvariantViolation(f"complexType at line {node.line} defines no fields")
        return Record(tuple(fields))

    def _element(self, el: _XmlNode, resolving: tuple[str, ...]) -> TypeNode:
        type_attr = el.attrs.get("type")
        for c in el.children:
            self._check_tag(c)
        if type_attr is None:
            if len(el.children) != 1 or el.children[0].local != "complexType":
                raise SchemaParseError("element needs a type or an inline complexType", el.line, el.column)
            return self._complex(el.children[0], resolving)
        if el.children:
            raise UnsupportedConstructError("element with both type and content", f"line {el.line}")
        prefix, _, local = type_attr.rpartition(":")
        if prefix == self.prefix and prefix:
            kind = _XSD_KINDS.get(local)
            if kind is None:
                raise UnsupportedConstructError(f"type {type_attr}", f"line {el.line}")
            return Primitive(kind)
        target = self.named.get(local)
        if target is None:
            raise SchemaParseError(f"unknown type {type_attr!r}", el.line, el.column)
        if local in resolving:
            raise UnsupportedConstructError("recursive type reference", " -> ".join(resolving + (local,)))
        return self._complex(target, resolving + (local,))


def parse_xsd_subset(text: str, qname: str) -> list[MessageSchema]:
    """Parse the XSD subset of the message listings into one message schema."""
    root = _parse_xml(text)
    return [MessageSchema(qname, _XsdReader(root).record())]


def to_xsd(schema: MessageSchema, target_namespace: str | None = None) -> str:
    ns = f' targetNamespace="{target_namespace}"' if target_namespace else ""
    lines = [f'<xsd:schema version="1.0" xmlns:xsd="{XSD_NAMESPACE}"{ns}>']

    def emit_record(rec: Record, indent: str) -> None:
        lines.append(f"{indent}<xsd:sequence>")
        for f in rec.fields:
            emit_element(f, indent + "  ")
        lines.append(f"{indent}</xsd:sequence>")

    def emit_element(f: FieldDecl, indent: str) -> None:
        if isinstance(f.node, Primitive):
            lines.append(f'{indent}<xsd:element name="{f.name}" type="xsd:{f.node.kind}"/>')
        else:
            lines.append(f'{indent}<xsd:element name="{f.name}">')
            lines.append(f"{indent}  <xsd:complexType>")
            emit_record(f.node, indent + "    ")
            lines.append(f"{indent}  </xsd:complexType>")
            lines.append(f"{indent}</xsd:element>")

    for f in schema.root.fields:
        if isinstance(f.node, Primitive):
            emit_element(f, "  ")
        else:
            lines.append(f'  <xsd:complexType name="{f.name}">')
            emit_record(f.node, "    ")
            lines.append("  </xsd:complexType>")
    lines.append("</xsd:schema>")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# JSON-style format
# --------------------------------------------------------------------------


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise InvariantViolation(f"duplicate field name {key!r}")
        out[key] = value
    return out


def node_from_json(value: Any, where: str = "root") -> TypeNode:
    if isinstance(value, str):
        if value not in KINDS:
            raise UnsupportedConstructError(f"primitive kind {value!r}", where)
        return Primitive(value)
    if isinstance(value, dict):
        if not value:
            raise InvariantViolation(f"record at {where} defines no fields")
        return Record(tuple(FieldDecl(k, node_from_json(v, f"{where}.{k}")) for k, v in value.items()))
    raise SchemaParseError(f"expected a kind name or an object at {where}")


def node_to_json(node: TypeNode) -> Any:
    if isinstance(node, Primitive):
        return node.kind
    return {f.name: node_to_json(f.node) for f in node.fields}


def schema_from_json(obj: Any) -> MessageSchema:
    if not isinstance(obj, dict) or set(obj) != {"qname", "root"}:
        raise SchemaParseError('schema object must have exactly the keys "qname" and "root"')
    root = node_from_json(obj["root"])
    if not isinstance(root, Record):
        raise SchemaParseError("schema root must be an object")
    return MessageSchema(obj["qname"], root)


def schema_to_json(schema: MessageSchema) -> dict[str, Any]:
    return {"qname": schema.qname, "root": node_to_json(schema.root)}


def parse_schema_json(text: str) -> list[MessageSchema]:
    """Parse one schema object or a list of them."""
    try:
        data = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise SchemaParseError(f"malformed JSON: {exc.msg}", exc.lineno, exc.colno) from None
    items = data if isinstance(data, list) else [data]
    return [schema_from_json(item) for item in items]


# --------------------------------------------------------------------------
# Payload values
# --------------------------------------------------------------------------


def _coerce_leaf(kind: str, value: Any, where: str) -> Any:
    try:
        if kind == "string" and isinstance(value, str):
            return value
        if kind == "int" and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind == "boolean" and isinstance(value, bool):
            return value
        if kind == "decimal" and not isinstance(value, bool) and isinstance(value, (str, int, Decimal)):
            return Decimal(value)
        if kind == "date":
            if isinstance(value, _dt.date):
                return value
            if isinstance(value, str):
                return _dt.date.fromisoformat(value)
    except (InvalidOperation, ValueError):
        pass
    raise InvariantViolation(f"value {value!r} at {where} is not a valid {kind}")


def coerce_payload(schema: MessageSchema, raw: Any) -> dict[str, Any]:
    """Build a typed payload from JSON-ish values, validating against the schema."""

    def walk(node: TypeNode, value: Any, where: str) -> Any:
        if isinstance(node, Primitive):
            return _coerce_leaf(node.kind, value, where)
        if not isinstance(value, dict):
            raise InvariantViolation(f"expected an object at {where}")
        extra = set(value) - {f.name for f in node.fields}
        if extra:
            raise InvariantViolation(f"unexpected fields {sorted(extra)} at {where}")
        out = {}
        for f in node.fields:
            if f.name not in value:
                raise InvariantViolation(f"missing field {where}.{f.name}")
            out[f.name] = walk(f.node, value[f.name], f"{where}.{f.name}")
        return out

    return walk(schema.root, raw, schema.qname)


def _leaf_ok(kind: str, value: Any) -> bool:
    if kind == "string":
        return isinstance(value, str)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "decimal":
        return isinstance(value, Decimal)
    return isinstance(value, _dt.date) and not isinstance(value, _dt.datetime)


def validate_payload(schema: MessageSchema, payload: Any) -> None:
    """Raise InvariantViolation unless every leaf is present and kind-correct."""

    def walk(node: TypeNode, value: Any, where: str) -> None:
        if isinstance(node, Primitive):
            if not _leaf_ok(node.kind, value):
                raise InvariantViolation(f"value {value!r} at {where} is not a valid {node.kind}")
            return
        if not isinstance(value, dict) or set(value) != {f.name for f in node.fields}:
            raise InvariantViolation(f"payload shape mismatch at {where}")
        for f in node.fields:
            walk(f.node, value[f.name], f"{where}.{f.name}")

    walk(schema.root, payload, schema.qname)


def get_path(payload: dict[str, Any], path: FieldPath) -> Any:
    value: Any = payload
    for seg in path.segments:
        if not isinstance(value, dict) or seg not in value:
            raise KeyError(str(path))
        value = value[seg]
    return value


def set_path(payload: dict[str, Any], path: FieldPath, value: Any) -> None:
    node = payload
    for seg in path.segments[:-1]:
        node = node.setdefault(seg, {})
    node[path.segments[-1]] = value


def jsonable(value: Any) -> Any:
    """Payload values rendered for canonical JSON output."""
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, Decimal):
        return str(value)
    if isinstance(value, _dt.date):
        return value.isoformat()
    return value


# --------------------------------------------------------------------------
# Subtyping
# --------------------------------------------------------------------------


def _normalize(name: str) -> str:
    return re.sub(r"[^0-9a-z]", "", name.lower())


def name_similarity(a: str, b: str) -> Fraction:
    if a.lower() == b.lower():
        return Fraction(1)
    na, nb = _normalize(a), _normalize(b)
    if na == nb:
        return Fraction(4, 5)
    short, long_ = sorted((na, nb), key=len)
    if len(short) >= 3 and short in long_:
        return Fraction(3, 5)
    return Fraction(1, 5)


@dataclass(frozen=True, order=True)
class Correspondence:
    source: FieldPath
    target: FieldPath
    score: Fraction

    def to_json(self) -> dict[str, Any]:
        return {"source": str(self.source), "target": str(self.target), "score": _fmt_score(self.score)}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Correspondence":
        return cls(FieldPath.parse(obj["source"]), FieldPath.parse(obj["target"]), Fraction(obj["score"]))


def _fmt_score(score: Fraction) -> str:
    return str(score.numerator) if score.denominator == 1 else f"{score.numerator}/{score.denominator}"


@dataclass(frozen=True)
class CorrespondenceSet:
    pairs: tuple[Correspondence, ...]
    ambiguous: bool = False
    # tied optimal alternatives, the chosen one first
    alternatives: tuple[tuple[Correspondence, ...], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "pairs", tuple(self.pairs))
        sources = [c.source for c in self.pairs]
        targets = [c.target for c in self.pairs]
        if len(set(sources)) != len(sources):
            raise InvariantViolation("correspondence sources must be distinct")
        if len(set(targets)) != len(targets):
            raise InvariantViolation("correspondence targets must be distinct")
        for c in self.pairs:
            if not (0 <= c.score <= 1):
                raise InvariantViolation(f"score {c.score} outside [0, 1]")

    @property
    def total(self) -> Fraction:
        return sum((c.score for c in self.pairs), Fraction(0))

    def as_dict(self) -> dict[str, str]:
        return {str(c.source): str(c.target) for c in self.pairs}


def candidate_options(
    t1: MessageSchema, t2: MessageSchema, hints: HintSet | None = None
) -> dict[FieldPath, list[tuple[FieldPath, Fraction]]]:
    """Kind-compatible targets per source leaf, in target document order.

    Rejected pairs are removed; a confirmed pair becomes the only option for
    its source and is withheld from every other source.
    """
    hints = hints or HintSet()
    options: dict[FieldPath, list[tuple[FieldPath, Fraction]]] = {}
    claimed: dict[FieldPath, FieldPath] = {}
    for src, _ in t1.leaves():
        for partner in hints.confirmed_partners(Endpoint(t1.qname, str(src)), t2.qname):
            claimed[FieldPath.parse(partner.path)] = src
    for src, kind in t1.leaves():
        opts = []
        for tgt, tkind in t2.leaves():
            if tkind != kind:
                continue
            verdict = hints.verdict(Endpoint(t1.qname, str(src)), Endpoint(t2.qname, str(tgt)))
            if verdict == REJECT:
                continue
            owner = claimed.get(tgt)
            if owner is not None and owner != src:
                continue
            opts.append((tgt, verdict, name_similarity(src.leaf_name, tgt.leaf_name)))
        if any(v == CONFIRM for _, v, _ in opts):
            opts = [o for o in opts if o[1] == CONFIRM]
        options[src] = [(tgt, sc) for tgt, _, sc in opts]
    return options


def subtype_of(
    t1: MessageSchema, t2: MessageSchema, hints: HintSet | None = None
) -> CorrespondenceSet | None:
    """Best kind-preserving injection of the leaves of ``t1`` into ``t2``.

    Record nesting does not constrain the injection.  Returns ``None`` when
    some leaf of ``t1`` cannot be placed.
    """
    if t1.leaf_count > t2.leaf_count:
        return None
    options = candidate_options(t1, t2, hints)
    sources = [p for p, _ in t1.leaves()]
    result = best_injections(sources, options)
    if result is None:
        return None

    def pairs_of(sol: dict[FieldPath, FieldPath]) -> tuple[Correspondence, ...]:
        lookup = {src: dict(options[src]) for src in sources}
        return tuple(Correspondence(s, sol[s], lookup[s][sol[s]]) for s in sources)

    alternatives = tuple(pairs_of(sol) for sol in result.solutions)
    return CorrespondenceSet(alternatives[0], result.ambiguous, alternatives if result.ambiguous else ())


def equiv(t1: MessageSchema, t2: MessageSchema, hints: HintSet | None = None) -> bool:
    return (
        t1.leaf_count == t2.leaf_count
        and subtype_of(t1, t2, hints) is not None
        and subtype_of(t2, t1, hints) is not None
    )
