"""User verdicts on field correspondences.

A hint file holds one verdict per line::

    confirm Client.setQuantity.setQuantityRequest#quantity -> CD.addProduct.addProductRequest#quantity
    reject  Client.setPromotionCode.setPromotionCodeRequest#promotionCode -> CD.addProduct.addProductRequest#product.id

Blank lines and lines starting with ``#`` are ignored.  A verdict applies to
the pair regardless of the direction it is written in, so a correspondence
may be named in data-flow order or in sub-to-sup order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

from .errors import InvalidHintError

CONFIRM = "confirm"
REJECT = "reject"

_LINE = re.compile(
    r"^(?P<verdict>confirm|reject)\s+"
    r"(?P<src_q>[^#\s]+)#(?P<src_p>\S+)\s*->\s*"
    r"(?P<dst_q>[^#\s]+)#(?P<dst_p>\S+)$"
)


@dataclass(frozen=True, order=True)
class Endpoint:
    qname: str
    path: str

    def __str__(self) -> str:
        return f"{self.qname}#{self.path}"


@dataclass(frozen=True, order=True)
class Hint:
    source: Endpoint
    target: Endpoint
    verdict: str

    @property
    def key(self) -> frozenset[Endpoint]:
        return frozenset((self.source, self.target))

    def render(self) -> str:
        return f"{self.verdict} {self.source} -> {self.target}"


class HintSet:
    """An order-insensitive collection of verdicts."""

    def __init__(self, entries: Iterable[Hint] = ()):
        self._by_key: dict[frozenset[Endpoint], Hint] = {}
        for hint in entries:
            prior = self._by_key.get(hint.key)
            if prior is not None and prior.verdict != hint.verdict:
                raise InvalidHintError(
                    f"pair {hint.source} -> {hint.target} is both confirmed and rejected"
                )
            if prior is None or hint < prior:
                self._by_key[hint.key] = hint

    @property
    def entries(self) -> list[Hint]:
        return sorted(self._by_key.values())

    def __len__(self) -> int:
        return len(self._by_key)

    def __bool__(self) -> bool:
        return bool(self._by_key)

    def __iter__(self):
        return iter(self.entries)

    def verdict(self, a: Endpoint, b: Endpoint) -> str | None:
        hint = self._by_key.get(frozenset((a, b)))
        return hint.verdict if hint else None

    def confirmed_partners(self, endpoint: Endpoint, other_qname: str) -> list[Endpoint]:
        """Endpoints in ``other_qname`` confirmed as partners of ``endpoint``."""
        out = []
        for hint in self._by_key.values():
            if hint.verdict != CONFIRM or endpoint not in hint.key:
                continue
            other = hint.target if hint.source == endpoint else hint.source
            if other.qname == other_qname:
                out.append(other)
        return sorted(out)

    def touching(self, qname: str) -> list[Hint]:
        return [h for h in self.entries if qname in (h.source.qname, h.target.qname)]

    def merged(self, other: "HintSet") -> "HintSet":
        return HintSet([*self.entries, *other.entries])

    def render(self) -> str:
        return "".join(h.render() + "\n" for h in self.entries)


def parse_hints(text: str) -> HintSet:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _LINE.match(line)
        if m is None:
            raise InvalidHintError(f"line {lineno}: cannot parse hint {line!r}")
        entries.append(
            Hint(
                Endpoint(m["src_q"], m["src_p"]),
                Endpoint(m["dst_q"], m["dst_p"]),
                m["verdict"],
            )
        )
    return HintSet(entries)
