"""Exhaustive search for score-maximal injective assignments.

Leaf counts in message schemas are small, so a branch-and-bound enumeration
is both fast enough and exact: it reports every optimal assignment (up to a
cap), which is what tie detection needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Generic, Hashable, Sequence, TypeVar

S = TypeVar("S", bound=Hashable)
T = TypeVar("T", bound=Hashable)

DEFAULT_LIMIT = 32


@dataclass
class SearchResult(Generic[S, T]):
    covered: int
    score: Fraction
    # each solution maps every source of an included group to its target
    solutions: list[dict[S, T]]
    # number of optimal solutions seen, saturating at limit + 1
    optimal_count: int

    @property
    def ambiguous(self) -> bool:
        return self.optimal_count > 1


def search(
    groups: Sequence[Sequence[S]],
    options: dict[S, Sequence[tuple[T, Fraction]]],
    forced: Sequence[bool] | None = None,
    limit: int = DEFAULT_LIMIT,
) -> SearchResult[S, T] | None:
    """Choose groups and an injection of their sources maximising (coverage, score).

    A group is all-or-nothing: either every source in it is assigned a
    distinct target from its ``options`` or the group is left out.  Forced
    groups must be included.  Options are tried in the given order, so the
    first optimal solution found is the one preferring earlier targets, which
    makes document order the tie-breaker.  Returns ``None`` when no feasible
    selection exists (only possible with forced groups).
    """
    forced = list(forced) if forced is not None else [False] * len(groups)
    flat = [s for g in groups for s in g]
    best_opt = {s: max((sc for _, sc in options.get(s, ())), default=None) for s in flat}

    # suffix bounds per group index
    n = len(groups)
    cov_bound = [0] * (n + 1)
    score_bound = [Fraction(0)] * (n + 1)
    for i in range(n - 1, -1, -1):
        g = groups[i]
        feasible = all(best_opt[s] is not None for s in g)
        cov_bound[i] = cov_bound[i + 1] + (len(g) if feasible else 0)
        score_bound[i] = score_bound[i + 1] + (
            sum((best_opt[s] for s in g), Fraction(0)) if feasible else Fraction(0)
        )

    best_key: tuple[int, Fraction] | None = None
    solutions: list[dict[S, T]] = []
    count = 0
    used: set[T] = set()
    current: dict[S, T] = {}

    def record(covered: int, score: Fraction) -> None:
        nonlocal best_key, solutions, count
        key = (covered, score)
        if best_key is None or key > best_key:
            best_key = key
            solutions = [dict(current)]
            count = 1
        elif key == best_key:
            count = min(count + 1, limit + 1)
            if len(solutions) < limit:
                solutions.append(dict(current))

    def pruned(gi: int, covered: int, score: Fraction, extra_cov: int, extra_score: Fraction) -> bool:
        if best_key is None:
            return False
        bound = (covered + extra_cov + cov_bound[gi], score + extra_score + score_bound[gi])
        return bound < best_key

    def visit_group(gi: int, covered: int, score: Fraction) -> None:
        if gi == n:
            record(covered, score)
            return
        if pruned(gi, covered, score, 0, Fraction(0)):
            return
        group = groups[gi]
        assign(gi, group, 0, covered, score)
        if not forced[gi]:
            visit_group(gi + 1, covered, score)

    def assign(gi: int, group: Sequence[S], k: int, covered: int, score: Fraction) -> None:
        if k == len(group):
            visit_group(gi + 1, covered, score)
            return
        rest = group[k:]
        if any(best_opt[s] is None for s in rest):
            return
        rest_score = sum((best_opt[s] for s in rest), Fraction(0))
        if pruned(gi + 1, covered, score, len(rest), rest_score):
            return
        src = group[k]
        for target, sc in options.get(src, ()):
            if target in used:
                continue
            used.add(target)
            current[src] = target
            assign(gi, group, k + 1, covered + 1, score + sc)
            del current[src]
            used.discard(target)

    visit_group(0, 0, Fraction(0))
    if best_key is None:
        return None
    return SearchResult(best_key[0], best_key[1], solutions, count)


def best_injections(
    sources: Sequence[S],
    options: dict[S, Sequence[tuple[T, Fraction]]],
    limit: int = DEFAULT_LIMIT,
) -> SearchResult[S, T] | None:
    """All score-maximal injections covering every source, or ``None``."""
    if not sources:
        return SearchResult(0, Fraction(0), [{}], 1)
    return search([list(sources)], options, forced=[True], limit=limit)
