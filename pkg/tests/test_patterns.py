from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eipadapt.errors import ConfigurationError, InvariantViolation, RoutingError
from eipadapt.patterns import (
    Aggregator,
    Channel,
    Headers,
    MessageFilter,
    PatternState,
    Resequencer,
    RuntimeMessage,
    SplitPart,
    Splitter,
    aggregator_process,
    filter_process,
    pattern_from_json,
    pattern_to_json,
    resequencer_process,
    run_chain,
    splitter_process,
    validate_chain,
)
from eipadapt.schema import FieldPath, get_path, set_path
from support import load_project

CD = "CD_Client_SmartCart.addProduct.addProductRequest"
CLIENT_ADD = "Client.addProduct.addProductRequest"
CLIENT_QTY = "Client.setQuantity.setQuantityRequest"
CLIENT_PROMO = "Client.setPromotionCode.setPromotionCodeRequest"
CART_ITEM = "SmartCart.addItem.addItemRequest"
CART_AMOUNT = "SmartCart.setAmount.setAmountRequest"


def message(qname: str, payload: dict, token: str = "t1", tick: int = 0) -> RuntimeMessage:
    return RuntimeMessage(qname, payload, Headers(token, "tester", tick))


@pytest.fixture(scope="module")
def slice_project():
    return load_project("addproduct")


@pytest.fixture(scope="module")
def adapter1(slice_project):
    return slice_project.adapter("Client-CD_Client_SmartCart")


@pytest.fixture(scope="module")
def adapter2(slice_project):
    return slice_project.adapter("SmartCart-CD_Client_SmartCart")


def client_stream() -> list[RuntimeMessage]:
    return [
        message(CLIENT_ADD, {"product": {"id": "p1", "description": "milk"}}, tick=1),
        message(CLIENT_QTY, {"quantity": 3}, tick=2),
        message(CLIENT_PROMO, {"promotionCode": "SPRING10"}, tick=3),
    ]


def run(chain, msgs, state=None):
    inbound, outbound, dead = Channel("in"), Channel("out"), Channel("dead")
    events: list[tuple[str, str]] = []
    for m in msgs:
        inbound.put(m)
    state = run_chain(
        chain, inbound, outbound, state, dead_letter=dead, listener=lambda k, m, i, r: events.append((k, m.qname))
    )
    return outbound.drain(), dead.drain(), events, state


# -- splitter ------------------------------------------------------------


def test_golden_splitter_projects_quantity_and_product(adapter2):
    splitter = adapter2.chain[0]
    assert isinstance(splitter, Splitter)
    src = message(CD, {"product": {"id": "p1", "description": "milk"}, "quantity": 3})
    parts = splitter_process(splitter, src)
    by_qname = {m.qname: m.payload for m in parts}
    assert by_qname == {CART_AMOUNT: {"amount": 3}, CART_ITEM: {"item": {"itemCode": "p1", "descr": "milk"}}}
    assert [m.headers.sequence_index for m in parts] == [1, 2]
    assert {m.headers.correlation_id for m in parts} == {"t1"}


def test_identity_single_part_split():
    cfg = Splitter("A.op.m", (SplitPart("B.op.m", [("x", "x"), ("r.y", "r.y")]),))
    payload = {"x": 1, "r": {"y": "v"}}
    [out] = splitter_process(cfg, message("A.op.m", payload))
    assert out.payload == payload


def test_split_with_missing_source_path_is_a_routing_error():
    cfg = Splitter("A.op.m", (SplitPart("B.op.m", [("x", "x")]),))
    with pytest.raises(RoutingError):
        splitter_process(cfg, message("A.op.m", {"y": 1}))
    out, dead, events, _ = run([cfg], [message("A.op.m", {"y": 1})])
    assert out == [] and [m.qname for m in dead] == ["A.op.m"]
    assert events == [("dead-letter", "A.op.m")]


def test_three_leaf_split_then_merge_restores_payload():
    leaves = ["a", "b.c", "b.d"]
    parts = tuple(SplitPart(f"P.op.p{i}", [(p, p)]) for i, p in enumerate(leaves))
    split = Splitter("A.op.m", parts)
    merge = Aggregator(tuple(p.target for p in parts), "A.op.m", tuple((p.target, p.path_map) for p in parts))
    payload = {"a": 1, "b": {"c": "x", "d": True}}
    out, _, _, state = run([split, merge], [message("A.op.m", payload)])
    assert [m.payload for m in out] == [payload]
    assert state.is_empty()


# -- aggregator ----------------------------------------------------------


def test_golden_aggregator_merges_product_and_quantity(adapter1):
    agg = adapter1.chain[1]
    assert isinstance(agg, Aggregator)
    add, qty, _ = client_stream()
    state, first = aggregator_process(agg, PatternState(), add)
    assert first is None and state.buffered() == 1
    state, merged = aggregator_process(agg, state, qty)
    assert merged.qname == CD
    assert merged.payload == {"product": {"id": "p1", "description": "milk"}, "quantity": 3}
    assert state.is_empty()


def test_aggregator_output_is_independent_of_arrival_order(adapter1):
    agg = adapter1.chain[1]
    add, qty, _ = client_stream()
    outputs = []
    for order in itertools.permutations([add, qty]):
        state = PatternState()
        for m in order:
            state, merged = aggregator_process(agg, state, m)
        outputs.append(merged.payload)
    assert outputs[0] == outputs[1]


def test_duplicate_before_completion_leaves_buffer_unchanged(adapter1):
    agg = adapter1.chain[1]
    add, _, _ = client_stream()
    state, _ = aggregator_process(agg, PatternState(), add)
    snapshot = {k: dict(v) for k, v in state.aggregates.items()}
    with pytest.raises(RoutingError, match="duplicate"):
        aggregator_process(agg, state, add)
    assert state.aggregates == snapshot


def test_aggregator_keeps_tokens_apart(adapter1):
    agg = adapter1.chain[1]
    add, qty, _ = client_stream()
    state, out = aggregator_process(agg, PatternState(), add)
    state, out = aggregator_process(agg, state, message(CLIENT_QTY, {"quantity": 9}, token="t2"))
    assert out is None and state.buffered() == 2


def test_constant_correlation_ignores_tokens():
    agg = Aggregator(("A.op.a", "A.op.b"), "C.op.c", (("A.op.a", [("x", "x")]), ("A.op.b", [("y", "y")])), "constant")
    state, _ = aggregator_process(agg, PatternState(), message("A.op.a", {"x": 1}, token="one"))
    _, out = aggregator_process(agg, state, message("A.op.b", {"y": 2}, token="two"))
    assert out.payload == {"x": 1, "y": 2}


@pytest.mark.parametrize(
    "build",
    [
        lambda: Aggregator(("A.op.a",), "C.op.c", ()),
        lambda: Resequencer(("A.op.a", "A.op.a")),
        lambda: MessageFilter(frozenset()),
        lambda: Splitter("A.op.a", ()),
        lambda: Resequencer(("A.op.a",), "lenient"),
    ],
)
def test_pattern_configuration_invariants(build):
    with pytest.raises(InvariantViolation):
        build()


# -- resequencer ---------------------------------------------------------


def test_golden_resequencer_reorders_item_after_amount(adapter2):
    reseq = adapter2.chain[1]
    assert reseq.order == (CART_AMOUNT, CART_ITEM)
    state, first = resequencer_process(reseq, PatternState(), message(CART_ITEM, {}))
    assert first == []
    state, second = resequencer_process(reseq, state, message(CART_AMOUNT, {}))
    assert [m.qname for m in second] == [CART_AMOUNT, CART_ITEM]
    assert state.is_empty()


def test_resequencer_in_order_arrivals_release_one_by_one():
    reseq = Resequencer(("Q.op.a", "Q.op.b", "Q.op.c"))
    state = PatternState()
    for q in reseq.order:
        state, out = resequencer_process(reseq, state, message(q, {}))
        assert [m.qname for m in out] == [q]


def test_resequencer_rejects_unknown_and_duplicate():
    reseq = Resequencer(("Q.op.a", "Q.op.b"))
    with pytest.raises(RoutingError):
        resequencer_process(reseq, PatternState(), message("Q.op.z", {}))
    state, _ = resequencer_process(reseq, PatternState(), message("Q.op.b", {}))
    with pytest.raises(RoutingError):
        resequencer_process(reseq, state, message("Q.op.b", {}))
    state, _ = resequencer_process(reseq, PatternState(), message("Q.op.a", {}))
    with pytest.raises(RoutingError):
        resequencer_process(reseq, state, message("Q.op.a", {}))


def check_permutation(order: tuple[str, ...], arrival: list[str]) -> None:
    reseq = Resequencer(order)
    state = PatternState()
    released: list[str] = []
    for step, q in enumerate(arrival, start=1):
        state, out = resequencer_process(reseq, state, message(q, {"n": step}))
        released.extend(m.qname for m in out)
        # the released part is always a prefix of the target order
        assert released == list(order[: len(released)])
        assert state.buffered() == step - len(released)
    assert released == list(order)
    assert state.is_empty()


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_resequencer_exhaustive_permutations(n):
    order = tuple(f"Q.op.m{i}" for i in range(n))
    for arrival in itertools.permutations(order):
        check_permutation(order, list(arrival))


@settings(max_examples=300, deadline=None)
@given(st.integers(5, 8).flatmap(lambda n: st.permutations([f"Q.op.m{i}" for i in range(n)])))
def test_resequencer_random_permutations_up_to_eight(arrival):
    check_permutation(tuple(sorted(arrival)), arrival)


def test_resequencer_starts_a_new_cycle_after_full_release():
    reseq = Resequencer(("Q.op.a", "Q.op.b"))
    out, dead, _, state = run([reseq], [message(q, {}) for q in ["Q.op.b", "Q.op.a", "Q.op.b", "Q.op.a"]])
    assert [m.qname for m in out] == ["Q.op.a", "Q.op.b", "Q.op.a", "Q.op.b"]
    assert dead == [] and state.is_empty()


# -- filter --------------------------------------------------------------


def test_golden_filter_drops_promotion_code(adapter1):
    flt = adapter1.chain[0]
    assert flt == MessageFilter(frozenset({CLIENT_PROMO}))
    add, _, promo = client_stream()
    assert filter_process(flt, promo) is None
    assert filter_process(flt, add) is add


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["Q.op.a", "Q.op.b", "Q.op.c", "Q.op.d"]), max_size=30), st.sets(st.sampled_from(["Q.op.a", "Q.op.b", "Q.op.c"]), min_size=1))
def test_filter_counting_oracle(names, drop):
    stream = [message(q, {"i": i}) for i, q in enumerate(names)]
    out, dead, events, _ = run([MessageFilter(frozenset(drop))], stream)
    kept = [m for m in stream if m.qname not in drop]
    assert out == kept
    assert len(out) == len(stream) - sum(q in drop for q in names)
    assert [k for k, _ in events] == ["dropped"] * (len(stream) - len(kept))
    assert dead == []


# -- chains --------------------------------------------------------------


def test_adapter1_chain_emits_one_cd_message(adapter1):
    out, dead, events, state = run(list(adapter1.chain), client_stream())
    assert [m.qname for m in out] == [CD]
    assert out[0].payload == {"product": {"id": "p1", "description": "milk"}, "quantity": 3}
    assert events == [("dropped", CLIENT_PROMO)] and dead == []
    assert state.is_empty()


def test_adapter2_chain_delivers_amount_then_item(adapter2):
    src = message(CD, {"product": {"id": "p1", "description": "milk"}, "quantity": 3})
    out, dead, events, state = run(list(adapter2.chain), [src])
    assert [(m.qname, m.payload) for m in out] == [
        (CART_AMOUNT, {"amount": 3}),
        (CART_ITEM, {"item": {"itemCode": "p1", "descr": "milk"}}),
    ]
    assert dead == [] and events == [] and state.is_empty()


def test_adapter_chains_compose_end_to_end(adapter1, adapter2):
    merged, *_ = run(list(adapter1.chain), client_stream())
    out, *_ = run(list(adapter2.chain), merged)
    assert [m.payload for m in out] == [{"amount": 3}, {"item": {"itemCode": "p1", "descr": "milk"}}]


def test_empty_stream_leaves_state_untouched():
    out, dead, events, state = run([MessageFilter(frozenset({"Q.op.a"}))], [])
    assert out == [] and dead == [] and events == [] and state.is_empty()


def test_no_message_loss_accounting(adapter1):
    rng = random.Random(3)
    agg = adapter1.chain[1]
    for _ in range(100):
        stream = [m.with_headers(correlation_id=f"s{rng.randrange(3)}") for m in client_stream() * 3]
        rng.shuffle(stream)
        out, dead, events, state = run(list(adapter1.chain), stream)
        dropped = sum(1 for k, _ in events if k == "dropped")
        # every merged output consumed one message of each expected qname
        consumed = len(out) * len(agg.expected)
        assert consumed + dropped + len(dead) + state.buffered() == len(stream)


def test_validate_chain_reports_unreachable_inputs(adapter2):
    with pytest.raises(ConfigurationError, match="never reach"):
        validate_chain(list(adapter2.chain), ["Other.op.m"])
    assert validate_chain(list(adapter2.chain), [CD]) == [CART_AMOUNT, CART_ITEM]


def test_validate_chain_checks_path_maps_against_schemas(slice_project, adapter2):
    registry = {r.qname: r.schema for r in slice_project.services["SmartCart"][0].messages()}
    registry.update({s.qname: s for cd in slice_project.cds for s in cd.schemas.values()})
    validate_chain(list(adapter2.chain), [CD], registry)
    bad = Splitter(CD, (SplitPart(CART_AMOUNT, [("quantity", "nope")]),))
    with pytest.raises(ConfigurationError, match="no leaf"):
        validate_chain([bad], [CD], registry)
    partial = Splitter(CD, (SplitPart(CART_ITEM, [("product.id", "item.itemCode")]),))
    with pytest.raises(ConfigurationError, match="cover"):
        validate_chain([partial], [CD], registry)
    with pytest.raises(ConfigurationError):
        run_chain([bad], Channel("in"), Channel("out"), entry_qnames=[CD], registry=registry)


def test_pattern_serialization_round_trips(adapter1, adapter2):
    for p in [*adapter1.chain, *adapter2.chain]:
        assert pattern_from_json(pattern_to_json(p)) == p
    with pytest.raises(ConfigurationError):
        pattern_from_json({"kind": "Enricher"})


# -- channels ------------------------------------------------------------


@given(st.lists(st.integers(), max_size=50))
def test_channel_is_fifo(values):
    ch = Channel("c")
    for v in values:
        ch.put(message("Q.op.a", {"v": v}))
    assert [ch.get().payload["v"] for _ in range(len(ch))] == values
    assert not ch


def test_bounded_channel_refuses_overflow():
    ch = Channel("c", capacity=1)
    ch.put(message("Q.op.a", {}))
    with pytest.raises(RoutingError, match="full"):
        ch.put(message("Q.op.a", {}))


# -- split/aggregate round trip -----------------------------------------

LEAF_VALUES = {
    "string": st.text(max_size=5),
    "int": st.integers(-1000, 1000),
    "boolean": st.booleans(),
}


@st.composite
def schema_partitions(draw):
    """A random leaf set, payload and partition of the leaves into parts."""
    count = draw(st.integers(1, 6))
    paths: list[str] = []
    names = iter(draw(st.permutations([f"f{i}" for i in range(12)])))
    for _ in range(count):
        group = draw(st.integers(0, 2))
        paths.append(next(names) if group == 0 else f"r{group}.{next(names)}")
    payload: dict = {}
    for p in paths:
        set_path(payload, FieldPath.parse(p), draw(LEAF_VALUES[draw(st.sampled_from(sorted(LEAF_VALUES)))]))
    labels = draw(st.lists(st.integers(0, count - 1), min_size=count, max_size=count))
    groups: dict[int, list[str]] = {}
    for p, label in zip(paths, labels):
        groups.setdefault(label, []).append(p)
    return payload, [groups[k] for k in sorted(groups)]


@settings(max_examples=500, deadline=None)
@given(schema_partitions(), st.booleans())
def test_split_then_aggregate_is_identity(case, renamed):
    payload, groups = case

    def rename(p: str) -> str:
        return "x_" + p.replace(".", "_") if renamed else p

    parts = tuple(SplitPart(f"P.op.part{i}", [(p, rename(p)) for p in g]) for i, g in enumerate(groups))
    split = Splitter("S.op.whole", parts)
    pieces = splitter_process(split, message("S.op.whole", payload))
    assert [m.qname for m in pieces] == [p.target for p in parts]
    if len(parts) == 1:
        # a lone part cannot feed an Aggregator; invert its path map directly
        rebuilt: dict = {}
        for src, dst in parts[0].path_map:
            set_path(rebuilt, src, get_path(pieces[0].payload, dst))
        assert rebuilt == payload
        return
    merge = Aggregator(
        tuple(p.target for p in parts),
        "S.op.whole",
        tuple((p.target, [(d, s) for s, d in p.path_map]) for p in parts),
    )
    state = PatternState()
    merged = None
    for piece in pieces:
        state, merged = aggregator_process(merge, state, piece)
    assert merged is not None and merged.payload == payload
    assert state.is_empty()
