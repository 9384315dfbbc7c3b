from __future__ import annotations

import random
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eipadapt.enactment import (
    BLOCKED,
    DELIVERED,
    DROPPED,
    FORWARDED,
    Reaction,
    ScriptAction,
    ServiceStub,
    Trace,
    TraceEvent,
    build_harness,
    check_conformance,
    enact,
    make_stubs,
    payload_digest,
)
from eipadapt.errors import AnalysisError, ConfigurationError, InvariantViolation, WiringError
from eipadapt.mapping import InterfaceSpec, infer_mappings
from eipadapt.protocol import protocol_from_json
from eipadapt.synthesis import merged_view, synthesize_adapter
from support import harness_for, load_project, msg, required, scenario_harness

CART_ITEM = "SmartCart.addItem.addItemRequest"
CART_AMOUNT = "SmartCart.setAmount.setAmountRequest"


@pytest.fixture(scope="module")
def instore():
    return load_project("instore")


@pytest.fixture(scope="module")
def slice_project():
    return load_project("addproduct")


def deliveries(trace: Trace, role: str) -> list[tuple[str, dict]]:
    return [(e.qname, trace.payloads[e.tick]) for e in trace.of_kind(DELIVERED) if e.target == role]


# -- golden and fixed scenarios -------------------------------------------


def test_golden_delivers_amount_then_item_with_client_values():
    trace = enact(scenario_harness("instore", "golden"))
    cart = deliveries(trace, "SmartCart")
    assert cart[:2] == [
        (CART_AMOUNT, {"amount": 3}),
        (CART_ITEM, {"item": {"itemCode": "p1", "descr": "milk"}}),
    ]
    assert [q for q, _ in cart[2:]] == ["SmartCart.checkout.checkoutRequest"]
    machine = deliveries(trace, "SelfCheckoutMachine")
    assert machine == [("SelfCheckoutMachine.pay.payRequest", {"cartId": "cart-1", "total": Decimal("4.50")})]
    assert trace.complete and trace.pending == 0
    report = check_conformance(trace, load_project("instore").choreo)
    assert report.verdict == "conformant"
    assert {"Add Product", "Checkout", "Payment"} <= set(report.exercised)
    assert report.coverage == "3/4"


def test_golden_slice_also_drops_promotion_code():
    trace = enact(scenario_harness("addproduct", "golden"))
    assert [e.qname for e in trace.of_kind(DROPPED)] == ["Client.setPromotionCode.setPromotionCodeRequest"]
    assert [q for q, _ in deliveries(trace, "SmartCart")] == [CART_AMOUNT, CART_ITEM]


def test_empty_scripts_only_bootstrap():
    trace = enact(scenario_harness("instore", "empty"))
    assert [e.kind for e in trace.events] == ["bootstrap"]
    report = check_conformance(trace, load_project("instore").choreo)
    assert report.verdict == "conformant" and report.coverage == "0/4"


def test_malicious_client_is_blocked_after_payment():
    trace = enact(scenario_harness("instore", "malicious"))
    [blocked] = trace.of_kind(BLOCKED)
    assert blocked.operation == "addProduct" and blocked.detail["initiator"] == "Client"
    pay_tick = next(e.tick for e in trace.of_kind(DELIVERED) if e.operation == "pay")
    assert blocked.tick > pay_tick
    # nothing reaches the cart after the block
    assert all(e.tick < blocked.tick for e in trace.of_kind(DELIVERED) if e.target == "SmartCart")
    report = check_conformance(trace, load_project("instore").choreo)
    assert report.verdict == "conformant" and report.prevented == (blocked,)


def test_bypass_lets_the_violation_through():
    trace = enact(scenario_harness("instore", "malicious", bypass=True))
    assert trace.of_kind(BLOCKED) == []
    report = check_conformance(trace, load_project("instore").choreo)
    assert report.verdict == "violations"
    [violation] = report.violations
    assert violation.event.operation == "addProduct"
    assert "violation at tick" in report.text()


def test_trace_ticks_increase_and_deliveries_have_sends():
    trace = enact(scenario_harness("instore", "malicious"))
    ticks = [e.tick for e in trace.events]
    assert ticks == sorted(set(ticks)) and ticks[0] == 0
    sent_ops = {e.operation for e in trace.of_kind("sent")}
    for e in trace.of_kind(DELIVERED):
        assert any(s.tick < e.tick for s in trace.of_kind("sent"))
        assert e.operation in sent_ops or e.operation in {"setAmount", "addItem"}


def test_trace_serialization_round_trips():
    trace = enact(scenario_harness("instore", "golden"))
    again = Trace.loads(trace.dumps())
    assert again.events == trace.events
    assert again.dumps() == trace.dumps()
    assert again.complete and again.pending == 0


@pytest.mark.parametrize("seed", [0, 7, 99])
def test_same_seed_gives_identical_traces(seed):
    first = enact(scenario_harness("instore", "golden", seed=seed)).dumps()
    second = enact(scenario_harness("instore", "golden", seed=seed)).dumps()
    assert first == second


def test_seed_does_not_change_what_the_cart_receives():
    seen = set()
    for seed in range(10):
        trace = enact(scenario_harness("instore", "golden", seed=seed))
        seen.add(tuple(q for q, _ in deliveries(trace, "SmartCart")))
    assert len(seen) == 1


def test_tick_budget_marks_partial_traces():
    trace = enact(scenario_harness("instore", "golden"), max_ticks=3)
    assert not trace.complete
    assert trace.events[0].detail["complete"] is False
    report = check_conformance(trace, load_project("instore").choreo)
    assert "incomplete" in report.text()
    with pytest.raises(ConfigurationError):
        enact(scenario_harness("instore", "golden"), max_ticks=0)


def test_unknown_task_in_trace_is_an_analysis_error(instore):
    fake = TraceEvent(1, FORWARDED, "cd:x", "SmartCart", "teleport", "X.teleport.m", "", {"initiator": "Client"})
    with pytest.raises(AnalysisError):
        check_conformance(Trace([fake]), instore.choreo)


def test_payload_digest_is_order_independent():
    assert payload_digest({"a": 1, "b": {"c": "x"}}) == payload_digest({"b": {"c": "x"}, "a": 1})
    assert len(payload_digest({})) == 16


# -- wiring --------------------------------------------------------------


def test_golden_harness_has_two_adapters(slice_project):
    harness = harness_for(slice_project, {}, {})
    assert harness.adapter_count == 2


def test_unbound_role_is_a_wiring_error(slice_project):
    stubs = make_stubs(slice_project.services, {}, {})
    del stubs["SmartCart"]
    with pytest.raises(WiringError, match="SmartCart"):
        build_harness(slice_project.choreo, stubs, slice_project.cds, slice_project.adapters, 7)


def test_missing_adapter_is_a_wiring_error(slice_project):
    stubs = make_stubs(slice_project.services, {}, {})
    with pytest.raises(WiringError, match="no adapter"):
        build_harness(slice_project.choreo, stubs, slice_project.cds, slice_project.adapters[:1], 7)


def test_duplicate_adapter_is_a_wiring_error(slice_project):
    stubs = make_stubs(slice_project.services, {}, {})
    adapters = [*slice_project.adapters, slice_project.adapters[0]]
    with pytest.raises(WiringError, match="several"):
        build_harness(slice_project.choreo, stubs, slice_project.cds, adapters, 7)


def test_script_role_without_service_is_a_wiring_error(slice_project):
    with pytest.raises(WiringError):
        make_stubs(slice_project.services, {"Ghost": []}, {})


def test_script_outside_the_protocol_alphabet_is_rejected(slice_project):
    iface, proto = slice_project.services["Client"]
    with pytest.raises(InvariantViolation):
        ServiceStub("Client", iface, proto, (ScriptAction("checkout", {}),))
    with pytest.raises(InvariantViolation):
        ServiceStub("Client", iface, proto, (ScriptAction("addProduct", {}, "later"),))


def test_matching_stub_is_wired_directly(slice_project):
    cd = slice_project.cd("CD_Client_SmartCart")
    root = {"product": {"id": "string", "description": "string"}, "quantity": "int"}
    iface = InterfaceSpec("Client", (required("addProduct", msg("Client.addProduct.addProductRequest", root)),))
    proto = protocol_from_json({
        "states": ["c0"], "initial": "c0", "finals": ["c0"],
        "transitions": [{"from": "c0", "operation": "addProduct", "polarity": "send", "to": "c0"}],
    }, "Client")
    report = infer_mappings(iface, merged_view("Client", [cd]))
    direct = synthesize_adapter(report, iface, proto, cd, "Client", True, [cd])
    assert not direct.needed
    cart = slice_project.adapter("SmartCart-CD_Client_SmartCart")
    services = {**slice_project.services, "Client": (iface, proto)}
    script = {"Client": [ScriptAction("addProduct", {"product": {"id": "p9", "description": "tea"}, "quantity": 2})]}
    stubs = make_stubs(services, script, {})
    harness = build_harness(slice_project.choreo, stubs, [cd], [direct, cart], 7)
    assert harness.adapter_count == 1
    trace = enact(harness)
    assert deliveries(trace, "SmartCart") == [
        (CART_AMOUNT, {"amount": 2}),
        (CART_ITEM, {"item": {"itemCode": "p9", "descr": "tea"}}),
    ]


# -- randomized enforcement soundness -------------------------------------

NAMES = ["milk", "bread", "tea", "eggs"]


def shopping_round(rng: random.Random) -> list[ScriptAction]:
    if rng.random() < 0.3:
        return [ScriptAction("removeProduct", {"productId": f"p{rng.randrange(9)}"})]
    return [
        ScriptAction("addProduct", {"product": {"id": f"p{rng.randrange(9)}", "description": rng.choice(NAMES)}}),
        ScriptAction("setQuantity", {"quantity": rng.randrange(1, 20)}),
        ScriptAction("setPromotionCode", {"promotionCode": f"CODE{rng.randrange(100)}"}),
    ]


def illegal_insertion(rng: random.Random) -> list[ScriptAction]:
    """One choreography task the client attempts after the purchase is over."""
    kind = rng.choice(["add", "remove", "checkout"])
    if kind == "add":
        return [
            ScriptAction("addProduct", {"product": {"id": "px", "description": "late"}}),
            ScriptAction("setQuantity", {"quantity": 1}),
        ]
    if kind == "remove":
        return [ScriptAction("removeProduct", {"productId": "px"})]
    return [ScriptAction("checkout", {"cartId": "cart-2"})]


def random_script(seed: int) -> tuple[list[ScriptAction], int, list[tuple[int, str, str]]]:
    rng = random.Random(seed)
    script: list[ScriptAction] = []
    expected: list[tuple[int, str, str]] = []
    for _ in range(rng.randrange(0, 4)):
        part = shopping_round(rng)
        if part[0].operation == "addProduct":
            expected.append((part[1].payload["quantity"], part[0].payload["product"]["id"],
                             part[0].payload["product"]["description"]))
        script += part
    script.append(ScriptAction("checkout", {"cartId": "cart-1"}))
    insertions = rng.randrange(0, 3)
    for i in range(insertions):
        late = illegal_insertion(rng)
        if i == 0:
            first = late[0]
            late[0] = ScriptAction(first.operation, first.payload, "quiescent")
        script += late
    return script, insertions, expected


REACTIONS = {"SmartCart": [Reaction("checkout", "pay", {"cartId": "cart-1", "total": "1.00"})]}


def test_randomized_scripts_never_violate_with_enforcement(instore):
    with_insertions = 0
    for case in range(200):
        script, insertions, expected = random_script(case)
        scripts = {"Client": script}
        trace = enact(harness_for(instore, scripts, REACTIONS, seed=case))
        report = check_conformance(trace, instore.choreo)
        assert report.verdict == "conformant", (case, report.text())
        assert len(trace.of_kind(BLOCKED)) == insertions
        assert trace.complete and trace.pending == 0
        # data preservation: every add round reaches the cart, values intact
        cart = deliveries(trace, "SmartCart")
        amounts = [p["amount"] for q, p in cart if q == CART_AMOUNT]
        items = [(p["item"]["itemCode"], p["item"]["descr"]) for q, p in cart if q == CART_ITEM]
        assert amounts == [q for q, _, _ in expected]
        assert items == [(i, d) for _, i, d in expected]

        bypassed = enact(harness_for(instore, scripts, REACTIONS, seed=case, bypass=True))
        bypass_report = check_conformance(bypassed, instore.choreo)
        if insertions:
            with_insertions += 1
            assert bypass_report.verdict == "violations", case
        else:
            assert bypass_report.verdict == "conformant"
    assert with_insertions > 50


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_enactment_is_deterministic_per_seed(instore, seed):
    script, _, _ = random_script(seed)
    first = enact(harness_for(instore, {"Client": script}, REACTIONS, seed=seed)).dumps()
    second = enact(harness_for(instore, {"Client": script}, REACTIONS, seed=seed)).dumps()
    assert first == second
