"""
Tests for the Router, Reasoner, Auditor and Steward and the step loop
"""

import json
import math

import numpy as np
import pytest

from ClinStream import tokens
from ClinStream.agents import (
    AuditStatus,
    RiskLevel,
    RiskVocabulary,
    REASK_SUFFIX,
    Prediction,
    StepConfig,
    StepLedger,
    TriggerReason,
    audit,
    chunk_buffer,
    citations_valid,
    enforce_event_rules,
    new_state,
    reason,
    route,
    should_audit,
    step,
    steward_update,
    uncertainty_of,
    _system_tokens,
)
from ClinStream.backend import MockBackend, TemplateId
from ClinStream.bundler import build_bundles, serialize_bundle, serialize_stream
from ClinStream.check_inputs import ProtocolNotFrozen
from ClinStream.memory import (
    BufferEntry,
    GlobalProtocol,
    GlobalRule,
    IndividualProtocol,
    normalize,
)
from ClinStream.synth import constant_stay_events

from .factories import lab, start, stop

VALID_PREDICTION = {
    "thought_process": "steady",
    "next_bundle_type": "LABS",
    "predicted_actions": ["Sodium"],
    "citations": [],
}


def lactate_rule(i):
    return GlobalRule(
        "LAB_{:03d}".format(i),
        "LAB",
        "Lactate > {}".format(i),
        "repeat lactate",
        "IF Lactate > {} THEN repeat lactate".format(i),
    )


@pytest.fixture
def lactate_protocol():
    return GlobalProtocol([lactate_rule(i) for i in range(1, 6)]).freeze()


@pytest.fixture
def lactate_bundle():
    return build_bundles([lab(0, "Lactate", 9.0, 0.5, 2.2)], 1)[0]


# uncertainty and audit trigger


def test_uncertainty():
    assert uncertainty_of([-0.5, -1.5]) == pytest.approx(1.0)
    assert uncertainty_of([0.0, 0.0]) == 0.0
    assert math.isinf(uncertainty_of([]))
    assert math.isinf(uncertainty_of(None))


@pytest.mark.parametrize(
    "u, risky, expected",
    [
        (0.2, False, (False, TriggerReason.NONE)),
        (0.7, False, (False, TriggerReason.NONE)),
        (0.9, False, (True, TriggerReason.UNCERTAINTY)),
        (0.2, True, (True, TriggerReason.SAFETY_VOCAB)),
        (0.7, True, (True, TriggerReason.SAFETY_VOCAB)),
        (0.9, True, (True, TriggerReason.BOTH)),
    ],
)
def test_audit_trigger_table(u, risky, expected):
    action = "Start heparin infusion" if risky else "Repeat lactate"
    pred = Prediction(actions=[action], uncertainty=u)
    assert should_audit(pred, 0.7, RiskVocabulary.load()) == expected


def test_risk_terms_match_whole_words():
    risk = RiskVocabulary(["insulin", "heparin"])
    assert risk.hits("Order INSULIN sliding scale") == ["insulin"]
    assert risk.hits("Heparin-induced platelet check") == ["heparin"]
    assert risk.hits("Check insulinoma markers") == []


# router


def test_router_skips_backend_under_the_cap(lactate_bundle):
    protocol = GlobalProtocol([lactate_rule(1), lactate_rule(2)]).freeze()
    backend = MockBackend([])
    chosen = route(lactate_bundle, IndividualProtocol(), protocol, backend, 3)
    assert [r.rule_id for r in chosen] == ["LAB_001", "LAB_002"]
    assert backend.call_count(TemplateId.ROUTER) == 0


def test_router_refines_above_the_cap(lactate_bundle, lactate_protocol):
    reply = {"selected_protocol_ids": ["R-LAB_005", "LAB_001", "NOT_A_RULE", "LAB_005"]}
    backend = MockBackend([{"template": "Router", "response": reply}])
    chosen = route(lactate_bundle, IndividualProtocol(), lactate_protocol, backend, 3)
    assert [r.rule_id for r in chosen] == ["LAB_005", "LAB_001"]
    assert backend.call_count(TemplateId.ROUTER) == 1


def test_router_falls_back_to_prefilter(lactate_bundle, lactate_protocol, settings):
    ledger = StepLedger()
    backend = MockBackend([{"template": "Router", "response": "no idea"}])
    chosen = route(
        lactate_bundle, IndividualProtocol(), lactate_protocol, backend, 3,
        settings=settings, ledger=ledger,
    )
    assert [r.rule_id for r in chosen] == ["LAB_001", "LAB_002", "LAB_003"]
    assert ledger.incidents == ["router-fallback"]


def test_router_needs_frozen_protocol(lactate_bundle):
    with pytest.raises(ProtocolNotFrozen):
        route(lactate_bundle, IndividualProtocol(), GlobalProtocol(), MockBackend([]))


# reasoner


def test_reasoner_reasks_once(settings):
    backend = MockBackend(
        [
            {"template": "Reasoner", "contains": REASK_SUFFIX.strip(),
             "response": VALID_PREDICTION, "logprobs": [-0.2, -0.4]},
            {"template": "Reasoner", "response": "I think sodium."},
        ]
    )
    ledger = StepLedger()
    pred = reason([], IndividualProtocol(), [], backend, "Bundle 0", settings, ledger)
    assert pred.actions == ["Sodium"]
    assert pred.uncertainty == pytest.approx(0.3)
    assert not pred.abstained
    assert ledger.incidents == ["reasoner-reask"]
    assert backend.call_count(TemplateId.REASONER) == 2


def test_reasoner_abstains(settings):
    backend = MockBackend([{"template": "Reasoner", "response": {"predicted_actions": []}}])
    ledger = StepLedger()
    pred = reason([], IndividualProtocol(), [], backend, "Bundle 0", settings, ledger)
    assert pred.abstained
    assert pred.actions == []
    assert math.isinf(pred.uncertainty)
    assert ledger.incidents == ["reasoner-reask", "reasoner-abstained"]


def test_reasoner_keeps_top_actions(settings):
    reply = dict(VALID_PREDICTION, predicted_actions=["a", "b", "c", "d", "e", "f", "g"])
    backend = MockBackend([{"template": "Reasoner", "response": reply}])
    pred = reason([], IndividualProtocol(), [], backend, "Bundle 0", settings)
    assert pred.actions == ["a", "b", "c", "d", "e"]


def test_missing_logprobs_mean_infinite_uncertainty(settings):
    backend = MockBackend(
        [{"template": "Reasoner", "response": VALID_PREDICTION, "omit_logprobs": True}]
    )
    pred = reason([], IndividualProtocol(), [], backend, "Bundle 0", settings)
    assert pred.actions == ["Sodium"]
    assert math.isinf(pred.uncertainty)
    assert should_audit(pred, 0.7, settings.risk) == (True, TriggerReason.UNCERTAINTY)


# auditor


def test_auditor_fail_open(settings):
    ledger = StepLedger()
    backend = MockBackend([{"template": "Auditor", "error": "unreachable"}])
    pred = Prediction(actions=["Start heparin"], uncertainty=0.1)
    verdict = audit(pred, [], IndividualProtocol(), backend, TriggerReason.SAFETY_VOCAB,
                    settings, ledger)
    assert verdict.status == AuditStatus.PASS
    assert verdict.critique == "auditor-unavailable"
    assert verdict.triggered
    assert ledger.incidents == ["auditor-unavailable"]


def test_auditor_fail_carries_correction(settings):
    reply = {
        "status": "FAIL",
        "risk_level": "HIGH",
        "critique": "active bleed",
        "corrected_action": "Hold heparin",
    }
    backend = MockBackend([{"template": "Auditor", "response": reply}])
    pred = Prediction(actions=["Start heparin"], uncertainty=0.1)
    verdict = audit(pred, [], IndividualProtocol(active_problems=["GI bleed"]), backend,
                    TriggerReason.SAFETY_VOCAB, settings)
    assert verdict.status == AuditStatus.FAIL
    assert verdict.risk_level == RiskLevel.HIGH
    assert verdict.corrected_actions == ["Hold heparin"]
    prompt = backend.log[-1][1]
    assert "GI bleed" in prompt
    assert "- Start heparin" in prompt


def test_step_applies_auditor_correction():
    protocol = GlobalProtocol().freeze()
    backend = MockBackend(
        [
            {"template": "Reasoner",
             "response": dict(VALID_PREDICTION, predicted_actions=["Start heparin"])},
            {"template": "Auditor",
             "response": {"status": "FAIL", "corrected_action": ["Hold heparin"]}},
        ]
    )
    state = new_state(protocol)
    bundle = build_bundles([lab(0, "Platelets", 40, 150, 400)], 1)[0]
    pred, verdict, state, trace = step(state, bundle, backend, StepConfig())
    assert pred.actions == ["Start heparin"]
    assert verdict.trigger_reason == TriggerReason.SAFETY_VOCAB
    assert trace.final_actions == ["Hold heparin"]


def test_auditor_ablation():
    protocol = GlobalProtocol().freeze()
    backend = MockBackend(
        [{"template": "Reasoner",
          "response": dict(VALID_PREDICTION, predicted_actions=["Start heparin"])}]
    )
    settings = StepConfig(ablation={"use_auditor": False})
    bundle = build_bundles([lab(0, "Platelets", 40, 150, 400)], 1)[0]
    _, verdict, _, _ = step(new_state(protocol), bundle, backend, settings)
    assert verdict.status == AuditStatus.NOT_RUN
    assert backend.call_count(TemplateId.AUDITOR) == 0


# citations


def test_citations_valid(lactate_protocol):
    candidates = [lactate_protocol.get("LAB_001")]
    state = IndividualProtocol(active_problems=["Sepsis"], current_meds=["Heparin"])
    assert citations_valid([], candidates, state)
    assert citations_valid(["R-LAB_001", "S-01", "S-02"], candidates, state)
    assert citations_valid(["LAB_001"], candidates, state)
    assert not citations_valid(["R-LAB_002"], candidates, state)
    assert not citations_valid(["S-03"], candidates, state)
    assert not citations_valid(["S-00"], candidates, state)
    assert not citations_valid(["guideline"], candidates, state)


# steward


DRUGS = ["Vancomycin", "Heparin", "Furosemide", "Norepinephrine", "Acetaminophen"]


def adversarial_replies(rng):
    everything = [d + " 1 unit" for d in DRUGS]
    return [
        {"current_meds": everything},
        {"current_meds": [], "history": [{"item": d} for d in DRUGS]},
        {"current_meds": list(rng.permutation(DRUGS)), "active_problems": ["Sepsis"]},
        "not a state at all",
        {"current_meds": "Heparin"},
        {},
    ]


def test_mitosis_follows_last_medication_event(settings):
    rng = np.random.default_rng(7)
    for _ in range(200):
        events = []
        minute = 0
        for _ in range(int(rng.integers(1, 12))):
            minute += int(rng.integers(1, 90))
            drug = DRUGS[int(rng.integers(len(DRUGS)))]
            if rng.random() < 0.5:
                events.append(start(minute, drug, "1 unit"))
            else:
                events.append(stop(minute, drug))

        bundles = build_bundles(events, 1)
        buffer = [
            BufferEntry(serialize_bundle(b), tokens.count(serialize_bundle(b)), b)
            for b in bundles
        ]
        prior = IndividualProtocol(
            current_meds=[d for d in DRUGS if rng.random() < 0.5]
        )
        replies = adversarial_replies(rng)
        reply = replies[int(rng.integers(len(replies)))]
        backend = MockBackend([{"template": "Steward", "response": reply}])

        updated, left = steward_update(prior, buffer, backend, None, settings)
        assert left == []

        last = {}
        for ev in events:
            last[ev.payload.drug] = ev
        for drug, ev in last.items():
            covering = [
                m for m in updated.current_meds
                if normalize(m) == normalize(drug) or normalize(m).startswith(normalize(drug) + " ")
            ]
            if ev.event_kind.value == "MedicationStop":
                assert covering == [], (drug, updated.current_meds)
            else:
                assert covering, (drug, updated.current_meds)

        for name in ("active_problems", "current_meds", "procedures", "trends"):
            keys = [normalize(x) for x in getattr(updated, name)]
            assert len(keys) == len(set(keys))


def test_mitosis_keeps_prior_items(settings):
    prior = IndividualProtocol(active_problems=["Sepsis"], trends=["Lactate rising"])
    bundle = build_bundles([lab(0, "Lactate", 3.0, 0.5, 2.2)], 1)[0]
    buffer = [BufferEntry(serialize_bundle(bundle), 5, bundle)]
    backend = MockBackend(
        [{"template": "Steward", "response": {"active_problems": ["AKI"], "trends": []}}]
    )
    updated, _ = steward_update(prior, buffer, backend, None, settings)
    assert updated.active_problems == ["Sepsis", "AKI"]
    assert updated.trends == ["Lactate rising"]


def test_mitosis_below_limit_is_a_no_op(settings):
    prior = IndividualProtocol(active_problems=["Sepsis"])
    bundle = build_bundles([start(0, "Heparin")], 1)[0]
    buffer = [BufferEntry(serialize_bundle(bundle), 5, bundle)]
    backend = MockBackend([])
    updated, left = steward_update(prior, buffer, backend, 10, settings)
    assert updated == prior
    assert left == buffer
    assert backend.call_count(TemplateId.STEWARD) == 0


def entry(text):
    return BufferEntry(text, tokens.count(text))


def test_buffer_chunks_fit_the_budget():
    entries = [entry("a b c"), entry("d e"), entry("f g h i j k"), entry("l")]
    chunks = chunk_buffer(entries, 5)
    assert [[e.text for e in c] for c in chunks] == [["a b c", "d e"], ["f g h i j k"], ["l"]]
    assert chunk_buffer([], 5) == []


def test_mitosis_absorbs_the_oldest_bundle(settings):
    oldest = entry("Diagnoses:\n- Septic shock")
    # fills the whole buffer allocation on its own
    newest = entry("Labs:\n" + "\n".join(["- Sodium: 140 (Normal)"] * 375))
    assert oldest.tokens + newest.tokens > settings.loop["l_limit"]

    backend = MockBackend(
        [
            {
                "template": "Steward",
                "contains": "Septic shock",
                "absent": "Sodium",
                "response": {"active_problems": ["Septic shock"]},
            },
            {"template": "Steward", "response": {"trends": ["Sodium stable"]}},
        ]
    )
    updated, left = steward_update(
        IndividualProtocol(), [oldest, newest], backend, settings.loop["l_limit"], settings
    )
    assert left == []
    assert updated.active_problems == ["Septic shock"]
    assert updated.trends == ["Sodium stable"]
    assert backend.call_count(TemplateId.STEWARD) == 2


def test_event_rules_record_stop_time():
    prior = IndividualProtocol(current_meds=["Heparin 5000 units SC"])
    updated = enforce_event_rules(prior, [stop(90, "Heparin")])
    assert updated.current_meds == []
    assert updated.history == [
        {"item": "Heparin 5000 units SC", "resolved_at": "2150-01-01T01:30:00Z"}
    ]


# budgets


def constant_backend():
    return MockBackend(
        [
            {"template": "Reasoner", "response": VALID_PREDICTION},
            {"template": "Steward", "response": {}},
        ]
    )


def max_prompt(n_bundles, settings):
    stream = serialize_stream(constant_stay_events(n_bundles))
    state = new_state(GlobalProtocol().freeze())
    backend = constant_backend()
    sizes = []
    for bundle in stream.bundles:
        _, _, state, trace = step(state, bundle, backend, settings)
        sizes.append(trace.max_prompt_tokens)
    return max(sizes)


def test_prompt_size_does_not_grow_with_stay_length():
    settings = StepConfig(loop={"l_limit": 30})
    sizes = [max_prompt(n, settings) for n in (10, 100, 1000)]
    assert sizes[0] == sizes[1] == sizes[2]

    budgets = settings.budgets
    bound = (
        _system_tokens(TemplateId.REASONER, settings)
        + budgets["rules"]
        + budgets["state"]
        + budgets["buffer"]
    )
    assert sizes[0] <= bound


def test_reasoner_sections_respect_budgets():
    settings = StepConfig(
        budgets={"rules": 20, "state": 15, "buffer": 30}, loop={"l_limit": 1000}
    )
    rules = [lactate_rule(i) for i in range(1, 6)]
    protocol = GlobalProtocol(rules).freeze()
    state = new_state(
        protocol, IndividualProtocol(active_problems=["problem " + str(i) for i in range(20)])
    )
    backend = constant_backend()
    events = [lab(60 * i, "Lactate", 9.0, 0.5, 2.2) for i in range(6)]
    for bundle in build_bundles(events, 1):
        _, _, state, trace = step(state, bundle, backend, settings)
        assert trace.prompt_tokens["rules"] <= 20
        assert trace.prompt_tokens["state"] <= 15
        assert trace.prompt_tokens["buffer"] <= 30


def test_step_trace_is_json_ready(demo_stream, demo_protocol, demo_backend, golden_settings):
    state = new_state(demo_protocol)
    _, _, _, trace = step(state, demo_stream.bundles[0], demo_backend, golden_settings)
    json.dumps(trace.to_dict())
