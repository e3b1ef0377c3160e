"""
Tests for the rulebook, trigger matching and the patient state
"""

import json

import pytest

from ClinStream.bundler import build_bundles
from ClinStream.check_inputs import (
    DuplicateRuleId,
    InputError,
    MalformedRule,
    ProtocolFrozen,
    ProtocolIntegrityError,
)
from ClinStream.memory import (
    GlobalProtocol,
    GlobalRule,
    IndividualProtocol,
    InferenceState,
    analyte_matches,
    buffer_push,
    describe_individual,
    flush_buffer,
    load_protocol,
    match_triggers,
    parse_individual,
    parse_trigger,
    prune_recent,
    roll_buffer,
    save_protocol,
    serialize_individual,
)
from ClinStream.synth import SEPSIS_RULE

from .factories import at, lab, procedure, start

GLUCOSE_RULE = GlobalRule(
    rule_id="ENDOCRINE_MGMT_001",
    category="ENDOCRINE_MGMT",
    trigger_condition="Glucose >= 250 mg/dL AND insulin not ordered",
    action_directive="Order insulin sliding scale",
    rule_text="IF Glucose >= 250 mg/dL AND insulin not ordered THEN Order insulin sliding scale",
)

DELIRIUM_RULE = GlobalRule(
    rule_id="NEURO_001",
    category="NEURO",
    trigger_condition="delirium",
    action_directive="Review sedation",
    rule_text="IF delirium THEN Review sedation",
)


def rule(rule_id, text="IF Lactate > 4 THEN fluids"):
    return GlobalRule(rule_id, "SEPSIS", "Lactate > 4", "fluids", text)


# trigger parsing


def test_parse_or_of_comparisons():
    preds = parse_trigger("Lactate > 4 OR MAP < 65")
    assert [(p.term, p.comparator, p.threshold) for p in preds] == [
        ("Lactate", ">", 4.0),
        ("MAP", "<", 65.0),
    ]


def test_parse_units_and_terms():
    preds = parse_trigger("Glucose ≥ 250 mg/dL AND insulin not ordered")
    assert preds[0].comparator == ">="
    assert preds[0].unit == "mg/dL"
    assert (preds[1].term, preds[1].comparator) == ("insulin not ordered", "present")


def test_parse_strips_trigger_prefix():
    preds = parse_trigger("[TRIGGER: Sepsis]")
    assert [(p.term, p.comparator) for p in preds] == [("Sepsis", "present")]


def test_unreadable_comparison_falls_back_to_whole_condition():
    preds = parse_trigger("Glucose > normal")
    assert [(p.term, p.comparator) for p in preds] == [("Glucose > normal", "present")]


def test_parse_empty():
    assert parse_trigger("   ") == []


@pytest.mark.parametrize(
    "term, analyte, expected",
    [
        ("Lactate", "lactate", True),
        ("Glucose", "Glucose, serum", True),
        ("MAP", "Mean arterial pressure", False),
        ("Na", "Sodium", False),
    ],
)
def test_analyte_matches(term, analyte, expected):
    assert analyte_matches(term, analyte) == expected


# trigger index


def bundle_of(*events):
    return build_bundles(list(events), 1)[0]


def test_match_numeric_predicates():
    protocol = GlobalProtocol([SEPSIS_RULE, GLUCOSE_RULE])
    high = bundle_of(lab(0, "Lactate", 4.8, 0.5, 2.2))
    normal = bundle_of(lab(0, "Lactate", 1.0, 0.5, 2.2))
    glucose = bundle_of(lab(0, "Glucose", 320, 70, 140))

    assert match_triggers(high, IndividualProtocol(), protocol) == ["SEPSIS_V1"]
    assert match_triggers(normal, IndividualProtocol(), protocol) == []
    assert match_triggers(glucose, IndividualProtocol(), protocol) == ["ENDOCRINE_MGMT_001"]


def test_match_term_predicate_against_state():
    protocol = GlobalProtocol([DELIRIUM_RULE])
    bundle = bundle_of(procedure(0, "Chest X-ray"))
    assert match_triggers(bundle, IndividualProtocol(), protocol) == []
    state = IndividualProtocol(active_problems=["ICU delirium"])
    assert match_triggers(bundle, state, protocol) == ["NEURO_001"]


def test_match_uses_recent_bundles():
    protocol = GlobalProtocol([SEPSIS_RULE])
    earlier = bundle_of(lab(0, "Lactate", 4.8, 0.5, 2.2))
    now = bundle_of(start(120, "Heparin"))
    assert match_triggers(now, IndividualProtocol(), protocol) == []
    assert match_triggers(now, IndividualProtocol(), protocol, [earlier]) == ["SEPSIS_V1"]


def test_match_empty_protocol():
    bundle = bundle_of(lab(0, "Lactate", 4.8, 0.5, 2.2))
    assert match_triggers(bundle, IndividualProtocol(), GlobalProtocol()) == []


def test_recent_lookback_is_strict():
    state = InferenceState(GlobalProtocol())
    state.recent = [
        bundle_of(lab(0, "Lactate", 4.8)),
        bundle_of(lab(60, "Lactate", 4.8)),
    ]
    now = bundle_of(lab(360, "Lactate", 4.8))
    kept = prune_recent(state, now, 6)
    assert [b.window_start for b in kept] == [at(60)]


# global protocol


def test_append_and_hash():
    protocol = GlobalProtocol()
    empty_hash = protocol.version_hash
    protocol.append_rule(SEPSIS_RULE)
    assert protocol.version_hash != empty_hash
    assert list(protocol.rules) == ["SEPSIS_V1"]
    assert protocol.resolve("R-SEPSIS_V1") is SEPSIS_RULE
    assert protocol.resolve("SEPSIS_V1") is SEPSIS_RULE
    assert protocol.resolve("R-UNKNOWN") is None
    assert GlobalProtocol([SEPSIS_RULE]).version_hash == protocol.version_hash


def test_frozen_protocol_rejects_appends():
    protocol = GlobalProtocol([SEPSIS_RULE]).freeze()
    before = protocol.version_hash
    with pytest.raises(ProtocolFrozen):
        protocol.append_rule(GLUCOSE_RULE)
    assert protocol.version_hash == before
    assert len(protocol) == 1


def test_rules_view_is_read_only():
    protocol = GlobalProtocol([SEPSIS_RULE])
    with pytest.raises(TypeError):
        protocol.rules["X"] = GLUCOSE_RULE


def test_snapshot_is_independent():
    protocol = GlobalProtocol([SEPSIS_RULE])
    snap = protocol.snapshot()
    protocol.append_rule(GLUCOSE_RULE)
    assert snap.frozen
    assert list(snap.rules) == ["SEPSIS_V1"]
    assert snap.version_hash != protocol.version_hash


def test_duplicate_rule_id():
    protocol = GlobalProtocol([rule("A_001")])
    with pytest.raises(DuplicateRuleId):
        protocol.append_rule(rule("A_001"))


@pytest.mark.parametrize(
    "text", ["fluids for lactate", "IF Lactate > 4", "IF THEN fluids", ""]
)
def test_rule_without_if_then(text):
    with pytest.raises(MalformedRule):
        GlobalProtocol().append_rule(rule("A_001", text))


def test_store_round_trip_and_tampering(tmp_path):
    protocol = GlobalProtocol([SEPSIS_RULE, GLUCOSE_RULE]).freeze()
    path = str(tmp_path / "protocol.json")
    save_protocol(protocol, path)

    loaded = load_protocol(path)
    assert loaded.frozen
    assert loaded.version_hash == protocol.version_hash
    assert [r.rule_id for r in loaded] == ["SEPSIS_V1", "ENDOCRINE_MGMT_001"]

    with open(path) as f:
        document = json.load(f)
    document["rules"][0]["action_directive"] = "observe"
    with open(path, "w") as f:
        json.dump(document, f)
    with pytest.raises(ProtocolIntegrityError):
        load_protocol(path)


# individual protocol


def test_no_duplicates_after_normalization():
    state = IndividualProtocol(active_problems=["Sepsis", "  sepsis ", "AKI"])
    assert state.active_problems == ["Sepsis", "AKI"]
    assert not state.add("active_problems", "SEPSIS")
    assert state.add("current_meds", "Heparin  5000 units")
    assert state.current_meds == ["Heparin 5000 units"]


def test_retire_moves_to_history():
    state = IndividualProtocol(current_meds=["Heparin", "Vancomycin"])
    state.retire("current_meds", "heparin", "2150-01-01T02:00:00Z")
    assert state.current_meds == ["Vancomycin"]
    assert state.history == [{"item": "Heparin", "resolved_at": "2150-01-01T02:00:00Z"}]


def test_state_ids_follow_list_order():
    state = IndividualProtocol(
        active_problems=["Sepsis"], current_meds=["Heparin"], procedures=["Blood cultures"]
    )
    assert state.state_index() == [
        ("S-01", "active_problems", "Sepsis"),
        ("S-02", "current_meds", "Heparin"),
        ("S-03", "procedures", "Blood cultures"),
    ]


def test_state_text_round_trip():
    state = IndividualProtocol(
        active_problems=["Sepsis"],
        trends=["Lactate rising"],
        history=[{"item": "Heparin", "resolved_at": None}],
    )
    text = serialize_individual(state)
    assert parse_individual(text) == state
    assert serialize_individual(parse_individual(text)) == text
    assert describe_individual(state).startswith("active_problems=[Sepsis] | current_meds=[]")


def test_state_text_rejects_garbage():
    with pytest.raises(InputError):
        parse_individual("not json")
    with pytest.raises(InputError):
        parse_individual('{"active_problems": "Sepsis"}')


# buffer


def test_buffer_accounting():
    state = InferenceState(GlobalProtocol())
    for i, n in enumerate([5, 7, 9]):
        buffer_push(state, "bundle " + str(i), n)
    assert state.buffer_tokens == 21

    roll_buffer(state, 16)
    assert [e.text for e in state.buffer] == ["bundle 1", "bundle 2"]
    assert state.buffer_tokens == 16

    flushed = flush_buffer(state)
    assert len(flushed) == 2
    assert state.buffer == [] and state.buffer_tokens == 0

    with pytest.raises(InputError):
        buffer_push(state, "x", -1)
