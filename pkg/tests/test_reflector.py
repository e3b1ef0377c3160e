"""
Tests for failure detection, rule proposals, admission and induction runs
"""

import numpy as np
import pytest

from ClinStream.backend import MockBackend, TemplateId
from ClinStream.bundler import serialize_stream
from ClinStream.check_inputs import EmptyCorpus, EmptyTruth, IdentifierLeak, ProtocolFrozen
from ClinStream.memory import GlobalProtocol, GlobalRule
from ClinStream.reflector import (
    PENDING_ID,
    FailureCase,
    ProposedRule,
    admit_rule,
    category_key,
    detect_failure,
    identifier_screen,
    next_rule_id,
    phase1_run,
    reflect,
)
from ClinStream.synth import SEPSIS_RULE

from .factories import lab, procedure

GLUCOSE_REPLY = {
    "error_analysis": "Hyperglycemia follow-up was not anticipated.",
    "proposed_rule": {
        "category": "ENDOCRINE_MGMT",
        "trigger_condition": "Blood Glucose > 180 mg/dL",
        "action_directive": "Initiate sliding scale insulin protocol",
        "rule_text": "IF Glucose > 180 mg/dL AND patient is NPO, THEN start basal insulin.",
    },
}


def glucose_case(stay_id="s1", t=0):
    return FailureCase(
        stay_id=stay_id,
        t=t,
        history_text="Bundle 0 @ 2150-01-01 00:00\nLabs:\n- Glucose: 320 (High)",
        predicted=["Sodium"],
        truth=["Glucose"],
    )


def proposal(category, trigger, action):
    rule = GlobalRule(
        PENDING_ID, category, trigger, action, "IF {} THEN {}".format(trigger, action)
    )
    return ProposedRule("", rule)


# failure detection


def test_detect_failure():
    assert not detect_failure(["Glucose"], ["Glucose"])
    assert not detect_failure(["Glucose", "Sodium"], ["Glucose"])
    assert detect_failure(["Sodium"], ["Glucose", "Sodium"])
    with pytest.raises(EmptyTruth):
        detect_failure(["Sodium"], [])


# reflection


def test_reflect_glucose_failure(demo_backend, settings):
    proposed = reflect(glucose_case(), demo_backend, settings)
    assert proposed.rule.category == "ENDOCRINE_MGMT"
    assert proposed.rule.trigger_condition == "Blood Glucose > 180 mg/dL"
    assert proposed.rule.rule_id == PENDING_ID
    assert proposed.error_analysis.startswith("Hyperglycemia")
    assert demo_backend.call_count(TemplateId.REFLECTOR) == 1

    prompt = demo_backend.log[-1][1]
    assert "- Glucose: 320 (High)" in prompt
    assert "- Sodium" in prompt


@pytest.mark.parametrize(
    "reply",
    [
        {},
        {"error_analysis": "nothing to learn", "proposed_rule": {}},
        {"proposed_rule": None},
    ],
)
def test_reflect_declines(reply, settings):
    backend = MockBackend([{"template": "Reflector", "response": reply}])
    assert reflect(glucose_case(), backend, settings) is None


def test_reflect_rejects_rule_without_then(settings):
    reply = {
        "proposed_rule": {
            "category": "ENDOCRINE_MGMT",
            "trigger_condition": "Glucose > 180",
            "action_directive": "insulin",
            "rule_text": "When glucose is high give insulin",
        }
    }
    backend = MockBackend([{"template": "Reflector", "response": reply}])
    assert reflect(glucose_case(), backend, settings) is None


def test_reflect_reasks_then_gives_up(settings):
    backend = MockBackend([{"template": "Reflector", "response": "Here is my rule: none"}])
    assert reflect(glucose_case(), backend, settings) is None
    assert backend.call_count(TemplateId.REFLECTOR) == 2


def test_reflect_backend_down(settings):
    backend = MockBackend([{"template": "Reflector", "error": "unreachable"}])
    assert reflect(glucose_case(), backend, settings) is None
    assert backend.call_count(TemplateId.REFLECTOR) == 1


# admission


def test_category_keys():
    assert category_key("ENDOCRINE_MGMT") == "ENDOCRINE_MGMT"
    assert category_key("endocrine mgmt") == "ENDOCRINE_MGMT"
    assert category_key(" Sepsis / shock ") == "SEPSIS_SHOCK"
    assert category_key("???") == "GENERAL"


def test_admit_assigns_ids_and_rejects_duplicates():
    protocol = GlobalProtocol()
    rule = proposal("ENDOCRINE_MGMT", "Glucose > 180", "sliding scale insulin")

    _, admitted = admit_rule(rule, protocol)
    assert admitted.rule_id == "ENDOCRINE_MGMT_001"

    variant = proposal("endocrine", "  glucose >  180 ", "Sliding Scale Insulin")
    _, again = admit_rule(variant, protocol)
    assert again is None

    _, second = admit_rule(
        proposal("ENDOCRINE_MGMT", "Glucose < 70", "dextrose"), protocol
    )
    assert second.rule_id == "ENDOCRINE_MGMT_002"
    assert len(protocol) == 2


def test_next_id_fills_the_first_gap():
    protocol = GlobalProtocol(
        [
            GlobalRule("SEPSIS_001", "SEPSIS", "a", "b", "IF a THEN b"),
            GlobalRule("SEPSIS_003", "SEPSIS", "c", "d", "IF c THEN d"),
        ]
    )
    assert next_rule_id(protocol, "sepsis") == "SEPSIS_002"
    assert next_rule_id(protocol, "renal") == "RENAL_001"


def test_admit_into_frozen_protocol():
    protocol = GlobalProtocol([SEPSIS_RULE]).freeze()
    with pytest.raises(ProtocolFrozen):
        admit_rule(proposal("X", "a", "b"), protocol)


@pytest.mark.parametrize(
    "trigger",
    ["Glucose > 180 in patient 30000001", "Glucose > 180 for stay-17"],
)
def test_identifier_screen(trigger):
    screen = identifier_screen([r"\b\d{8}\b"], ["stay-17", "30000002"])
    with pytest.raises(IdentifierLeak):
        admit_rule(proposal("X", trigger, "insulin"), GlobalProtocol(), screen)


def test_identifier_screen_whole_words_only():
    screen = identifier_screen([], ["17"])
    rule = proposal("X", "Heart rate > 170", "rate control")
    _, admitted = admit_rule(rule, GlobalProtocol(), screen)
    assert admitted is not None


def dedup_pool():
    base = [
        ("ENDOCRINE_MGMT", "Glucose > 180", "sliding scale insulin"),
        ("ENDOCRINE_MGMT", "Glucose < 70", "dextrose"),
        ("RENAL", "Creatinine > 2", "hold nephrotoxins"),
        ("SEPSIS", "Lactate > 4", "fluids"),
    ]
    pool = []
    for category, trigger, action in base:
        pool.append((category, trigger, action))
        pool.append((category.lower(), "  " + trigger.upper(), action.title() + " "))
    return pool


def admit_sequence(picks):
    pool = dedup_pool()
    protocol = GlobalProtocol()
    for i in picks:
        admit_rule(proposal(*pool[i]), protocol)
    return protocol


@pytest.mark.parametrize("seed", range(10))
def test_admission_dedup_against_oracle(seed):
    rng = np.random.default_rng(seed)
    picks = [int(i) for i in rng.integers(0, 8, size=20)]
    protocol = admit_sequence(picks)

    pool = dedup_pool()
    distinct = {
        (" ".join(pool[i][1].lower().split()), " ".join(pool[i][2].lower().split()))
        for i in picks
    }
    assert len(protocol) == len(distinct)
    assert admit_sequence(picks).version_hash == protocol.version_hash


# induction runs


def glucose_stream(stay_id):
    events = [lab(60 * h, "Glucose", 320, 70, 140, stay=stay_id) for h in range(3)]
    return serialize_stream(events)


def constant_stream(stay_id):
    events = []
    for h in range(4):
        events.append(lab(60 * h, "Sodium", 140, 135, 145, stay=stay_id))
        events.append(procedure(60 * h + 10, "Chest X-ray", stay=stay_id))
    return serialize_stream(events)


def induction_backend(actions):
    return MockBackend(
        [
            {"template": "Reasoner", "response": {"predicted_actions": actions}},
            {"template": "Reflector", "response": GLUCOSE_REPLY},
        ]
    )


def test_no_rules_when_predictions_are_right(settings):
    backend = induction_backend(["Sodium", "Chest X-ray"])
    corpus = [constant_stream("s1"), constant_stream("s2")]
    result = phase1_run(corpus, backend, settings)

    assert len(result.protocol) == 0
    assert result.protocol.frozen
    assert result.counts["failures"] == 0
    assert result.counts["steps"] == 8
    assert backend.call_count(TemplateId.REFLECTOR) == 0


def test_induction_admits_once(settings):
    backend = induction_backend(["Sodium"])
    corpus = [glucose_stream("s1"), glucose_stream("s2")]
    result = phase1_run(corpus, backend, settings)

    assert [r.rule_id for r in result.protocol] == ["ENDOCRINE_MGMT_001"]
    assert result.protocol.frozen
    assert result.counts["failures"] == 4
    assert result.counts["admitted"] == 1
    assert result.counts["rejected"] == 3
    assert [r["reason"] for r in result.log] == ["admitted"] + ["duplicate"] * 3
    assert result.log[0]["case"] == {
        "stay_id": "s1",
        "t": 0,
        "predicted": ["Sodium"],
        "truth": ["Glucose"],
    }


def test_induction_is_deterministic(settings):
    corpus = [glucose_stream("s" + str(i)) for i in range(4)]
    first = phase1_run(corpus, induction_backend(["Sodium"]), settings)
    second = phase1_run(corpus, induction_backend(["Sodium"]), settings)
    assert first.protocol.version_hash == second.protocol.version_hash
    assert first.log == second.log


def test_sharded_induction_merges_in_order(settings):
    corpus = [glucose_stream("s" + str(i)) for i in range(4)]
    serial = phase1_run(corpus, induction_backend(["Sodium"]), settings, workers=1)
    sharded = phase1_run(corpus, induction_backend(["Sodium"]), settings, workers=2)
    assert sharded.protocol.version_hash == serial.protocol.version_hash
    assert sharded.counts["failures"] == serial.counts["failures"]
    assert sharded.counts["admitted"] == 1


FOLLOWUP_ANALYTES = ["Glucose", "Potassium", "Lactate", "Creatinine", "Troponin"]


def followup_backend():
    script = [{"template": "Reasoner", "response": {"predicted_actions": ["Sodium"]}}]
    for analyte in FOLLOWUP_ANALYTES:
        trigger = analyte + " abnormal"
        action = "repeat " + analyte
        script.append(
            {
                "template": "Reflector",
                "contains": "Ground Truth Action:\n- " + analyte,
                "response": {
                    "proposed_rule": {
                        "category": "LAB_FOLLOWUP",
                        "trigger_condition": trigger,
                        "action_directive": action,
                        "rule_text": "IF {} THEN {}".format(trigger, action),
                    }
                },
            }
        )
    return MockBackend(script)


def test_twenty_failures_against_dedup_oracle(settings):
    corpus = []
    for i in range(10):
        analyte = FOLLOWUP_ANALYTES[i % 5]
        events = [lab(60 * h, analyte, 999, 0, 1, stay="p" + str(i)) for h in range(3)]
        corpus.append(serialize_stream(events))

    first = phase1_run(corpus, followup_backend(), settings)
    second = phase1_run(corpus, followup_backend(), settings)

    unique = {(a + " abnormal", "repeat " + a) for a in FOLLOWUP_ANALYTES}
    assert first.counts["failures"] == 20
    assert len(first.protocol) == len(unique)
    assert first.counts["rejected"] == 20 - len(unique)
    assert first.protocol.to_dict() == second.protocol.to_dict()
    assert [r.rule_id for r in first.protocol] == [
        "LAB_FOLLOWUP_00" + str(n) for n in range(1, 6)
    ]


def followup_corpus(analytes):
    return [
        serialize_stream(
            [lab(60 * h, analyte, 999, 0, 1, stay="p" + str(i)) for h in range(3)]
        )
        for i, analyte in enumerate(analytes)
    ]


def test_sharded_log_names_merged_rules(settings):
    # the second shard numbers its rules from 001 again before the merge
    corpus = followup_corpus(["Glucose", "Potassium", "Lactate", "Glucose"])
    serial = phase1_run(corpus, followup_backend(), settings, workers=1)
    sharded = phase1_run(corpus, followup_backend(), settings, workers=2)

    assert sharded.log == serial.log
    assert sharded.counts == serial.counts
    assert sharded.counts["admitted"] == 3
    assert sharded.counts["rejected"] == 5

    ids = [r.rule_id for r in sharded.protocol]
    logged = [rec["rule_id"] for rec in sharded.log if rec["admitted"]]
    assert logged == ids
    assert all("rule_id" not in rec for rec in sharded.log if not rec["admitted"])


def test_seed_protocol_is_not_modified(settings):
    seed = GlobalProtocol([SEPSIS_RULE])
    before = seed.version_hash
    result = phase1_run([glucose_stream("s1")], induction_backend(["Sodium"]), settings,
                        seed_protocol=seed)
    assert [r.rule_id for r in result.protocol] == ["SEPSIS_V1", "ENDOCRINE_MGMT_001"]
    assert seed.version_hash == before
    assert not seed.frozen


def test_declined_reflections_are_logged(settings):
    backend = MockBackend(
        [{"template": "Reasoner", "response": {"predicted_actions": ["Sodium"]}}]
    )
    result = phase1_run([glucose_stream("s1")], backend, settings)
    assert len(result.protocol) == 0
    assert result.counts["declined"] == 2
    assert all(r["reason"] == "declined" for r in result.log)


def test_empty_training_corpus(settings):
    with pytest.raises(EmptyCorpus):
        phase1_run([], induction_backend(["Sodium"]), settings)
