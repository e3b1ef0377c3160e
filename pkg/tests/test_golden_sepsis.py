"""
Replays the sepsis demonstration stay step by step against the shipped script
"""

import time

from ClinStream import config
from ClinStream.agents import AuditStatus
from ClinStream.backend import MockBackend
from ClinStream.evaluate import prequential_run


def run(stream, protocol, backend, settings):
    return prequential_run([stream], protocol, backend, settings)


def test_stepwise_behaviour(demo_stream, demo_protocol, demo_backend, golden_settings):
    started = time.time()
    report, traces = run(demo_stream, demo_protocol, demo_backend, golden_settings)
    assert time.time() - started < 5

    assert [t.t for t in traces] == [0, 1, 2, 3]
    assert [t.activated_rule_ids for t in traces] == [
        ["SEPSIS_V1"],
        ["SEPSIS_V1"],
        ["SEPSIS_V1"],
        [],
    ]
    assert traces[0].final_actions == [
        "Start IV fluids 30 ml/kg",
        "Start broad-spectrum antibiotics",
    ]
    assert traces[1].final_actions == ["Blood cultures"]
    assert traces[2].final_actions == ["Start broad-spectrum antibiotics"]

    assert traces[0].state_summary == (
        "active_problems=[suspected sepsis] | current_meds=[] | procedures=[] "
        "| trends=[lactate high]"
    )
    assert traces[1].state_summary == (
        "active_problems=[suspected sepsis] | current_meds=[IV fluids] | procedures=[] "
        "| trends=[lactate high]"
    )
    assert traces[2].state_summary == (
        "active_problems=[suspected sepsis] | current_meds=[IV fluids] "
        "| procedures=[blood cultures] | trends=[lactate high]"
    )
    assert traces[3].state_summary == (
        "active_problems=[suspected sepsis] "
        "| current_meds=[IV fluids, broad-spectrum antibiotics] "
        "| procedures=[blood cultures] | trends=[lactate high]"
    )

    for t in traces:
        assert t.verdict.status == AuditStatus.NOT_RUN
        assert not t.verdict.triggered
        assert t.citation_valid
        assert t.steward_ran
        assert t.incidents == []


def test_metrics(demo_stream, demo_protocol, demo_backend, golden_settings):
    report, traces = run(demo_stream, demo_protocol, demo_backend, golden_settings)

    assert report.activation_rate == 0.0
    assert report.adherence == 1.0
    assert report.recall_at_5 == {"Medication": 1.0, "LabOrder": None, "Procedure": 1.0}
    assert report.counts == {"Medication": 2, "LabOrder": 0, "Procedure": 1}
    assert [t.recall for t in traces] == [1.0, 1.0, 1.0, None]
    assert report.n_steps == 4
    assert report.skipped_empty_truth == 0


def test_replay_is_deterministic(demo_stream, demo_protocol, golden_settings):
    first = run(
        demo_stream, demo_protocol, MockBackend(config.backend_params["mock_script"]),
        golden_settings,
    )[1]
    second = run(
        demo_stream, demo_protocol, MockBackend(config.backend_params["mock_script"]),
        golden_settings,
    )[1]
    assert [t.to_dict() for t in first] == [t.to_dict() for t in second]


def test_no_reflection_during_replay(demo_stream, demo_protocol, demo_backend, golden_settings):
    hash_before = demo_protocol.version_hash
    run(demo_stream, demo_protocol, demo_backend, golden_settings)
    assert demo_protocol.version_hash == hash_before
    assert demo_backend.call_count("Reflector") == 0
    # router stays deterministic while the candidates fit the cap
    assert demo_backend.call_count("Router") == 0
