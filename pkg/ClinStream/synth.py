"""
Synthetic corpora: the sepsis demonstration stay, seeded random stays and
constant-shape long trajectories
"""

# standard libraries
import logging

# external libraries
import numpy as np
import pandas as pd

# internal modules
from . import config
from .bundler import load_panels, serialize_stream
from .ingest import (
    ClinicalEvent,
    CodedPayload,
    EventKind,
    MedicationPayload,
    MedicationPhase,
    lab_payload,
)
from .memory import GlobalProtocol, GlobalRule

logger = logging.getLogger(__name__)

DEMO_STAY = "demo-sepsis"
EPOCH = pd.Timestamp("2150-01-01T00:00:00Z")

# analyte -> (reference low, reference high)
ANALYTES = {
    "Sodium": (135.0, 145.0),
    "Potassium": (3.5, 5.1),
    "Chloride": (98.0, 107.0),
    "Bicarbonate": (22.0, 29.0),
    "BUN": (7.0, 20.0),
    "Creatinine": (0.6, 1.3),
    "Glucose": (70.0, 140.0),
    "WBC": (4.0, 11.0),
    "Hemoglobin": (12.0, 17.5),
    "Platelets": (150.0, 400.0),
    "Lactate": (0.5, 2.2),
}

BMP = ["Sodium", "Potassium", "Chloride", "Bicarbonate", "BUN", "Creatinine", "Glucose"]

DRUGS = [
    ("Vancomycin", "1 g", "IV"),
    ("Piperacillin-tazobactam", "4.5 g", "IV"),
    ("Insulin regular", "4 units", "SC"),
    ("Norepinephrine", "0.05 mcg/kg/min", "IV"),
    ("Furosemide", "40 mg", "IV"),
    ("Acetaminophen", "650 mg", "PO"),
    ("Heparin", "5000 units", "SC"),
]

PROCEDURES = [
    ("0BH17EZ", "Endotracheal intubation"),
    ("02HV33Z", "Central venous catheter placement"),
    ("BW03ZZZ", "Chest X-ray"),
    ("4A023N7", "Blood cultures"),
]

DIAGNOSES = [
    ("A41.9", "Sepsis, unspecified organism"),
    ("N17.9", "Acute kidney failure, unspecified"),
    ("E11.65", "Type 2 diabetes mellitus with hyperglycemia"),
    ("J96.00", "Acute respiratory failure"),
]


def _lab(stay_id, ts, analyte, value):
    low, high = ANALYTES[analyte]
    return ClinicalEvent(
        EventKind.LAB_RESULT, ts, stay_id, lab_payload(analyte, value, low, high)
    )


def _start(stay_id, ts, drug, dose="", route=""):
    return ClinicalEvent(
        EventKind.MEDICATION_START,
        ts,
        stay_id,
        MedicationPayload(drug, MedicationPhase.START, dose, route),
    )


def _stop(stay_id, ts, drug):
    return ClinicalEvent(
        EventKind.MEDICATION_STOP, ts, stay_id, MedicationPayload(drug, MedicationPhase.STOP)
    )


def _coded(kind, stay_id, ts, code, description):
    return ClinicalEvent(kind, ts, stay_id, CodedPayload(code, description))


# the demonstration stay


def sepsis_demo_events(stay_id=DEMO_STAY, start=EPOCH):
    """
    Four bundles two hours apart: a high lactate, IV fluids, blood cultures
    and broad-spectrum antibiotics
    """

    hour = pd.Timedelta(hours=1)
    return [
        _lab(stay_id, start, "Lactate", 4.8),
        _start(stay_id, start + 2 * hour, "IV fluids", "30 ml/kg"),
        _coded(EventKind.PROCEDURE, stay_id, start + 4 * hour, "4A023N7", "Blood cultures"),
        _start(stay_id, start + 6 * hour, "broad-spectrum antibiotics"),
    ]


SEPSIS_RULE = GlobalRule(
    rule_id="SEPSIS_V1",
    category="SEPSIS",
    trigger_condition="Lactate > 4 OR MAP < 65",
    action_directive="fluids + broad-spectrum antibiotics",
    rule_text="IF Lactate > 4 OR MAP < 65 THEN fluids + broad-spectrum antibiotics",
)


def sepsis_demo_protocol():
    """
    The frozen single-rule protocol of the demonstration stay
    """
    return GlobalProtocol([SEPSIS_RULE]).freeze()


# random stays


def _lab_value(rng, analyte, abnormal):
    low, high = ANALYTES[analyte]
    if not abnormal:
        return round(float(rng.uniform(low, high)), 1)
    if rng.random() < 0.5:
        return round(float(low * rng.uniform(0.6, 0.95)), 1)
    return round(float(high * rng.uniform(1.1, 2.5)), 1)


def random_stay_events(rng, stay_id, start=EPOCH, min_bundles=4, max_bundles=12):
    """
    One random stay: an admission diagnosis, then bundles of labs,
    medication starts and stops, and procedures

    Steps are 1, 2, 3 or 8 hours apart, so some bundles follow a silent gap.
    The first event of every step sits on the step time.
    """

    n_steps = int(rng.integers(min_bundles, max_bundles + 1))
    ts = start + pd.Timedelta(days=int(rng.integers(0, 365)))
    running = []
    dx_code, dx_text = DIAGNOSES[int(rng.integers(len(DIAGNOSES)))]
    events = [_coded(EventKind.DIAGNOSIS, stay_id, ts, dx_code, dx_text)]

    for i in range(n_steps):
        if i > 0:
            ts = ts + pd.Timedelta(hours=int(rng.choice([1, 2, 3, 8], p=[0.4, 0.3, 0.2, 0.1])))
        offset = 0
        kind = rng.choice(["labs", "panel", "meds", "procedure"], p=[0.35, 0.15, 0.3, 0.2])

        if kind == "panel":
            for analyte in BMP:
                events.append(
                    _lab(stay_id, ts + pd.Timedelta(minutes=offset), analyte,
                         _lab_value(rng, analyte, False))
                )
                offset += 1
        elif kind == "labs":
            picks = rng.choice(list(ANALYTES), size=int(rng.integers(1, 4)), replace=False)
            for analyte in picks:
                events.append(
                    _lab(stay_id, ts + pd.Timedelta(minutes=offset), str(analyte),
                         _lab_value(rng, str(analyte), rng.random() < 0.5))
                )
                offset += 5
        elif kind == "meds":
            if running and rng.random() < 0.3:
                drug = running.pop(int(rng.integers(len(running))))
                events.append(_stop(stay_id, ts, drug))
                offset += 5
            drug, dose, route = DRUGS[int(rng.integers(len(DRUGS)))]
            events.append(_start(stay_id, ts + pd.Timedelta(minutes=offset), drug, dose, route))
            if drug not in running:
                running.append(drug)
        else:
            code, text = PROCEDURES[int(rng.integers(len(PROCEDURES)))]
            events.append(_coded(EventKind.PROCEDURE, stay_id, ts, code, text))

    events.sort(key=lambda ev: ev.timestamp)
    return events


def random_stays(n_stays, seed=config.seed, first_id=30000001):
    """
    Seeded random stays keyed by eight-digit stay ids

    Returns
    -------
    dict
        stay_id -> sorted list of ClinicalEvent
    """

    rng = np.random.default_rng(seed)
    stays = {}
    for i in range(n_stays):
        stay_id = str(first_id + i)
        stays[stay_id] = random_stay_events(rng, stay_id)
    return stays


def constant_stay_events(n_bundles, stay_id="constant", start=EPOCH):
    """
    A long stay whose bundles all have the same shape: one normal sodium and
    a chest X-ray, one hour apart
    """

    events = []
    for i in range(n_bundles):
        ts = start + pd.Timedelta(hours=i)
        events.append(_lab(stay_id, ts, "Sodium", 140))
        events.append(
            _coded(EventKind.PROCEDURE, stay_id, ts + pd.Timedelta(minutes=10), "BW03ZZZ",
                   "Chest X-ray")
        )
    return events


def synth_events(seed=config.seed, n_stays=20):
    """
    The demonstration stay followed by n_stays random stays
    """

    stays = {DEMO_STAY: sepsis_demo_events()}
    stays.update(random_stays(n_stays, seed))
    return stays


def synth_corpus(seed=config.seed, n_stays=20, bundle_params=None, panels=None):
    """
    Serialized synthetic corpus, demonstration stay first

    Returns
    -------
    list of SerializedStream
    """

    if panels is None:
        panels = load_panels()
    return [
        serialize_stream(events, bundle_params, panels)
        for events in synth_events(seed, n_stays).values()
    ]
