"""
Parses relational clinical tables into normalized, typed clinical events

Continuous lab values are discretized against their reference ranges and
every event carries a short, deterministic text rendering.
"""

# standard libraries
import enum
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Union

# external libraries
import pandas as pd
import yaml

# internal modules
from . import config
from .check_inputs import ConfigInvalid, InputError, MissingColumn, NonFiniteValue

logger = logging.getLogger(__name__)


class EventKind(enum.Enum):
    DIAGNOSIS = "Diagnosis"
    MEDICATION_START = "MedicationStart"
    MEDICATION_STOP = "MedicationStop"
    LAB_RESULT = "LabResult"
    PROCEDURE = "Procedure"


class LabCategory(enum.Enum):
    LOW = "Low"
    NORMAL = "Normal"
    HIGH = "High"
    # internal only: no reference range available, rendered "(No Ref)"
    UNKNOWN = "Unknown"


class MedicationPhase(enum.Enum):
    START = "Start"
    STOP = "Stop"


@dataclass(frozen=True)
class LabPayload:
    analyte: str
    value: float
    ref_low: Optional[float] = None
    ref_high: Optional[float] = None
    category: LabCategory = LabCategory.UNKNOWN


@dataclass(frozen=True)
class MedicationPayload:
    drug: str
    phase: MedicationPhase
    dose: str = ""
    route: str = ""


@dataclass(frozen=True)
class CodedPayload:
    code: str
    description: str = ""


_PAYLOAD_TYPES = {
    EventKind.DIAGNOSIS: CodedPayload,
    EventKind.PROCEDURE: CodedPayload,
    EventKind.LAB_RESULT: LabPayload,
    EventKind.MEDICATION_START: MedicationPayload,
    EventKind.MEDICATION_STOP: MedicationPayload,
}


@dataclass(frozen=True)
class ClinicalEvent:
    """
    A typed, timestamped clinical observation or intervention

    Attributes
    ----------
    event_kind : EventKind
        the kind of event
    timestamp : pandas.Timestamp
        UTC instant, second resolution
    stay_id : str
        opaque admission identifier
    payload : LabPayload, MedicationPayload or CodedPayload
        the kind-specific record
    rendered : str
        short single-line text form, computed when left empty
    """

    event_kind: EventKind
    timestamp: pd.Timestamp
    stay_id: str
    payload: Union[LabPayload, MedicationPayload, CodedPayload]
    rendered: str = field(default="", compare=False)

    def __post_init__(self):
        if not isinstance(self.event_kind, EventKind):
            raise InputError("event_kind must be an EventKind")
        if not isinstance(self.payload, _PAYLOAD_TYPES[self.event_kind]):
            raise InputError(
                "payload of type "
                + type(self.payload).__name__
                + " does not match "
                + self.event_kind.value
            )
        if isinstance(self.payload, MedicationPayload):
            expected = (
                MedicationPhase.START
                if self.event_kind == EventKind.MEDICATION_START
                else MedicationPhase.STOP
            )
            if self.payload.phase != expected:
                raise InputError("medication phase does not match the event kind")
        if self.timestamp is None or pd.isna(self.timestamp):
            raise InputError("event timestamp missing")
        object.__setattr__(self, "timestamp", parse_timestamp(self.timestamp))
        if not self.rendered:
            object.__setattr__(self, "rendered", render_event(self))
        if not self.rendered.strip():
            raise InputError("event renders to an empty string")


@dataclass(frozen=True)
class UnparseableRow:
    table: str
    row_index: int
    reason: str


@dataclass
class IngestResult:
    """
    The outcome of parsing a set of tables

    Attributes
    ----------
    events : dict
        stay_id -> list of ClinicalEvent, sorted by (timestamp, input order)
    row_errors : list of UnparseableRow
        skipped rows
    table_errors : dict
        table kind -> reason, for tables rejected as a whole
    """

    events: dict = field(default_factory=dict)
    row_errors: list = field(default_factory=list)
    table_errors: dict = field(default_factory=dict)

    @property
    def n_events(self):
        return sum(len(ev) for ev in self.events.values())


# discretization and rendering


def discretize_lab(value, ref_low, ref_high):
    """
    Places a lab value relative to its reference range

    Parameters
    ----------
    value : float
        the measured value
    ref_low : float
        lower bound of the reference range
    ref_high : float
        upper bound of the reference range

    Returns
    -------
    LabCategory
        LOW iff value < ref_low, HIGH iff value > ref_high, NORMAL otherwise
        (both bounds inclusive)

    Raises
    ------
    NonFiniteValue
        if any argument is NaN or infinite
    InputError
        if ref_low > ref_high
    """

    for x in (value, ref_low, ref_high):
        if x is None or not math.isfinite(x):
            raise NonFiniteValue("lab values and reference bounds must be finite")
    if ref_low > ref_high:
        raise InputError("reference range is inverted")

    if value < ref_low:
        return LabCategory.LOW
    elif value > ref_high:
        return LabCategory.HIGH
    return LabCategory.NORMAL


def lab_payload(analyte, value, ref_low=None, ref_high=None):
    """
    Builds a LabPayload with its category derived from the reference range
    """

    value = float(value)
    if not math.isfinite(value):
        raise NonFiniteValue("lab value for " + analyte + " is not finite")
    if ref_low is None or ref_high is None:
        category = LabCategory.UNKNOWN
        ref_low = None if ref_low is None else float(ref_low)
        ref_high = None if ref_high is None else float(ref_high)
    else:
        ref_low, ref_high = float(ref_low), float(ref_high)
        category = discretize_lab(value, ref_low, ref_high)
    return LabPayload(analyte, value, ref_low, ref_high, category)


def format_value(value):
    """
    Compact decimal rendering, e.g. 4.8, 30, 0.25
    """
    return "{:g}".format(value)


def render_event(event):
    """
    Renders a clinical event as one deterministic line of text

    Labs render as "Analyte: value (Category)", medication starts as
    "Start <drug> [<dose>] [via <route>]", stops as "Stop <drug>",
    diagnoses as "<description> (<code>)" and procedures as their description.
    """

    payload = event.payload
    kind = event.event_kind

    if kind == EventKind.LAB_RESULT:
        if payload.category == LabCategory.UNKNOWN:
            label = "No Ref"
        else:
            label = payload.category.value
        return "{}: {} ({})".format(payload.analyte, format_value(payload.value), label)

    if kind == EventKind.MEDICATION_START:
        parts = ["Start", payload.drug]
        if payload.dose:
            parts.append(payload.dose)
        if payload.route:
            parts.append("via " + payload.route)
        return " ".join(parts)

    if kind == EventKind.MEDICATION_STOP:
        return "Stop " + payload.drug

    if kind == EventKind.DIAGNOSIS:
        if payload.description:
            return "{} ({})".format(payload.description, payload.code)
        return payload.code

    # procedures
    return payload.description or payload.code


def action_of(event):
    """
    The scoring form of an actionable event, None for non-actionable kinds

    Medication starts and procedures score by their rendering, labs by the
    name of the ordered analyte.
    """

    if event.event_kind in (EventKind.MEDICATION_START, EventKind.PROCEDURE):
        return event.rendered
    if event.event_kind == EventKind.LAB_RESULT:
        return event.payload.analyte
    return None


# timestamps


def parse_timestamp(value):
    """
    Normalizes an ISO-8601 string, epoch seconds or datetime to a UTC
    pandas Timestamp truncated to whole seconds

    Raises
    ------
    ValueError
        if the value cannot be interpreted as an instant
    """

    if isinstance(value, pd.Timestamp):
        ts = value
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        if not math.isfinite(value):
            raise ValueError("timestamp is not finite")
        ts = pd.Timestamp(value, unit="s", tz="UTC")
    elif isinstance(value, str):
        text = value.strip()
        if not text:
            raise ValueError("empty timestamp")
        try:
            number = float(text)
        except ValueError:
            ts = pd.Timestamp(text)
        else:
            if not math.isfinite(number):
                raise ValueError("timestamp is not finite")
            ts = pd.Timestamp(number, unit="s", tz="UTC")
    else:
        ts = pd.Timestamp(value)

    if pd.isna(ts):
        raise ValueError("timestamp is missing")
    if ts.tzinfo is None:
        ts = ts.tz_localize("UTC")
    else:
        ts = ts.tz_convert("UTC")
    return ts.floor("s")


def format_timestamp(ts):
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


# serialization of single events


def event_to_dict(event):
    """
    JSON-ready representation of an event with stable field order
    """

    payload = event.payload
    if isinstance(payload, LabPayload):
        body = {
            "analyte": payload.analyte,
            "value": payload.value,
            "ref_low": payload.ref_low,
            "ref_high": payload.ref_high,
            "category": payload.category.value,
        }
    elif isinstance(payload, MedicationPayload):
        body = {
            "drug": payload.drug,
            "dose": payload.dose,
            "route": payload.route,
            "phase": payload.phase.value,
        }
    else:
        body = {"code": payload.code, "description": payload.description}

    return {
        "stay_id": event.stay_id,
        "event_kind": event.event_kind.value,
        "timestamp": format_timestamp(event.timestamp),
        "payload": body,
        "rendered": event.rendered,
    }


def event_from_dict(record):
    """
    Rebuilds a ClinicalEvent from its dictionary form

    The lab category and the rendering are recomputed, so a record is always
    re-derived from its primary fields.

    Raises
    ------
    InputError
        if the record is incomplete or inconsistent
    """

    try:
        kind = EventKind(record["event_kind"])
        stay_id = str(record["stay_id"])
        timestamp = parse_timestamp(record["timestamp"])
        body = record.get("payload", record)
    except (KeyError, ValueError, TypeError) as err:
        raise InputError("malformed event record: " + str(err))

    try:
        if kind == EventKind.LAB_RESULT:
            payload = lab_payload(
                str(body["analyte"]),
                body["value"],
                body.get("ref_low"),
                body.get("ref_high"),
            )
        elif kind in (EventKind.MEDICATION_START, EventKind.MEDICATION_STOP):
            phase = (
                MedicationPhase.START
                if kind == EventKind.MEDICATION_START
                else MedicationPhase.STOP
            )
            drug = str(body["drug"]).strip()
            if not drug:
                raise InputError("medication event without drug")
            payload = MedicationPayload(
                drug, phase, str(body.get("dose") or ""), str(body.get("route") or "")
            )
        else:
            code = str(body["code"]).strip()
            if not code:
                raise InputError("coded event without code")
            payload = CodedPayload(code, str(body.get("description") or ""))
    except (KeyError, ValueError, TypeError) as err:
        raise InputError("malformed event payload: " + str(err))

    return ClinicalEvent(kind, timestamp, stay_id, payload)


def write_events_jsonl(events_by_stay, path):
    """
    Writes events as JSONL, stays in insertion order
    """

    with open(path, "w", encoding="utf-8") as f:
        for events in events_by_stay.values():
            for event in events:
                f.write(json.dumps(event_to_dict(event), ensure_ascii=False) + "\n")


def read_events_jsonl(source):
    """
    Reads JSONL events grouped per stay, each stay sorted by (timestamp, input order)

    Returns
    -------
    IngestResult
        malformed lines are recorded as row errors of table "events"
    """

    result = IngestResult()
    handle = open(source, encoding="utf-8") if isinstance(source, str) else source
    try:
        for idx, line in enumerate(handle):
            if not line.strip():
                continue
            try:
                event = event_from_dict(json.loads(line))
            except (InputError, json.JSONDecodeError) as err:
                result.row_errors.append(UnparseableRow("events", idx, str(err)))
                continue
            result.events.setdefault(event.stay_id, []).append(event)
    finally:
        if isinstance(source, str):
            handle.close()

    _sort_stays(result.events)
    return result


# table parsing


# logical fields per table kind: (required, optional)
TABLE_FIELDS = {
    "diagnoses": (["stay_id", "timestamp", "code"], ["description"]),
    "procedures": (["stay_id", "timestamp", "code"], ["description"]),
    "labs": (["stay_id", "timestamp", "analyte", "value"], ["ref_low", "ref_high"]),
    "medications": (
        ["stay_id", "start", "drug"],
        ["stop", "dose", "dose_unit", "route"],
    ),
}


def load_schema_map(path=None):
    """
    Loads the table-kind -> {logical field: column name} mapping from YAML
    """

    if path is None:
        path = config.path_params["schema_map"]
    with open(path) as f:
        schema_map = yaml.safe_load(f) or {}
    check_schema_map(schema_map)
    return schema_map


def check_schema_map(schema_map):
    """
    Checks every mapped table names all its required logical fields

    Raises
    ------
    ConfigInvalid
    """

    if not isinstance(schema_map, dict):
        raise ConfigInvalid("schema map must be a mapping of table kinds")
    for kind, mapping in schema_map.items():
        if kind not in TABLE_FIELDS:
            raise ConfigInvalid("unknown table kind in schema map: " + str(kind))
        required, optional = TABLE_FIELDS[kind]
        if not isinstance(mapping, dict):
            raise ConfigInvalid("schema map entry for " + kind + " must be a mapping")
        missing = [f for f in required if f not in mapping]
        if missing:
            raise ConfigInvalid(
                "schema map for " + kind + " lacks field(s): " + ", ".join(missing)
            )
        unknown = set(mapping) - set(required) - set(optional)
        if unknown:
            raise ConfigInvalid(
                "schema map for " + kind + " has unknown field(s): "
                + ", ".join(sorted(unknown))
            )


def _read_table(source):
    """
    Reads a CSV/TSV table as strings; returns None for an empty stream
    """

    if isinstance(source, pd.DataFrame):
        return source.astype(str)

    sep = ","
    if isinstance(source, str) and os.path.splitext(source)[1].lower() in (".tsv", ".tab"):
        sep = "\t"
    elif isinstance(source, io.StringIO):
        head = source.getvalue().split("\n", 1)[0]
        if "\t" in head:
            sep = "\t"

    try:
        return pd.read_csv(source, sep=sep, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return None


def _cell(row, mapping, name):
    column = mapping.get(name)
    if column is None:
        return ""
    value = row[column]
    return "" if value is None else str(value).strip()


def _number(text, name):
    if text == "":
        return None
    try:
        number = float(text)
    except ValueError:
        raise ValueError(name + " is not a number: " + text)
    if not math.isfinite(number):
        raise ValueError(name + " is not finite")
    return number


def _row_events(kind, row, mapping):
    """
    Converts one table row to its events (two for a medication with a stop time)

    Raises
    ------
    ValueError or InputError
        with a reason when the row cannot be used
    """

    stay_id = _cell(row, mapping, "stay_id")
    if not stay_id:
        raise ValueError("empty stay_id")

    if kind in ("diagnoses", "procedures"):
        code = _cell(row, mapping, "code")
        if not code:
            raise ValueError("empty code")
        ts = parse_timestamp(_cell(row, mapping, "timestamp"))
        event_kind = EventKind.DIAGNOSIS if kind == "diagnoses" else EventKind.PROCEDURE
        payload = CodedPayload(code, _cell(row, mapping, "description"))
        return [ClinicalEvent(event_kind, ts, stay_id, payload)]

    if kind == "labs":
        analyte = _cell(row, mapping, "analyte")
        if not analyte:
            raise ValueError("empty analyte")
        ts = parse_timestamp(_cell(row, mapping, "timestamp"))
        value = _number(_cell(row, mapping, "value"), "value")
        if value is None:
            raise ValueError("empty value")
        payload = lab_payload(
            analyte,
            value,
            _number(_cell(row, mapping, "ref_low"), "ref_low"),
            _number(_cell(row, mapping, "ref_high"), "ref_high"),
        )
        return [ClinicalEvent(EventKind.LAB_RESULT, ts, stay_id, payload)]

    # medications
    drug = _cell(row, mapping, "drug")
    if not drug:
        raise ValueError("empty drug")
    start = parse_timestamp(_cell(row, mapping, "start"))
    dose = " ".join(
        x for x in (_cell(row, mapping, "dose"), _cell(row, mapping, "dose_unit")) if x
    )
    route = _cell(row, mapping, "route")
    events = [
        ClinicalEvent(
            EventKind.MEDICATION_START,
            start,
            stay_id,
            MedicationPayload(drug, MedicationPhase.START, dose, route),
        )
    ]
    stop_text = _cell(row, mapping, "stop")
    if stop_text:
        stop = parse_timestamp(stop_text)
        if stop < start:
            raise ValueError("stop time precedes start time")
        events.append(
            ClinicalEvent(
                EventKind.MEDICATION_STOP,
                stop,
                stay_id,
                MedicationPayload(drug, MedicationPhase.STOP),
            )
        )
    return events


def _sort_stays(events_by_stay):
    # sorted() is stable, so equal timestamps keep their input order
    for stay_id in events_by_stay:
        events_by_stay[stay_id] = sorted(
            events_by_stay[stay_id], key=lambda ev: ev.timestamp
        )


def parse_tables(tables, schema_map):
    """
    Parses relational tables into per-stay event lists

    Parameters
    ----------
    tables : dict
        table kind ("diagnoses", "procedures", "labs", "medications" or
        "events" for pre-typed JSONL) -> path, text stream or DataFrame
    schema_map : dict
        table kind -> {logical field: column name}

    Returns
    -------
    IngestResult
        events per stay sorted by (timestamp, input order); skipped rows and
        rejected tables are recorded rather than raised

    Notes
    -----
    A table whose header lacks a mapped column is rejected as a whole
    (MissingColumn) and recorded under table_errors; other tables proceed.
    """

    check_schema_map(schema_map)
    result = IngestResult()

    for kind, source in tables.items():
        if kind == "events":
            typed = read_events_jsonl(source)
            for stay_id, events in typed.events.items():
                result.events.setdefault(stay_id, []).extend(events)
            result.row_errors.extend(typed.row_errors)
            continue

        if kind not in TABLE_FIELDS:
            raise ConfigInvalid("unknown table kind: " + str(kind))
        if kind not in schema_map:
            raise ConfigInvalid("no schema map entry for table kind: " + kind)
        mapping = schema_map[kind]

        frame = _read_table(source)
        if frame is None:
            logger.info("table %s is empty", kind)
            continue

        try:
            for name, column in mapping.items():
                if column not in frame.columns:
                    raise MissingColumn(kind, column)
        except MissingColumn as err:
            logger.error(str(err))
            result.table_errors[kind] = str(err)
            continue

        for idx, row in enumerate(frame.to_dict("records")):
            try:
                events = _row_events(kind, row, mapping)
            except (ValueError, InputError) as err:
                result.row_errors.append(UnparseableRow(kind, idx, str(err)))
                continue
            for event in events:
                result.events.setdefault(event.stay_id, []).append(event)

    _sort_stays(result.events)

    if result.row_errors:
        logger.warning("skipped %d unparseable row(s)", len(result.row_errors))

    return result
