"""
Coalesces sorted clinical events into event bundles and serializes them

A bundle opens at the first unassigned event and absorbs every event inside
[window_start, window_start + window_hours). Silent gaps above a threshold are
announced with a "[TIME_DELTA: +g hours]" token before the bundle text.
"""

# standard libraries
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

# external libraries
import numpy as np
import pandas as pd
import yaml

# internal modules
from . import config
from .check_inputs import EmptyCorpus, InputError, UnsortedInput
from .ingest import (
    EventKind,
    LabCategory,
    event_from_dict,
    event_to_dict,
    format_timestamp,
    parse_timestamp,
)

logger = logging.getLogger(__name__)

SECTION_ORDER = ["Diagnoses", "Medications", "Labs", "Procedures"]

SECTION_OF = {
    EventKind.DIAGNOSIS: "Diagnoses",
    EventKind.MEDICATION_START: "Medications",
    EventKind.MEDICATION_STOP: "Medications",
    EventKind.LAB_RESULT: "Labs",
    EventKind.PROCEDURE: "Procedures",
}


@dataclass
class EventBundle:
    """
    The events of one window, the atomic timestep of a stream

    Attributes
    ----------
    index : int
        ordinal position t in the stream
    window_start : pandas.Timestamp
        the timestamp of the first event
    events : list of ClinicalEvent
        the events in the window, in stream order
    sections : dict
        section name -> rendered lines, in SECTION_ORDER
    preceding_gap_hours : int or None
        rounded silent gap before this bundle when it exceeds the threshold
    """

    index: int
    window_start: pd.Timestamp
    events: list
    sections: dict = field(default_factory=dict)
    preceding_gap_hours: Optional[int] = None

    @property
    def stay_id(self):
        return self.events[0].stay_id

    @property
    def last_event_time(self):
        return self.events[-1].timestamp

    @property
    def gap_token(self):
        if self.preceding_gap_hours is None:
            return None
        return "[TIME_DELTA: +{} hours]".format(self.preceding_gap_hours)

    @property
    def text(self):
        return serialize_bundle(self)


@dataclass
class SerializedStream:
    stay_id: str
    bundles: list
    text_per_bundle: list

    def __post_init__(self):
        if len(self.bundles) != len(self.text_per_bundle):
            raise InputError("every bundle needs exactly one serialized text")


@dataclass
class CorpusStats:
    """
    Corpus-level counts and means
    """

    n_stays: int
    n_bundles: int
    n_events: int
    events_per_bundle: float
    bundles_per_stay: float
    events_per_stay: float
    # mean events of each section per bundle
    per_kind_per_bundle: dict

    def as_dict(self):
        return {
            "n_stays": self.n_stays,
            "n_bundles": self.n_bundles,
            "n_events": self.n_events,
            "events_per_bundle": self.events_per_bundle,
            "bundles_per_stay": self.bundles_per_stay,
            "events_per_stay": self.events_per_stay,
            "per_kind_per_bundle": dict(self.per_kind_per_bundle),
        }


def load_panels(path=None):
    """
    Loads the panel definitions: an ordered mapping panel name -> analytes
    """

    if path is None:
        path = config.path_params["panels"]
    with open(path) as f:
        panels = yaml.safe_load(f) or {}
    if not isinstance(panels, dict) or not all(
        isinstance(v, list) for v in panels.values()
    ):
        raise InputError("panel definitions must map panel names to analyte lists")
    return {str(k): [str(a) for a in v] for k, v in panels.items()}


def _panel_index(panels):
    # analyte (lowercase) -> first panel listing it
    index = {}
    for name, members in panels.items():
        for analyte in members:
            index.setdefault(analyte.strip().lower(), name)
    return index


def _lab_lines(lab_events, panels):
    """
    Renders the lab events of a bundle, collapsing all-normal panels

    A panel collapses to "<Panel>: All Normal" when at least two of its
    members are present and every result of those members is Normal.
    """

    index = _panel_index(panels)
    by_panel = {}
    for ev in lab_events:
        name = index.get(ev.payload.analyte.strip().lower())
        if name is not None:
            by_panel.setdefault(name, []).append(ev)

    collapsed = set()
    for name, members in by_panel.items():
        analytes = {ev.payload.analyte.strip().lower() for ev in members}
        if len(analytes) >= 2 and all(
            ev.payload.category == LabCategory.NORMAL for ev in members
        ):
            collapsed.add(name)

    lines = []
    for ev in lab_events:
        name = index.get(ev.payload.analyte.strip().lower())
        if name in collapsed:
            lines.append(name + ": All Normal")
        else:
            lines.append(ev.rendered)
    return lines


def _dedup(lines):
    # exact duplicates only
    seen = set()
    kept = []
    for line in lines:
        if line not in seen:
            seen.add(line)
            kept.append(line)
    return kept


def build_sections(events, panels):
    """
    Groups rendered event lines into the fixed section order
    """

    grouped = {name: [] for name in SECTION_ORDER}
    for ev in events:
        grouped[SECTION_OF[ev.event_kind]].append(ev)

    sections = {}
    for name in SECTION_ORDER:
        if not grouped[name]:
            continue
        if name == "Labs":
            lines = _lab_lines(grouped[name], panels)
        else:
            lines = [ev.rendered for ev in grouped[name]]
        sections[name] = _dedup(lines)
    return sections


def build_bundles(events, window_hours=config.bundle_params["window_hours"], panels=None):
    """
    Greedy event-anchored windowing of a sorted event list

    Parameters
    ----------
    events : list of ClinicalEvent
        the events of one stay, ascending by timestamp
    window_hours : int, optional
        width of each window
    panels : dict, optional
        panel definitions (default: the shipped panels)

    Returns
    -------
    list of EventBundle
        disjoint, ordered, nonempty bundles

    Raises
    ------
    UnsortedInput
        if the events are not ascending by timestamp
    """

    if panels is None:
        panels = load_panels()
    if not events:
        return []

    stay_ids = {ev.stay_id for ev in events}
    if len(stay_ids) > 1:
        raise InputError("events of several stays handed to one bundling pass")
    for prev, nxt in zip(events[:-1], events[1:]):
        if nxt.timestamp < prev.timestamp:
            raise UnsortedInput(
                "event at "
                + format_timestamp(nxt.timestamp)
                + " follows one at "
                + format_timestamp(prev.timestamp)
            )

    width = pd.Timedelta(hours=window_hours)
    bundles = []
    current = [events[0]]
    start = events[0].timestamp
    for ev in events[1:]:
        if ev.timestamp < start + width:
            current.append(ev)
            continue
        bundles.append(
            EventBundle(len(bundles), start, current, build_sections(current, panels))
        )
        current = [ev]
        start = ev.timestamp
    bundles.append(
        EventBundle(len(bundles), start, current, build_sections(current, panels))
    )

    return bundles


def round_hours(delta):
    """
    Rounds a Timedelta to whole hours, halves rounding up
    """
    return int(math.floor(delta.total_seconds() / 3600.0 + 0.5))


def annotate_time_deltas(
    bundles, gap_threshold_hours=config.bundle_params["gap_threshold_hours"]
):
    """
    Marks bundles that follow a silent gap strictly above the threshold

    The gap runs from the last event of the previous bundle to the start of
    the next one, rounded to the nearest hour.

    Returns
    -------
    list of EventBundle
        copies of the input with preceding_gap_hours set or cleared
    """

    annotated = []
    for i, bundle in enumerate(bundles):
        gap = None
        if i > 0:
            g = round_hours(bundle.window_start - bundles[i - 1].last_event_time)
            if g > gap_threshold_hours:
                gap = g
        annotated.append(replace(bundle, preceding_gap_hours=gap))
    return annotated


def serialize_bundle(bundle):
    """
    Renders a bundle as compact structured text

    Returns
    -------
    str
        e.g.::

            [TIME_DELTA: +12 hours]
            Bundle 3 @ 2150-01-01 16:00
            Labs:
            - Lactate: 4.8 (High)
    """

    lines = []
    if bundle.gap_token is not None:
        lines.append(bundle.gap_token)
    lines.append(
        "Bundle {} @ {}".format(bundle.index, bundle.window_start.strftime("%Y-%m-%d %H:%M"))
    )
    for name in SECTION_ORDER:
        if name not in bundle.sections:
            continue
        lines.append(name + ":")
        lines.extend("- " + line for line in bundle.sections[name])
    return "\n".join(lines)


def serialize_stream(events, bundle_params=None, panels=None):
    """
    Runs the full transformation for one stay: bundles, time deltas, text

    Parameters
    ----------
    events : list of ClinicalEvent
        one stay's events, sorted
    bundle_params : dict, optional
        checked bundling parameters
    panels : dict, optional
        panel definitions

    Returns
    -------
    SerializedStream
    """

    if bundle_params is None:
        bundle_params = config.bundle_params
    if not events:
        raise InputError("cannot serialize a stay without events")

    bundles = build_bundles(events, bundle_params["window_hours"], panels)
    bundles = annotate_time_deltas(bundles, bundle_params["gap_threshold_hours"])
    return SerializedStream(
        events[0].stay_id, bundles, [serialize_bundle(b) for b in bundles]
    )


def stream_stats(streams):
    """
    Computes corpus statistics over serialized streams

    Raises
    ------
    EmptyCorpus
        if no streams are given
    """

    if len(streams) == 0:
        raise EmptyCorpus("corpus statistics need at least one stay")

    per_bundle = np.array(
        [len(b.events) for s in streams for b in s.bundles], dtype=float
    )
    n_stays = len(streams)
    n_bundles = len(per_bundle)
    n_events = int(per_bundle.sum())

    kind_counts = {name: 0 for name in SECTION_ORDER}
    for s in streams:
        for b in s.bundles:
            for ev in b.events:
                kind_counts[SECTION_OF[ev.event_kind]] += 1

    return CorpusStats(
        n_stays=n_stays,
        n_bundles=n_bundles,
        n_events=n_events,
        events_per_bundle=float(per_bundle.mean()) if n_bundles else 0.0,
        bundles_per_stay=n_bundles / n_stays,
        events_per_stay=n_events / n_stays,
        per_kind_per_bundle={
            name: (count / n_bundles if n_bundles else 0.0)
            for name, count in kind_counts.items()
        },
    )


# corpus persistence


def bundle_to_record(bundle, stay_id):
    return {
        "stay_id": stay_id,
        "bundle_index": bundle.index,
        "window_start": format_timestamp(bundle.window_start),
        "gap_token": bundle.gap_token,
        "text": serialize_bundle(bundle),
        "sections": {k: list(v) for k, v in bundle.sections.items()},
        "events": [event_to_dict(ev) for ev in bundle.events],
    }


def corpus_lines(streams):
    """
    Yields one JSON line per bundle, streams and bundles in order
    """

    for stream in streams:
        for bundle in stream.bundles:
            yield json.dumps(bundle_to_record(bundle, stream.stay_id), ensure_ascii=False)


def write_corpus(streams, path):
    with open(path, "w", encoding="utf-8") as f:
        for line in corpus_lines(streams):
            f.write(line + "\n")


def _bundle_from_record(record):
    gap = None
    token = record.get("gap_token")
    if token:
        gap = int(token.split("+")[1].split()[0])
    events = [event_from_dict(ev) for ev in record["events"]]
    if not events:
        raise InputError("corpus bundle without events")
    return EventBundle(
        index=int(record["bundle_index"]),
        window_start=parse_timestamp(record["window_start"]),
        events=events,
        sections={k: list(v) for k, v in record["sections"].items()},
        preceding_gap_hours=gap,
    )


def iter_corpus_records(path):
    """
    Yields (stay_id, EventBundle) pairs from a corpus file, lazily
    """

    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                yield record["stay_id"], _bundle_from_record(record)
            except (json.JSONDecodeError, KeyError, ValueError) as err:
                raise InputError(
                    "corpus line " + str(lineno + 1) + " is malformed: " + str(err)
                )


def read_corpus(path):
    """
    Reads a corpus file into serialized streams, stays in file order
    """

    streams = {}
    for stay_id, bundle in iter_corpus_records(path):
        streams.setdefault(stay_id, []).append(bundle)

    return [
        SerializedStream(stay_id, bundles, [serialize_bundle(b) for b in bundles])
        for stay_id, bundles in streams.items()
    ]
