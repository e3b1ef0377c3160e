"""
Prequential (predict-then-update) evaluation and the four metrics

Every timestep is predicted before its successor bundle is read; the
successor's actionable events are then the truth the prediction is scored
against. Metrics are computed from StepTrace records.
"""

# standard libraries
import json
import logging
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

# external libraries
import numpy as np
from joblib import Parallel, delayed

# internal modules
from . import config
from .agents import StepConfig, StepTrace, finish, new_state, step
from .backend import ChatRequest, TemplateId, extract_json, render_template
from .check_inputs import (
    BackendError,
    ClinStreamError,
    EmptyCorpus,
    EmptyTruth,
    InvariantViolation,
    JsonReplyError,
    LogprobsUnavailable,
    ProtocolNotFrozen,
)
from .ingest import EventKind, action_of
from .memory import normalize

__all__ = [
    "StepTrace",
    "AliasTable",
    "MetricsReport",
    "InstrumentedReader",
    "truth_actions",
    "truth_category",
    "recall_at_k",
    "protocol_adherence",
    "activation_rate",
    "clinical_equivalence",
    "prequential_run",
]

logger = logging.getLogger(__name__)

CATEGORIES = ["Medication", "LabOrder", "Procedure"]

# tie-break order follows CATEGORIES
_CATEGORY_OF = {
    EventKind.MEDICATION_START: "Medication",
    EventKind.LAB_RESULT: "LabOrder",
    EventKind.PROCEDURE: "Procedure",
}


class AliasTable:
    """
    Equivalence classes of action strings built from alias pairs

    Strings are normalized first; each class is represented by its
    lexicographically smallest member.
    """

    def __init__(self, pairs=()):
        self._parent = {}
        for a, b in pairs:
            self._union(normalize(a), normalize(b))

    def _find(self, x):
        parent = self._parent.setdefault(x, x)
        if parent != x:
            parent = self._find(parent)
            self._parent[x] = parent
        return parent

    def _union(self, a, b):
        ra, rb = self._find(a), self._find(b)
        if ra != rb:
            lo, hi = sorted([ra, rb])
            self._parent[hi] = lo

    def canonical(self, action):
        key = normalize(action)
        if key not in self._parent:
            return key
        return self._find(key)


# truth extraction


def truth_actions(bundle):
    """
    The recorded next-step actions of a bundle: medication starts,
    lab orders (analyte names) and procedures, deduplicated by normalized text
    """

    seen = set()
    actions = []
    for ev in bundle.events:
        action = action_of(ev)
        if action is None or normalize(action) in seen:
            continue
        seen.add(normalize(action))
        actions.append(action)
    return actions


def truth_category(bundle):
    """
    Majority actionable kind of a bundle, ties broken
    Medication > LabOrder > Procedure; None without actionable events
    """

    counts = Counter(
        _CATEGORY_OF[ev.event_kind] for ev in bundle.events if ev.event_kind in _CATEGORY_OF
    )
    if not counts:
        return None
    return max(CATEGORIES, key=lambda c: (counts[c], -CATEGORIES.index(c)))


# metrics


def recall_at_k(pred_actions, truth_actions, k=config.eval_params["k"], aliases=None):
    """
    Fraction of recorded actions matched among the first k predictions

    Matching is normalized string equality up to the alias classes; each
    recorded action is matched at most once.

    Parameters
    ----------
    pred_actions : list of str
    truth_actions : list of str
    k : int, optional
    aliases : AliasTable or list of pairs, optional

    Returns
    -------
    float

    Raises
    ------
    EmptyTruth
    """

    if len(truth_actions) == 0:
        raise EmptyTruth("recall is undefined for an empty set of recorded actions")
    if not isinstance(aliases, AliasTable):
        aliases = AliasTable(aliases or ())

    predicted = Counter(aliases.canonical(a) for a in list(pred_actions)[:k])
    truth = Counter(aliases.canonical(a) for a in truth_actions)
    return sum((predicted & truth).values()) / len(truth_actions)


def cited_rule_ids(trace):
    ids = set()
    for cid in trace.prediction.citations:
        ids.add(cid[2:] if cid.startswith("R-") else cid)
    return ids


def protocol_adherence(traces):
    """
    Share of steps with activated rules whose prediction validly cites one

    Returns
    -------
    float or None
        None when no step activated a rule
    """

    eligible = [t for t in traces if t.activated_rule_ids]
    if not eligible:
        return None
    hits = sum(
        1
        for t in eligible
        if t.citation_valid and cited_rule_ids(t) & set(t.activated_rule_ids)
    )
    return hits / len(eligible)


def activation_rate(traces, auditor_enabled=True):
    """
    Share of steps escalated to the Auditor; None when the Auditor is off
    """

    if not auditor_enabled or len(traces) == 0:
        return None
    return sum(1 for t in traces if t.verdict.triggered) / len(traces)


def _judge_score(text):
    try:
        document = extract_json(text)
        score = document.get("score")
        if isinstance(score, bool):
            return None
        return int(round(float(score)))
    except (JsonReplyError, TypeError, ValueError):
        pass
    match = re.fullmatch(r"\s*(-?\d+)\s*\.?\s*", text or "")
    if match:
        return int(match.group(1))
    return None


def clinical_equivalence(judge_backend, pred, truth, context, settings=None):
    """
    Plan-level acceptability score from a judge backend

    Returns
    -------
    int or None
        the judge's score clamped to [1, 5], None for an unusable reply
    """

    if settings is None:
        settings = StepConfig()
    prompt = render_template(
        TemplateId.JUDGE,
        {
            "context_text": context,
            "predicted_actions_list": "\n".join("- " + a for a in pred) or "None",
            "recorded_actions_list": "\n".join("- " + a for a in truth) or "None",
        },
        settings.template_dir,
    )
    try:
        reply = judge_backend.complete(
            ChatRequest(
                TemplateId.JUDGE,
                prompt,
                settings.max_output_tokens,
                False,
                settings.temperature,
            )
        )
        text = reply.text
    except LogprobsUnavailable as err:
        text = err.response.text
    except BackendError as err:
        logger.warning("judge unavailable: %s", err)
        return None

    score = _judge_score(text)
    if score is None:
        return None
    return int(np.clip(score, 1, 5))


@dataclass
class MetricsReport:
    """
    Aggregated metrics of one prequential run

    Attributes
    ----------
    recall_at_5 : dict
        category -> mean per-step recall@k, None without scored steps
    adherence : float or None
    activation_rate : float or None
    equivalence_mean : float or None
    counts : dict
        scored steps per category
    """

    recall_at_5: dict
    adherence: Optional[float]
    activation_rate: Optional[float]
    equivalence_mean: Optional[float]
    counts: dict
    k: int = config.eval_params["k"]
    n_trajectories: int = 0
    n_steps: int = 0
    skipped_empty_truth: int = 0
    failed_trajectories: list = field(default_factory=list)
    incidents: dict = field(default_factory=dict)

    # documented in every report: steps whose successor has no actionable
    # events are skipped, not scored as zero
    skip_rule = "empty-truth steps skipped"

    def to_dict(self):
        return {
            "recall_at_5": dict(self.recall_at_5),
            "adherence": self.adherence,
            "activation_rate": self.activation_rate,
            "equivalence_mean": self.equivalence_mean,
            "counts": dict(self.counts),
            "k": self.k,
            "n_trajectories": self.n_trajectories,
            "n_steps": self.n_steps,
            "skipped_empty_truth": self.skipped_empty_truth,
            "skip_rule": self.skip_rule,
            "failed_trajectories": list(self.failed_trajectories),
            "incidents": dict(sorted(self.incidents.items())),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)


def aggregate(traces, k=config.eval_params["k"], auditor_enabled=True):
    """
    Folds traces into a MetricsReport (sums and counts only)
    """

    recalls = {c: [] for c in CATEGORIES}
    scores = []
    skipped = 0
    incidents = Counter()
    for t in traces:
        incidents.update(t.incidents)
        if t.scored:
            recalls[t.bundle_type_truth].append(t.recall)
            if t.equivalence is not None:
                scores.append(t.equivalence)
        elif t.truth_actions is not None:
            skipped += 1

    return MetricsReport(
        recall_at_5={
            c: (float(np.mean(v)) if v else None) for c, v in recalls.items()
        },
        adherence=protocol_adherence(traces),
        activation_rate=activation_rate(traces, auditor_enabled),
        equivalence_mean=float(np.mean(scores)) if scores else None,
        counts={c: len(v) for c, v in recalls.items()},
        k=k,
        n_steps=len(traces),
        skipped_empty_truth=skipped,
        incidents=dict(incidents),
    )


# the prequential harness


class InstrumentedReader:
    """
    Corpus reader that records, per stay, the order of bundle reads and
    finalized predictions

    The log proves that bundle t+1 of a stay is read only after the
    prediction for bundle t is final.
    """

    def __init__(self, streams):
        self._streams = list(streams)
        self._lock = threading.Lock()
        self.log = {i: [] for i in range(len(self._streams))}

    def __len__(self):
        return len(self._streams)

    def stay_id(self, i):
        return self._streams[i].stay_id

    def length(self, i):
        return len(self._streams[i].bundles)

    def read(self, i, t):
        with self._lock:
            self.log[i].append(("read", t))
        return self._streams[i].bundles[t]

    def mark_predicted(self, i, t):
        with self._lock:
            self.log[i].append(("predicted", t))

    def verify_no_lookahead(self):
        """
        Raises
        ------
        InvariantViolation
            if any bundle t+1 was read before the prediction for t
        """

        for i, entries in self.log.items():
            predicted = set()
            for kind, t in entries:
                if kind == "predicted":
                    predicted.add(t)
                elif t > 0 and (t - 1) not in predicted:
                    raise InvariantViolation(
                        "stay "
                        + str(self.stay_id(i))
                        + ": bundle "
                        + str(t)
                        + " was read before the prediction for bundle "
                        + str(t - 1)
                    )
        return True


def run_trajectory(reader, i, protocol, backend, settings, k, aliases, judge=None):
    """
    Predict-then-update over one stay

    Returns
    -------
    list of StepTrace
    """

    state = new_state(protocol)
    traces = []
    n = reader.length(i)
    bundle = reader.read(i, 0)
    for t in range(n):
        _, _, state, trace = step(state, bundle, backend, settings)
        reader.mark_predicted(i, t)
        if t + 1 < n:
            successor = reader.read(i, t + 1)
            truth = truth_actions(successor)
            trace.truth_actions = truth
            if truth:
                trace.bundle_type_truth = truth_category(successor)
                trace.recall = recall_at_k(trace.final_actions, truth, k, aliases)
                trace.scored = True
                if judge is not None:
                    trace.equivalence = clinical_equivalence(
                        judge, trace.final_actions, truth, trace.state_summary, settings
                    )
            bundle = successor
        traces.append(trace)

    for incident in finish(state, backend, settings):
        traces[-1].incidents.append(incident)
    return traces


def prequential_run(
    corpus,
    protocol,
    backend,
    settings=None,
    k=config.eval_params["k"],
    aliases=(),
    judge=None,
    workers=config.numcores,
):
    """
    Runs the online loop over every trajectory and scores each step

    Parameters
    ----------
    corpus : list of SerializedStream or InstrumentedReader
        the evaluation corpus
    protocol : GlobalProtocol
        must be frozen
    backend : ChatBackend
        the shared backend
    settings : StepConfig, optional
    k : int, optional
        recall cutoff
    aliases : list of pairs, optional
        alias classes for action matching
    judge : ChatBackend, optional
        backend for clinical equivalence; the metric is absent without one
    workers : int, optional
        trajectories run in parallel threads; results keep corpus order

    Returns
    -------
    (MetricsReport, list of StepTrace)

    Raises
    ------
    EmptyCorpus, ProtocolNotFrozen
    InvariantViolation
        if the protocol changed, the Reflector was called or a bundle was
        read ahead of its predecessor's prediction
    """

    if settings is None:
        settings = StepConfig()
    reader = corpus if isinstance(corpus, InstrumentedReader) else InstrumentedReader(corpus)
    if len(reader) == 0:
        raise EmptyCorpus("the evaluation corpus holds no stays")
    if not protocol.frozen:
        raise ProtocolNotFrozen("evaluation needs a frozen protocol")

    alias_table = AliasTable(aliases)
    hash_before = protocol.version_hash
    reflections_before = backend.call_count(TemplateId.REFLECTOR)

    def guarded(i):
        try:
            return i, run_trajectory(
                reader, i, protocol, backend, settings, k, alias_table, judge
            ), None
        except (InvariantViolation, ProtocolNotFrozen):
            raise
        except ClinStreamError as err:
            logger.error("trajectory %s failed: %s", reader.stay_id(i), err)
            return i, [], str(err)

    if workers > 1:
        results = Parallel(n_jobs=workers, prefer="threads")(
            delayed(guarded)(i) for i in range(len(reader))
        )
    else:
        results = [guarded(i) for i in range(len(reader))]

    traces = []
    failed = []
    for i, trajectory, error in results:
        if error is not None:
            failed.append({"stay_id": reader.stay_id(i), "error": error})
        traces.extend(trajectory)

    if protocol.version_hash != hash_before:
        raise InvariantViolation("the protocol changed during evaluation")
    if backend.call_count(TemplateId.REFLECTOR) != reflections_before:
        raise InvariantViolation("the Reflector was invoked during evaluation")
    reader.verify_no_lookahead()

    report = aggregate(traces, k, settings.ablation["use_auditor"])
    report.n_trajectories = len(reader)
    report.failed_trajectories = failed
    if judge is None:
        report.equivalence_mean = None
    return report, traces
