"""
The online loop: Router, Reasoner, conditional Auditor and Steward

Contains the classes and functions for:

- route: candidate rule selection (deterministic prefilter, LLM refinement
  only above the candidate cap)
- reason: next-step prediction with citations and an uncertainty score
- should_audit / audit: conditional safety verification
- steward_update: absorbs the raw buffer into the structured patient state
- step: one timestep of the loop, emitting a StepTrace
"""

# standard libraries
import enum
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Optional

# external libraries
import numpy as np

# internal modules
from . import config
from . import check_inputs
from . import tokens
from .backend import (
    ChatRequest,
    TemplateId,
    extract_json,
    load_template,
    render_template,
    template_slots,
)
from .bundler import serialize_bundle
from .check_inputs import (
    BackendError,
    InputError,
    JsonReplyError,
    LogprobsUnavailable,
    ProtocolNotFrozen,
)
from .ingest import EventKind, format_timestamp
from .memory import (
    IndividualProtocol,
    InferenceState,
    LIST_FIELDS,
    buffer_push,
    describe_individual,
    flush_buffer,
    individual_from_dict,
    match_triggers,
    normalize,
    prune_recent,
    render_state,
    roll_buffer,
    serialize_individual,
    state_hash,
)

logger = logging.getLogger(__name__)

REASK_SUFFIX = (
    "\n\nYour previous reply was not a valid JSON object in the required format. "
    "Return ONLY a valid JSON object."
)


class BundleType(enum.Enum):
    MEDICATIONS = "Medications"
    LABS = "Labs"
    PROCEDURES = "Procedures"


class TriggerReason(enum.Enum):
    NONE = "None"
    UNCERTAINTY = "Uncertainty"
    SAFETY_VOCAB = "SafetyVocab"
    BOTH = "Both"


class AuditStatus(enum.Enum):
    PASS = "Pass"
    FAIL = "Fail"
    NOT_RUN = "NotRun"


class RiskLevel(enum.Enum):
    LOW = "Low"
    HIGH = "High"
    NOT_RUN = "NotRun"


def _finite_or_none(x):
    return x if math.isfinite(x) else None


@dataclass
class Prediction:
    """
    The Reasoner's next-step prediction

    Attributes
    ----------
    thought : str
        short rationale
    bundle_type : BundleType or None
        the predicted kind of the next bundle
    actions : list of str
        predicted actions, at most max_actions retained
    citations : list of str
        rule ids "R-..." and state ids "S-..."
    uncertainty : float
        U = -mean(token logprobs); infinite when unavailable or abstained
    raw_logprobs : list of float
    abstained : bool
        True when no usable reply was obtained
    """

    thought: str = ""
    bundle_type: Optional[BundleType] = None
    actions: list = field(default_factory=list)
    citations: list = field(default_factory=list)
    uncertainty: float = math.inf
    raw_logprobs: list = field(default_factory=list)
    abstained: bool = False

    def to_dict(self):
        return {
            "thought": self.thought,
            "bundle_type": None if self.bundle_type is None else self.bundle_type.value,
            "actions": list(self.actions),
            "citations": list(self.citations),
            "uncertainty": _finite_or_none(self.uncertainty),
            "raw_logprobs": list(self.raw_logprobs),
            "abstained": self.abstained,
        }


def abstain_prediction():
    return Prediction(abstained=True)


def uncertainty_of(logprobs):
    """
    U = -(mean token logprob); infinite for missing or empty logprobs
    """

    if not logprobs:
        return math.inf
    return float(-np.mean(np.asarray(logprobs, dtype=float)))


@dataclass
class AuditVerdict:
    triggered: bool
    trigger_reason: TriggerReason
    status: AuditStatus
    risk_level: RiskLevel
    critique: str = ""
    corrected_actions: Optional[list] = None

    def __post_init__(self):
        if (self.status == AuditStatus.NOT_RUN) == self.triggered:
            raise InputError("a verdict is NotRun exactly when the audit was not triggered")
        if self.corrected_actions is not None and self.status != AuditStatus.FAIL:
            raise InputError("corrected actions accompany a Fail verdict only")

    def to_dict(self):
        return {
            "triggered": self.triggered,
            "trigger_reason": self.trigger_reason.value,
            "status": self.status.value,
            "risk_level": self.risk_level.value,
            "critique": self.critique,
            "corrected_actions": self.corrected_actions,
        }


def not_run_verdict():
    return AuditVerdict(False, TriggerReason.NONE, AuditStatus.NOT_RUN, RiskLevel.NOT_RUN)


class RiskVocabulary:
    """
    High-stakes intervention terms; a whole-word hit forces an audit
    """

    def __init__(self, terms):
        self.terms = frozenset(normalize(t) for t in terms if normalize(t))
        self._patterns = {
            term: re.compile(r"(?<!\w)" + re.escape(term) + r"(?!\w)", re.IGNORECASE)
            for term in sorted(self.terms)
        }

    @classmethod
    def load(cls, path=None):
        """
        Reads one term per line; blank lines and "#" comments are skipped
        """

        if path is None:
            path = config.path_params["risk_vocab"]
        with open(path, encoding="utf-8") as f:
            terms = [
                line.strip()
                for line in f
                if line.strip() and not line.lstrip().startswith("#")
            ]
        return cls(terms)

    def hits(self, action):
        text = " ".join(str(action).split())
        return [term for term, pat in self._patterns.items() if pat.search(text)]

    def __len__(self):
        return len(self.terms)


@dataclass
class StepConfig:
    """
    Everything the loop needs besides state and backend

    The dictionaries are checked (and completed from the defaults) on
    construction, so StepConfig(loop={"l_limit": 0}) is valid.
    """

    loop: dict = None
    budgets: dict = None
    ablation: dict = None
    risk: RiskVocabulary = None
    template_dir: Optional[str] = None
    max_output_tokens: int = config.backend_params["max_output_tokens"]
    temperature: float = config.backend_params["temperature"]

    def __post_init__(self):
        self.budgets = check_inputs.check_budget_params(self.budgets)
        self.loop = check_inputs.check_loop_params(self.loop, self.budgets["buffer"])
        self.ablation = check_inputs.check_ablation_params(self.ablation)
        if self.risk is None:
            self.risk = RiskVocabulary.load()

    @classmethod
    def from_run_config(cls, run_config):
        return cls(
            loop=dict(run_config.loop),
            budgets=dict(run_config.budgets),
            ablation=dict(run_config.ablation),
            risk=RiskVocabulary.load(run_config.paths["risk_vocab"]),
            template_dir=run_config.paths["templates"],
            max_output_tokens=run_config.backend["max_output_tokens"],
            temperature=run_config.backend["temperature"],
        )


class StepLedger:
    """
    Per-step record of prompt sizes and incidents
    """

    def __init__(self):
        self.prompt_sizes = []
        self.incidents = []

    def incident(self, name, detail=""):
        self.incidents.append(name)
        logger.warning("incident %s %s", name, detail)

    @property
    def max_prompt_tokens(self):
        return max(self.prompt_sizes, default=0)


def _ask(backend, template_id, prompt, settings, want_logprobs, ledger):
    ledger.prompt_sizes.append(tokens.count(prompt))
    request = ChatRequest(
        template_id,
        prompt,
        settings.max_output_tokens,
        want_logprobs,
        settings.temperature,
    )
    return backend.complete(request)


# prompt budgeting


def fit_lines(lines, budget):
    """
    Shrinks the longest lines first until the lines fit the budget
    """

    lines = list(lines)
    while lines:
        counts = [tokens.count(line) for line in lines]
        excess = sum(counts) - budget
        if excess <= 0:
            break
        i = int(np.argmax(counts))
        lines[i] = tokens.truncate(lines[i], max(0, counts[i] - excess))
    return [line for line in lines if line.strip()]


def fit_history(texts, budget, current=None):
    """
    Keeps the newest texts that fit the budget, oldest dropped first

    `current`, when given, is always kept (truncated only if it alone
    exceeds the budget) and placed last.
    """

    kept = []
    used = 0
    if current is not None:
        current = tokens.truncate(current, budget)
        used = tokens.count(current)
    for text in reversed(texts):
        n = tokens.count(text)
        if used + n > budget:
            break
        kept.append(text)
        used += n
    kept.reverse()
    if current is not None:
        kept.append(current)
    return "\n\n".join(kept)


def fit_state(individual, budget):
    return tokens.truncate(render_state(individual), budget)


def _rules_text(candidates, budget):
    lines = fit_lines([rule.prompt_line for rule in candidates], budget)
    return "\n".join(lines) if lines else "None"


def _system_tokens(template_id, settings):
    # the fixed template text, all slots empty
    slots = template_slots(load_template(template_id, settings.template_dir))
    return tokens.count(
        render_template(template_id, {s: "" for s in slots}, settings.template_dir)
    )


# router


def _index_line(rule):
    return "{} ({}): {}".format(rule.rule_id, rule.category, rule.trigger_condition)


def route(
    bundle,
    individual,
    protocol,
    backend,
    max_candidates=config.loop_params["max_candidates"],
    recent=(),
    settings=None,
    ledger=None,
):
    """
    Selects the candidate rules C_t for a bundle

    The deterministic trigger prefilter runs first; the backend is asked only
    when the prefilter yields more than max_candidates rules, and its
    selection is intersected with the prefilter.

    Parameters
    ----------
    bundle : EventBundle
        the current bundle
    individual : IndividualProtocol
        the patient state
    protocol : GlobalProtocol
        must be frozen
    backend : ChatBackend
        the shared backend
    max_candidates : int, optional
        cap on |C_t|
    recent : list of EventBundle, optional
        earlier bundles inside the lookback window

    Returns
    -------
    list of GlobalRule

    Raises
    ------
    ProtocolNotFrozen
    """

    if not protocol.frozen:
        raise ProtocolNotFrozen("routing needs a frozen protocol")
    if settings is None:
        settings = StepConfig()
    if ledger is None:
        ledger = StepLedger()

    prefilter = match_triggers(bundle, individual, protocol, recent)
    if len(prefilter) <= max_candidates:
        return [protocol.get(rid) for rid in prefilter]

    budgets = settings.budgets
    prompt = render_template(
        TemplateId.ROUTER,
        {
            "patient_state_json": fit_state(individual, budgets["state"]),
            "recent_events_text": fit_history(
                [serialize_bundle(b) for b in recent],
                budgets["buffer"],
                current=serialize_bundle(bundle),
            ),
            "protocol_index_list": "\n".join(
                fit_lines([_index_line(protocol.get(r)) for r in prefilter], budgets["rules"])
            ),
        },
        settings.template_dir,
    )

    fallback = [protocol.get(rid) for rid in prefilter[:max_candidates]]
    try:
        reply = _ask(backend, TemplateId.ROUTER, prompt, settings, False, ledger)
        selected = extract_json(reply.text)["selected_protocol_ids"]
        if not isinstance(selected, list):
            raise TypeError("selected_protocol_ids is not a list")
    except (BackendError, JsonReplyError, KeyError, TypeError) as err:
        ledger.incident("router-fallback", str(err))
        return fallback

    allowed = set(prefilter)
    chosen = []
    for cid in selected:
        rule = protocol.resolve(str(cid))
        if rule is not None and rule.rule_id in allowed and rule not in chosen:
            chosen.append(rule)
    return chosen[:max_candidates]


# reasoner


def reasoner_prompt(candidates, individual, buffer, current_text, settings):
    """
    Renders the Reasoner prompt within the section budgets

    Returns
    -------
    prompt : str
    sections : dict
        tokens per section: system, rules, state, buffer
    """

    budgets = settings.budgets
    rules_text = _rules_text(candidates, budgets["rules"])
    state_text = fit_state(individual, budgets["state"])
    history = fit_history([e.text for e in buffer], budgets["buffer"], current=current_text)

    prompt = render_template(
        TemplateId.REASONER,
        {
            "selected_rules_text": rules_text,
            "patient_state_json": state_text,
            "event_stream_history": history,
        },
        settings.template_dir,
    )
    sections = {
        "system": _system_tokens(TemplateId.REASONER, settings),
        "rules": tokens.count(rules_text),
        "state": tokens.count(state_text),
        "buffer": tokens.count(history),
    }
    return prompt, sections


def _clean_citation(cid):
    return str(cid).strip().strip("[]").strip()


def parse_prediction(document, logprobs, max_actions):
    """
    Builds a Prediction from a Reasoner reply

    Raises
    ------
    InputError
        if predicted_actions is missing or empty
    """

    actions = document.get("predicted_actions")
    if not isinstance(actions, list):
        raise InputError("predicted_actions is not a list")
    actions = [" ".join(str(a).split()) for a in actions if str(a).strip()]
    if not actions:
        raise InputError("predicted_actions is empty")

    citations = document.get("citations") or []
    if not isinstance(citations, list):
        citations = [citations]
    citations = [c for c in (_clean_citation(x) for x in citations) if c]

    bundle_type = None
    raw_type = str(document.get("next_bundle_type") or "").strip().upper()
    for bt in BundleType:
        if raw_type == bt.name:
            bundle_type = bt

    return Prediction(
        thought=str(document.get("thought_process") or ""),
        bundle_type=bundle_type,
        actions=actions[:max_actions],
        citations=citations,
        uncertainty=uncertainty_of(logprobs),
        raw_logprobs=list(logprobs or []),
    )


def predict(prompt, backend, settings, ledger):
    """
    Asks the Reasoner, re-asks once on a malformed reply, abstains after that
    """

    for attempt, text in enumerate([prompt, prompt + REASK_SUFFIX]):
        try:
            try:
                response = _ask(backend, TemplateId.REASONER, text, settings, True, ledger)
            except LogprobsUnavailable as err:
                ledger.incident("logprobs-unavailable")
                response = err.response
            document = extract_json(response.text)
            return parse_prediction(
                document, response.token_logprobs, settings.loop["max_actions"]
            )
        except (BackendError, JsonReplyError, InputError) as err:
            if attempt == 0:
                ledger.incident("reasoner-reask", str(err))
            else:
                ledger.incident("reasoner-abstained", str(err))
    return abstain_prediction()


def reason(candidates, individual, buffer, backend, current=None, settings=None, ledger=None):
    """
    Predicts the next bundle of actions

    Parameters
    ----------
    candidates : list of GlobalRule
        C_t
    individual : IndividualProtocol
        the patient state
    buffer : list of BufferEntry
        the raw-text buffer
    backend : ChatBackend
    current : EventBundle or str, optional
        the current bundle, appended to the buffered history

    Returns
    -------
    Prediction
        an abstention (empty actions, infinite uncertainty) if no valid
        reply is obtained after one re-ask
    """

    if settings is None:
        settings = StepConfig()
    if ledger is None:
        ledger = StepLedger()
    if current is not None and not isinstance(current, str):
        current = serialize_bundle(current)
    prompt, _ = reasoner_prompt(candidates, individual, buffer, current, settings)
    return predict(prompt, backend, settings, ledger)


# auditor


def should_audit(pred, tau, risk):
    """
    Audit iff U > tau (strict) or an action names a high-stakes intervention

    Returns
    -------
    (bool, TriggerReason)
    """

    if tau < 0:
        raise InputError("tau must be nonnegative")
    uncertain = pred.uncertainty > tau
    risky = any(risk.hits(a) for a in pred.actions)
    if uncertain and risky:
        return True, TriggerReason.BOTH
    if uncertain:
        return True, TriggerReason.UNCERTAINTY
    if risky:
        return True, TriggerReason.SAFETY_VOCAB
    return False, TriggerReason.NONE


def _bullet(items, empty="None"):
    return "\n".join("- " + x for x in items) if items else empty


def _corrected(value):
    if value is None:
        return None
    if isinstance(value, str):
        items = [value]
    elif isinstance(value, list):
        items = [str(v) for v in value]
    else:
        return None
    items = [" ".join(x.split()) for x in items if x.strip()]
    return items or None


def audit(
    pred,
    candidates,
    individual,
    backend,
    trigger_reason=TriggerReason.UNCERTAINTY,
    settings=None,
    ledger=None,
):
    """
    Verifies a triggered prediction against the rules and the patient state

    An unusable reply yields Pass with critique "auditor-unavailable" and an
    incident.

    Returns
    -------
    AuditVerdict
    """

    if settings is None:
        settings = StepConfig()
    if ledger is None:
        ledger = StepLedger()

    budgets = settings.budgets
    problems = _bullet(individual.active_problems)
    if individual.current_meds:
        problems += "\nCurrent medications:\n" + _bullet(individual.current_meds)
    prompt = render_template(
        TemplateId.AUDITOR,
        {
            "proposed_actions_list": tokens.truncate(
                _bullet(pred.actions), budgets["buffer"]
            ),
            "active_problems_list": tokens.truncate(problems, budgets["state"]),
            "active_rules_text": _rules_text(candidates, budgets["rules"]),
        },
        settings.template_dir,
    )

    try:
        reply = _ask(backend, TemplateId.AUDITOR, prompt, settings, False, ledger)
        document = extract_json(reply.text)
        status = str(document.get("status", "")).strip().upper()
        if status not in ("PASS", "FAIL"):
            raise InputError("audit status is " + repr(status))
    except (BackendError, JsonReplyError, InputError) as err:
        ledger.incident("auditor-unavailable", str(err))
        return AuditVerdict(
            True, trigger_reason, AuditStatus.PASS, RiskLevel.LOW, "auditor-unavailable"
        )

    failed = status == "FAIL"
    risk_text = str(document.get("risk_level", "")).strip().upper()
    if risk_text in ("LOW", "HIGH"):
        risk_level = RiskLevel[risk_text]
    else:
        risk_level = RiskLevel.HIGH if failed else RiskLevel.LOW

    return AuditVerdict(
        triggered=True,
        trigger_reason=trigger_reason,
        status=AuditStatus.FAIL if failed else AuditStatus.PASS,
        risk_level=risk_level,
        critique=str(document.get("critique") or ""),
        corrected_actions=_corrected(document.get("corrected_action")) if failed else None,
    )


# steward


def _covers(entry, drug):
    e, d = normalize(entry), normalize(drug)
    return e == d or e.startswith(d + " ")


def merge_state(prior, document, resolved_at=None):
    """
    Merges a Steward reply into the prior state without losing items

    Prior items stay unless the reply moves them to history; new items of
    the reply are appended after them.

    Raises
    ------
    InputError
        if the reply is not a state document
    """

    reply = individual_from_dict(document)
    moved = {normalize(h["item"]): h for h in reply.history}

    merged = IndividualProtocol(history=[dict(h) for h in prior.history])
    for name in LIST_FIELDS:
        for item in getattr(prior, name):
            hit = moved.get(normalize(item))
            if hit is not None:
                merged.history.append(
                    {"item": item, "resolved_at": hit.get("resolved_at") or resolved_at}
                )
            else:
                merged.add(name, item)
        for item in getattr(reply, name):
            if normalize(item) not in moved:
                merged.add(name, item)

    known = {normalize(h["item"]) for h in merged.history}
    for key, h in moved.items():
        if key not in known:
            merged.history.append({"item": h["item"], "resolved_at": h.get("resolved_at")})
            known.add(key)
    return merged


def enforce_event_rules(individual, events):
    """
    Hard post-pass over the flushed events

    For every drug, its chronologically last medication event decides: a
    stop removes every covering entry from current_meds (into history with
    the stop time), a start makes the drug present. Observed procedures are
    present in procedures. Lists are deduplicated.
    """

    updated = individual.copy()
    last_med = {}
    for ev in events:
        if ev.event_kind in (EventKind.MEDICATION_START, EventKind.MEDICATION_STOP):
            last_med[normalize(ev.payload.drug)] = ev
        elif ev.event_kind == EventKind.PROCEDURE:
            if not updated.contains("procedures", ev.rendered):
                updated.add("procedures", ev.rendered)

    for ev in last_med.values():
        drug = ev.payload.drug
        if ev.event_kind == EventKind.MEDICATION_STOP:
            kept = []
            for entry in updated.current_meds:
                if _covers(entry, drug):
                    updated.history.append(
                        {"item": entry, "resolved_at": format_timestamp(ev.timestamp)}
                    )
                else:
                    kept.append(entry)
            updated.current_meds = kept
        elif not any(_covers(entry, drug) for entry in updated.current_meds):
            updated.add("current_meds", drug)

    return IndividualProtocol(
        active_problems=updated.active_problems,
        current_meds=updated.current_meds,
        procedures=updated.procedures,
        trends=updated.trends,
        history=updated.history,
    )


def chunk_buffer(buffer, budget):
    """
    Splits the buffer, oldest first, into runs of entries that fit the
    budget; an entry larger than the budget forms a run of its own
    """

    chunks = []
    current = []
    used = 0
    for entry in buffer:
        n = tokens.count(entry.text)
        if current and used + n > budget:
            chunks.append(current)
            current = []
            used = 0
        current.append(entry)
        used += n
    if current:
        chunks.append(current)
    return chunks


def _absorb(individual, chunk, backend, settings, ledger):
    events = [ev for e in chunk if e.bundle is not None for ev in e.bundle.events]
    resolved_at = format_timestamp(events[-1].timestamp) if events else None

    budgets = settings.budgets
    prompt = render_template(
        TemplateId.STEWARD,
        {
            "current_state_json": tokens.truncate(
                serialize_individual(individual), budgets["state"]
            ),
            "new_event_bundle_text": tokens.truncate(
                "\n\n".join(e.text for e in chunk), budgets["buffer"]
            ),
        },
        settings.template_dir,
    )

    merged = None
    for attempt, text in enumerate([prompt, prompt + REASK_SUFFIX]):
        try:
            reply = _ask(backend, TemplateId.STEWARD, text, settings, False, ledger)
            merged = merge_state(individual, extract_json(reply.text), resolved_at)
            break
        except (BackendError, JsonReplyError, InputError) as err:
            if attempt == 0:
                ledger.incident("steward-reask", str(err))
            else:
                ledger.incident("steward-deterministic-only", str(err))

    if merged is None:
        merged = individual.copy()

    return enforce_event_rules(merged, events)


def steward_update(individual, buffer, backend, l_limit=None, settings=None, ledger=None):
    """
    Mitosis: absorbs the buffered bundles into the patient state

    Parameters
    ----------
    individual : IndividualProtocol
        the prior state
    buffer : list of BufferEntry
        the buffer to absorb
    backend : ChatBackend
    l_limit : int, optional
        when given, the update runs only if the buffer holds more than
        l_limit tokens; None forces it

    Returns
    -------
    (IndividualProtocol, list)
        the updated state and the buffer left behind (empty after an update)
    """

    if settings is None:
        settings = StepConfig()
    if ledger is None:
        ledger = StepLedger()

    buffer = list(buffer)
    if not buffer:
        return individual.copy(), []
    if l_limit is not None and sum(e.tokens for e in buffer) <= l_limit:
        return individual.copy(), buffer

    # one Steward call per chunk, oldest first, each seeing the state so far
    updated = individual
    for chunk in chunk_buffer(buffer, settings.budgets["buffer"]):
        updated = _absorb(updated, chunk, backend, settings, ledger)
    return updated, []


# the step


@dataclass
class StepTrace:
    """
    Auditable record of one timestep

    Truth fields are filled by the evaluation harness after the prediction
    is final.
    """

    stay_id: str
    t: int
    activated_rule_ids: list
    prediction: Prediction
    final_actions: list
    verdict: AuditVerdict
    citation_valid: bool
    prompt_tokens: dict
    max_prompt_tokens: int
    state_hash: str
    state_summary: str
    steward_ran: bool = False
    incidents: list = field(default_factory=list)
    bundle_type_truth: Optional[str] = None
    truth_actions: Optional[list] = None
    scored: bool = False
    recall: Optional[float] = None
    equivalence: Optional[int] = None

    schema_version = 1

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "stay_id": self.stay_id,
            "t": self.t,
            "activated_rule_ids": list(self.activated_rule_ids),
            "prediction": self.prediction.to_dict(),
            "final_actions": list(self.final_actions),
            "verdict": self.verdict.to_dict(),
            "citation_valid": self.citation_valid,
            "prompt_tokens": dict(self.prompt_tokens),
            "max_prompt_tokens": self.max_prompt_tokens,
            "state_hash": self.state_hash,
            "state_summary": self.state_summary,
            "steward_ran": self.steward_ran,
            "incidents": list(self.incidents),
            "bundle_type_truth": self.bundle_type_truth,
            "truth_actions": self.truth_actions,
            "scored": self.scored,
            "recall": self.recall,
            "equivalence": self.equivalence,
        }


def citations_valid(citations, candidates, individual):
    """
    True iff every citation names a rule of C_t or an existing state id
    """

    rule_ids = {r.rule_id for r in candidates}
    n_state = len(individual.state_index())
    for cid in citations:
        if cid in rule_ids or (cid.startswith("R-") and cid[2:] in rule_ids):
            continue
        m = re.fullmatch(r"S-(\d+)", cid)
        if m and 1 <= int(m.group(1)) <= n_state:
            continue
        return False
    return True


def new_state(protocol, individual=None):
    """
    A fresh inference state over a frozen protocol

    Raises
    ------
    ProtocolNotFrozen
    """

    if not protocol.frozen:
        raise ProtocolNotFrozen("the online loop needs a frozen protocol")
    return InferenceState(
        global_protocol=protocol,
        individual=individual if individual is not None else IndividualProtocol(),
    )


def step(state, bundle, backend, settings=None):
    """
    Runs one timestep: route, reason, conditional audit, buffer push and,
    over the buffer limit, a Steward pass

    Agent failures degrade to their fallbacks and are recorded as incidents;
    they never abort the trajectory.

    Parameters
    ----------
    state : InferenceState
        updated in place
    bundle : EventBundle
        the current bundle E_t
    backend : ChatBackend
    settings : StepConfig, optional

    Returns
    -------
    (Prediction, AuditVerdict, InferenceState, StepTrace)

    Raises
    ------
    ProtocolNotFrozen
    """

    if settings is None:
        settings = StepConfig()
    protocol = state.global_protocol
    if not protocol.frozen:
        raise ProtocolNotFrozen("the online loop needs a frozen protocol")

    ledger = StepLedger()
    loop = settings.loop
    ablation = settings.ablation
    bundle_text = serialize_bundle(bundle)

    # route
    prune_recent(state, bundle, loop["router_lookback_hours"])
    if ablation["use_global_protocol"]:
        candidates = route(
            bundle,
            state.individual,
            protocol,
            backend,
            loop["max_candidates"],
            state.recent,
            settings,
            ledger,
        )
    else:
        candidates = []

    # reason
    individual_seen = state.individual
    prompt, sections = reasoner_prompt(
        candidates, individual_seen, state.buffer, bundle_text, settings
    )
    prediction = predict(prompt, backend, settings, ledger)

    # audit
    verdict = not_run_verdict()
    if ablation["use_auditor"] and not prediction.abstained:
        triggered, why = should_audit(prediction, loop["tau_uncertainty"], settings.risk)
        if triggered:
            verdict = audit(
                prediction, candidates, individual_seen, backend, why, settings, ledger
            )
    final_actions = list(prediction.actions)
    if verdict.status == AuditStatus.FAIL and verdict.corrected_actions:
        final_actions = list(verdict.corrected_actions)

    # buffer and mitosis
    buffer_push(state, bundle_text, tokens.count(bundle_text), bundle)
    state.recent.append(bundle)
    steward_ran = False
    if ablation["use_mitosis"]:
        if state.buffer_tokens > loop["l_limit"]:
            state.individual, _ = steward_update(
                state.individual, state.buffer, backend, None, settings, ledger
            )
            flush_buffer(state)
            steward_ran = True
    else:
        roll_buffer(state, loop["l_limit"])

    trace = StepTrace(
        stay_id=bundle.stay_id,
        t=bundle.index,
        activated_rule_ids=[r.rule_id for r in candidates],
        prediction=prediction,
        final_actions=final_actions,
        verdict=verdict,
        citation_valid=citations_valid(prediction.citations, candidates, individual_seen),
        prompt_tokens=sections,
        max_prompt_tokens=ledger.max_prompt_tokens,
        state_hash=state_hash(state.individual),
        state_summary=describe_individual(state.individual),
        steward_ran=steward_ran,
        incidents=list(ledger.incidents),
    )
    logger.debug(
        "stay %s t=%d rules=%s actions=%s audit=%s",
        trace.stay_id,
        trace.t,
        trace.activated_rule_ids,
        final_actions,
        verdict.status.value,
    )
    return prediction, verdict, state, trace


def finish(state, backend, settings=None):
    """
    End-of-trajectory Steward pass over whatever is still buffered

    Returns
    -------
    list of str
        incidents raised by the pass
    """

    if settings is None:
        settings = StepConfig()
    ledger = StepLedger()
    if settings.ablation["use_mitosis"] and state.buffer:
        state.individual, _ = steward_update(
            state.individual, state.buffer, backend, None, settings, ledger
        )
        flush_buffer(state)
    return ledger.incidents
