"""
Offline protocol induction

Streams the training corpus through the online loop, turns prediction
failures into IF/THEN rules with the Reflector template, screens and
deduplicates them, and grows the Global Protocol between trajectories.
The protocol is frozen at the end of the run.
"""

# standard libraries
import dataclasses
import logging
import re
from dataclasses import dataclass, field

# external libraries
from joblib import Parallel, delayed

# internal modules
from . import config
from . import tokens
from .agents import (
    REASK_SUFFIX,
    Prediction,
    StepConfig,
    StepLedger,
    fit_history,
    finish,
    new_state,
    step,
)
from .backend import ChatRequest, TemplateId, extract_json, render_template
from .bundler import serialize_bundle
from .check_inputs import (
    BackendError,
    ClinStreamError,
    EmptyCorpus,
    IdentifierLeak,
    JsonReplyError,
    LogprobsUnavailable,
    MalformedRule,
    ProtocolFrozen,
)
from .evaluate import AliasTable, recall_at_k, truth_actions
from .memory import GlobalProtocol, GlobalRule, normalize, validate_rule

logger = logging.getLogger(__name__)

PENDING_ID = "PENDING"


@dataclass
class FailureCase:
    """
    A step whose prediction missed part of the recorded next actions

    Attributes
    ----------
    stay_id : str
    t : int
        index of the bundle the prediction was made at
    history_text : str
        serialized bundles 0..t, newest kept under the reflection budget
    predicted : list of str
        the final predicted actions
    truth : list of str
        the recorded actions of bundle t+1
    """

    stay_id: str
    t: int
    history_text: str
    predicted: list
    truth: list

    def to_dict(self):
        return {
            "stay_id": self.stay_id,
            "t": self.t,
            "predicted": list(self.predicted),
            "truth": list(self.truth),
        }


@dataclass
class ProposedRule:
    """
    A Reflector proposal; the rule carries a placeholder id until admitted
    """

    error_analysis: str
    rule: GlobalRule

    def to_dict(self):
        record = self.rule.to_dict()
        del record["rule_id"], record["trigger_predicates"]
        return {"error_analysis": self.error_analysis, "proposed_rule": record}


@dataclass
class Phase1Result:
    """
    Outcome of an induction run

    Attributes
    ----------
    protocol : GlobalProtocol
        frozen
    log : list of dict
        one record per failure: case, proposal, admission and reason
    counts : dict
        trajectories, steps, failures, proposals, admitted, rejected
    """

    protocol: GlobalProtocol
    log: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)


def detect_failure(pred, truth, k=config.eval_params["k"], aliases=None):
    """
    True iff recall@k of the prediction against the recorded actions is
    below one

    Parameters
    ----------
    pred : Prediction or list of str
    truth : list of str
        must be nonempty

    Raises
    ------
    EmptyTruth
    """

    actions = pred.actions if isinstance(pred, Prediction) else pred
    return recall_at_k(actions, truth, k, aliases) < 1.0


def _bullets(items):
    return "\n".join("- " + str(a) for a in items) if items else "None"


def _proposal(document):
    rule = document.get("proposed_rule")
    if not isinstance(rule, dict) or not rule:
        return None
    fields = {}
    for name in ["category", "trigger_condition", "action_directive", "rule_text"]:
        value = rule.get(name)
        fields[name] = value.strip() if isinstance(value, str) else ""
    proposed = GlobalRule(rule_id=PENDING_ID, **fields)
    validate_rule(proposed)
    analysis = document.get("error_analysis")
    return ProposedRule(analysis if isinstance(analysis, str) else "", proposed)


def reflect(case, backend, settings=None, ledger=None):
    """
    Asks the Reflector for a rule that would have prevented the failure

    Returns
    -------
    ProposedRule or None
        None when the backend declines, is unreachable, or replies with
        malformed JSON twice or with a malformed rule
    """

    if settings is None:
        settings = StepConfig()
    if ledger is None:
        ledger = StepLedger()

    prompt = render_template(
        TemplateId.REFLECTOR,
        {
            "patient_history_text": case.history_text,
            "ground_truth_action": _bullets(case.truth),
            "ai_prediction": _bullets(case.predicted),
        },
        settings.template_dir,
    )

    document = None
    for attempt in range(2):
        text = prompt if attempt == 0 else prompt + REASK_SUFFIX
        ledger.prompt_sizes.append(tokens.count(text))
        request = ChatRequest(
            TemplateId.REFLECTOR,
            text,
            settings.max_output_tokens,
            False,
            settings.temperature,
        )
        try:
            reply = backend.complete(request).text
        except LogprobsUnavailable as err:
            reply = err.response.text
        except BackendError as err:
            logger.warning("reflector unavailable for %s t=%d: %s", case.stay_id, case.t, err)
            return None
        try:
            document = extract_json(reply)
            break
        except JsonReplyError as err:
            logger.info("reflector reply for %s t=%d unusable: %s", case.stay_id, case.t, err)
    if document is None:
        return None

    try:
        return _proposal(document)
    except MalformedRule as err:
        logger.warning("reflector proposed a malformed rule: %s", err)
        return None


# admission


def category_key(category):
    """
    Rule id prefix of a category, e.g. "endocrine mgmt" -> "ENDOCRINE_MGMT"
    """

    key = re.sub(r"[^A-Za-z0-9]+", "_", category).strip("_").upper()
    return key or "GENERAL"


def next_rule_id(protocol, category):
    prefix = category_key(category)
    n = 1
    while "{}_{:03d}".format(prefix, n) in protocol:
        n += 1
    return "{}_{:03d}".format(prefix, n)


def is_duplicate(rule, protocol):
    trigger = normalize(rule.trigger_condition)
    action = normalize(rule.action_directive)
    return any(
        normalize(r.trigger_condition) == trigger and normalize(r.action_directive) == action
        for r in protocol
    )


def identifier_screen(identifier_patterns=(), stay_ids=()):
    """
    Compiled patterns for the identifier screen: the configured patterns
    plus every stay id as a whole word
    """

    patterns = [re.compile(p) for p in identifier_patterns]
    patterns += [
        re.compile(r"(?<!\w)" + re.escape(str(s)) + r"(?!\w)") for s in stay_ids if str(s)
    ]
    return patterns


def check_identifiers(rule, screen):
    """
    Raises
    ------
    IdentifierLeak
        if any rule field matches the screen
    """

    for name in ["category", "trigger_condition", "action_directive", "rule_text"]:
        text = getattr(rule, name)
        for pattern in screen:
            if pattern.search(text):
                raise IdentifierLeak(
                    "rule field " + name + " matches identifier pattern " + pattern.pattern
                )


def admit_rule(proposed, protocol, screen=()):
    """
    Appends a proposed rule unless it duplicates an existing one

    Parameters
    ----------
    proposed : ProposedRule
    protocol : GlobalProtocol
        must not be frozen; grown in place
    screen : list of compiled patterns
        see identifier_screen

    Returns
    -------
    (GlobalProtocol, GlobalRule or None)
        the admitted rule with its assigned id, None for a duplicate

    Raises
    ------
    ProtocolFrozen, IdentifierLeak
    """

    if protocol.frozen:
        raise ProtocolFrozen("rules cannot be admitted to a frozen protocol")
    rule = proposed.rule
    check_identifiers(rule, screen)
    if is_duplicate(rule, protocol):
        return protocol, None
    admitted = dataclasses.replace(rule, rule_id=next_rule_id(protocol, rule.category))
    protocol.append_rule(admitted)
    logger.info("admitted rule %s: %s", admitted.rule_id, admitted.rule_text)
    return protocol, admitted


# the induction run


def collect_failures(stream, protocol, backend, settings, k, aliases):
    """
    Runs one trajectory against a fixed protocol and returns its failures

    Returns
    -------
    (list of FailureCase, int)
        the failures and the number of steps run
    """

    state = new_state(protocol.snapshot())
    bundles = stream.bundles
    texts = [serialize_bundle(b) for b in bundles]
    failures = []
    for t, bundle in enumerate(bundles):
        _, _, state, trace = step(state, bundle, backend, settings)
        if t + 1 == len(bundles):
            break
        truth = truth_actions(bundles[t + 1])
        if not truth or not detect_failure(trace.final_actions, truth, k, aliases):
            continue
        history = fit_history(texts[:t], settings.budgets["reflection"], texts[t])
        failures.append(
            FailureCase(stream.stay_id, t, history, list(trace.final_actions), truth)
        )
    finish(state, backend, settings)
    return failures, len(bundles)


def _induce(streams, protocol, backend, settings, k, aliases, screen, log, counts):
    for stream in streams:
        try:
            failures, n_steps = collect_failures(
                stream, protocol, backend, settings, k, aliases
            )
        except ClinStreamError as err:
            logger.error("trajectory %s failed during induction: %s", stream.stay_id, err)
            counts["failed_trajectories"] += 1
            continue
        counts["trajectories"] += 1
        counts["steps"] += n_steps
        counts["failures"] += len(failures)

        for case in failures:
            record = {"case": case.to_dict(), "proposed": None, "admitted": False}
            proposed = reflect(case, backend, settings)
            if proposed is None:
                record["reason"] = "declined"
                counts["declined"] += 1
                log.append(record)
                continue
            record["proposed"] = proposed.to_dict()
            counts["proposed"] += 1
            try:
                _, admitted = admit_rule(proposed, protocol, screen)
            except IdentifierLeak as err:
                logger.warning("rule rejected: %s", err)
                record["reason"] = "identifier"
                counts["rejected"] += 1
                log.append(record)
                continue
            if admitted is None:
                record["reason"] = "duplicate"
                counts["rejected"] += 1
            else:
                record["admitted"] = True
                record["rule_id"] = admitted.rule_id
                record["reason"] = "admitted"
                counts["admitted"] += 1
            log.append(record)


def _new_counts():
    return dict.fromkeys(
        [
            "trajectories",
            "failed_trajectories",
            "steps",
            "failures",
            "proposed",
            "declined",
            "admitted",
            "rejected",
        ],
        0,
    )


def _relabel(shard_log, renamed, counts):
    """
    Points a shard's admission records at the merged rule ids; rules the
    merge found duplicate are recorded as rejected
    """

    records = []
    for record in shard_log:
        record = dict(record)
        if record["admitted"]:
            final = renamed[record.pop("rule_id")]
            if final is None:
                record["admitted"] = False
                record["reason"] = "duplicate"
                counts["rejected"] += 1
            else:
                record["rule_id"] = final
        records.append(record)
    return records


def _shards(items, n):
    size = -(-len(items) // n)
    return [items[i : i + size] for i in range(0, len(items), size)]


def phase1_run(
    corpus,
    backend,
    settings=None,
    seed_protocol=None,
    k=config.eval_params["k"],
    aliases=(),
    identifier_patterns=config.identifier_patterns,
    workers=config.numcores,
):
    """
    Induces a Global Protocol from a training corpus

    Rules admitted while a trajectory runs become visible from the next
    trajectory on. With workers > 1 the corpus is split into contiguous
    shards induced independently from the seed; the shard rule sets are
    then merged in shard order through the same admission rule.

    Parameters
    ----------
    corpus : list of SerializedStream
    backend : ChatBackend
    settings : StepConfig, optional
    seed_protocol : GlobalProtocol, optional
        starting rules; copied, never modified
    k : int, optional
        recall cutoff of the failure test
    aliases : list of pairs, optional
    identifier_patterns : list of str, optional
        regexes screened out of rules, on top of the corpus stay ids
    workers : int, optional

    Returns
    -------
    Phase1Result

    Raises
    ------
    EmptyCorpus
    """

    if settings is None:
        settings = StepConfig()
    streams = list(corpus)
    if not streams:
        raise EmptyCorpus("the training corpus holds no stays")
    alias_table = AliasTable(aliases)
    screen = identifier_screen(identifier_patterns, [s.stay_id for s in streams])
    seed_rules = list(seed_protocol) if seed_protocol is not None else []

    def run(shard):
        protocol = GlobalProtocol(seed_rules)
        log = []
        counts = _new_counts()
        _induce(shard, protocol, backend, settings, k, alias_table, screen, log, counts)
        return protocol, log, counts

    if workers > 1 and len(streams) > 1:
        results = Parallel(n_jobs=workers, prefer="threads")(
            delayed(run)(shard) for shard in _shards(streams, workers)
        )
        protocol = GlobalProtocol(seed_rules)
        log = []
        counts = _new_counts()
        n_seed = len(seed_rules)
        for shard_protocol, shard_log, shard_counts in results:
            for key in counts:
                counts[key] += shard_counts[key]
            renamed = {}
            for rule in list(shard_protocol)[n_seed:]:
                _, admitted = admit_rule(ProposedRule("", rule), protocol, screen)
                renamed[rule.rule_id] = admitted.rule_id if admitted is not None else None
            log.extend(_relabel(shard_log, renamed, counts))
        counts["admitted"] = len(protocol) - n_seed
    else:
        protocol, log, counts = run(streams)

    protocol.freeze()
    logger.info(
        "induction finished: %d rules (%d admitted from %d failures)",
        len(protocol),
        counts["admitted"],
        counts["failures"],
    )
    return Phase1Result(protocol, log, counts)
