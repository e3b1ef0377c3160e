"""
The dual-memory inference state

Contains the classes and functions for:

- GlobalRule / GlobalProtocol: the trigger-keyed IF/THEN rulebook shared by
  every trajectory, immutable once frozen
- IndividualProtocol: the structured per-patient state
- InferenceState: rulebook, patient state and the rolling raw-text buffer
- match_triggers: the deterministic trigger index over rules
"""

# standard libraries
import copy
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Optional

# external libraries
import pandas as pd

# internal modules
from .check_inputs import (
    DuplicateRuleId,
    InputError,
    MalformedRule,
    ProtocolFrozen,
    ProtocolIntegrityError,
)
from .ingest import EventKind

logger = logging.getLogger(__name__)


def normalize(text):
    """
    Lowercases, trims and collapses internal whitespace
    """
    return " ".join(str(text).lower().split())


# trigger predicates

COMPARATORS = {
    "<": lambda x, y: x < y,
    ">": lambda x, y: x > y,
    "<=": lambda x, y: x <= y,
    ">=": lambda x, y: x >= y,
    "=": lambda x, y: x == y,
}

_OP_ALIASES = {"≤": "<=", "≥": ">=", "==": "="}

_SPLIT_OR = re.compile(r"\s+OR\s+|\s*\|\|\s*", re.IGNORECASE)
_SPLIT_AND = re.compile(r"\s+AND\s+|\s*&&\s*|\s*[,;]\s*", re.IGNORECASE)
_COMPARATOR = re.compile(r"<=|>=|==|≤|≥|<|>|=")
_ATOM = re.compile(
    r"^(?P<term>.+?)\s*(?P<op><=|>=|==|≤|≥|<|>|=)\s*"
    r"(?P<num>[-+]?\d+(?:\.\d+)?)\s*(?P<unit>.*)$"
)
_IF_THEN = re.compile(r"\bIF\b(?P<trigger>.*?)\bTHEN\b(?P<action>.*)", re.IGNORECASE | re.DOTALL)


@dataclass(frozen=True)
class TriggerPredicate:
    """
    One atomic comparison of a trigger condition

    A "present" predicate matches by term; the others compare lab values of
    the analyte named by `term` against `threshold`.
    """

    term: str
    comparator: str
    threshold: Optional[float] = None
    unit: str = ""

    def as_dict(self):
        return {
            "term": self.term,
            "comparator": self.comparator,
            "threshold": self.threshold,
            "unit": self.unit,
        }


def _strip_trigger(condition):
    text = condition.strip()
    text = re.sub(r"^\[?\s*TRIGGER\s*:\s*", "", text, flags=re.IGNORECASE)
    text = re.sub(r"^IF\s+", "", text, flags=re.IGNORECASE)
    return text.strip().strip("[]").strip()


def parse_trigger(condition):
    """
    Parses a trigger condition into atomic predicates

    OR separates top-level clauses; AND, commas and semicolons separate atoms
    within a clause. An atom "term op number [unit]" is a comparison, an atom
    without a comparator is a term predicate. A condition holding an atom that
    has a comparator but no number is matched as one term.

    Parameters
    ----------
    condition : str
        e.g. "Lactate > 4 OR MAP < 65"

    Returns
    -------
    list of TriggerPredicate
        empty only for an empty condition
    """

    text = _strip_trigger(condition)
    if not text:
        return []

    atoms = []
    for clause in _SPLIT_OR.split(text):
        for raw in _SPLIT_AND.split(clause):
            raw = raw.strip().strip("()").strip()
            if not raw:
                continue
            match = _ATOM.match(raw)
            if match:
                op = _OP_ALIASES.get(match.group("op"), match.group("op"))
                atoms.append(
                    TriggerPredicate(
                        term=match.group("term").strip(),
                        comparator=op,
                        threshold=float(match.group("num")),
                        unit=match.group("unit").strip(),
                    )
                )
            elif _COMPARATOR.search(raw):
                # comparison we cannot read: fall back to the whole condition
                return [TriggerPredicate(term=text, comparator="present")]
            else:
                atoms.append(TriggerPredicate(term=raw, comparator="present"))

    if not atoms:
        return [TriggerPredicate(term=text, comparator="present")]
    return atoms


def analyte_matches(term, analyte):
    """
    True if the names are equal after normalization or one contains the
    other as whole words
    """

    a, b = normalize(term), normalize(analyte)
    if not a or not b:
        return False
    if a == b:
        return True
    return bool(
        re.search(r"\b" + re.escape(a) + r"\b", b)
        or re.search(r"\b" + re.escape(b) + r"\b", a)
    )


def predicate_satisfied(pred, lab_values, texts):
    """
    Evaluates one predicate

    Parameters
    ----------
    pred : TriggerPredicate
    lab_values : list of (analyte, value)
        raw lab values visible to the router
    texts : list of str
        rendered event lines, active problems and current medications
    """

    if pred.comparator == "present":
        needle = pred.term.lower()
        return any(needle in t.lower() for t in texts)

    compare = COMPARATORS[pred.comparator]
    return any(
        analyte_matches(pred.term, analyte) and compare(value, pred.threshold)
        for analyte, value in lab_values
    )


@dataclass(frozen=True)
class GlobalRule:
    """
    An institutional IF/THEN rule keyed by its clinical trigger

    Attributes
    ----------
    rule_id : str
        unique id within a protocol, e.g. "SEPSIS_V1"
    category : str
        e.g. "ENDOCRINE_MGMT"
    trigger_condition : str
        structured predicate text, e.g. "Lactate > 4 OR MAP < 65"
    action_directive : str
        the recommended action
    rule_text : str
        the full "IF ... THEN ..." sentence
    trigger_predicates : tuple of TriggerPredicate
        parsed from trigger_condition
    """

    rule_id: str
    category: str
    trigger_condition: str
    action_directive: str
    rule_text: str
    trigger_predicates: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "trigger_predicates", tuple(parse_trigger(self.trigger_condition))
        )

    def to_dict(self):
        return {
            "rule_id": self.rule_id,
            "category": self.category,
            "trigger_condition": self.trigger_condition,
            "action_directive": self.action_directive,
            "rule_text": self.rule_text,
            "trigger_predicates": [p.as_dict() for p in self.trigger_predicates],
        }

    @classmethod
    def from_dict(cls, record):
        try:
            return cls(
                rule_id=str(record["rule_id"]),
                category=str(record["category"]),
                trigger_condition=str(record["trigger_condition"]),
                action_directive=str(record["action_directive"]),
                rule_text=str(record["rule_text"]),
            )
        except KeyError as err:
            raise MalformedRule("rule record lacks field " + str(err))

    @property
    def citation_id(self):
        return "R-" + self.rule_id

    @property
    def prompt_line(self):
        return "[{}] ({}) {}".format(self.citation_id, self.category, self.rule_text)


def has_if_then(text):
    match = _IF_THEN.search(text or "")
    return bool(
        match and match.group("trigger").strip() and match.group("action").strip()
    )


def validate_rule(rule):
    """
    Checks a rule is complete and shaped "IF ... THEN ..."

    Raises
    ------
    MalformedRule
    """

    for name in ["rule_id", "category", "trigger_condition", "action_directive"]:
        value = getattr(rule, name)
        if not isinstance(value, str) or not value.strip():
            raise MalformedRule("rule field " + name + " is empty")
    if not re.fullmatch(r"[A-Za-z0-9_.\-]+", rule.rule_id):
        raise MalformedRule("rule id " + repr(rule.rule_id) + " has invalid characters")
    if not has_if_then(rule.rule_text):
        raise MalformedRule(
            "rule " + rule.rule_id + " lacks an IF-part or a THEN-part: " + rule.rule_text
        )


class GlobalProtocol:
    """
    Ordered rulebook with a content digest

    Once frozen, every mutation raises ProtocolFrozen. The version hash is the
    SHA-256 of the canonical rule serialization and changes iff the rules do.
    """

    def __init__(self, rules=(), frozen=False):
        self._rules = {}
        self._frozen = False
        self._hash = self._digest()
        for rule in rules:
            self.append_rule(rule)
        self._frozen = frozen

    @property
    def rules(self):
        return MappingProxyType(self._rules)

    @property
    def frozen(self):
        return self._frozen

    @property
    def version_hash(self):
        return self._hash

    def _digest(self):
        canonical = json.dumps(
            [r.to_dict() for r in self._rules.values()],
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def append_rule(self, rule):
        """
        Appends a rule at the end of the insertion order

        Raises
        ------
        ProtocolFrozen, DuplicateRuleId, MalformedRule
        """

        if self._frozen:
            raise ProtocolFrozen("cannot append " + str(rule.rule_id) + " to a frozen protocol")
        validate_rule(rule)
        if rule.rule_id in self._rules:
            raise DuplicateRuleId("rule id " + rule.rule_id + " already present")
        self._rules[rule.rule_id] = rule
        self._hash = self._digest()
        return self

    def freeze(self):
        self._frozen = True
        return self

    def snapshot(self):
        """
        A frozen copy, independent of later appends to this protocol
        """

        copied = GlobalProtocol()
        copied._rules = dict(self._rules)
        copied._hash = self._hash
        copied._frozen = True
        return copied

    def __len__(self):
        return len(self._rules)

    def __iter__(self):
        return iter(self._rules.values())

    def __contains__(self, rule_id):
        return rule_id in self._rules

    def get(self, rule_id):
        return self._rules.get(rule_id)

    def resolve(self, citation):
        """
        Rule for a citation "R-<id>" or a bare id, None if absent
        """

        cid = citation.strip()
        if cid in self._rules:
            return self._rules[cid]
        if cid.startswith("R-") and cid[2:] in self._rules:
            return self._rules[cid[2:]]
        return None

    def to_dict(self):
        return {
            "version_hash": self._hash,
            "frozen": self._frozen,
            "rules": [r.to_dict() for r in self._rules.values()],
        }

    @classmethod
    def from_dict(cls, document, verify=True):
        """
        Rebuilds a protocol from its store document

        Raises
        ------
        ProtocolIntegrityError
            if verify and the recorded hash differs from the recomputed one
        """

        try:
            rules = [GlobalRule.from_dict(r) for r in document["rules"]]
            frozen = bool(document.get("frozen", False))
        except (KeyError, TypeError) as err:
            raise MalformedRule("protocol document is incomplete: " + str(err))
        protocol = cls(rules, frozen=frozen)
        recorded = document.get("version_hash")
        if verify and recorded is not None and recorded != protocol.version_hash:
            raise ProtocolIntegrityError(
                "stored version_hash " + str(recorded) + " does not match the rules ("
                + protocol.version_hash + ")"
            )
        return protocol


def append_rule(protocol, rule):
    return protocol.append_rule(rule)


def save_protocol(protocol, path):
    """
    Writes the protocol store document atomically
    """

    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(protocol.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")
    os.replace(tmp, path)


def load_protocol(path):
    with open(path, encoding="utf-8") as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as err:
            raise MalformedRule("protocol store is not valid JSON: " + str(err))
    return GlobalProtocol.from_dict(document)


# individual protocol

LIST_FIELDS = ("active_problems", "current_meds", "procedures", "trends")


def _dedup_items(items):
    seen = set()
    kept = []
    for item in items:
        text = " ".join(str(item).split())
        key = normalize(text)
        if not key or key in seen:
            continue
        seen.add(key)
        kept.append(text)
    return kept


@dataclass
class IndividualProtocol:
    """
    Structured per-patient state

    No list ever holds two entries equal after normalization. Retired entries
    move to `history` as {"item", "resolved_at"} records.
    """

    active_problems: list = field(default_factory=list)
    current_meds: list = field(default_factory=list)
    procedures: list = field(default_factory=list)
    trends: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def __post_init__(self):
        for name in LIST_FIELDS:
            setattr(self, name, _dedup_items(getattr(self, name)))

    def contains(self, name, item):
        key = normalize(item)
        return any(normalize(x) == key for x in getattr(self, name))

    def add(self, name, item):
        """
        Appends item unless an equal entry exists; returns whether it was added
        """

        if not normalize(item) or self.contains(name, item):
            return False
        getattr(self, name).append(" ".join(str(item).split()))
        return True

    def retire(self, name, item, resolved_at=None):
        """
        Moves every entry equal to item from list `name` to the history
        """

        key = normalize(item)
        kept = []
        for x in getattr(self, name):
            if normalize(x) == key:
                self.history.append({"item": x, "resolved_at": resolved_at})
            else:
                kept.append(x)
        setattr(self, name, kept)

    def copy(self):
        return copy.deepcopy(self)

    def state_index(self):
        """
        Citable state ids in list order: [("S-01", field, item), ...]
        """

        index = []
        for name in LIST_FIELDS:
            for item in getattr(self, name):
                index.append(("S-{:02d}".format(len(index) + 1), name, item))
        return index


def serialize_individual(individual):
    """
    Canonical JSON text of a patient state (fixed key and list order)
    """

    document = {name: list(getattr(individual, name)) for name in LIST_FIELDS}
    document["history"] = [
        {"item": h["item"], "resolved_at": h.get("resolved_at")}
        for h in individual.history
    ]
    return json.dumps(document, indent=2, ensure_ascii=False)


def parse_individual(text):
    """
    Inverse of serialize_individual; missing lists default to empty

    Raises
    ------
    InputError
    """

    try:
        document = json.loads(text)
    except json.JSONDecodeError as err:
        raise InputError("patient state is not valid JSON: " + str(err))
    if not isinstance(document, dict):
        raise InputError("patient state must be a JSON object")
    return individual_from_dict(document)


def individual_from_dict(document):
    lists = {}
    for name in LIST_FIELDS:
        value = document.get(name, [])
        if not isinstance(value, list):
            raise InputError(name + " must be a list")
        lists[name] = [str(x) for x in value if isinstance(x, (str, int, float))]
    history = []
    for h in document.get("history", []) or []:
        if isinstance(h, dict) and "item" in h:
            history.append({"item": str(h["item"]), "resolved_at": h.get("resolved_at")})
        elif isinstance(h, str):
            history.append({"item": h, "resolved_at": None})
    return IndividualProtocol(history=history, **lists)


def describe_individual(individual):
    """
    One-line summary, e.g. "active_problems=[suspected sepsis] | current_meds=[] | ..."
    """

    return " | ".join(
        "{}=[{}]".format(name, ", ".join(getattr(individual, name)))
        for name in LIST_FIELDS
    )


def render_state(individual):
    """
    The patient state as it appears in prompts: canonical JSON plus state ids
    """

    index = individual.state_index()
    text = serialize_individual(individual)
    if index:
        text += "\nState ids:\n" + "\n".join(
            "{} {}: {}".format(sid, name, item) for sid, name, item in index
        )
    return text


def state_hash(individual):
    return hashlib.sha256(serialize_individual(individual).encode("utf-8")).hexdigest()


# inference state


@dataclass
class BufferEntry:
    text: str
    tokens: int
    bundle: object = None


@dataclass
class InferenceState:
    """
    The context carried across timesteps

    Attributes
    ----------
    global_protocol : GlobalProtocol
    individual : IndividualProtocol
    buffer : list of BufferEntry
        recent serialized bundles not yet absorbed into the patient state
    buffer_tokens : int
        sum of the buffer entry token counts
    recent : list of EventBundle
        earlier bundles within the router lookback window
    """

    global_protocol: GlobalProtocol
    individual: IndividualProtocol = field(default_factory=IndividualProtocol)
    buffer: list = field(default_factory=list)
    buffer_tokens: int = 0
    recent: list = field(default_factory=list)


def buffer_push(state, bundle_text, tokens, bundle=None):
    """
    Appends a serialized bundle to the buffer

    Raises
    ------
    InputError
        if tokens is negative
    """

    if tokens < 0:
        raise InputError("token count cannot be negative")
    state.buffer.append(BufferEntry(bundle_text, int(tokens), bundle))
    state.buffer_tokens += int(tokens)
    return state


def flush_buffer(state):
    """
    Empties the buffer and returns the removed entries
    """

    flushed = state.buffer
    state.buffer = []
    state.buffer_tokens = 0
    return flushed


def roll_buffer(state, limit):
    """
    Drops the oldest entries until the buffer holds at most `limit` tokens
    """

    while state.buffer and state.buffer_tokens > limit:
        dropped = state.buffer.pop(0)
        state.buffer_tokens -= dropped.tokens
    return state


def prune_recent(state, bundle, lookback_hours):
    """
    Keeps the earlier bundles starting strictly within the lookback of `bundle`
    """

    lookback = pd.Timedelta(hours=lookback_hours)
    state.recent = [
        b for b in state.recent if bundle.window_start - b.window_start < lookback
    ]
    return state.recent


def _router_view(bundles, individual):
    lab_values = []
    texts = []
    for b in bundles:
        for ev in b.events:
            texts.append(ev.rendered)
            if ev.event_kind == EventKind.LAB_RESULT:
                lab_values.append((ev.payload.analyte, ev.payload.value))
        for lines in b.sections.values():
            texts.extend(lines)
    texts.extend(individual.active_problems)
    texts.extend(individual.current_meds)
    return lab_values, texts


def match_triggers(bundle, individual, protocol, recent=()):
    """
    Deterministic candidate rules for a bundle

    A rule is a candidate iff any of its atomic predicates holds: a numeric
    predicate against a raw lab value of the bundle (or of the recent bundles),
    a term predicate as a case-insensitive substring of a rendered event line,
    an active problem or a current medication.

    Returns
    -------
    list of str
        rule ids in protocol insertion order
    """

    if protocol is None or len(protocol) == 0:
        return []

    lab_values, texts = _router_view(list(recent) + [bundle], individual)
    return [
        rule.rule_id
        for rule in protocol
        if any(predicate_satisfied(p, lab_values, texts) for p in rule.trigger_predicates)
    ]
