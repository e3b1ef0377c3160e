"""
This module checks inputs for errors and defines the package exceptions
"""

# standard libraries
import copy
import logging
import os
from dataclasses import dataclass, field, asdict

# external libraries
import numpy as np
import yaml

# internal modules
from . import config

logger = logging.getLogger(__name__)

# define some custom types

intc = (int, np.integer)  # unifying type for integers
floatc = (float, int, np.integer, np.floating)  # anything usable as a decimal


# exceptions


class ClinStreamError(Exception):
    """
    Root of every error raised by the package
    """


class InputError(ClinStreamError):
    """
    Handles errors in inputs
    """


class ConfigInvalid(InputError):
    """
    A configuration value is missing, of the wrong type or out of range
    """


class MissingColumn(InputError):
    """
    A table stream lacks a column named by the schema map

    Parameters
    ----------
    table : str
        the table kind
    column : str
        the missing column name
    """

    def __init__(self, table, column):
        self.table = table
        self.column = column
        super().__init__(
            "table '{}' is missing column '{}'".format(table, column)
        )


class NonFiniteValue(InputError):
    """
    A numeric input is NaN or infinite
    """


class UnsortedInput(InputError):
    """
    Events handed to the bundler are not in ascending timestamp order
    """


class EmptyCorpus(InputError):
    """
    An operation that needs at least one stay received none
    """


class EmptyTruth(InputError):
    """
    A metric was asked to score against an empty set of recorded actions
    """


class ProtocolError(ClinStreamError):
    """
    Errors concerning the Global Protocol
    """


class ProtocolFrozen(ProtocolError):
    """
    Mutation attempted on a frozen protocol
    """


class ProtocolNotFrozen(ProtocolError):
    """
    An online operation received a protocol that is still open for induction
    """


class DuplicateRuleId(ProtocolError):
    """
    A rule id is already present in the protocol
    """


class MalformedRule(ProtocolError):
    """
    A rule lacks its IF-part or its THEN-part, or misses required fields
    """


class IdentifierLeak(ProtocolError):
    """
    A rule mentions a patient identifier
    """


class ProtocolIntegrityError(ProtocolError):
    """
    The stored version hash does not match the stored rules
    """


class TemplateError(ClinStreamError):
    """
    Errors in prompt template rendering
    """


class UnknownTemplate(TemplateError):
    """
    No template is registered under the requested id
    """


class UnboundSlot(TemplateError):
    """
    A slot referenced by the template has no binding

    Parameters
    ----------
    name : str
        the slot name
    """

    def __init__(self, name):
        self.name = name
        super().__init__("template slot '{}' is not bound".format(name))


class BackendError(ClinStreamError):
    """
    Errors raised by chat backends
    """


class InvalidRequest(BackendError):
    """
    A request violates its preconditions and is rejected locally
    """


class BackendUnreachable(BackendError):
    """
    The backend could not be reached within the retry bound
    """


class MalformedBackendReply(BackendError):
    """
    The backend answered with something that is not a chat completion
    """


class LogprobsUnavailable(BackendError):
    """
    Log-probabilities were requested but not returned

    The completed response is attached so the caller can still use its text.
    """

    def __init__(self, response):
        self.response = response
        super().__init__("backend returned no token log-probabilities")


class JsonReplyError(ClinStreamError):
    """
    An agent reply does not contain a usable JSON object
    """


class NoJsonFound(JsonReplyError):
    """
    The reply contains no JSON object at all
    """


class InvalidJson(JsonReplyError):
    """
    The reply contains an object-like span that does not parse
    """


class RunError(ClinStreamError):
    """
    Errors aborting a command-level run
    """


class InvariantViolation(RunError):
    """
    A run-level invariant (frozen protocol, no lookahead, no reflection online) failed
    """


class TrainTestOverlap(RunError):
    """
    The evaluation corpus is the corpus the protocol was induced on
    """


class OutputExists(RunError):
    """
    The output directory already holds a manifest and overwriting was not requested
    """


class InputWarning:
    """
    Warns user if inputs are considered outside of typical ranges, but proceeds anyway
    """

    @staticmethod
    def tau_warning(tau):
        warning = (
            "Warning: tau_uncertainty = "
            + str(tau)
            + " is very high. Proceeding anyway, but the Auditor will "
            + "almost only fire on risk vocabulary hits"
        )
        return warning

    @staticmethod
    def l_limit_warning(l_limit, buffer_budget):
        warning = (
            "Warning: l_limit ("
            + str(l_limit)
            + ") exceeds the buffer allocation ("
            + str(buffer_budget)
            + "). Proceeding anyway, but buffered history will be truncated "
            + "in prompts before the Steward absorbs it"
        )
        return warning


# configuration checks


def _fill(input_params, defaults, section):
    """
    Fills missing keys from the defaults and rejects unknown keys

    Parameters
    ----------
    input_params : dict or None
        user supplied values
    defaults : dict
        default values from the config module
    section : str
        section name used in error messages

    Returns
    -------
    dict
        the completed parameter dictionary
    """

    if input_params is None:
        input_params = {}
    if not isinstance(input_params, dict):
        raise ConfigInvalid(section + " must be a mapping")

    unknown = set(input_params) - set(defaults)
    if unknown:
        raise ConfigInvalid(
            "unknown key(s) in " + section + ": " + ", ".join(sorted(unknown))
        )

    params = {}
    for key in defaults:
        try:
            params[key] = input_params[key]
        except KeyError:
            params[key] = copy.deepcopy(defaults[key])

    return params


def _check_int(value, name, minimum):
    if isinstance(value, bool) or not isinstance(value, intc):
        raise ConfigInvalid(name + " is not an integer")
    if value < minimum:
        raise ConfigInvalid(name + " must be at least " + str(minimum))
    return int(value)


def _check_number(value, name, minimum=0.0):
    if isinstance(value, bool) or not isinstance(value, floatc):
        raise ConfigInvalid(name + " is not a number")
    if not np.isfinite(value):
        raise ConfigInvalid(name + " must be finite")
    if value < minimum:
        raise ConfigInvalid(name + " cannot be below " + str(minimum))
    return float(value)


def _check_bool(value, name):
    if not isinstance(value, bool):
        raise ConfigInvalid(name + " is not of type bool")
    return value


def check_bundle_params(input_params):
    """
    Checks bundling parameters are reasonable, or assigns if empty

    Parameters
    ----------
    input_params : dict
        Can contain the keys "window_hours" and "gap_threshold_hours"

    Returns
    -------
    dict
        {'window_hours'        (int) : width of an event bundle window,
         'gap_threshold_hours' (int) : silent gap above which a time-delta token is emitted}
    """

    params = _fill(input_params, config.bundle_params, "bundle")
    params["window_hours"] = _check_int(params["window_hours"], "window_hours", 1)
    params["gap_threshold_hours"] = _check_int(
        params["gap_threshold_hours"], "gap_threshold_hours", 0
    )
    return params


def check_budget_params(input_params):
    """
    Checks the prompt budget allocations are positive integers

    Parameters
    ----------
    input_params : dict
        Can contain "system", "rules", "state", "buffer" and "reflection"

    Returns
    -------
    dict
        the allocations in the configured token unit
    """

    params = _fill(input_params, config.budget_params, "budgets")
    for key in params:
        params[key] = _check_int(params[key], "budget " + key, 1)
    return params


def check_loop_params(input_params, buffer_budget=None):
    """
    Checks the online loop parameters

    Parameters
    ----------
    input_params : dict
        Can contain "tau_uncertainty", "l_limit", "max_candidates",
        "router_lookback_hours" and "max_actions"
    buffer_budget : int, optional
        the buffer allocation, used to warn about an oversized l_limit

    Returns
    -------
    dict
        the checked loop parameters
    """

    params = _fill(input_params, config.loop_params, "loop")
    params["tau_uncertainty"] = _check_number(
        params["tau_uncertainty"], "tau_uncertainty"
    )
    params["l_limit"] = _check_int(params["l_limit"], "l_limit", 0)
    params["max_candidates"] = _check_int(
        params["max_candidates"], "max_candidates", 1
    )
    params["router_lookback_hours"] = _check_number(
        params["router_lookback_hours"], "router_lookback_hours"
    )
    params["max_actions"] = _check_int(params["max_actions"], "max_actions", 1)

    if params["tau_uncertainty"] > 5.0:
        logger.warning(InputWarning.tau_warning(params["tau_uncertainty"]))
    if buffer_budget is not None and params["l_limit"] > buffer_budget:
        logger.warning(InputWarning.l_limit_warning(params["l_limit"], buffer_budget))

    return params


def check_backend_params(input_params):
    """
    Checks the chat backend settings

    Parameters
    ----------
    input_params : dict
        Can contain any key of config.backend_params

    Returns
    -------
    dict
        the checked backend settings
    """

    params = _fill(input_params, config.backend_params, "backend")

    kinds_permitted = ["mock", "http"]
    if not isinstance(params["kind"], str) or params["kind"].lower() not in kinds_permitted:
        raise ConfigInvalid(
            "backend kind not recognised. Allowed kinds are: "
            + ", ".join(kinds_permitted)
        )
    params["kind"] = params["kind"].lower()

    for key in ["endpoint", "model", "api_key_env"]:
        if not isinstance(params[key], str) or not params[key]:
            raise ConfigInvalid("backend " + key + " must be a non-empty string")

    params["timeout_ms"] = _check_int(params["timeout_ms"], "timeout_ms", 1)
    params["retries"] = _check_int(params["retries"], "retries", 1)
    params["backoff_s"] = _check_number(params["backoff_s"], "backoff_s")
    params["temperature"] = _check_number(params["temperature"], "temperature")
    params["max_output_tokens"] = _check_int(
        params["max_output_tokens"], "max_output_tokens", 1
    )

    if params["kind"] == "mock":
        if params["mock_script"] is None or not os.path.isfile(params["mock_script"]):
            raise ConfigInvalid(
                "mock backend needs an existing mock_script, got "
                + str(params["mock_script"])
            )

    return params


def check_ablation_params(input_params):
    """
    Checks the component switches are booleans
    """

    params = _fill(input_params, config.ablation_params, "ablation")
    for key in params:
        params[key] = _check_bool(params[key], key)
    return params


def check_eval_params(input_params):
    """
    Checks the evaluation parameters

    Parameters
    ----------
    input_params : dict
        Can contain "k" and "aliases" (a mapping or a list of pairs)

    Returns
    -------
    dict
        {'k' (int), 'aliases' (list of [str, str] pairs)}
    """

    params = _fill(input_params, config.eval_params, "eval")
    params["k"] = _check_int(params["k"], "k", 1)

    aliases = params["aliases"]
    if isinstance(aliases, dict):
        aliases = [[a, b] for a, b in aliases.items()]
    if not isinstance(aliases, list):
        raise ConfigInvalid("aliases must be a mapping or a list of pairs")
    for pair in aliases:
        if (
            not isinstance(pair, (list, tuple))
            or len(pair) != 2
            or not all(isinstance(x, str) for x in pair)
        ):
            raise ConfigInvalid("every alias entry must be a pair of strings")
    params["aliases"] = [list(pair) for pair in aliases]
    return params


def check_paths(input_params):
    """
    Checks that every configured input path resolves

    The output directory is the only path allowed not to exist yet.
    """

    params = _fill(input_params, config.path_params, "paths")
    for key, value in params.items():
        if value is None:
            continue
        if not isinstance(value, str):
            raise ConfigInvalid("path " + key + " is not a string")
        if key != "out" and not os.path.exists(value):
            raise ConfigInvalid("path " + key + " does not exist: " + value)
    return params


@dataclass
class RunConfig:
    """
    The merged, checked configuration of one run

    Every section is a plain dictionary so that the whole document can be
    dumped verbatim into the run manifest.
    """

    bundle: dict = field(default_factory=dict)
    budgets: dict = field(default_factory=dict)
    loop: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    seed: int = config.seed
    workers: int = config.numcores

    def as_dict(self):
        return asdict(self)


_SECTIONS = ["bundle", "budgets", "loop", "backend", "ablation", "eval", "paths"]


def _merge(base, update):
    """
    Recursively merges update into base (update wins)
    """

    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def env_overrides(environ=None, prefix=config.env_prefix):
    """
    Collects configuration overrides from the environment

    Variables are named PREFIX + KEY, nested keys joined with a double
    underscore, e.g. CLINSTREAM_LOOP__TAU_UNCERTAINTY=0.5.
    Values are parsed as YAML scalars.

    Returns
    -------
    dict
        nested overrides
    """

    if environ is None:
        environ = os.environ

    overrides = {}
    for name, raw in environ.items():
        if not name.startswith(prefix):
            continue
        path = name[len(prefix):].lower().split("__")
        if path[0] not in _SECTIONS + ["seed", "workers"]:
            # e.g. the API key variable itself
            continue
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = yaml.safe_load(raw)

    return overrides


def load_config(path=None, overrides=None, environ=None):
    """
    Builds the layered run configuration: defaults < file < environment < flags

    Parameters
    ----------
    path : str, optional
        YAML configuration file
    overrides : dict, optional
        values from command-line flags (nested like the file)
    environ : dict, optional
        the environment (defaults to os.environ)

    Returns
    -------
    RunConfig
        the checked configuration

    Raises
    ------
    ConfigInvalid
    """

    document = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigInvalid("configuration file not found: " + str(path))
        with open(path) as f:
            try:
                loaded = yaml.safe_load(f)
            except yaml.YAMLError as err:
                raise ConfigInvalid("configuration file is not valid YAML: " + str(err))
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigInvalid("configuration file must hold a mapping")
        _merge(document, loaded)

    _merge(document, env_overrides(environ))
    if overrides:
        _merge(document, overrides)

    unknown = set(document) - set(_SECTIONS + ["seed", "workers"])
    if unknown:
        raise ConfigInvalid("unknown configuration section(s): " + ", ".join(sorted(unknown)))

    budgets = check_budget_params(document.get("budgets"))
    return RunConfig(
        bundle=check_bundle_params(document.get("bundle")),
        budgets=budgets,
        loop=check_loop_params(document.get("loop"), budgets["buffer"]),
        backend=check_backend_params(document.get("backend")),
        ablation=check_ablation_params(document.get("ablation")),
        eval=check_eval_params(document.get("eval")),
        paths=check_paths(document.get("paths")),
        seed=_check_int(document.get("seed", config.seed), "seed", 0),
        workers=_check_int(document.get("workers", config.numcores), "workers", 1),
    )
