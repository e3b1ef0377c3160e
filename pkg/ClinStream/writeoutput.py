"""
Handles all output, writing to files etc
"""

# standard libs
from functools import wraps
import hashlib
import json
import logging
import os
import shutil
import time

# external libs
import tabulate

# internal libs
from .check_inputs import OutputExists

logger = logging.getLogger(__name__)

# define some line spacings
spc = "\n"
dblspc = "\n \n"

MANIFEST = "manifest.json"


def _line(preamble, value):
    return "{preamble:30s}: {value}".format(preamble=preamble, value=value)


def _fmt(x, fmt="{:.3f}"):
    return "n/a" if x is None else fmt.format(x)


def write_engine_data(engine):
    """
    Writes information about the engine settings

    Parameters
    ----------
    engine : obj
        The Engine object

    Returns
    -------
    str:
        The formatted text output string
    """

    init_str = "Engine settings:" + dblspc

    backend_str = _line("Backend", engine.backend_name)
    budget = engine.budgets
    budget_str = _line(
        "Budgets (sys/rul/sta/buf)",
        "{} / {} / {} / {}".format(
            budget["system"], budget["rules"], budget["state"], budget["buffer"]
        ),
    )
    backend_info = backend_str + spc + budget_str + spc

    loop = engine.loop
    tau_str = _line("Uncertainty threshold", "{:<.3g}".format(loop["tau_uncertainty"]))
    limit_str = _line("Buffer limit", loop["l_limit"])
    cand_str = _line("Max candidate rules", loop["max_candidates"])
    look_str = _line("Router lookback", "{} h".format(loop["router_lookback_hours"]))
    loop_info = tau_str + spc + limit_str + spc + cand_str + spc + look_str + spc

    ablation = engine.ablation
    abl_str = _line(
        "Protocol / Mitosis / Auditor",
        "{} / {} / {}".format(
            ablation["use_global_protocol"], ablation["use_mitosis"], ablation["use_auditor"]
        ),
    )
    risk_str = _line("Risk vocabulary terms", len(engine.risk))
    ablation_info = abl_str + spc + risk_str + spc

    output = init_str + backend_info + loop_info + ablation_info + spc

    return output


def write_corpus_stats(stats):
    """
    Writes the statistics of a serialized corpus

    Parameters
    ----------
    stats : CorpusStats

    Returns
    -------
    str:
        The formatted text output string
    """

    init_str = "Corpus statistics:" + dblspc

    count_str = (
        _line("Stays / bundles / events", "{} / {} / {}".format(
            stats.n_stays, stats.n_bundles, stats.n_events
        ))
        + spc
    )
    mean_str = (
        _line("Events per bundle", "{:<.2f}".format(stats.events_per_bundle))
        + spc
        + _line("Bundles per stay", "{:<.2f}".format(stats.bundles_per_stay))
        + spc
        + _line("Events per stay", "{:<.2f}".format(stats.events_per_stay))
        + spc
    )

    rows = [[kind, value] for kind, value in stats.per_kind_per_bundle.items()]
    kind_tbl = tabulate.tabulate(
        rows,
        ["kind", "per bundle"],
        tablefmt="presto",
        floatfmt="6.2f",
        stralign="right",
    )

    output = init_str + count_str + mean_str + dblspc + kind_tbl + spc

    return output


METRIC_HEADERS = [
    "Configuration",
    "Med R@5",
    "Lab R@5",
    "Proc R@5",
    "Adherence",
    "Activation",
    "Equivalence",
]


def metrics_row(label, report):
    recall = report.recall_at_5
    return [
        label,
        _fmt(recall.get("Medication")),
        _fmt(recall.get("LabOrder")),
        _fmt(recall.get("Procedure")),
        _fmt(report.adherence),
        _fmt(report.activation_rate),
        _fmt(report.equivalence_mean, "{:.2f}"),
    ]


def write_metrics(reports):
    """
    Writes one metrics table row per configuration

    Parameters
    ----------
    reports : dict
        label -> MetricsReport

    Returns
    -------
    str
        The output text string
    """

    rows = [metrics_row(label, report) for label, report in reports.items()]
    table = tabulate.tabulate(rows, METRIC_HEADERS, tablefmt="presto", stralign="right")

    output = "Evaluation metrics" + dblspc + table + dblspc
    for label, report in reports.items():
        counts = ", ".join("{}={}".format(k, v) for k, v in report.counts.items())
        output += _line(label + " scored steps", counts) + spc
        output += _line(label + " skipped steps", report.skipped_empty_truth) + spc
        if report.failed_trajectories:
            output += _line(label + " failed stays", len(report.failed_trajectories)) + spc

    return output


def write_protocol(protocol):
    """
    Human-readable listing of a protocol store

    Returns
    -------
    str
        The output text string
    """

    header = (
        _line("Rules", len(protocol))
        + spc
        + _line("Frozen", protocol.frozen)
        + spc
        + _line("Version hash", protocol.version_hash)
        + dblspc
    )
    rows = [[r.rule_id, r.category, r.trigger_condition] for r in protocol]
    table = tabulate.tabulate(rows, ["rule", "category", "trigger"], tablefmt="presto")
    texts = spc.join("[{}] {}".format(r.rule_id, r.rule_text) for r in protocol)

    return header + table + dblspc + texts + spc


def write_induction(result):
    """
    Summary of an induction run

    Parameters
    ----------
    result : Phase1Result

    Returns
    -------
    str
        The output text string
    """

    counts = result.counts
    output = "Protocol induction" + dblspc
    output += _line("Trajectories / steps", "{} / {}".format(
        counts["trajectories"], counts["steps"]
    )) + spc
    output += _line("Failures / proposals", "{} / {}".format(
        counts["failures"], counts["proposed"]
    )) + spc
    output += _line("Admitted / rejected", "{} / {}".format(
        counts["admitted"], counts["rejected"]
    )) + spc
    output += _line("Final rule count", len(result.protocol)) + spc
    output += _line("Version hash", result.protocol.version_hash) + spc

    return output


# files


def jsonl_text(records):
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records)


def json_text(document):
    return json.dumps(document, indent=2, ensure_ascii=False, sort_keys=True) + "\n"


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(jsonl_text(records))


def file_digest(path):
    """
    SHA-256 of a file's bytes
    """

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run(out_dir, files, manifest, overwrite=False):
    """
    Writes a run's artifacts so that out_dir holds either the complete new
    run or the previous one

    Files go to a sibling staging directory, the manifest last; the staging
    directory then replaces out_dir.

    Parameters
    ----------
    out_dir : str
    files : dict
        file name -> text content
    manifest : dict
        written as manifest.json
    overwrite : bool, optional

    Raises
    ------
    OutputExists
        if out_dir already holds a manifest and overwrite is False
    """

    out_dir = os.path.abspath(out_dir)
    if os.path.exists(os.path.join(out_dir, MANIFEST)) and not overwrite:
        raise OutputExists(out_dir + " already holds a run; pass --overwrite to replace it")

    staging = out_dir + ".staging-" + str(os.getpid())
    shutil.rmtree(staging, ignore_errors=True)
    os.makedirs(staging)
    for name, content in files.items():
        with open(os.path.join(staging, name), "w", encoding="utf-8") as f:
            f.write(content)
    with open(os.path.join(staging, MANIFEST), "w", encoding="utf-8") as f:
        f.write(json_text(manifest))

    previous = None
    if os.path.exists(out_dir):
        previous = out_dir + ".previous-" + str(os.getpid())
        os.replace(out_dir, previous)
    os.replace(staging, out_dir)
    if previous is not None:
        shutil.rmtree(previous, ignore_errors=True)
    logger.info("wrote %s", out_dir)
    return out_dir


# timing wrapper
def timing(f):
    @wraps(f)
    def wrap(*args, **kw):
        ts = time.time()
        result = f(*args, **kw)
        te = time.time()
        logger.info("func:%r took: %2.4f sec", f.__name__, te - ts)
        return result

    return wrap
