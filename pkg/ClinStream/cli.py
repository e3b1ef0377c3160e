"""
Command-line interface

Subcommands: ingest, bundle, phase1, eval, inspect and synth. Every command
that writes output writes one directory holding its artifacts and a
manifest.json.
"""

# standard libraries
import argparse
import json
import logging
import os
import sys
import time

# internal modules
from . import __version__
from . import writeoutput
from .bundler import corpus_lines, load_panels, read_corpus, serialize_stream, stream_stats
from .check_inputs import (
    ClinStreamError,
    InputError,
    InvariantViolation,
    ProtocolError,
    TemplateError,
    TrainTestOverlap,
    load_config,
)
from .ingest import event_to_dict, load_schema_map, parse_tables, read_events_jsonl
from .memory import load_protocol
from .models import Engine
from .synth import sepsis_demo_protocol, synth_events

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2
EXIT_PROTOCOL = 3
EXIT_INVARIANT = 4

EVENTS_FILE = "events.jsonl"
CORPUS_FILE = "corpus.jsonl"
PROTOCOL_FILE = "protocol.json"


def exit_code(err):
    """
    Maps a library exception to the process exit code
    """

    if isinstance(err, (InvariantViolation, TrainTestOverlap)):
        return EXIT_INVARIANT
    if isinstance(err, ProtocolError):
        return EXIT_PROTOCOL
    if isinstance(err, (InputError, TemplateError)):
        return EXIT_INPUT
    return EXIT_FAILURE


def _resolve(path, default_name):
    if os.path.isdir(path):
        return os.path.join(path, default_name)
    return path


def _overrides(args):
    overrides = {}
    backend = {}
    if getattr(args, "backend", None):
        backend["kind"] = args.backend
    if getattr(args, "mock_script", None):
        backend["mock_script"] = args.mock_script
    if backend:
        overrides["backend"] = backend
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "out", None):
        overrides["paths"] = {"out": args.out}
    return overrides


def _run_config(args):
    return load_config(args.config, _overrides(args))


def _manifest(command, run_config, started, **extra):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": run_config.as_dict(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    manifest.update(extra)
    return manifest


def _load_corpus(path):
    corpus = read_corpus(_resolve(path, CORPUS_FILE))
    logger.info(writeoutput.write_corpus_stats(stream_stats(corpus)))
    return corpus


# commands


def cmd_ingest(args):
    """
    Relational tables -> events JSONL
    """

    started = time.time()
    run_config = _run_config(args)
    schema_map = load_schema_map(args.schema_map or run_config.paths["schema_map"])

    tables = {}
    for spec in args.table:
        kind, sep, path = spec.partition("=")
        if not sep or not path:
            raise InputError("tables are given as kind=path, got " + spec)
        tables[kind] = path
    if not tables:
        raise InputError("no tables given")

    result = parse_tables(tables, schema_map)
    events = [event_to_dict(ev) for stay in result.events.values() for ev in stay]
    errors = [
        {"table": r.table, "row_index": r.row_index, "reason": r.reason}
        for r in result.row_errors
    ]
    files = {
        EVENTS_FILE: writeoutput.jsonl_text(events),
        "row_errors.jsonl": writeoutput.jsonl_text(errors),
    }
    manifest = _manifest(
        "ingest",
        run_config,
        started,
        counts={
            "stays": len(result.events),
            "events": result.n_events,
            "row_errors": len(errors),
        },
        table_errors=dict(result.table_errors),
    )
    writeoutput.write_run(run_config.paths["out"], files, manifest, args.overwrite)
    return EXIT_OK


def cmd_bundle(args):
    """
    Events JSONL -> corpus JSONL plus statistics
    """

    started = time.time()
    run_config = _run_config(args)
    panels = load_panels(run_config.paths["panels"])

    ingested = read_events_jsonl(_resolve(args.events, EVENTS_FILE))
    if ingested.row_errors:
        logger.warning("%d event line(s) skipped", len(ingested.row_errors))
    corpus = [
        serialize_stream(events, run_config.bundle, panels)
        for events in ingested.events.values()
    ]
    stats = stream_stats(corpus)
    logger.info(writeoutput.write_corpus_stats(stats))

    files = {
        CORPUS_FILE: "".join(line + "\n" for line in corpus_lines(corpus)),
        "stats.json": writeoutput.json_text(stats.as_dict()),
    }
    manifest = _manifest("bundle", run_config, started, counts=stats.as_dict())
    writeoutput.write_run(run_config.paths["out"], files, manifest, args.overwrite)
    return EXIT_OK


def cmd_phase1(args):
    """
    Corpus -> frozen protocol plus induction log
    """

    started = time.time()
    run_config = _run_config(args)
    corpus_path = _resolve(args.corpus, CORPUS_FILE)
    corpus = _load_corpus(corpus_path)

    seed = None
    seed_path = args.seed_protocol or run_config.paths["protocol"]
    if seed_path:
        seed = load_protocol(_resolve(seed_path, PROTOCOL_FILE))

    engine = Engine.from_config(run_config, write_info=True)
    result = engine.induce_protocol(corpus, seed_protocol=seed)
    logger.info(writeoutput.write_induction(result))

    files = {
        PROTOCOL_FILE: writeoutput.json_text(result.protocol.to_dict()),
        "induction_log.jsonl": writeoutput.jsonl_text(result.log),
    }
    manifest = _manifest(
        "phase1",
        run_config,
        started,
        training_corpus_digest=writeoutput.file_digest(corpus_path),
        protocol_version_hash=result.protocol.version_hash,
        calls=engine.backend.calls,
        counts=result.counts,
    )
    writeoutput.write_run(run_config.paths["out"], files, manifest, args.overwrite)
    return EXIT_OK


def check_separation(protocol_path, corpus_digest):
    """
    Raises
    ------
    TrainTestOverlap
        if the protocol was induced on the corpus with this digest
    """

    manifest_path = os.path.join(os.path.dirname(os.path.abspath(protocol_path)),
                                 writeoutput.MANIFEST)
    if not os.path.isfile(manifest_path):
        return
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("training_corpus_digest") == corpus_digest:
        raise TrainTestOverlap(
            "the evaluation corpus is the corpus the protocol was induced on"
        )


def cmd_eval(args):
    """
    Corpus + frozen protocol -> metrics plus step traces
    """

    started = time.time()
    run_config = _run_config(args)
    corpus_path = _resolve(args.corpus, CORPUS_FILE)
    protocol_path = _resolve(args.protocol or run_config.paths["protocol"] or "", PROTOCOL_FILE)
    if not os.path.isfile(protocol_path):
        raise InputError("protocol store not found: " + protocol_path)

    digest = writeoutput.file_digest(corpus_path)
    check_separation(protocol_path, digest)
    protocol = load_protocol(protocol_path)
    corpus = _load_corpus(corpus_path)

    engine = Engine.from_config(run_config, write_info=True)
    judge = engine.backend if args.judge else None
    report, traces = engine.evaluate(corpus, protocol, judge=judge)
    print(writeoutput.write_metrics({args.label: report}))

    files = {
        "metrics.json": report.to_json() + "\n",
        "traces.jsonl": writeoutput.jsonl_text(t.to_dict() for t in traces),
    }
    manifest = _manifest(
        "eval",
        run_config,
        started,
        corpus_digest=digest,
        protocol_version_hash=protocol.version_hash,
        calls=engine.backend.calls,
        incidents=report.incidents,
    )
    writeoutput.write_run(run_config.paths["out"], files, manifest, args.overwrite)
    return EXIT_OK


def cmd_inspect(args):
    """
    Prints a protocol store as a rule listing
    """

    protocol = load_protocol(_resolve(args.protocol, PROTOCOL_FILE))
    print(writeoutput.write_protocol(protocol))
    return EXIT_OK


def cmd_synth(args):
    """
    Seed -> synthetic events, corpus and the demonstration protocol
    """

    started = time.time()
    overrides = {"seed": args.seed} if args.seed is not None else {}
    overrides.update(_overrides(args))
    run_config = load_config(args.config, overrides)
    panels = load_panels(run_config.paths["panels"])

    stays = synth_events(run_config.seed, args.stays)
    corpus = [serialize_stream(events, run_config.bundle, panels) for events in stays.values()]
    stats = stream_stats(corpus)
    logger.info(writeoutput.write_corpus_stats(stats))

    events = [event_to_dict(ev) for stay in stays.values() for ev in stay]
    files = {
        EVENTS_FILE: writeoutput.jsonl_text(events),
        CORPUS_FILE: "".join(line + "\n" for line in corpus_lines(corpus)),
        PROTOCOL_FILE: writeoutput.json_text(sepsis_demo_protocol().to_dict()),
    }
    manifest = _manifest("synth", run_config, started, counts=stats.as_dict())
    writeoutput.write_run(run_config.paths["out"], files, manifest, args.overwrite)
    return EXIT_OK


# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--backend", choices=["mock", "http"], help="chat backend kind")
    common.add_argument("--mock-script", help="JSONL script for the mock backend")
    common.add_argument("--workers", type=int, help="parallel trajectories")
    common.add_argument("--out", help="output directory")
    common.add_argument(
        "--overwrite", action="store_true", help="replace an existing output directory"
    )
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="clinstream",
        description="Streaming clinical next-step prediction with induced protocols",
    )
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="tables to events JSONL")
    p.add_argument(
        "--table", action="append", default=[], metavar="KIND=PATH",
        help="table of kind diagnoses, procedures, labs, medications or events",
    )
    p.add_argument("--schema-map", help="YAML mapping of logical fields to columns")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("bundle", parents=[common], help="events to serialized corpus")
    p.add_argument("events", help="events JSONL file or ingest output directory")
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("phase1", parents=[common], help="induce a frozen protocol")
    p.add_argument("corpus", help="corpus JSONL file or bundle output directory")
    p.add_argument("--seed-protocol", help="protocol store to start from")
    p.set_defaults(func=cmd_phase1)

    p = sub.add_parser("eval", parents=[common], help="prequential evaluation")
    p.add_argument("corpus", help="corpus JSONL file or bundle output directory")
    p.add_argument("--protocol", help="frozen protocol store or phase1 output directory")
    p.add_argument("--judge", action="store_true", help="score clinical equivalence")
    p.add_argument("--label", default="ClinStream", help="row label of the metrics table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", parents=[common], help="list the rules of a protocol")
    p.add_argument("protocol", help="protocol store or phase1 output directory")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic demo corpus")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--stays", type=int, default=20, help="number of random stays")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None):
    """
    Entry point; returns the process exit code
    """

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ClinStreamError as err:
        logger.error("%s: %s", type(err).__name__, err)
        return exit_code(err)
    except OSError as err:
        logger.error("%s", err)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
