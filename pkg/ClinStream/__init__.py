"""
ClinStream: streaming next-step clinical prediction over serialized event
bundles, with an induced institutional protocol and a per-patient state
"""

__version__ = "0.1.0"

# global imports
from . import config
from . import check_inputs
from .models import Engine
from .ingest import ClinicalEvent, EventKind, parse_tables
from .bundler import EventBundle, SerializedStream, serialize_stream, read_corpus
from .memory import GlobalProtocol, GlobalRule, IndividualProtocol
from .backend import MockBackend, HTTPBackend, make_backend
from .agents import StepConfig, step
from .reflector import phase1_run
from .evaluate import MetricsReport, prequential_run
from . import writeoutput
