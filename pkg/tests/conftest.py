import pytest

from ClinStream import config
from ClinStream.agents import StepConfig
from ClinStream.backend import MockBackend
from ClinStream.bundler import serialize_stream
from ClinStream.synth import sepsis_demo_events, sepsis_demo_protocol


@pytest.fixture
def demo_stream():
    return serialize_stream(sepsis_demo_events())


@pytest.fixture
def demo_protocol():
    return sepsis_demo_protocol()


@pytest.fixture
def demo_backend():
    return MockBackend(config.backend_params["mock_script"])


@pytest.fixture
def golden_settings():
    # the Steward absorbs every bundle
    return StepConfig(loop={"l_limit": 0})


@pytest.fixture
def settings():
    return StepConfig()
