import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neurodrive.datasets import ProtocolConfig, build_dataset
from neurodrive.decoder import TrainSchedule, DecoderConfig, split_by_session, train
from neurodrive.signals import RecordingMeta, SignatureSpec

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_meta():
    return RecordingMeta.desk()


@pytest.fixture(scope="session")
def desk_signatures(desk_meta):
    return SignatureSpec.default(desk_meta.vocabulary, desk_meta.n_channels, seed=0, snr=3.0)


@pytest.fixture(scope="session")
def desk_dataset(desk_meta, desk_signatures):
    """Desk protocol at snr 3: 16 sessions x 48 trials, cleaned and featurised."""
    return build_dataset(desk_meta, desk_signatures, ProtocolConfig(), seed=0)


@pytest.fixture(scope="session")
def desk_splits(desk_dataset):
    return split_by_session(desk_dataset, n_val=3, n_test=3)


@pytest.fixture(scope="session")
def desk_decoder(desk_splits):
    tr, va, _ = desk_splits
    model, log = train(tr, va, DecoderConfig(), TrainSchedule.desk(), seed=0)
    return model, log
