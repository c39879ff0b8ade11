import numpy as np
import pytest

from mrblat.kinematics import KinematicMatrices
from mrblat.waveform import SignalModel, WaveformConfig


@pytest.fixture(scope="session")
def model():
    return SignalModel.default()


@pytest.fixture(scope="session")
def quiet_model():
    """Reference setup with the receiver noise switched off."""
    return SignalModel.default(WaveformConfig(noise_variance=0.0))


@pytest.fixture(scope="session")
def kin():
    return KinematicMatrices(0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
