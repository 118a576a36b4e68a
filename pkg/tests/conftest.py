import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sleepkit.nn.models import SleepPPGConfig
from sleepkit.records import SynthProfile, synthesize_record

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Desk-scale setup shared by the learning tests: 64 windows (32 min) at 128 Hz,
# resampled to 256 samples per window.
SMALL_WINDOWS = 64
SMALL_PROFILE = SynthProfile(n_windows=SMALL_WINDOWS, fs=128.0)
SMALL_MODEL = SleepPPGConfig.toy(
    n_windows=SMALL_WINDOWS, samples_per_window=256, resconv_filters=(8, 16, 16),
    embedding=16, tcn_filters=16,
)


@pytest.fixture(scope="session")
def small_records():
    return [synthesize_record(i, SMALL_PROFILE) for i in range(40)]


@pytest.fixture(scope="session")
def small_dataset(small_records):
    from sleepkit.pipeline import build_dataset

    return build_dataset(small_records, "sleepppg", SMALL_MODEL)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion lines recorded by test_acceptance.py, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
