import numpy as np
import pytest

from cltwin.calibration import calibrate
from cltwin.field import NoiseSpec, PerturbationSpec, make_field
from cltwin.link import replica_topology
from cltwin.qot import default_curve

# Seeds of the perturbed replica used by the calibration oracles.
ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def replica():
    return replica_topology()


@pytest.fixture(scope="session")
def curve():
    return default_curve()


@pytest.fixture(scope="session")
def calibrated_noise_free(replica):
    """Per seed: (field, twin history through stage 4), noise-free telemetry."""
    out = {}
    for seed in ACCEPTANCE_SEEDS:
        fld = make_field(replica, PerturbationSpec(), seed, NoiseSpec.none())
        out[seed] = (fld, calibrate(replica, fld, 4))
    return out


@pytest.fixture(scope="session")
def calibrated_ocm_noise(replica):
    """Per seed: (field, twin history) with 0.1 dB OCM noise only."""
    out = {}
    for seed in ACCEPTANCE_SEEDS:
        fld = make_field(replica, PerturbationSpec(), seed, NoiseSpec(0.1, 0.0, 0.0))
        out[seed] = (fld, calibrate(replica, fld, 4))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(n, ok, detail):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
