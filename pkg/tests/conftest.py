import numpy as np
import pytest

from transport_ate import CombinedSample
from transport_ate.simulation import ScenarioSpec, generate

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Record an acceptance criterion outcome for the end-of-run summary."""
    store = request.config.stash[_CRITERIA]

    def record(number: int, title: str, ok: bool, detail: str = ""):
        store[number] = (title, bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        title, ok, detail = store[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title} | {detail}")


@pytest.fixture(scope="session")
def reference_sample():
    """One draw of the reference scenario (about 2800 trial rows, 10000 target rows)."""
    spec = ScenarioSpec.reference(seed=11).resolved()
    return generate(spec, np.random.default_rng([11, 0]))


@pytest.fixture
def tiny_sample():
    X = np.array([[0.1, 1.0], [0.5, -1.0], [1.2, 0.3], [-0.4, 0.8], [0.9, 0.2],
                  [1.5, -0.7], [0.3, 0.3], [-1.0, 2.0]])
    return CombinedSample(
        covariates=X,
        study=np.array([1, 1, 1, 1, 0, 0, 0, 0]),
        treatment=np.array([1, 0, 1, 0, np.nan, np.nan, np.nan, np.nan]),
        outcome=np.array([3.0, 1.0, 4.0, 0.5, np.nan, np.nan, np.nan, np.nan]),
        covariate_names=("X1", "X2"),
    )
