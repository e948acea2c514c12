import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four 32^3 phantoms with the default three protocols (3 train, 1 test)."""
    from neuronet.phantom import PhantomSpec, generate_dataset
    out = tmp_path_factory.mktemp("phantoms")
    manifest = generate_dataset(PhantomSpec(), 4, seed=7, out_dir=str(out), splits={"train": 3, "test": 1})
    return out, manifest


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Shared list of (criterion, status, detail) rows shown in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_ACCEPTANCE_KEY, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, status, detail in sorted(rows):
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
