import numpy as np
import pytest

from dplx.device import desk_spec, full_spec, synthesize_device


@pytest.fixture(scope="session")
def desk():
    return synthesize_device(desk_spec())


@pytest.fixture(scope="session")
def full():
    return synthesize_device(full_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def desk_file(desk, tmp_path_factory):
    from dplx.device import save_device

    path = tmp_path_factory.mktemp("dev") / "desk.json"
    save_device(desk, path)
    return path


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
