import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from climgan.config import desk_configs
from climgan.data import SynthSpec, build_contexts, normalize, synthesize

settings.register_profile(
    "climgan", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("climgan")


@pytest.fixture(scope="session")
def synth():
    """(raw dataset, scenario months, scenario dict) for the default desk spec."""
    return synthesize(SynthSpec())


@pytest.fixture(scope="session")
def desk_data(synth):
    ds, _, _ = synth
    return normalize(ds)


@pytest.fixture(scope="session")
def desk_train(desk_data):
    return build_contexts(desk_data, 2, "train")


@pytest.fixture(scope="session")
def desk_test(desk_data):
    return build_contexts(desk_data, 2, "test")


@pytest.fixture
def desk_cfg():
    return desk_configs()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per criterion; echoed again in the terminal summary."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
