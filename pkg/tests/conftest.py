import numpy as np
import pytest

from motionscale.motion_codec import TokenVocab
from motionscale.synth_world import WindowSpec, WorldConfig, generate_dataset


@pytest.fixture(scope="session")
def vocab():
    return TokenVocab()


@pytest.fixture(scope="session")
def small_world():
    return WorldConfig(seed=5, num_context_agents=6, num_modeled=3, num_road_segments=8, num_traffic_lights=2,
                       num_route_segments=2)


@pytest.fixture(scope="session")
def short_window():
    return WindowSpec(history_s=1.0, future_s=2.0, stride_s=1.5)


@pytest.fixture(scope="session")
def small_dataset(small_world, vocab, short_window):
    return generate_dataset(small_world, vocab, short_window, segment_ids=range(3))


def batch_of(ds, idx):
    return ds.subset(list(idx)).arrays


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------------ acceptance summary

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    _ACCEPTANCE[number] = (title, rep.passed and rep.when == "call", detail, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail, secs = _ACCEPTANCE[number]
        line = f"{'PASS' if ok else 'FAIL'}  {number:2d}. {title} ({secs:.1f} s)"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
