import numpy as np
import pytest

from retpop.retnet import ModelConfig
from retpop.world_model import init_bundle

_criteria = {}


def small_config(**kw):
    base = dict(n_layers=2, n_heads=2, d_model=16, d_ffn=32, tokens_per_obs=4, vocab_size=12,
                n_actions=3, blocks_per_chunk=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def bundle(config):
    return init_bundle(config, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(marker)
        if prev is None or prev == "PASS":
            _criteria[marker] = "PASS" if report.outcome == "passed" else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_criteria.items()):
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}")
