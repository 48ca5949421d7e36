import numpy as np
import pytest

from deskmtl.encoder import EncoderConfig
from deskmtl.pipeline import SynthFamilyConfig, generate_synthetic
from deskmtl.scheduler import SchedulerConfig
from deskmtl.trainer import Mode, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_encoder_config():
    return EncoderConfig(vocab_size=128, max_seq_len=16, d_model=16, n_layers=2, n_heads=2, d_ff=32)


@pytest.fixture(scope="session")
def tiny_suite():
    cfg = SynthFamilyConfig(vocab=128, lexicon_size=8, seq_len=(6, 10), examples_per_task=120, hit_threshold=2)
    return generate_synthetic(cfg, families=2, tasks_per_family=2, seed=3)


@pytest.fixture(scope="session")
def tiny_data(tiny_suite, tiny_encoder_config):
    return tiny_suite.datasets(tiny_encoder_config.vocab_size, tiny_encoder_config.max_seq_len)


@pytest.fixture
def make_cfg(tiny_suite, tiny_encoder_config):
    """TrainConfig factory over the tiny suite."""

    def build(mode=Mode.MTL_PREFINETUNE, tasks=None, **kw):
        if tasks is None:
            tasks = tiny_suite.specs if mode is Mode.MTL_PREFINETUNE else tiny_suite.specs[:1]
        kw.setdefault("max_steps", 6)
        kw.setdefault("per_task_batch", 8)
        kw.setdefault("lr0", 1e-3)
        kw.setdefault("scheduler", SchedulerConfig(eval_interval=3))
        kw.setdefault("eval_batch", 64)
        return TrainConfig(mode, list(tasks), encoder=tiny_encoder_config, **kw)

    return build


# -- acceptance summary: one line per criterion --------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, name = mark.args
    if call.when == "setup" and call.excinfo is not None:
        _CRITERIA[n] = (name, "FAIL", "setup error")
    elif call.when == "call":
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[n] = (name, "FAIL" if call.excinfo is not None else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA, key=int):
        name, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {int(n):2d} {status}  {name}  {detail}".rstrip())
