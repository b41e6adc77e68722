import copy

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from caedfkd.embedding_space import StubProvider, init_embedding_space, make_categories

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance results collected by tests/test_acceptance.py, printed at session end
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def space10():
    names = ("circle", "square", "triangle", "ring", "cross", "hstripes", "vstripes", "checker", "xmark", "dots")
    return init_embedding_space(make_categories(names), StubProvider(0, 64), "name")


@pytest.fixture
def small_space():
    return init_embedding_space(make_categories(["a", "b", "c"]), StubProvider(1, 8), "name")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "seed": 0,
    "data": {"K": 3, "per_class": 30},
    "embeddings": {"dim": 16, "gen_dim": 16},
    "cend": {"n_sources": 2},
    "generator": {"base_channels": 8, "bank_capacity": 256},
    "student": {"epochs": 2, "iters_per_epoch": 1, "s_steps": 2, "batch_size": 16, "feature_width": 16},
    "teacher": {"epochs": 2, "accuracy_floor": 0.0},
}


@pytest.fixture
def tiny_cfg():
    from caedfkd.config import config_from_dict

    return config_from_dict(copy.deepcopy(TINY))


@pytest.fixture
def tiny_raw():
    return copy.deepcopy(TINY)
