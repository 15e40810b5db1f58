import numpy as np
import pytest

from mdopt import data, nn


def tiny_spec(**kw):
    base = dict(n_domains=3, users_per_domain=40, items_per_domain=30, samples_per_domain=300, seed=0)
    base.update(kw)
    return data.SyntheticSpec(**base)


@pytest.fixture(scope="session")
def tiny_ds():
    return data.split(data.generate(tiny_spec()), seed=0)


@pytest.fixture(scope="session")
def tiny_model(tiny_ds):
    return nn.ModelSpec(tiny_ds.num_users, tiny_ds.num_items, embed_dim=4, hidden=(8, 4))


@pytest.fixture(scope="session")
def conflict6_ds():
    return data.split(data.generate(data.conflict6(0)), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one PASS/FAIL line per criterion -----------------------

_CRITERIA = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _CRITERIA.append((props["criterion"], "PASS" if report.passed else "FAIL", props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, outcome, detail in sorted(_CRITERIA, key=lambda c: int(c[0])):
        terminalreporter.write_line(f"criterion {num:>2}: {outcome}  {detail}")
