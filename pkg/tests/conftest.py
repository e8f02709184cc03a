import functools

import pytest

from eqmorse import critstruct as cs
from eqmorse import flow as fl
from eqmorse import geometry as g


@functools.lru_cache(maxsize=None)
def _scenario(name, params=()):
    return g.build_scenario(name, dict(params))


@functools.lru_cache(maxsize=None)
def _orbits(name, params=()):
    return cs.find_critical_orbits(_scenario(name, params))


@functools.lru_cache(maxsize=None)
def _covers(name, params=()):
    return fl.compute_covers(_scenario(name, params), _orbits(name, params))


@pytest.fixture(scope="session")
def scenario():
    return lambda name, **kw: _scenario(name, tuple(sorted(kw.items())))


@pytest.fixture(scope="session")
def orbits():
    return lambda name, **kw: _orbits(name, tuple(sorted(kw.items())))


@pytest.fixture(scope="session")
def covers():
    """``(covers, lines)``, computed once per scenario for the whole session."""
    return lambda name, **kw: _covers(name, tuple(sorted(kw.items())))


# acceptance criterion -> (passed, title, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}  {detail}")
