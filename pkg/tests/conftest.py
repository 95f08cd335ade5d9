import os
import sys
import zlib

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

_CRITERIA: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, ok: bool, detail: str) -> None:
    _CRITERIA[name] = (bool(ok), detail)


@pytest.fixture
def criterion():
    """check(name, ok, detail): record one acceptance line, then assert it."""

    def check(name: str, ok: bool, detail: str = "") -> None:
        record_criterion(name, ok, detail)
        assert ok, f"{name}: {detail}"

    return check


@pytest.fixture
def rng(request):
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=_criterion_key):
        ok, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def _criterion_key(name: str):
    head = name.split()[0]
    num = "".join(ch for ch in head if ch.isdigit())
    return (int(num) if num else 99, name)
