import sys

import numpy as np
import pytest

from unetdr.dataset import Case
from unetdr.phantom import generate_phantom
from unetdr.preprocess import normalize_volume


def make_cases(n, offset=0, extents=(16, 16, 16)):
    out = []
    for i in range(n):
        img, mask = generate_phantom(offset + i, extents)
        out.append(Case(f"t{offset + i:03d}", normalize_volume(img).data, mask.data))
    return out


@pytest.fixture(scope="session")
def tiny_cases():
    return make_cases(8)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
