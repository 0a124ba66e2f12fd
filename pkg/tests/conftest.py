import sys
from pathlib import Path

import pytest

from absa_forge.corpus import Triplet

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixture_xml() -> bytes:
    return (FIXTURES / "restaurant_fixture.xml").read_bytes()


@pytest.fixture
def speed_triplet() -> Triplet:
    s = "The speed is incredible and I am more than satisfied."
    return Triplet("lap1#0", s, "speed", 4, 9, 1, "laptop")


@pytest.fixture
def paneer_triplet() -> Triplet:
    s = "The palak paneer was standard, and I was not a fan of the malai kofta."
    return Triplet("res1#0", s, "palak paneer", 4, 16, 0, "restaurant")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
