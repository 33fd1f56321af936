import numpy as np
import pytest

from heteronet.digraph import parse_digraph
from heteronet.realize import RealizationParams, realize

KS_TEXT = "1->2\n2->3\n2->4\n3->1\n4->1\n"
B3B3C4_TEXT = KS_TEXT + "3->4\n"


@pytest.fixture
def ks_graph():
    return parse_digraph(KS_TEXT)


@pytest.fixture
def ks():
    return realize(parse_digraph(KS_TEXT))


@pytest.fixture
def b3b3c4():
    return realize(parse_digraph(B3B3C4_TEXT), force=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def ks_with(eta=0.05, eps=0.02):
    return realize(parse_digraph(KS_TEXT), RealizationParams(eps, eta))


def random_points_in_subspace(rng, n, support, count, radius=(0.0, 1.2)):
    """Random points with the given coordinate support and norm inside ``radius``."""
    x = np.zeros((count, n))
    y = rng.standard_normal((count, len(support)))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    r = rng.uniform(*radius, size=(count, 1))
    x[:, support] = y * r
    return x


# acceptance results, filled by test_acceptance.py and echoed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
