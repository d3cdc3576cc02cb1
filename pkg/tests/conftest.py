from pathlib import Path

import numpy as np
import pytest

from unrollgnn.energy import QuadraticSmooth
from unrollgnn.graph import build_graph

DATA = Path(__file__).parent / "data"


def central_fd(f, x, h=1e-6):
    """Central finite differences of a scalar function at a copy of ``x``."""
    x = np.array(x, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(an, fd):
    an, fd = np.asarray(an), np.asarray(fd)
    if not (np.all(np.isfinite(an)) and np.all(np.isfinite(fd))):
        return float("inf")
    return float(np.max(np.abs(an - fd), initial=0.0) / max(1.0, np.max(np.abs(an), initial=0.0)))


@pytest.fixture
def edge_case():
    """d=1, one undirected edge, h = (1, 3), pi(x) = 1, lam = 1."""
    g = build_graph([(0, 0, 1)], 2, 1)
    H = np.array([[1.0], [3.0]])
    X = np.array([[1.0], [1.0]])
    return QuadraticSmooth(), g, H, X


@pytest.fixture
def toy_dir():
    return DATA / "toy"


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion and return the verdict."""
    def record(num, ok, detail):
        line = f"criterion {num}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
