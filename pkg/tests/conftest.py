"""Shared fixtures: small game instances used across the test modules."""

import re

import numpy as np
import pytest

from gnes.blockvec import AgentPartition
from gnes.graph import build_graph
from gnes.instances import builtin_document, load_document
from gnes.operators import GameProblem


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per acceptance criterion at the end of the session."""
    rows = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            nodeid = getattr(rep, "nodeid", "")
            match = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", nodeid)
            if match and getattr(rep, "when", "call") in ("call", "setup"):
                ok = key == "passed"
                rows.append((int(match.group(1)), match.group(2), ok))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, slug, ok in sorted(rows):
        label = slug.replace("_", " ")
        terminalreporter.write_line(
            f"criterion {num} ({label}): {'PASS' if ok else 'FAIL'}"
        )


def load_builtin(name):
    problem, graph, _ = load_document(builtin_document(name))
    return problem, graph


@pytest.fixture(scope="session")
def monotone_small():
    return load_builtin("affine-monotone-small")


@pytest.fixture(scope="session")
def tiny():
    return load_builtin("affine-tiny")


@pytest.fixture(scope="session")
def two_firms():
    return load_builtin("affine-two-firms")


def scalar_game(m_val=1.0, q_val=0.0, lo=-10.0, hi=10.0, d_row=0.0, b_val=0.0):
    """Single agent, one decision variable, one constraint row."""
    part = AgentPartition((1,), 1)
    m = float(m_val)
    q = float(q_val)
    problem = GameProblem(
        partition=part,
        grad_f=(lambda u: m * u[:1] + q,),
        D=(np.array([[d_row]]),),
        b=(np.array([b_val]),),
        box_lo=(np.array([lo]),),
        box_hi=(np.array([hi]),),
        lipschitz_ell=abs(m),
    )
    graph = build_graph(np.zeros((1, 1)))
    return problem, graph


def random_affine_game(rng, dims=(2, 1, 2), m=2):
    """Strictly monotone affine game with a random connected graph."""
    part = AgentPartition(dims, m)
    d = part.total_dim
    n = part.num_agents
    a = rng.normal(size=(d, d)) * 0.3
    m_mat = a - a.T + np.eye(d) * (1.0 + rng.random())
    q = rng.normal(size=d)

    def make(i):
        rows = m_mat[part.primal_slice(i), :].copy()
        qi = q[part.primal_slice(i)].copy()
        return lambda u: rows @ u + qi

    d_mats = tuple(rng.normal(size=(m, part.dims[i])) for i in range(n))
    b = tuple(np.abs(rng.normal(size=m)) + 0.5 for _ in range(n))
    problem = GameProblem(
        partition=part,
        grad_f=tuple(make(i) for i in range(n)),
        D=d_mats,
        b=b,
        box_lo=tuple(-np.ones(part.dims[i]) for i in range(n)),
        box_hi=tuple(np.ones(part.dims[i]) for i in range(n)),
        lipschitz_ell=float(np.linalg.norm(m_mat, 2)),
    )
    while True:
        w = (rng.random((n, n)) < 0.6).astype(float)
        w = np.triu(w, 1)
        w = w + w.T
        try:
            graph = build_graph(w)
            break
        except Exception:
            continue
    return problem, graph


def random_state(part, rng, spread=2.0):
    """Random stacked primal-dual vector, multipliers not sign-restricted."""
    return rng.normal(size=part.state_dim) * spread
