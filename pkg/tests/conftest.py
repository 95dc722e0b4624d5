import dataclasses

import numpy as np
import pytest

from splinemsm.model import ModelSpec
from splinemsm.panel import Kind, Panel
from splinemsm.simulate import illness_death, simulate_panel


def mixed_idm_panel(n=50, seed=0):
    """Simulated illness-death panel in which all four record kinds occur.

    Some subjects get their final living observation replaced by a censored
    state, and some records are re-labelled as exactly observed.
    """
    base = simulate_panel(illness_death(), n, seed=seed)
    recs = base.records()
    last = {}
    for i, r in enumerate(recs):
        last[r.subject] = i
    out = []
    for i, r in enumerate(recs):
        k = int(r.subject)
        if r.kind == Kind.INTERVAL_CENSORED and last[r.subject] == i and k % 4 == 1:
            r = dataclasses.replace(r, kind=Kind.CENSORED_STATE, z_cur=-99, censored_set=(1, 2))
        elif r.kind == Kind.INTERVAL_CENSORED and k % 4 == 2 and i % 3 == 0:
            r = dataclasses.replace(r, kind=Kind.EXACT_LIVING)
        out.append(r)
    return Panel(out, 3)


def idm_spec(formula="s(t, k=5)"):
    return ModelSpec.from_strings(3, {(1, 2): formula, (1, 3): formula, (2, 3): formula},
                                  death=True)


@pytest.fixture(scope="session")
def mixed_panel():
    p = mixed_idm_panel()
    kinds = p.kind_counts()
    assert all(v > 0 for v in kinds.values()), kinds
    return p


def random_theta(design, rng, scale=0.3, base=-1.5):
    theta = rng.normal(scale=scale, size=design.W)
    theta[design.intercepts] = base + rng.normal(scale=0.3, size=design.R)
    return theta


def random_generator(rng, C):
    """Random log-intensity parameterisation of a C-state generator.

    Returns ``(pairs, theta, bundle)`` where ``bundle(theta)`` gives
    ``(Q, dQ, d2Q)`` with one parameter per allowed transition. Forward and
    backward transitions are mixed; the last state may be absorbing.
    """
    pairs = []
    for r in range(C):
        for s in range(C):
            if r != s and rng.uniform() < 0.6:
                pairs.append((r, s))
    if not pairs:
        pairs = [(0, C - 1)]
    theta = rng.normal(-0.5, 0.8, size=len(pairs))

    def bundle(th):
        K = len(pairs)
        Q = np.zeros((C, C))
        dQ = np.zeros((K, C, C))
        for a, (r, s) in enumerate(pairs):
            q = np.exp(th[a])
            Q[r, s] += q
            Q[r, r] -= q
            dQ[a, r, s] = q
            dQ[a, r, r] = -q
        d2Q = np.zeros((K, K, C, C))
        d2Q[np.arange(K), np.arange(K)] = dQ
        return Q, dQ, d2Q

    return pairs, theta, bundle


@pytest.fixture(scope="session")
def idm_fit():
    from splinemsm.smoothing import fit
    panel = simulate_panel(illness_death(), 200, seed=5)
    return panel, fit(panel, idm_spec("s(t, k=10)"))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
