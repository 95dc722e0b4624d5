"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a ``criterion N: PASS|FAIL ...`` line which is printed in
the pytest terminal summary. The study-scale checks carry the ``slow`` marker.
"""
import os
import time

import numpy as np
import pytest
from scipy import linalg

from splinemsm.expmd import eigendecompose, series_expm_oracle, udot_cases
from splinemsm.inference import predict_q
from splinemsm.likelihood import Likelihood
from splinemsm.model import ModelDesign, ModelSpec, build_design
from splinemsm.optimizer import PenalizedObjective, fit_inner, starting_values
from splinemsm.simulate import five_state, illness_death, run_study, simulate_panel, study_spec
from splinemsm.smoothing import FitOptions, fit

from conftest import ACCEPTANCE_LINES, idm_spec, mixed_idm_panel, random_generator, random_theta
from test_expmd import coincident_generator, directions, eig_tolerance, full_bundle
from test_optimizer import exact_two_state_panel

IDM_TABLE = {(1, 1): 0.065, (1, 2): 0.231, (1, 3): 0.704, (2, 2): 0.245, (2, 3): 0.755}
FIVE_TABLE = {(1, 1): 0.229, (1, 2): 0.318, (1, 3): 0.230, (1, 4): 0.121, (1, 5): 0.102,
              (2, 2): 0.222, (2, 3): 0.330, (2, 4): 0.294, (2, 5): 0.154, (3, 3): 0.225,
              (3, 4): 0.508, (3, 5): 0.267, (4, 4): 0.549, (4, 5): 0.451}
STUDY_SEED = 2024


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def rel_err(fd, an, floor):
    return float(np.max(np.abs(fd - an) / np.maximum(np.abs(an), floor)))


# --- 1 ---------------------------------------------------------------------------

def test_criterion_1_matrix_exponential_derivatives():
    start = time.perf_counter()
    worst_d, worst_d2, worst_p, n = 0.0, 0.0, 0.0, 0
    for seed in range(60):
        rng = np.random.default_rng([1, seed])
        C = int(rng.integers(2, 7))
        _, theta, bundle = random_generator(rng, C)
        dt = float(rng.uniform(0.1, 3.0))
        Q, dQ, d2Q = bundle(theta)
        pb = full_bundle(Q, dQ, d2Q, dt)
        scale1 = max(np.abs(pb.dP).max(), 1e-3)
        scale2 = max(np.abs(pb.d2P).max(), 1e-3)
        for w in range(theta.size):
            h = 1e-5 * (1 + abs(theta[w]))
            tp, tm = theta.copy(), theta.copy()
            tp[w] += h
            tm[w] -= h
            bp, bm = full_bundle(*bundle(tp), dt), full_bundle(*bundle(tm), dt)
            worst_d = max(worst_d, np.abs((bp.P - bm.P) / (2 * h) - pb.dP[w]).max() / scale1)
            worst_d2 = max(worst_d2, np.abs((bp.dP - bm.dP) / (2 * h) - pb.d2P[w]).max() / scale2)
        worst_p = max(worst_p, np.abs(pb.P - series_expm_oracle(Q, dt)).max())
        n += 1
    secs = time.perf_counter() - start
    ok = n >= 50 and worst_d <= 1e-5 and worst_d2 <= 1e-5 and worst_p <= 1e-10 and secs < 60
    record(1, ok, f"{n} generators, rel err dP {worst_d:.1e}, d2P {worst_d2:.1e}, "
                  f"P vs series {worst_p:.1e}, {secs:.1f}s")


# --- 2 ---------------------------------------------------------------------------

def test_criterion_2_likelihood_derivatives():
    start = time.perf_counter()
    panel = mixed_idm_panel(50, seed=0)
    kinds = panel.kind_counts()
    design = build_design(idm_spec(), panel)
    lik = Likelihood(design, panel)
    theta = random_theta(design, np.random.default_rng(22))
    res = lik(theta)
    fd_g, fd_H = np.zeros(design.W), np.zeros((design.W, design.W))
    for w in range(design.W):
        h = 1e-5 * (1 + abs(theta[w]))
        tp, tm = theta.copy(), theta.copy()
        tp[w] += h
        tm[w] -= h
        fd_g[w] = (lik.loglik(tp) - lik.loglik(tm)) / (2 * h)
        fd_H[w] = (lik(tp).g - lik(tm).g) / (2 * h)
    eg = rel_err(fd_g, res.g, 1e-2)
    eH = rel_err(fd_H, res.H, 1e-1)
    secs = time.perf_counter() - start
    ok = all(v > 0 for v in kinds.values()) and eg <= 1e-4 and eH <= 1e-4 and secs < 120
    record(2, ok, f"kinds {kinds}, rel err g {eg:.1e}, H {eH:.1e}, {secs:.1f}s")


# --- 3 ---------------------------------------------------------------------------

def test_criterion_3_repeated_eigenvalues():
    start = time.perf_counter()
    base = coincident_generator()
    cases = set(np.unique(udot_cases(eigendecompose(base).gamma)).tolist())
    tau = float(eig_tolerance(eigendecompose(base).gamma))
    D = directions()
    zero = np.zeros((3, 3, 4, 4))
    a = full_bundle(base, D, zero, 1.0)
    b = full_bundle(coincident_generator(10 * tau), D, zero, 1.0)
    c1 = np.abs(a.dP - b.dP).max() / np.abs(a.dP).max()
    c2 = np.abs(a.d2P - b.d2P).max() / np.abs(a.d2P).max()
    # first derivatives at the coincident point against finite differences of expm
    fd = max(np.abs((linalg.expm(base + 1e-6 * D[w]) - linalg.expm(base - 1e-6 * D[w])) / 2e-6
                    - a.dP[w]).max() for w in range(3))
    secs = time.perf_counter() - start
    ok = cases == {1, 2, 3, 4, 5} and c1 <= 1e-4 and c2 <= 1e-4 and fd <= 1e-7 and secs < 30
    record(3, ok, f"cases {sorted(cases)}, change under 10*tau: dP {c1:.1e}, d2P {c2:.1e}, "
                  f"FD {fd:.1e}, {secs:.2f}s")


# --- 4 ---------------------------------------------------------------------------

def test_criterion_4_closed_form_mle():
    panel = exact_two_state_panel(n=400, seed=31)
    spec = ModelSpec.from_strings(2, {(1, 2): "1", (2, 1): "1"})
    design = ModelDesign(spec, {})
    obj = PenalizedObjective(Likelihood(design, panel), np.zeros((2, 2)))
    res = fit_inner(starting_values(panel, design), obj)
    moved = panel.z_cur != panel.z_prev
    worst = 0.0
    for a, r in enumerate((1, 2)):
        rate = np.sum(moved & (panel.z_prev == r)) / np.sum(panel.dt[panel.z_prev == r])
        worst = max(worst, abs(np.exp(res.theta[a]) / rate - 1))
    record(4, res.report.converged and worst <= 1e-6,
           f"relative error vs events/exposure {worst:.1e}")


# --- 5, 7 and 8 share the illness-death replicates ---------------------------------

@pytest.fixture(scope="module")
def idm_study():
    fits = {}
    res = run_study(illness_death(), 500, 25, seed=STUDY_SEED,
                    on_replicate=lambda rep, f: fits.__setitem__(rep, f))
    return res, fits


@pytest.mark.slow
def test_criterion_5_illness_death_study(idm_study):
    res, _ = idm_study
    mean = dict(zip(res.pairs, res.mean))
    dev = {k: mean[k] - v for k, v in IDM_TABLE.items()}
    worst = max(abs(v) for v in dev.values())
    ok = len(res.estimates) == 25 and worst <= 0.02
    detail = ", ".join(f"p{r}{s} {mean[(r, s)]:.3f} ({d:+.3f})" for (r, s), d in dev.items())
    record(5, ok, f"M={len(res.estimates)} converged of 25, {detail}, {res.seconds / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_band_coverage(idm_study):
    _, fits = idm_study
    truth = illness_death().hazards[(1, 2)]
    grid = np.arange(1.0, 10.5, 0.5)
    hits, total = 0, 0
    for rep, f in sorted(fits.items()):
        if f is None or not f.converged:
            continue
        band = predict_q(f, grid, n_sim=1000, seed=rep)
        j = band.labels.index("q12")
        q = truth.hazard(grid)
        hits += int(np.sum((band.lower[:, j] <= q) & (q <= band.upper[:, j])))
        total += grid.size
    cover = hits / total
    record(7, total > 0 and 0.85 <= cover <= 0.99,
           f"q12 pointwise 95% coverage {cover:.3f} over {total} (replicate, time) points")


@pytest.mark.slow
def test_criterion_8_exact_versus_approximate_hessian(idm_study):
    _, fits = idm_study
    design = illness_death()
    spec = study_spec(design)
    wins, n = 0, 0
    for rep in range(10):
        exact = fits.get(rep)
        if exact is None:
            continue
        panel = simulate_panel(design, 500, seed=STUDY_SEED, rep=rep)
        approx = fit(panel, spec, FitOptions(grid_step=design.grid_step, hessian="opg"))
        n += 1
        wins += exact.lp >= approx.lp - 1e-9 * abs(approx.lp)
    share = wins / n if n else 0.0
    record(8, n >= 10 and share >= 0.70,
           f"exact-Hessian penalized log-likelihood >= approximate in {wins}/{n} replicates")


# --- 6 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_five_state_study():
    res = run_study(five_state(), 500, 10, seed=STUDY_SEED)
    mean = dict(zip(res.pairs, res.mean))
    dev = {k: mean[k] - v for k, v in FIVE_TABLE.items()}
    worst_key = max(dev, key=lambda k: abs(dev[k]))
    ok = len(res.estimates) == 10 and abs(dev[worst_key]) <= 0.06
    record(6, ok, f"M={len(res.estimates)} converged of 10, largest deviation "
                  f"p{worst_key[0]}{worst_key[1]} {dev[worst_key]:+.3f}, "
                  f"p45 {mean[(4, 5)]:.3f}, {res.seconds / 60:.1f} min")


# --- 9 ---------------------------------------------------------------------------

def test_criterion_9_external_data():
    """Data-gated: set SPLINEMSM_CAV_CSV and SPLINEMSM_CAV_FORMULA to run."""
    data, formula = os.environ.get("SPLINEMSM_CAV_CSV"), os.environ.get("SPLINEMSM_CAV_FORMULA")
    if not (data and formula):
        ACCEPTANCE_LINES.append("criterion 9: NOT RUN  external data not supplied")
        pytest.skip("external data not supplied")
    from splinemsm.cli import main
    rc = main(["fit", "--formula", formula, "--data", data, "--death"])
    record(9, rc == 0, f"fit on supplied data exited with {rc}")
