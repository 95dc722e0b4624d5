import math
import warnings

import numpy as np
import pytest

from splinemsm.errors import ConvergenceError
from splinemsm.model import ModelSpec
from splinemsm.penalty import PenaltyLayout
from splinemsm.simulate import Gompertz, StudyDesign, illness_death, simulate_panel
from splinemsm.smoothing import (LAM_MAX, LAM_MIN, FitOptions, efs_update, fit,
                                 laplace_criterion, require_converged)

from conftest import idm_spec


def test_scalar_example():
    lay = PenaltyLayout(1, [(np.array([0]), np.eye(1), "x")])
    new = efs_update(np.array([1.0]), -np.eye(1), np.array([1.0]), lay)
    assert new[0] == pytest.approx(0.5)


def test_null_space_goes_to_upper_clamp():
    lay = PenaltyLayout(2, [(np.array([0, 1]), np.diag([1.0, 0.0]), "x")])
    new = efs_update(np.array([0.0, 3.0]), -np.eye(2), np.array([1.0]), lay)
    assert new[0] == LAM_MAX


def test_negative_numerator_halves_with_warning():
    lay = PenaltyLayout(1, [(np.array([0]), np.eye(1), "x")])
    # tr(S^+ S_k) = 1/lam = 1 but tr((-H + S)^{-1} S_k) = 1/(0.1 - 1 + 1) > 1 with H = +0.9
    with pytest.warns(RuntimeWarning, match="halving"):
        new = efs_update(np.array([1.0]), np.array([[0.9]]), np.array([1.0]), lay)
    assert new[0] == pytest.approx(0.5)


def test_clamp_bounds():
    lay = PenaltyLayout(1, [(np.array([0]), np.eye(1), "x")])
    assert efs_update(np.array([1e9]), -np.eye(1), np.array([1.0]), lay)[0] == LAM_MIN


def quadratic_problem():
    """Log-likelihood -(theta - b)^T A (theta - b) / 2 with two penalized blocks."""
    rng = np.random.default_rng(0)
    M = rng.normal(size=(6, 6))
    A = M @ M.T + 6 * np.eye(6)
    b = rng.normal(size=6) * 2
    D1 = np.diag([1.0, 2.0, 0.0])
    D2 = np.array([[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]])
    lay = PenaltyLayout(6, [(np.arange(3), D1, "a"), (np.arange(3, 6), D2, "b")])

    def solve(lam):
        S = lay.s_lambda(lam)
        th = np.linalg.solve(A + S, A @ b)
        ll = -0.5 * (th - b) @ A @ (th - b)
        return th, ll

    return A, lay, solve


def test_fixed_point_is_stationary_for_laplace_criterion():
    A, lay, solve = quadratic_problem()
    lam = np.ones(2)
    for _ in range(500):
        th, _ = solve(lam)
        new = efs_update(th, -A, lam, lay)
        if np.max(np.abs(np.log(new) - np.log(lam))) < 1e-12:
            break
        lam = new

    def crit(loglam):
        lm = np.exp(loglam)
        th, ll = solve(lm)
        return laplace_criterion(ll, -A, th, lm, lay)

    base = np.log(lam)
    for k in range(2):
        h = 1e-4
        e = np.zeros(2)
        e[k] = h
        deriv = (crit(base + e) - crit(base - e)) / (2 * h)
        assert abs(deriv) <= 1e-3


def test_no_smooth_terms():
    panel = simulate_panel(illness_death(), 100, seed=1)
    res = fit(panel, idm_spec("1"))
    assert res.lam.size == 0 and res.outer_iterations == 1 and res.converged


def log_linear_design():
    # With death seen at yearly visits, the left-endpoint intensity of each
    # yearly interval is the interval-average hazard, which is again log-linear
    # in time, so the target lies in the penalty null space.
    return StudyDesign("gompertz", 2, {(1, 2): Gompertz(math.exp(-2.0), 0.15)},
                       np.arange(0.0, 11.0), death=True, exact_death=False)


LINEAR_SPEC = ModelSpec.from_strings(2, {(1, 2): "s(t, k=10)"}, death=True)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_linear_truth_is_shrunk(seed):
    res = fit(simulate_panel(log_linear_design(), 400, seed=seed), LINEAR_SPEC)
    assert res.converged
    (edf,) = res.edf_terms.values()
    assert 1.0 - 1e-6 <= edf <= 2.5
    assert LAM_MIN <= res.lam[0] <= LAM_MAX


def test_huge_lambda_gives_linear_smooth():
    panel = simulate_panel(log_linear_design(), 400, seed=0)
    res = fit(panel, LINEAR_SPEC, FitOptions(lambda0=LAM_MAX, fixed_lambda=True))
    sb = res.design.smooth_blocks[0]
    knots = sb.block.spline.knots
    values = sb.block.Z @ res.theta[sb.index]          # function values at the knots
    coef = np.polyfit(knots, values, 1)
    assert np.max(np.abs(values - np.polyval(coef, knots))) <= 1e-3
    assert next(iter(res.edf_terms.values())) == pytest.approx(1.0, abs=0.05)


def test_idm_replicate(idm_fit):
    panel, res = idm_fit
    assert res.converged and np.isfinite(res.aic)
    for label, e in res.edf_terms.items():
        assert 1.0 - 1e-6 <= e <= 9.0 + 1e-6, label
    assert np.all((res.lam >= LAM_MIN) & (res.lam <= LAM_MAX))
    assert require_converged(res) is res


def test_require_converged_raises(idm_fit):
    panel, res = idm_fit
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        capped = fit(panel, idm_spec("s(t, k=10)"), FitOptions(max_inner=1, max_outer=1))
    assert not capped.converged
    with pytest.raises(ConvergenceError):
        require_converged(capped)


def test_opg_mode_runs(idm_fit):
    panel, _ = idm_fit
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = fit(panel, idm_spec("s(t, k=10)"), FitOptions(hessian="opg", max_outer=3))
    assert np.isfinite(res.lp)
    assert res.report.min_eig == pytest.approx(np.linalg.eigvalsh(-res.Hp)[0], rel=1e-8)
