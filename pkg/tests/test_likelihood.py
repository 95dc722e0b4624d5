import warnings

import numpy as np
import pytest

from splinemsm.errors import ConfigurationError, DegenerateContributionError
from splinemsm.expmd import eigendecompose, pbundle
from splinemsm.likelihood import Likelihood, contribution, penalized
from splinemsm.model import ModelDesign, ModelSpec, build_design
from splinemsm.panel import Kind, ObservationRecord, Panel
from splinemsm.penalty import PenaltyLayout

from conftest import idm_spec, mixed_idm_panel, random_theta

TWO = ModelSpec.from_strings(2, {(1, 2): "1"}, death=True)


def two_state(kind, z_cur=2):
    return Panel([ObservationRecord("a", 0.0, 1.0, 1, z_cur, kind)], 2)


def test_interval_censored_example():
    lik = Likelihood(ModelDesign(TWO, {}), two_state(Kind.INTERVAL_CENSORED))
    assert lik(np.zeros(1)).ll == pytest.approx(np.log(0.632121), abs=1e-6)
    assert lik.loglik(np.zeros(1)) == pytest.approx(-0.458675, abs=1e-6)


def test_exact_death_example():
    lik = Likelihood(ModelDesign(TWO, {}), two_state(Kind.EXACT_DEATH))
    assert np.exp(lik(np.zeros(1)).ll) == pytest.approx(0.367879, abs=1e-6)


def test_empty_panel():
    spec = idm_spec("1")
    res = Likelihood(ModelDesign(spec, {}), Panel([], 3))(np.zeros(3))
    assert res.ll == 0 and not np.any(res.g) and not np.any(res.H)


def test_impossible_record_raises():
    spec = idm_spec("1")
    p = Panel([ObservationRecord("x", 0.0, 1.0, 2, 1)], 3)
    with pytest.raises(DegenerateContributionError) as err:
        Likelihood(ModelDesign(spec, {}), p)
    assert err.value.subject == "x"


def full_bundles(design, theta, rec):
    dt = rec.t_cur - rec.t_prev
    qp = design.qbundle(theta, rec.covariates, rec.t_prev, dt)
    qc = design.qbundle(theta, rec.covariates, rec.t_cur, dt)
    pb = pbundle(eigendecompose(qp.Q * 1.0), qp.dQ, qp.d2Q, dt)
    return pb, qp, qc


@pytest.mark.parametrize("kind", list(Kind))
def test_contribution_finite_differences(mixed_panel, kind):
    rng = np.random.default_rng(int(kind))
    design = build_design(idm_spec(), mixed_panel)
    theta = random_theta(design, rng)
    recs = [r for r in mixed_panel.records() if r.kind == kind][:3]
    assert recs
    for rec in recs:
        L, dL, d2L = contribution(rec, *full_bundles(design, theta, rec))
        for w in range(design.W):
            h = 1e-5 * (1 + abs(theta[w]))
            tp, tm = theta.copy(), theta.copy()
            tp[w] += h
            tm[w] -= h
            Lp, dLp, _ = contribution(rec, *full_bundles(design, tp, rec))
            Lm, dLm, _ = contribution(rec, *full_bundles(design, tm, rec))
            assert (Lp - Lm) / (2 * h) == pytest.approx(dL[w], rel=1e-5, abs=1e-9)
            np.testing.assert_allclose((dLp - dLm) / (2 * h), d2L[w], rtol=1e-5, atol=1e-9)


def test_batched_matches_per_record(mixed_panel):
    rng = np.random.default_rng(7)
    design = build_design(idm_spec(), mixed_panel)
    theta = random_theta(design, rng)
    res = Likelihood(design, mixed_panel)(theta)
    ll, g, H = 0.0, np.zeros(design.W), np.zeros((design.W, design.W))
    for rec in mixed_panel.records():
        L, dL, d2L = contribution(rec, *full_bundles(design, theta, rec))
        ll += np.log(L)
        g += dL / L
        H += d2L / L - np.outer(dL, dL) / L ** 2
    assert res.ll == pytest.approx(ll, rel=1e-12)
    np.testing.assert_allclose(res.g, g, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(res.H, H, rtol=1e-9, atol=1e-8)
    assert res.asymmetry <= 1e-9
    assert Likelihood(design, mixed_panel).loglik(theta) == pytest.approx(ll, rel=1e-12)


def test_gradient_hessian_finite_differences():
    panel = mixed_idm_panel(20, seed=3)
    design = build_design(idm_spec(), panel)
    lik = Likelihood(design, panel)
    theta = random_theta(design, np.random.default_rng(8))
    res = lik(theta)
    for w in range(design.W):
        h = 1e-5 * (1 + abs(theta[w]))
        tp, tm = theta.copy(), theta.copy()
        tp[w] += h
        tm[w] -= h
        fd = (lik.loglik(tp) - lik.loglik(tm)) / (2 * h)
        assert fd == pytest.approx(res.g[w], rel=1e-4, abs=1e-6)
        fdH = (lik(tp).g - lik(tm).g) / (2 * h)
        np.testing.assert_allclose(fdH, res.H[w], rtol=1e-4, atol=1e-5)


def test_refined_grid_gradient():
    panel = mixed_idm_panel(15, seed=4)
    design = build_design(idm_spec(), panel)
    lik = Likelihood(design, panel, grid_step=0.4)
    assert lik.npc > 1
    theta = random_theta(design, np.random.default_rng(9))
    res = lik(theta)
    for w in range(design.W):
        h = 1e-5 * (1 + abs(theta[w]))
        tp, tm = theta.copy(), theta.copy()
        tp[w] += h
        tm[w] -= h
        assert (lik.loglik(tp) - lik.loglik(tm)) / (2 * h) == pytest.approx(res.g[w], rel=1e-4,
                                                                              abs=1e-6)


def test_refinement_is_neutral_for_constant_intensities(mixed_panel):
    design = ModelDesign(idm_spec("1"), {})
    theta = np.array([-1.0, -2.0, -1.5])
    a = Likelihood(design, mixed_panel)(theta)
    b = Likelihood(design, mixed_panel, grid_step=0.3)(theta)
    assert a.ll == pytest.approx(b.ll, rel=1e-11)
    np.testing.assert_allclose(a.g, b.g, rtol=1e-9)


def test_censored_over_all_states_is_neutral():
    design = ModelDesign(idm_spec("1"), {})
    base = [ObservationRecord("a", 0.0, 1.0, 1, 1)]
    extra = ObservationRecord("a", 1.0, 2.5, 1, -99, Kind.CENSORED_STATE, (1, 2, 3))
    theta = np.array([-1.0, -2.0, -1.5])
    a = Likelihood(design, Panel(base, 3))(theta)
    b = Likelihood(design, Panel(base + [extra], 3))(theta)
    assert b.ll == pytest.approx(a.ll, abs=1e-10)


def test_thread_count_does_not_change_results(mixed_panel, monkeypatch):
    import splinemsm.likelihood as mod
    monkeypatch.setattr(mod, "CHUNK", 64)
    design = build_design(idm_spec(), mixed_panel)
    theta = random_theta(design, np.random.default_rng(10))
    one = Likelihood(design, mixed_panel, n_threads=1)(theta)
    many = Likelihood(design, mixed_panel, n_threads=4)(theta)
    assert one.ll == many.ll
    np.testing.assert_array_equal(one.H, many.H)


def test_floor_is_flagged():
    design = ModelDesign(TWO, {})
    lik = Likelihood(design, two_state(Kind.INTERVAL_CENSORED))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = lik(np.array([-700.0]))
    assert res.n_floored == 1 and np.isfinite(res.ll)
    assert any("floored" in str(x.message) for x in w)


def test_per_subject_scores_sum_to_gradient(mixed_panel):
    design = build_design(idm_spec(), mixed_panel)
    res = Likelihood(design, mixed_panel)(random_theta(design, np.random.default_rng(11)),
                                          scores=True)
    assert res.scores.shape == (mixed_panel.n_subjects, design.W)
    np.testing.assert_allclose(res.scores.sum(axis=0), res.g, rtol=1e-10, atol=1e-10)


# --- penalized ---------------------------------------------------------------------

def test_penalized_identity_and_null_space(mixed_panel):
    design = build_design(idm_spec(), mixed_panel)
    layout = PenaltyLayout.from_design(design)
    theta = random_theta(design, np.random.default_rng(12))
    res = Likelihood(design, mixed_panel)(theta)
    lp, gp, Hp = penalized(theta, layout.s_lambda(np.zeros(3)), res)
    assert lp == res.ll and np.array_equal(gp, res.g) and np.array_equal(Hp, res.H)
    # a smooth that is linear in time lies in the penalty null space
    sb = design.smooth_blocks[0]
    knots = sb.block.spline.knots
    line = knots - mixed_panel.t_prev.mean()      # sums to zero over the centring sample
    beta = sb.block.Z.T @ line
    np.testing.assert_allclose(sb.block.Z @ beta, line, atol=1e-10)
    th = np.zeros(design.W)
    th[sb.index] = beta
    assert th @ layout.s_lambda(np.ones(3)) @ th == pytest.approx(0.0, abs=1e-10)
    with pytest.raises(ConfigurationError):
        penalized(theta, np.eye(2), res)


def test_penalized_gradient_finite_differences(mixed_panel):
    design = build_design(idm_spec(), mixed_panel)
    layout = PenaltyLayout.from_design(design)
    lik = Likelihood(design, mixed_panel)
    rng = np.random.default_rng(13)
    theta = random_theta(design, rng)
    S = layout.s_lambda(np.exp(rng.normal(size=3)))
    lp, gp, _ = penalized(theta, S, lik(theta))
    for w in range(design.W):
        h = 1e-5 * (1 + abs(theta[w]))
        tp, tm = theta.copy(), theta.copy()
        tp[w] += h
        tm[w] -= h
        fd = (penalized(tp, S, lik(tp, derivatives=0))[0]
              - penalized(tm, S, lik(tm, derivatives=0))[0]) / (2 * h)
        assert fd == pytest.approx(gp[w], rel=1e-6, abs=1e-7)


def test_penalty_monotone_in_lambda(mixed_panel):
    design = build_design(idm_spec(), mixed_panel)
    layout = PenaltyLayout.from_design(design)
    theta = random_theta(design, np.random.default_rng(14))
    res = Likelihood(design, mixed_panel)(theta, derivatives=0)
    values = [penalized(theta, layout.s_lambda([lam, 1, 1]), res)[0]
              for lam in (0.1, 1, 10, 100)]
    assert all(a > b for a, b in zip(values, values[1:]))
