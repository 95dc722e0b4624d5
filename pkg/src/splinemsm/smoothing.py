"""Smoothing-parameter estimation by the generalized Fellner-Schall update."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError
from .inference import FitResult
from .likelihood import Likelihood
from .model import build_design
from .optimizer import PenalizedObjective, fit_inner, starting_values
from .penalty import PenaltyLayout

LOG_LAM_MIN, LOG_LAM_MAX = -15.0, 15.0
LAM_MIN, LAM_MAX = math.exp(LOG_LAM_MIN), math.exp(LOG_LAM_MAX)


@dataclass
class FitOptions:
    hessian: str = "exact"           # 'exact' or 'opg' (outer product of scores)
    grid_step: float | None = None   # extra piecewise-constant breakpoints
    max_outer: int = 25
    max_inner: int = 500
    tol: float = 1e-7
    lambda_tol: float = 1e-3
    delta0: float = 1.0
    lambda0: object = None           # scalar or vector; None picks a scale-aware start
    fixed_lambda: bool = False
    theta0: object = None
    n_threads: int | None = None
    callback: object = None


def efs_update(theta, H, lam, layout: PenaltyLayout):
    """One generalized Fellner-Schall step for every smoothing parameter.

    ``lam'_k = lam_k (tr(S^+ S_k) - tr((-H + S)^{-1} S_k)) / (theta^T S_k theta)``
    clamped to ``[e^-15, e^15]``.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        return lam.copy()
    S = layout.s_lambda(lam)
    A = -np.asarray(H) + S
    A = 0.5 * (A + A.T)
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        Ainv = np.linalg.pinv(A)
    new = lam.copy()
    for k, b in enumerate(layout.blocks):
        den = layout.quad(k, theta)
        if den < 1e-12:
            new[k] = LAM_MAX
            continue
        num = layout.pinv_trace(lam, k) - float(np.sum(Ainv[np.ix_(b.index, b.index)] * b.D))
        if num < 0:
            warnings.warn(f"smoothing update for {b.label!r} left the feasible region; halving",
                          RuntimeWarning, stacklevel=2)
            new[k] = lam[k] / 2.0
        else:
            new[k] = lam[k] * num / den
    return np.clip(new, LAM_MIN, LAM_MAX)


def laplace_criterion(ll, H, theta, lam, layout):
    """Laplace approximate log restricted marginal likelihood (up to a constant)."""
    S = layout.s_lambda(lam)
    A = -np.asarray(H) + S
    sign, logdetA = np.linalg.slogdet(0.5 * (A + A.T))
    return (ll - 0.5 * float(theta @ S @ theta) + 0.5 * layout.pseudo_logdet(lam)
            - 0.5 * logdetA)


def initial_lambda(H, layout):
    """Scale-aware start: the ratio of curvature to penalty size on each block."""
    d = -np.diag(H)
    lam = np.ones(layout.n_lambda)
    for k, b in enumerate(layout.blocks):
        num = float(np.mean(d[b.index]))
        den = float(np.mean(np.diag(b.D)))
        if num > 0 and den > 0:
            lam[k] = num / den
    return np.clip(lam, LAM_MIN, LAM_MAX)


def fit(panel, spec, options: FitOptions | None = None) -> FitResult:
    """Alternate trust-region fits at fixed ``lambda`` with Fellner-Schall updates."""
    opts = options or FitOptions()
    design = build_design(spec, panel)
    lik = Likelihood(design, panel, grid_step=opts.grid_step, n_threads=opts.n_threads)
    layout = PenaltyLayout.from_design(design)
    theta = (np.asarray(opts.theta0, dtype=float) if opts.theta0 is not None
             else starting_values(panel, design))
    if opts.lambda0 is None:
        lam = initial_lambda(lik(theta).H, layout) if layout.n_lambda else np.zeros(0)
    else:
        lam = np.broadcast_to(np.asarray(opts.lambda0, dtype=float), (layout.n_lambda,)).copy()
    history, notes = [], []
    lam_ok = layout.n_lambda == 0 or opts.fixed_lambda

    def inner_fit(th, lam_, cycle):
        obj = PenalizedObjective(lik, layout.s_lambda(lam_), opts.hessian)
        try:
            return fit_inner(th, obj, max_iter=opts.max_inner, delta0=opts.delta0,
                             tol=opts.tol, callback=opts.callback)
        except Exception as exc:
            if exc.args and isinstance(exc.args[0], str):
                exc.args = (f"outer cycle {cycle}: {exc.args[0]}",) + exc.args[1:]
            raise

    inner = inner_fit(theta, lam, 1)
    history.extend(inner.history)
    cycle = 1
    if layout.n_lambda and not opts.fixed_lambda:
        crit = laplace_criterion(inner.lik.ll, inner.lik.H, inner.theta, lam, layout)
        accel = np.ones(layout.n_lambda)
        prev_step = np.zeros(layout.n_lambda)
        while True:
            step = np.log(efs_update(inner.theta, inner.lik.H, lam, layout)) - np.log(lam)
            if inner.report.converged and np.max(np.abs(step)) < opts.lambda_tol:
                lam_ok = True
                break
            if cycle >= opts.max_outer:
                break
            cycle += 1
            # extrapolate steps that keep their direction (slow drift towards a clamp)
            same = np.sign(step) == np.sign(prev_step)
            accel = np.where(same, np.minimum(2.0 * accel, 8.0), 1.0)
            trial = np.clip(np.log(lam) + accel * step, LOG_LAM_MIN, LOG_LAM_MAX)
            cand = inner_fit(inner.theta, np.exp(trial), cycle)
            cand_crit = laplace_criterion(cand.lik.ll, cand.lik.H, cand.theta, np.exp(trial), layout)
            worse = not cand_crit >= crit - 1e-8 * (1 + abs(crit))
            if np.any(accel > 1) and (worse or not cand.report.converged):
                accel[:] = 1.0
                trial = np.clip(np.log(lam) + step, LOG_LAM_MIN, LOG_LAM_MAX)
                cand = inner_fit(inner.theta, np.exp(trial), cycle)
                cand_crit = laplace_criterion(cand.lik.ll, cand.lik.H, cand.theta,
                                              np.exp(trial), layout)
            prev_step = step
            lam, inner, crit = np.exp(trial), cand, cand_crit
            history.extend(inner.history)
    theta = inner.theta
    if not lam_ok:
        notes.append(f"smoothing parameters still moving after {cycle} outer cycles")
    final = lik(theta)          # exact Hessian for inference, whatever the fitting mode
    S = layout.s_lambda(lam)
    Hp = final.H - S
    lp = final.ll - 0.5 * float(theta @ S @ theta)
    if opts.hessian != "exact":
        inner.report.min_eig = float(np.linalg.eigvalsh(-0.5 * (Hp + Hp.T))[0]) if Hp.size else np.inf
    if lik.n_fallback:
        notes.append(f"{lik.n_fallback} generator evaluations used the block-exponential fallback")
    return FitResult(design, theta, lam, final.ll, lp, final.H, Hp, len(panel), inner.report,
                     lam_ok, cycle, layout.labels, dict(final.counts), history, notes,
                     opts.grid_step)


def require_converged(result: FitResult):
    if not result.converged:
        raise ConvergenceError(result.report.message or "fit did not converge")
    return result
