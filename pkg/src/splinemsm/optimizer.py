"""Trust-region Newton maximisation of the penalized log-likelihood."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import optimize

from .errors import ConfigurationError, MSMError, NoExposureError, NumericError
from .likelihood import penalized
from .panel import Kind

DELTA_MIN, DELTA_MAX = 1e-10, 1e6
ACCEPT, SHRINK, EXPAND = 0.05, 0.25, 0.75
MAX_REJECT = 10


@dataclass
class TrustState:
    theta: np.ndarray
    delta: float = 1.0
    iteration: int = 0
    lp: float = -np.inf
    rejections: int = 0
    accepted: bool = False
    on_boundary: bool = False
    step: np.ndarray | None = None

    def __post_init__(self):
        self.delta = float(min(max(self.delta, DELTA_MIN), DELTA_MAX))


@dataclass
class ConvergenceReport:
    max_abs_grad: float
    min_eig: float
    max_intensity: float
    iterations: int
    converged: bool
    stalled: bool = False
    message: str = ""
    lp: float = float("nan")
    n_floored: int = 0

    def to_dict(self):
        return {k: (float(v) if isinstance(v, (np.floating, float)) else v)
                for k, v in asdict(self).items()}

    def text(self):
        lines = [f"converged:            {'yes' if self.converged else 'no'}",
                 f"max |gradient|:       {self.max_abs_grad:.3e}",
                 f"min eigenvalue(-H_p): {self.min_eig:.3e}",
                 f"max intensity:        {self.max_intensity:.4g}",
                 f"iterations:           {self.iterations}",
                 f"penalized loglik:     {self.lp:.6f}"]
        if self.stalled:
            lines.append("stalled:              yes")
        if self.n_floored:
            lines.append(f"floored contributions: {self.n_floored}")
        if self.message:
            lines.append(f"note: {self.message}")
        return "\n".join(lines)


def gradient_tolerance(lp):
    return 1e-5 * (1.0 + abs(lp))


def is_converged(lp, gp, Hp):
    if gp is None or Hp is None or not np.all(np.isfinite(Hp)):
        return False
    if gp.size == 0:
        return True
    return (np.max(np.abs(gp)) <= gradient_tolerance(lp)
            and np.linalg.eigvalsh(-0.5 * (Hp + Hp.T))[0] > 0)


# --- subproblem -----------------------------------------------------------------

def subproblem(g, B, delta):
    """Maximise ``g^T e - e^T B e / 2`` subject to ``|e| <= delta``.

    Uses the eigendecomposition of ``B`` and a one-dimensional root search on
    the regularisation shift; the hard case adds a component along the
    leftmost eigenvector. Returns ``(e, on_boundary)``.
    """
    g = np.asarray(g, dtype=float)
    n = g.size
    if n == 0:
        return np.zeros(0), False
    mu, V = np.linalg.eigh(0.5 * (B + B.T))
    c = V.T @ g
    mu_min = mu[0]
    scale = max(1.0, np.max(np.abs(mu)))
    if mu_min > 1e-14 * scale:
        e = V @ (c / mu)
        if np.linalg.norm(e) <= delta:
            return e, False

    def norm_at(sig):
        return np.linalg.norm(c / (mu + sig))

    lo = max(0.0, -mu_min)
    hi = lo + np.linalg.norm(g) / delta + scale
    while norm_at(hi) > delta:
        hi *= 2.0
    eps = 1e-12 * max(1.0, lo)
    lo_eval = lo + eps
    if norm_at(lo_eval) > delta:
        sig = optimize.brentq(lambda s: norm_at(s) - delta, lo_eval, hi, xtol=1e-14, rtol=1e-12)
        e = V @ (c / (mu + sig))
        return e, True
    # hard case: gradient (nearly) orthogonal to the leftmost eigenspace
    shift = mu + lo
    w = np.where(np.abs(shift) > 1e-12 * scale, c / np.where(shift == 0, 1.0, shift), 0.0)
    e = V @ w
    rem = delta ** 2 - e @ e
    if rem > 0:
        e = e + math.sqrt(rem) * V[:, 0]
    return e, True


def predicted_increase(g, B, e):
    return float(g @ e - 0.5 * e @ B @ e)


# --- objective ------------------------------------------------------------------

class PenalizedObjective:
    """Penalized log-likelihood at fixed ``S``.

    ``hessian='opg'`` replaces the Hessian of the log-likelihood by minus the
    outer product of per-subject scores.
    """

    def __init__(self, lik, S, hessian="exact"):
        if hessian not in ("exact", "opg"):
            raise ConfigurationError(f"unknown Hessian mode {hessian!r}")
        self.lik = lik
        self.S = np.asarray(S, dtype=float)
        self.hessian = hessian
        self.n_evals = 0

    def value(self, theta):
        self.n_evals += 1
        res = self.lik(theta, derivatives=0)
        return penalized(theta, self.S, res)[0]

    def full(self, theta):
        self.n_evals += 1
        res = self.lik(theta, scores=self.hessian == "opg")
        if self.hessian == "opg":
            res.H = -(res.scores.T @ res.scores)
        lp, gp, Hp = penalized(theta, self.S, res)
        return lp, gp, Hp, res


def trust_step(state: TrustState, lp, gp, Hp, value_fn) -> TrustState:
    """One trust-region iteration from ``state`` (``lp, gp, Hp`` evaluated there)."""
    B = -Hp
    try:
        e, boundary = subproblem(gp, B, state.delta)
    except (ValueError, np.linalg.LinAlgError):
        return TrustState(state.theta, state.delta * SHRINK, state.iteration + 1, lp,
                          state.rejections + 1, False, False, None)
    pred = predicted_increase(gp, B, e)
    if not pred > 0:
        return TrustState(state.theta, state.delta, state.iteration + 1, lp, 0, False,
                          boundary, np.zeros_like(e))
    cand = state.theta + e
    try:
        new_lp = value_fn(cand)
    except (MSMError, FloatingPointError, ValueError, np.linalg.LinAlgError):
        new_lp = -np.inf
    rho = (new_lp - lp) / pred if np.isfinite(new_lp) else -np.inf
    delta = state.delta
    if rho < SHRINK:
        delta = delta * 0.25
    elif rho > EXPAND and boundary:
        delta = min(2.0 * delta, DELTA_MAX)
    delta = min(max(delta, DELTA_MIN), DELTA_MAX)
    if rho > ACCEPT:
        return TrustState(cand, delta, state.iteration + 1, new_lp, 0, True, boundary, e)
    return TrustState(state.theta, delta, state.iteration + 1, lp, state.rejections + 1,
                      False, boundary, e)


@dataclass
class InnerResult:
    theta: np.ndarray
    lp: float
    gp: np.ndarray
    Hp: np.ndarray
    lik: object
    report: ConvergenceReport
    history: list = field(default_factory=list)


def fit_inner(theta0, objective, *, max_iter=500, delta0=1.0, tol=1e-7, callback=None):
    """Iterate ``trust_step`` until the relative-change rule holds.

    The rule ``|l_p(new) - l_p(old)| / (0.1 + |l_p(new)|) < tol`` is applied to
    accepted steps taken strictly inside the trust region (or once the
    gradient criterion already holds), so that a tiny radius cannot mimic
    convergence.
    """
    theta = np.array(theta0, dtype=float)
    lp, gp, Hp, res = objective.full(theta)
    if not np.isfinite(lp):
        raise NumericError("penalized log-likelihood is not finite at the starting values")
    state = TrustState(theta, delta0, 0, lp)
    history = [lp]
    stalled, done, message = False, False, ""
    if is_converged(lp, gp, Hp) and np.max(np.abs(gp), initial=0.0) <= 1e-10 * (1 + abs(lp)):
        done = True
    while not done and state.iteration < max_iter:
        new = trust_step(state, lp, gp, Hp, objective.value)
        if new.accepted:
            old_lp = lp
            lp, gp, Hp, res = objective.full(new.theta)
            new.lp = lp
            history.append(lp)
            if callback:
                callback(new)
            change = abs(lp - old_lp) / (0.1 + abs(lp))
            if change < tol and (not new.on_boundary or is_converged(lp, gp, Hp)):
                done = True
        elif new.step is not None and not np.any(new.step) and new.rejections == 0:
            done = True          # no predicted improvement: stationary point of the model
        if new.rejections >= MAX_REJECT:
            stalled = True
            message = f"{MAX_REJECT} consecutive rejected steps"
            state = new
            break
        state = new
    if not done and not stalled:
        message = f"iteration cap {max_iter} reached"
    conv = is_converged(lp, gp, Hp) and not stalled
    Bmin = float(np.linalg.eigvalsh(-0.5 * (Hp + Hp.T))[0]) if gp.size else float("inf")
    report = ConvergenceReport(
        max_abs_grad=float(np.max(np.abs(gp), initial=0.0)), min_eig=Bmin,
        max_intensity=objective.lik.max_intensity(state.theta), iterations=state.iteration,
        converged=bool(conv), stalled=stalled, message=message, lp=float(lp),
        n_floored=res.n_floored)
    return InnerResult(state.theta, lp, gp, Hp, res, report, history)


def check_convergence(theta, objective, iterations=0) -> ConvergenceReport:
    """Re-evaluate the gradient and curvature criteria at ``theta``."""
    theta = np.asarray(theta, dtype=float)
    lp, gp, Hp, res = objective.full(theta)
    min_eig = float(np.linalg.eigvalsh(-0.5 * (Hp + Hp.T))[0]) if gp.size else float("inf")
    return ConvergenceReport(
        max_abs_grad=float(np.max(np.abs(gp), initial=0.0)), min_eig=min_eig,
        max_intensity=objective.lik.max_intensity(theta), iterations=iterations,
        converged=bool(is_converged(lp, gp, Hp)), lp=float(lp), n_floored=res.n_floored)


# --- starting values ------------------------------------------------------------

def starting_values(panel, design, other=1e-3):
    """Crude rates ``log(n_rs / T_r)`` for intercepts, ``other`` elsewhere."""
    theta = np.full(design.W, float(other))
    known = panel.kind != Kind.CENSORED_STATE
    for a, (r, s) in enumerate(design.transitions):
        T = float(np.sum(panel.dt[panel.z_prev == r]))
        if T <= 0:
            raise NoExposureError(f"state {r} has outgoing transitions but no exposure time")
        n = int(np.sum(known & (panel.z_prev == r) & (panel.z_cur == s)))
        theta[design.intercepts[a]] = math.log(n / T) if n > 0 else math.log(0.5 / T)
    return theta
