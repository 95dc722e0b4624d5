"""Covariance, effective degrees of freedom, information criteria and
simulation-based intervals for intensities and transition probabilities."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .errors import NonIdentifiableError, NumericError
from .model import ModelDesign

EIG_CLAMP = 1e-8


# --- edf / information criteria ---------------------------------------------------

def _sym_sqrt(M, clamp=EIG_CLAMP):
    ev, V = np.linalg.eigh(0.5 * (M + M.T))
    ev = np.maximum(ev, clamp)
    return (V * np.sqrt(ev)) @ V.T


def _neg_inverse(Hp):
    B = -0.5 * (Hp + Hp.T)
    if B.size == 0:
        return B
    ev = np.linalg.eigvalsh(B)
    if not np.all(np.isfinite(ev)) or ev[-1] <= 0 or ev[0] <= 1e-13 * ev[-1]:
        raise NonIdentifiableError(
            f"-H_p is singular or not positive definite (eigenvalues in [{ev[0]:.3g}, {ev[-1]:.3g}])")
    return np.linalg.inv(B)


def edf_matrix(H, Hp):
    """``F`` with ``edf = tr(F)``: ``(-H_p)^{-1} R^2`` where ``R`` is the clamped square root of ``-H``."""
    Vp = _neg_inverse(Hp)
    R = _sym_sqrt(-np.asarray(H))
    return Vp @ (R @ R)


def edf_aic_bic(H, Hp, ll, n_obs):
    """``(edf, AIC, BIC)`` with ``edf = tr(sqrt(-H) (-H_p)^{-1} sqrt(-H))``."""
    Vp = _neg_inverse(Hp)
    R = _sym_sqrt(-np.asarray(H))
    edf = float(np.trace(R @ Vp @ R))
    aic = -2.0 * ll + 2.0 * edf
    bic = -2.0 * ll + math.log(max(n_obs, 1)) * edf
    return edf, aic, bic


# --- fitted model ----------------------------------------------------------------

@dataclass
class FitResult:
    design: ModelDesign
    theta: np.ndarray
    lam: np.ndarray
    ll: float
    lp: float
    H: np.ndarray
    Hp: np.ndarray
    n_obs: int
    report: object = None
    lambda_converged: bool = True
    outer_iterations: int = 1
    lambda_labels: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    grid_step: float | None = None
    V: np.ndarray = field(init=False)
    edf: float = field(init=False)
    edf_terms: dict = field(init=False)
    aic: float = field(init=False)
    bic: float = field(init=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        self.Hp = np.asarray(self.Hp, dtype=float)
        try:
            self.V = _neg_inverse(self.Hp)
            self.edf, self.aic, self.bic = edf_aic_bic(self.H, self.Hp, self.ll, self.n_obs)
            F = edf_matrix(self.H, self.Hp)
            d = np.diag(F)
            self.edf_terms = {}
            for sb in self.design.smooth_blocks:
                r, s = self.design.transitions[sb.transition]
                self.edf_terms[f"q{r}{s}:{sb.term}"] = float(d[sb.index].sum())
        except NonIdentifiableError as exc:
            self.V = np.full_like(self.Hp, np.nan)
            self.edf = self.aic = self.bic = float("nan")
            self.edf_terms = {}
            self.notes.append(str(exc))

    @property
    def converged(self):
        return bool(self.report.converged) if self.report is not None else False

    @property
    def names(self):
        return self.design.names

    @property
    def se(self):
        return np.sqrt(np.maximum(np.diag(self.V), 0.0))

    def wald_table(self):
        """Rows ``(name, estimate, se, z, p)`` for intercepts and linear terms."""
        keep = [i for i, n in enumerate(self.names) if ".s(" not in n and ":s(" not in n]
        se = self.se
        rows = []
        for i in keep:
            z = self.theta[i] / se[i] if se[i] > 0 else float("nan")
            p = 2 * stats.norm.sf(abs(z)) if np.isfinite(z) else float("nan")
            rows.append((self.names[i], float(self.theta[i]), float(se[i]), float(z), float(p)))
        return rows

    def summary(self):
        out = ["Multi-state Markov model, penalized likelihood fit", ""]
        out.append(f"{'parameter':<28}{'estimate':>12}{'se':>10}{'z':>9}{'p':>10}")
        for name, est, se, z, p in self.wald_table():
            out.append(f"{name:<28}{est:>12.4f}{se:>10.4f}{z:>9.2f}{p:>10.3g}")
        if self.edf_terms:
            out += ["", f"{'smooth term':<36}{'edf':>8}{'lambda':>14}"]
            for (label, e), lam in zip(self.edf_terms.items(), self.lam):
                out.append(f"{label:<36}{e:>8.2f}{lam:>14.4g}")
        out += ["", f"log-likelihood {self.ll:.4f}   penalized {self.lp:.4f}",
                f"edf {self.edf:.3f}   AIC {self.aic:.3f}   BIC {self.bic:.3f}   n = {self.n_obs}",
                f"converged: {'yes' if self.converged else 'no'}"
                f" (outer cycles {self.outer_iterations}"
                f"{', smoothing parameters not settled' if not self.lambda_converged else ''})"]
        out += [f"note: {n}" for n in self.notes]
        return "\n".join(out)

    # serialization
    def to_dict(self):
        return {"format": "splinemsm-fit/1", "design": self.design.to_dict(),
                "theta": self.theta.tolist(), "lambda": self.lam.tolist(),
                "lambda_labels": list(self.lambda_labels), "names": list(self.names),
                "loglik": self.ll, "penalized_loglik": self.lp,
                "H": self.H.tolist(), "Hp": self.Hp.tolist(), "n_obs": int(self.n_obs),
                "edf": self.edf, "aic": self.aic, "bic": self.bic,
                "edf_terms": self.edf_terms,
                "report": self.report.to_dict() if self.report is not None else None,
                "lambda_converged": self.lambda_converged,
                "outer_iterations": self.outer_iterations, "counts": self.counts,
                "history": [float(h) for h in self.history], "notes": self.notes,
                "grid_step": self.grid_step}

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, allow_nan=True)

    @classmethod
    def from_dict(cls, d):
        from .optimizer import ConvergenceReport
        rep = ConvergenceReport(**d["report"]) if d.get("report") else None
        return cls(ModelDesign.from_dict(d["design"]), np.asarray(d["theta"]),
                   np.asarray(d["lambda"]), float(d["loglik"]), float(d["penalized_loglik"]),
                   np.asarray(d["H"]), np.asarray(d["Hp"]), int(d["n_obs"]), rep,
                   bool(d.get("lambda_converged", True)), int(d.get("outer_iterations", 1)),
                   list(d.get("lambda_labels", [])), dict(d.get("counts", {})),
                   list(d.get("history", [])), list(d.get("notes", [])), d.get("grid_step"))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --- posterior simulation ----------------------------------------------------------

@dataclass
class IntervalBand:
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    labels: list = field(default_factory=list)


def posterior_draws(fit, n_sim, seed=None):
    """``n_sim`` draws from ``N(theta_hat, V)`` using an eigen square root of ``V``."""
    V = 0.5 * (fit.V + fit.V.T)
    if not np.all(np.isfinite(V)):
        raise NumericError("covariance matrix is not available for this fit")
    ev, U = np.linalg.eigh(V)
    if ev.size and ev[0] < -1e-8 * max(abs(ev[-1]), 1.0):
        raise NumericError(
            "covariance matrix is not positive semi-definite; refit or repair it to the "
            "nearest positive definite matrix before simulating")
    root = U * np.sqrt(np.maximum(ev, 0.0))
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n_sim, fit.theta.size))
    return fit.theta[None, :] + Z @ root.T


def _profile_covs(design, profile, n):
    covs = {}
    for name in design.required_covariates():
        if profile is None or name not in profile:
            from .errors import MissingCovariateError
            raise MissingCovariateError(f"profile value for covariate {name!r} is required")
        covs[name] = np.full(n, float(profile[name]))
    return covs


def _quantiles(samples, alpha):
    lo, hi = np.quantile(samples, [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    return lo, hi


def predict_q(fit, grid, profile=None, *, n_sim=1000, alpha=0.05, seed=None, bands=True):
    """Intensity curves ``(len(grid), R)`` with pointwise simulation bands."""
    grid = np.asarray(grid, dtype=float)
    X = fit.design.eta_design(_profile_covs(fit.design, profile, grid.size), grid)
    est = np.exp(X @ fit.theta)
    labels = [f"q{r}{s}" for r, s in fit.design.transitions]
    if not bands:
        return IntervalBand(grid, est, est.copy(), est.copy(), labels)
    th = posterior_draws(fit, n_sim, seed)
    sims = np.exp(np.einsum("grw,sw->sgr", X, th))
    lo, hi = _quantiles(sims, alpha)
    return IntervalBand(grid, est, lo, hi, labels)


@dataclass
class CKResult:
    times: np.ndarray
    P: np.ndarray                 # (len(times), C, C)
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


def _ck_products(design, thetas, t0, t1, step, profile):
    lefts = np.arange(t0, t1 - 1e-9 * step, step)
    rights = np.minimum(lefts + step, t1)
    X = design.eta_design(_profile_covs(design, profile, lefts.size), lefts)   # (K, R, W)
    eta = np.einsum("krw,sw->skr", X, thetas)
    design.check_eta(eta.reshape(-1, design.R))
    S, K = thetas.shape[0], lefts.size
    Q = design.generator(np.exp(eta).reshape(-1, design.R)).reshape(S, K, design.spec.n_states, -1)
    Pk = linalg.expm(Q * (rights - lefts)[None, :, None, None])
    C = design.spec.n_states
    out = np.empty((S, K + 1, C, C))
    out[:, 0] = np.eye(C)
    for k in range(K):
        out[:, k + 1] = out[:, k] @ Pk[:, k]
    return np.concatenate([[t0], rights]), np.clip(out, 0.0, 1.0)


def chapman_kolmogorov(fit, t0, t1, step=1.0, profile=None, *, bands=False, n_sim=1000,
                       alpha=0.05, seed=None):
    """``P(t0, t)`` at ``t0, t0 + step, ..., t1`` as a product of per-step exponentials.

    Each factor uses the generator at its sub-interval's left endpoint. With
    ``bands`` the whole product is recomputed for every posterior draw.
    """
    if not t1 > t0 or not step > 0:
        from .errors import ValidationError
        raise ValidationError("need t1 > t0 and step > 0")
    times, P = _ck_products(fit.design, fit.theta[None], t0, t1, step, profile)
    res = CKResult(times, P[0])
    if bands:
        th = posterior_draws(fit, n_sim, seed)
        _, sims = _ck_products(fit.design, th, t0, t1, step, profile)
        res.lower, res.upper = _quantiles(sims, alpha)
    return res


def posterior_sim(fit, target, grid, profile=None, *, n_sim=1000, alpha=0.05, seed=None,
                  step=1.0):
    """Bands for ``target='q'`` (intensities on ``grid``) or ``'P'`` (``P(grid[0], t)``)."""
    if target == "q":
        return predict_q(fit, grid, profile, n_sim=n_sim, alpha=alpha, seed=seed)
    if target == "P":
        grid = np.asarray(grid, dtype=float)
        r = chapman_kolmogorov(fit, grid[0], grid[-1], step, profile, bands=True,
                               n_sim=n_sim, alpha=alpha, seed=seed)
        return IntervalBand(r.times, r.P, r.lower, r.upper)
    raise ValueError("target must be 'q' or 'P'")
