"""Simulation of intermittently observed multi-state panels and bias studies.

Latent trajectories follow a clock-forward (calendar time) Markov process:
from state ``r`` entered at time ``u``, a competing event time is drawn for
every allowed transition conditional on exceeding ``u``, and the earliest
wins. Subjects are then observed on a visit grid; depending on the design,
entry into the absorbing state is recorded at its exact time or at the next
visit.

Per-subject random streams come from ``numpy.random.default_rng([seed, rep, i])``
so any subject of any replicate can be regenerated independently.
"""
from __future__ import annotations

import csv
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, stats

from .errors import ValidationError
from .panel import Kind, ObservationRecord, Panel


# --- hazard families ------------------------------------------------------------

@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValidationError("exponential rate must be non-negative")

    def hazard(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.rate)

    def sample(self, u, U):
        """Event time given survival past ``u``, from uniform draws ``U``."""
        U = np.asarray(U, dtype=float)
        if self.rate == 0:
            return np.full(U.shape, np.inf)
        return u - np.log(U) / self.rate


@dataclass(frozen=True)
class Gompertz:
    rate: float
    shape: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValidationError("Gompertz rate must be positive")

    def hazard(self, t):
        return self.rate * np.exp(self.shape * np.asarray(t, dtype=float))

    def sample(self, u, U):
        U = np.asarray(U, dtype=float)
        u = np.asarray(u, dtype=float)
        b = self.shape
        x = -np.log(U) / self.rate * np.exp(-b * u)
        if abs(b) < 1e-300:
            return u + x * np.exp(b * u)
        arg = b * x
        with np.errstate(invalid="ignore", divide="ignore"):
            out = u + np.log1p(arg) / b
        return np.where(arg > -1.0, out, np.inf)


@dataclass(frozen=True)
class LogNormal:
    location: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("log-normal scale must be positive")

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        pos = t > 0
        z = (np.log(t[pos]) - self.location) / self.scale
        out[pos] = np.exp(stats.norm.logpdf(z) - stats.norm.logsf(z)) / (self.scale * t[pos])
        return out

    def sample(self, u, U):
        U = np.asarray(U, dtype=float)
        u = np.asarray(u, dtype=float)
        with np.errstate(divide="ignore"):
            logS_u = np.where(u > 0, stats.norm.logsf((np.log(np.maximum(u, 1e-300))
                                                       - self.location) / self.scale), 0.0)
        z = stats.norm.isf(np.exp(logS_u + np.log(U)))
        return np.exp(self.location + self.scale * z)


def sample_event_time(h, u, rng, size=None):
    """One (or ``size``) draws of the event time for hazard ``h`` given ``T > u``."""
    return h.sample(u, rng.random(size))


# --- designs --------------------------------------------------------------------

@dataclass
class StudyDesign:
    name: str
    n_states: int
    hazards: dict
    visits: np.ndarray
    death: bool = True
    horizon: tuple = (0.0, 10.0)
    pairs: tuple = ()
    formula: str = "s(t, k=10)"
    exact_death: bool = True
    grid_step: float | None = None   # fitting breakpoints used by run_study
    ck_step: float = 1.0             # Chapman-Kolmogorov step used by run_study

    @property
    def transitions(self):
        return sorted(self.hazards)

    def generator(self, t):
        C = self.n_states
        Q = np.zeros((C, C))
        for (r, s), h in self.hazards.items():
            Q[r - 1, s - 1] = float(h.hazard(np.array([t]))[0])
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
        return Q


def illness_death():
    """Three states with a log-normal onset, exponential and Gompertz deaths."""
    return StudyDesign(
        "illness-death", 3,
        {(1, 2): LogNormal(1.25, 1.0), (1, 3): Exponential(math.exp(-2.5)),
         (2, 3): Gompertz(math.exp(-2.5), 0.1)},
        np.arange(0.0, 16.0), death=True,
        pairs=((1, 1), (1, 2), (1, 3), (2, 2), (2, 3)), grid_step=0.25, ck_step=0.05)


def five_state():
    """Progressive five-state process with Gompertz transitions, biennial visits.

    Death is only seen at the visit following it: with exact death times and
    two-year gaps the time smooths would be tied to survival only at the even
    visit times, which leaves the likelihood unbounded in the smoothing
    directions.
    """
    rs = {(1, 2): (-2.25, 0.06), (1, 5): (-5.0, 0.02), (2, 3): (-2.20, 0.05),
          (2, 5): (-5.0, 0.09), (3, 4): (-2.0, 0.01), (3, 5): (-5.0, 0.02),
          (4, 5): (-3.0, 0.04)}
    return StudyDesign(
        "five-state", 5, {k: Gompertz(math.exp(a), b) for k, (a, b) in rs.items()},
        np.arange(0.0, 21.0, 2.0), death=True,
        pairs=((1, 1), (1, 2), (1, 3), (1, 4), (1, 5), (2, 2), (2, 3), (2, 4), (2, 5),
               (3, 3), (3, 4), (3, 5), (4, 4), (4, 5)),
        exact_death=False)


DESIGNS = {"illness-death": illness_death, "five-state": five_state}


def get_design(name):
    try:
        return DESIGNS[name]()
    except KeyError:
        raise ValidationError(f"unknown design {name!r}; choose from {sorted(DESIGNS)}") from None


# --- trajectories ---------------------------------------------------------------

def sample_trajectory(design, rng, start_state=1, t0=0.0, t_end=np.inf):
    """Jump times and states of one latent path, starting at ``t0``."""
    out = {}
    for (r, s) in design.transitions:
        out.setdefault(r, []).append(s)
    times, states = [t0], [start_state]
    u, r = t0, start_state
    while r in out and u < t_end:
        targets = out[r]
        draws = [sample_event_time(design.hazards[(r, s)], u, rng) for s in targets]
        k = int(np.argmin(draws))
        T = float(draws[k])
        if not np.isfinite(T):
            break
        u, r = T, targets[k]
        times.append(u)
        states.append(r)
    return np.array(times), np.array(states)


def _state_at(times, states, t):
    return states[np.searchsorted(times, t, side="right") - 1]


def observe(design, times, states, subject):
    """Observation records of one latent path under the design's visit grid.

    Visits stop once the absorbing state is seen; with ``exact_death`` the
    absorbing state is recorded at its exact entry time instead of at the
    next visit.
    """
    C = design.n_states
    visits = design.visits
    t_end = visits[-1]
    dead_at = times[-1] if (design.death and states[-1] == C) else np.inf
    if design.exact_death:
        obs_t = [t for t in visits if t < dead_at]
        obs_s = [int(_state_at(times, states, t)) for t in obs_t]
        if dead_at <= t_end:
            obs_t.append(float(dead_at))
            obs_s.append(C)
    else:
        obs_t, obs_s = [], []
        for t in visits:
            obs_t.append(float(t))
            obs_s.append(int(_state_at(times, states, t)))
            if obs_s[-1] == C:
                break
    recs = []
    for j in range(1, len(obs_t)):
        exact = design.exact_death and design.death and obs_s[j] == C
        kind = Kind.EXACT_DEATH if exact else Kind.INTERVAL_CENSORED
        recs.append(ObservationRecord(str(subject), float(obs_t[j - 1]), float(obs_t[j]),
                                      obs_s[j - 1], obs_s[j], kind))
    return recs


def subject_rng(seed, rep, i):
    return np.random.default_rng([int(seed), int(rep), int(i)])


def simulate_panel(design, n_subjects, seed=0, rep=0) -> Panel:
    """Simulated panel of ``n_subjects`` paths starting in state 1 at time 0."""
    recs = []
    for i in range(n_subjects):
        rng = subject_rng(seed, rep, i)
        times, states = sample_trajectory(design, rng, t_end=design.visits[-1])
        recs.extend(observe(design, times, states, i + 1))
    return Panel(recs, design.n_states)


def simulate_states(design, n, start_state, t0, t1, rng):
    """Vectorised latent simulation: states at ``t1`` of ``n`` paths from ``start_state`` at ``t0``."""
    out = {}
    for (r, s) in design.transitions:
        out.setdefault(r, []).append(s)
    state = np.full(n, start_state)
    u = np.full(n, float(t0))
    active = np.ones(n, dtype=bool)
    while np.any(active):
        idx = np.flatnonzero(active)
        new_u = np.full(idx.size, np.inf)
        new_s = state[idx].copy()
        for r, targets in out.items():
            sel = idx[state[idx] == r]
            if not sel.size:
                continue
            draws = np.stack([design.hazards[(r, s)].sample(u[sel], rng.random(sel.size))
                              for s in targets])
            k = np.argmin(draws, axis=0)
            pos = np.searchsorted(idx, sel)
            new_u[pos] = draws[k, np.arange(sel.size)]
            new_s[pos] = np.asarray(targets)[k]
        jump = new_u <= t1
        u[idx[jump]] = new_u[jump]
        state[idx[jump]] = new_s[jump]
        active[idx[~jump]] = False
    return state


# --- true transition probabilities ----------------------------------------------

def truth_monte_carlo(design, t0=None, t1=None, n=10**6, seed=12345):
    """``P(t0, t1)`` rows estimated from ``n`` latent paths per starting state."""
    t0 = design.horizon[0] if t0 is None else t0
    t1 = design.horizon[1] if t1 is None else t1
    C = design.n_states
    P = np.zeros((C, C))
    rng = np.random.default_rng(seed)
    living = C - 1 if design.death else C
    for r in range(1, living + 1):
        end = simulate_states(design, n, r, t0, t1, rng)
        P[r - 1] = np.bincount(end - 1, minlength=C) / n
    if design.death:
        P[C - 1, C - 1] = 1.0
    return P


def truth_kolmogorov(design, t0=None, t1=None, rtol=1e-10):
    """``P(t0, t1)`` from the forward equations ``dP/dt = P Q(t)`` with the true hazards."""
    t0 = design.horizon[0] if t0 is None else t0
    t1 = design.horizon[1] if t1 is None else t1
    C = design.n_states

    def rhs(t, y):
        return (y.reshape(C, C) @ design.generator(t)).ravel()

    sol = integrate.solve_ivp(rhs, (t0, t1), np.eye(C).ravel(), method="DOP853",
                              rtol=rtol, atol=1e-12)
    return sol.y[:, -1].reshape(C, C)


def truth_piecewise(design, t0=None, t1=None, step=1.0):
    """Chapman-Kolmogorov product of ``exp(step Q(left endpoint))`` with the true hazards."""
    t0 = design.horizon[0] if t0 is None else t0
    t1 = design.horizon[1] if t1 is None else t1
    P = np.eye(design.n_states)
    for a in np.arange(t0, t1 - 1e-12, step):
        P = P @ linalg.expm(min(step, t1 - a) * design.generator(a))
    return P


# --- bias study -----------------------------------------------------------------

@dataclass
class StudyResult:
    design: str
    pairs: tuple
    truth: np.ndarray
    estimates: list = field(default_factory=list)   # per converged replicate, len(pairs)
    failed: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def mean(self):
        return np.mean(self.estimates, axis=0) if self.estimates else np.full(len(self.pairs), np.nan)

    @property
    def median(self):
        return np.median(self.estimates, axis=0) if self.estimates else np.full(len(self.pairs), np.nan)

    @property
    def bias(self):
        return self.mean - self.truth

    def rows(self):
        m, md, b = self.mean, self.median, self.bias
        return [{"pair": f"p{r}{s}", "truth": self.truth[k], "mean": m[k], "median": md[k],
                 "bias": b[k], "n_converged": len(self.estimates), "n_failed": len(self.failed)}
                for k, (r, s) in enumerate(self.pairs)]

    def write_csv(self, fh):
        w = csv.DictWriter(fh, ["pair", "truth", "mean", "median", "bias",
                                "n_converged", "n_failed"], lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def study_spec(design):
    from .model import ModelSpec, parse_formula
    return ModelSpec(design.n_states, {k: parse_formula(design.formula) for k in design.transitions},
                     death=design.death)


def run_study(design, n_subjects, n_reps, seed=0, *, truth="kolmogorov", options=None,
              ck_step=None, on_replicate=None):
    """Simulate, fit and summarise ten-year transition probabilities.

    ``options`` defaults to the design's fitting grid and ``ck_step`` to the
    design's Chapman-Kolmogorov step.

    Replicates whose fit does not converge are excluded from the summary and
    listed in ``failed``.
    """
    from .inference import chapman_kolmogorov
    from .smoothing import FitOptions, fit

    if isinstance(design, str):
        design = get_design(design)
    if truth == "kolmogorov":
        T = truth_kolmogorov(design)
    elif truth == "piecewise":
        T = truth_piecewise(design)
    else:
        T = truth_monte_carlo(design)
    truth_vec = np.array([T[r - 1, s - 1] for r, s in design.pairs])
    res = StudyResult(design.name, design.pairs, truth_vec)
    spec = study_spec(design)
    opts = options or FitOptions(grid_step=design.grid_step)
    step = design.ck_step if ck_step is None else ck_step
    start = _time.perf_counter()
    for rep in range(n_reps):
        panel = simulate_panel(design, n_subjects, seed=seed, rep=rep)
        try:
            f = fit(panel, spec, opts)
        except Exception as exc:  # noqa: BLE001 - recorded per replicate
            res.failed.append((rep, f"{type(exc).__name__}: {exc}"))
            if on_replicate:
                on_replicate(rep, None)
            continue
        if not f.converged:
            res.failed.append((rep, "not converged"))
            if on_replicate:
                on_replicate(rep, f)
            continue
        P = chapman_kolmogorov(f, design.horizon[0], design.horizon[1], step).P[-1]
        res.estimates.append(np.array([P[r - 1, s - 1] for r, s in design.pairs]))
        if on_replicate:
            on_replicate(rep, f)
    res.seconds = _time.perf_counter() - start
    return res
