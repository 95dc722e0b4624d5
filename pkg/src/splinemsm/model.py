"""Model specification, design matrices and generator assembly.

Every allowed transition ``r -> s`` gets a log-linear intensity
``q_rs = exp(eta_rs)`` where ``eta_rs`` is an intercept, centred cubic
regression spline smooths and linear covariate terms. ``eta`` is linear in
the parameter vector ``theta``, so the whole model is described by a design
array ``X`` of shape ``(n, R, W)`` with ``eta[i, a] = X[i, a] @ theta``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigurationError, IntensityOverflowError,
                     MissingCovariateError, ValidationError)
from .splines import KNOT_RULES, PenalizedBlock, build_knots, crs_basis_and_penalty

TIME_NAMES = ("t", "time")
ETA_MAX = 700.0


# --- formula terms -----------------------------------------------------------

@dataclass(frozen=True)
class SmoothTerm:
    covariate: str
    J: int = 10
    rule: str = "quantile"

    def __post_init__(self):
        if self.J < 3:
            raise ConfigurationError(f"s({self.covariate}): k must be at least 3")
        if self.rule not in KNOT_RULES:
            raise ConfigurationError(f"s({self.covariate}): unknown knot rule {self.rule!r}")

    def __str__(self):
        extra = "" if self.rule == "quantile" else f", rule={self.rule}"
        return f"s({self.covariate}, k={self.J}{extra})"


@dataclass(frozen=True)
class LinearTerm:
    covariate: str

    def __str__(self):
        return self.covariate


_NAME = r"[A-Za-z_][A-Za-z0-9_.]*"
_SMOOTH_RE = re.compile(rf"^s\(\s*({_NAME})\s*((?:,\s*\w+\s*=\s*[\w.]+\s*)*)\)$")


def parse_formula(text: str):
    """Parse ``0`` (disallowed), ``1`` (intercept only) or ``term + term ...``.

    Returns ``None`` for a disallowed transition, otherwise the list of
    non-intercept terms (the intercept is always present).
    """
    text = text.strip()
    if text == "0":
        return None
    if not text:
        raise ConfigurationError("empty formula")
    terms = []
    for raw in text.split("+"):
        tok = raw.strip()
        if tok == "1":
            continue
        m = _SMOOTH_RE.match(tok)
        if m:
            kwargs = {}
            for kv in filter(None, (p.strip() for p in m.group(2).split(","))):
                key, val = (x.strip() for x in kv.split("="))
                if key == "k":
                    try:
                        kwargs["J"] = int(val)
                    except ValueError:
                        raise ConfigurationError(f"bad basis dimension in {tok!r}") from None
                elif key in ("rule", "knots"):
                    kwargs["rule"] = val.strip("'\"")
                else:
                    raise ConfigurationError(f"unknown smooth option {key!r} in {tok!r}")
            terms.append(SmoothTerm(m.group(1), **kwargs))
        elif re.fullmatch(_NAME, tok):
            terms.append(LinearTerm(tok))
        else:
            raise ConfigurationError(f"cannot parse formula term {tok!r}")
    names = [str(t) for t in terms]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicated term in formula {text!r}")
    return terms


def format_formula(terms) -> str:
    if terms is None:
        return "0"
    if not terms:
        return "1"
    return " + ".join(str(t) for t in terms)


# --- model specification -----------------------------------------------------

@dataclass
class ModelSpec:
    """Per-transition formulas over ``n_states`` states.

    ``formulas`` maps every allowed ``(r, s)`` (1-based) to its term list.
    ``shared`` names linear covariates whose coefficient is common to all
    transitions using them.
    """

    n_states: int
    formulas: dict
    shared: tuple = ()
    death: bool = False
    cens_code: int = -99

    def __post_init__(self):
        C = self.n_states
        if C < 2:
            raise ConfigurationError("at least two states are needed")
        clean = {}
        for key, terms in self.formulas.items():
            r, s = (int(k) for k in key)
            if r == s or not (1 <= r <= C and 1 <= s <= C):
                raise ConfigurationError(f"invalid transition {r}->{s}")
            if isinstance(terms, str):
                terms = parse_formula(terms)
            if terms is not None:
                clean[(r, s)] = list(terms)
        if not clean:
            raise ConfigurationError("no allowed transitions")
        self.formulas = dict(sorted(clean.items()))
        self.shared = tuple(self.shared)
        if self.death and any(r == C for r, _ in self.formulas):
            raise ConfigurationError(f"death state {C} cannot have outgoing transitions")
        linear = {t.covariate for ts in self.formulas.values() for t in ts
                  if isinstance(t, LinearTerm)}
        for name in self.shared:
            if name not in linear:
                raise ConfigurationError(
                    f"shared term {name!r} is not a linear term of any transition")

    @classmethod
    def from_strings(cls, n_states, formulas, **kw):
        return cls(n_states, {k: parse_formula(v) if isinstance(v, str) else v
                              for k, v in formulas.items()}, **kw)

    @property
    def transitions(self):
        return list(self.formulas)

    @property
    def absorbing(self):
        origins = {r for r, _ in self.formulas}
        return [c for c in range(1, self.n_states + 1) if c not in origins]

    def covariates(self):
        return sorted({t.covariate for ts in self.formulas.values() for t in ts})

    def to_dict(self):
        return {"n_states": self.n_states,
                "formulas": {f"{r}->{s}": format_formula(ts) for (r, s), ts in self.formulas.items()},
                "shared": list(self.shared), "death": self.death, "cens_code": self.cens_code}

    @classmethod
    def from_dict(cls, d):
        forms = {}
        for key, text in d["formulas"].items():
            r, s = key.split("->")
            forms[(int(r), int(s))] = parse_formula(text)
        return cls(int(d["n_states"]), forms, tuple(d.get("shared", ())),
                   bool(d.get("death", False)), int(d.get("cens_code", -99)))


_SECTION_RE = re.compile(r"^\[\s*transition\s+(\d+)\s*->\s*(\d+)\s*\]$", re.IGNORECASE)


def parse_formula_file(text: str, *, death=False, cens_code=-99, n_states=None) -> ModelSpec:
    """Parse the sectioned formula file format.

    ``[transition R->S]`` sections hold ``formula = ...``; a ``shared = a, b``
    line may appear at top level or inside a ``[shared]`` section. Every
    ordered pair of distinct states must be listed exactly once.
    """
    section = None
    formulas, shared = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            m = _SECTION_RE.match(line)
            if m:
                section = (int(m.group(1)), int(m.group(2)))
                if section in formulas:
                    raise ConfigurationError(
                        f"line {lineno}: transition {section[0]}->{section[1]} listed twice")
                formulas[section] = "__missing__"
            elif line.lower() == "[shared]":
                section = "shared"
            else:
                raise ConfigurationError(f"line {lineno}: unknown section {line!r}")
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.lower()
        if key in ("shared", "terms") and (section is None or section == "shared"):
            shared += [v.strip() for v in value.split(",") if v.strip()]
        elif key == "formula" and isinstance(section, tuple):
            if formulas[section] != "__missing__":
                raise ConfigurationError(f"line {lineno}: second formula for {section}")
            try:
                formulas[section] = parse_formula(value)
            except ConfigurationError as exc:
                raise ConfigurationError(f"line {lineno}: {exc}") from None
        else:
            raise ConfigurationError(f"line {lineno}: unexpected key {key!r}")
    missing_formula = [k for k, v in formulas.items() if v == "__missing__"]
    if missing_formula:
        r, s = missing_formula[0]
        raise ConfigurationError(f"transition {r}->{s} has no formula")
    if not formulas:
        raise ConfigurationError("no transition sections found")
    C = n_states or max(max(k) for k in formulas)
    need = {(r, s) for r in range(1, C + 1) for s in range(1, C + 1) if r != s}
    absent = sorted(need - set(formulas))
    if absent:
        raise ConfigurationError(
            "missing transition section(s): " + ", ".join(f"{r}->{s}" for r, s in absent))
    return ModelSpec(C, formulas, tuple(shared), death=death, cens_code=cens_code)


# --- design ------------------------------------------------------------------

@dataclass
class QBundle:
    """Generator and its parameter derivatives for one interval."""

    Q: np.ndarray
    dQ: np.ndarray    # (W, C, C)
    d2Q: np.ndarray   # (W, W, C, C), symmetric in the first two axes
    dt: float = 1.0


@dataclass
class SmoothBlock:
    transition: int
    term: SmoothTerm
    block: PenalizedBlock
    index: np.ndarray = field(repr=False)


class ModelDesign:
    """Parameter layout and design construction for a fitted model."""

    def __init__(self, spec: ModelSpec, smooths: dict):
        self.spec = spec
        self.transitions = spec.transitions
        self.R = len(self.transitions)
        C = spec.n_states
        self.from_idx = np.array([r - 1 for r, _ in self.transitions])
        self.to_idx = np.array([s - 1 for _, s in self.transitions])
        names, self.intercepts, self.smooth_blocks, self.linear = [], [], [], []
        for a, (r, s) in enumerate(self.transitions):
            lab = f"q{r}{s}" if C < 10 else f"q{r}_{s}"
            self.intercepts.append(len(names))
            names.append(f"{lab}:(Intercept)")
            for term in spec.formulas[(r, s)]:
                if isinstance(term, SmoothTerm):
                    blk = smooths[(a, term.covariate)]
                    idx = np.arange(len(names), len(names) + blk.dim)
                    names += [f"{lab}:s({term.covariate}).{j + 1}" for j in range(blk.dim)]
                    self.smooth_blocks.append(SmoothBlock(a, term, blk, idx))
            for term in spec.formulas[(r, s)]:
                if isinstance(term, LinearTerm) and term.covariate not in spec.shared:
                    self.linear.append((a, term.covariate, len(names)))
                    names.append(f"{lab}:{term.covariate}")
        for cov in spec.shared:
            k = len(names)
            names.append(f"shared:{cov}")
            for a, (r, s) in enumerate(self.transitions):
                if any(isinstance(t, LinearTerm) and t.covariate == cov
                       for t in spec.formulas[(r, s)]):
                    self.linear.append((a, cov, k))
        self.names = names
        self.W = len(names)
        self.owner = np.full(self.W, -1)
        self.owner[self.intercepts] = np.arange(self.R)
        for sb in self.smooth_blocks:
            self.owner[sb.index] = sb.transition
        for a, cov, k in self.linear:
            if cov not in spec.shared:
                self.owner[k] = a

    # layout helpers
    def transition_of(self, r, s) -> int:
        return self.transitions.index((r, s))

    def penalties(self):
        """``(index, D, label)`` for every smooth, in parameter order."""
        out = []
        for sb in self.smooth_blocks:
            r, s = self.transitions[sb.transition]
            out.append((sb.index, sb.block.penalty, f"q{r}{s}:{sb.term}"))
        return out

    def required_covariates(self):
        return sorted({c for c in self.spec.covariates() if c not in TIME_NAMES})

    def _column(self, name, covs, times):
        if name in TIME_NAMES:
            return np.asarray(times, dtype=float)
        if name not in covs:
            raise MissingCovariateError(f"covariate {name!r} not found in the data")
        x = np.asarray(covs[name], dtype=float)
        bad = ~np.isfinite(x)
        if np.any(bad):
            raise ValidationError(
                f"non-finite value of covariate {name!r} in row {int(np.argmax(bad))}")
        return x

    def eta_design(self, covs, times) -> np.ndarray:
        """Design array ``X`` with ``eta[i, a] = X[i, a] @ theta``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        n = times.size
        X = np.zeros((n, self.R, self.W))
        X[:, np.arange(self.R), self.intercepts] = 1.0
        cache = {}
        for sb in self.smooth_blocks:
            name = sb.term.covariate
            if name not in cache:
                cache[name] = self._column(name, covs, times)
            X[:, sb.transition, sb.index] = sb.block.design(cache[name])
        for a, name, k in self.linear:
            if name not in cache:
                cache[name] = self._column(name, covs, times)
            X[:, a, k] = cache[name]
        return X

    def eta(self, theta, covs, times):
        return self.eta_design(covs, times) @ np.asarray(theta, dtype=float)

    def check_eta(self, eta):
        if np.any(~np.isfinite(eta)) or np.any(eta > ETA_MAX):
            bad = np.argwhere(~(eta <= ETA_MAX))[0]
            r, s = self.transitions[bad[-1]]
            raise IntensityOverflowError(
                f"intensity overflow on transition {r}->{s} (eta > {ETA_MAX:g})",
                transition=(r, s))

    def intensities(self, eta):
        self.check_eta(eta)
        return np.exp(eta)

    def generator(self, q):
        """Generators ``(n, C, C)`` from intensities ``(n, R)``."""
        q = np.atleast_2d(q)
        C = self.spec.n_states
        Q = np.zeros((q.shape[0], C, C))
        Q[:, self.from_idx, self.to_idx] = q
        np.add.at(Q, (slice(None), self.from_idx, self.from_idx), -q)
        return Q

    def assemble_Q(self, theta, covs, times):
        """Generators at the given covariate rows and times."""
        return self.generator(self.intensities(self.eta(theta, covs, times)))

    def qbundle(self, theta, cov_row, time, dt=1.0) -> QBundle:
        """Full parameter-space generator derivatives at one covariate row."""
        covs = {k: np.atleast_1d(v) for k, v in (cov_row or {}).items()}
        X = self.eta_design(covs, [time])[0]                  # (R, W)
        q = self.intensities(X @ np.asarray(theta, dtype=float))
        M = self.generator(np.eye(self.R) * q)                # (R, C, C): dQ/d eta_a
        Q = M.sum(axis=0)
        dQ = np.einsum("aw,aij->wij", X, M)
        d2Q = np.einsum("aw,av,aij->wvij", X, X, M)
        return QBundle(Q, dQ, d2Q, float(dt))

    # serialization
    def to_dict(self):
        return {"spec": self.spec.to_dict(),
                "smooths": [{"transition": sb.transition, "covariate": sb.term.covariate,
                             **sb.block.to_dict()} for sb in self.smooth_blocks]}

    @classmethod
    def from_dict(cls, d):
        spec = ModelSpec.from_dict(d["spec"])
        smooths = {(int(s["transition"]), s["covariate"]): PenalizedBlock.from_dict(s)
                   for s in d["smooths"]}
        return cls(spec, smooths)


def build_design(spec: ModelSpec, panel) -> ModelDesign:
    """Construct knots, penalties and centring from a panel.

    Time smooths use knots over the distinct left endpoints together with the
    exactly observed right endpoints; centring is over the left-endpoint rows,
    which are the rows that enter the piecewise-constant generators.
    """
    from .panel import Kind

    covs = panel.covariates
    exact = (panel.kind == Kind.EXACT_LIVING) | (panel.kind == Kind.EXACT_DEATH)
    smooths = {}
    for a, key in enumerate(spec.transitions):
        for term in spec.formulas[key]:
            name = term.covariate
            if name not in TIME_NAMES and name not in covs:
                raise MissingCovariateError(f"covariate {name!r} not found in the data")
            if name not in TIME_NAMES:
                x = np.asarray(covs[name], dtype=float)
                bad = ~np.isfinite(x)
                if np.any(bad):
                    raise ValidationError(
                        f"non-finite value of covariate {name!r} in record {int(np.argmax(bad))}")
            if not isinstance(term, SmoothTerm):
                continue
            if name in TIME_NAMES:
                support = np.concatenate([panel.t_prev, panel.t_cur[exact]])
                center = panel.t_prev
            else:
                support = center = np.asarray(covs[name], dtype=float)
            knots = build_knots(support, term.J, term.rule)
            smooths[(a, name)] = crs_basis_and_penalty(knots, center)
    return ModelDesign(spec, smooths)
