"""Cubic regression splines in the value-at-knot parameterization.

A natural cubic spline with knots ``u_1 < ... < u_J`` is written as
``s(x) = b(x)^T beta`` where ``beta_j = s(u_j)``. The second derivatives at
the knots are a linear function of ``beta`` (``delta = F beta`` with
``delta_1 = delta_J = 0``) and the wiggliness penalty
``int (s''(u))^2 du`` over ``[u_1, u_J]`` is ``beta^T D beta`` with
``D = K^T B^{-1} K``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InsufficientSupportError, ValidationError

KNOT_RULES = ("quantile", "even")


@dataclass(frozen=True)
class KnotVector:
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 1 or k.size < 3:
            raise ValidationError("a knot vector needs at least 3 knots")
        if not np.all(np.isfinite(k)) or np.any(np.diff(k) <= 0):
            raise ValidationError("knots must be finite and strictly increasing")
        object.__setattr__(self, "knots", k)

    def __len__(self):
        return self.knots.size


def build_knots(values, J: int, rule: str = "quantile") -> KnotVector:
    """Place ``J`` knots over the distinct covariate values.

    ``quantile`` puts knot ``i`` at probability ``i/(J-1)`` of the empirical
    distribution of the distinct values (linear interpolation between order
    statistics); ``even`` spaces them uniformly over the range.
    """
    if rule not in KNOT_RULES:
        raise ValidationError(f"unknown knot rule {rule!r}")
    x = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite covariate value in knot construction")
    x = np.unique(x)
    if x.size < J:
        raise InsufficientSupportError(
            f"{x.size} distinct values cannot support {J} knots")
    if rule == "even":
        knots = np.linspace(x[0], x[-1], J)
    else:
        knots = np.quantile(x, np.linspace(0.0, 1.0, J))
    # coincident or nearly coincident knots are pushed apart to spacing eps
    eps = 1e-8 * (x[-1] - x[0])
    for i in range(1, J):
        if knots[i] < knots[i - 1] + eps:
            knots[i] = knots[i - 1] + eps
    return KnotVector(knots)


class CubicRegressionSpline:
    """Natural cubic spline basis with linear extrapolation past the end knots."""

    def __init__(self, knots):
        if not isinstance(knots, KnotVector):
            knots = KnotVector(np.asarray(knots, dtype=float))
        self.knots = knots.knots
        J = self.knots.size
        h = np.diff(self.knots)
        K = np.zeros((J - 2, J))
        B = np.zeros((J - 2, J - 2))
        for i in range(J - 2):
            K[i, i] = 1.0 / h[i]
            K[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
            K[i, i + 2] = 1.0 / h[i + 1]
            B[i, i] = (h[i] + h[i + 1]) / 3.0
            if i + 1 < J - 2:
                B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
        BinvK = linalg.solve(B, K, assume_a="pos")
        # maps beta -> second derivatives at all knots (zero at both ends)
        self._F = np.vstack([np.zeros(J), BinvK, np.zeros(J)])
        pen = K.T @ BinvK
        self.penalty = 0.5 * (pen + pen.T)
        self._h = h

    @property
    def dim(self) -> int:
        return self.knots.size

    def basis(self, x, deriv: int = 0) -> np.ndarray:
        """Rows of basis functions (or their ``deriv``-th derivative) at ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = self.knots
        lo, hi = k[0], k[-1]
        inside = self._piece_basis(np.clip(x, lo, hi), deriv)
        if deriv >= 2:
            out = inside
            out[(x < lo) | (x > hi)] = 0.0
            return out
        if deriv == 1:
            out = inside
            out[x < lo] = self._piece_basis(np.array([lo]), 1)[0]
            out[x > hi] = self._piece_basis(np.array([hi]), 1)[0]
            return out
        left = x < lo
        if left.any():
            d = self._piece_basis(np.array([lo]), 1)[0]
            inside[left] += (x[left] - lo)[:, None] * d
        right = x > hi
        if right.any():
            d = self._piece_basis(np.array([hi]), 1)[0]
            inside[right] += (x[right] - hi)[:, None] * d
        return inside

    def _piece_basis(self, x, deriv):
        k, h, F = self.knots, self._h, self._F
        J = k.size
        j = np.clip(np.searchsorted(k, x, side="right") - 1, 0, J - 2)
        hj = h[j]
        am = k[j + 1] - x
        ap = x - k[j]
        if deriv == 0:
            wm, wp = am / hj, ap / hj
            cm = (am ** 3 / hj - hj * am) / 6.0
            cp = (ap ** 3 / hj - hj * ap) / 6.0
        elif deriv == 1:
            wm, wp = -1.0 / hj, 1.0 / hj
            cm = (-3.0 * am ** 2 / hj + hj) / 6.0
            cp = (3.0 * ap ** 2 / hj - hj) / 6.0
        elif deriv == 2:
            wm = wp = np.zeros_like(x)
            cm, cp = am / hj, ap / hj
        else:
            raise ValueError("deriv must be 0, 1 or 2")
        X = cm[:, None] * F[j] + cp[:, None] * F[j + 1]
        rows = np.arange(x.size)
        X[rows, j] += wm
        X[rows, j + 1] += wp
        return X


@dataclass
class PenalizedBlock:
    """A centred smooth: basis evaluator, penalty and centring map."""

    spline: CubicRegressionSpline
    Z: np.ndarray
    penalty: np.ndarray = field(init=False)

    def __post_init__(self):
        S = self.Z.T @ self.spline.penalty @ self.Z
        self.penalty = 0.5 * (S + S.T)

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    def design(self, x, deriv: int = 0) -> np.ndarray:
        return self.spline.basis(x, deriv) @ self.Z

    def to_dict(self):
        return {"knots": self.spline.knots.tolist(), "Z": self.Z.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(CubicRegressionSpline(np.asarray(d["knots"])), np.asarray(d["Z"]))


def centering_map(X: np.ndarray) -> np.ndarray:
    """Orthonormal basis (J x J-1) of the null space of the column-sum constraint."""
    c = X.sum(axis=0)
    if not np.any(c):
        c = np.ones(X.shape[1])
    Q, _ = linalg.qr(c[:, None])
    return Q[:, 1:]


def crs_basis_and_penalty(knots, center_values) -> PenalizedBlock:
    """Cubic regression spline block centred over ``center_values``."""
    spline = CubicRegressionSpline(knots)
    Z = centering_map(spline.basis(np.asarray(center_values, dtype=float)))
    return PenalizedBlock(spline, Z)
