"""Block-diagonal smoothing penalty ``S_lambda = sum_k lambda_k S_k``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError


@dataclass
class PenaltyBlock:
    index: np.ndarray
    D: np.ndarray
    label: str = ""

    @property
    def rank(self) -> int:
        ev = np.linalg.eigvalsh(self.D)
        return int(np.sum(ev > 1e-9 * max(ev.max(), 1e-300)))


class PenaltyLayout:
    """Where each smooth's penalty sits inside the ``W``-dimensional parameter vector."""

    def __init__(self, W: int, blocks):
        self.W = int(W)
        self.blocks = [b if isinstance(b, PenaltyBlock) else PenaltyBlock(np.asarray(b[0]),
                                                                        np.asarray(b[1], dtype=float),
                                                                        *b[2:])
                       for b in blocks]
        seen = set()
        for b in self.blocks:
            idx = tuple(int(i) for i in b.index)
            if b.D.shape != (len(idx), len(idx)):
                raise ConfigurationError(f"penalty {b.label!r}: shape mismatch")
            if seen & set(idx):
                raise ConfigurationError("penalty blocks overlap")
            if max(idx) >= self.W:
                raise ConfigurationError("penalty index out of range")
            seen |= set(idx)

    @classmethod
    def from_design(cls, design):
        return cls(design.W, design.penalties())

    @property
    def n_lambda(self) -> int:
        return len(self.blocks)

    @property
    def labels(self):
        return [b.label for b in self.blocks]

    def _check(self, lam):
        lam = np.asarray(lam, dtype=float).ravel()
        if lam.size != self.n_lambda:
            raise ConfigurationError(f"expected {self.n_lambda} smoothing parameters, got {lam.size}")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValidationError("smoothing parameters must be finite and non-negative")
        return lam

    def s_lambda(self, lam) -> np.ndarray:
        lam = self._check(lam)
        S = np.zeros((self.W, self.W))
        for lk, b in zip(lam, self.blocks):
            S[np.ix_(b.index, b.index)] += lk * b.D
        return S

    def ds_dlambda(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n_lambda:
            raise ConfigurationError(f"no smoothing parameter {k}")
        S = np.zeros((self.W, self.W))
        b = self.blocks[k]
        S[np.ix_(b.index, b.index)] = b.D
        return S

    def quad(self, k: int, theta) -> float:
        """``theta^T dS/dlambda_k theta``."""
        b = self.blocks[k]
        t = np.asarray(theta)[b.index]
        return float(t @ b.D @ t)

    def pinv_trace(self, lam, k: int) -> float:
        """``tr(S_lambda^+ dS/dlambda_k)``; blocks do not overlap so this is ``rank(D_k)/lambda_k``."""
        lam = self._check(lam)
        return self.blocks[k].rank / lam[k]

    def pseudo_logdet(self, lam) -> float:
        """Log pseudo-determinant of ``S_lambda`` over its range."""
        lam = self._check(lam)
        total = 0.0
        for lk, b in zip(lam, self.blocks):
            ev = np.linalg.eigvalsh(b.D)
            ev = ev[ev > 1e-9 * max(ev.max(), 1e-300)]
            total += float(np.sum(np.log(lk * ev)))
        return total
