"""Matrix exponential of a generator with exact first and second derivatives.

With ``Q = A diag(gamma) A^{-1}`` and ``P = exp(dt Q)``, a direction ``Q_a``
maps to ``G_a = A^{-1} Q_a A`` and

    dP_a      = A (G_a o E) A^{-1}
    d2P_ab    = A (G_ab o E + U_ab + U_ba) A^{-1},
    U_ab[l,m] = sum_y G_a[l,y] G_b[y,m] F[l,y,m]

where ``E`` and ``F`` are the first and second divided differences of
``gamma -> exp(gamma dt)`` over the spectrum. Coincident eigenvalues select
the confluent limits. All functions accept a leading batch axis.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ComplexResidualError, NearDefectiveError

COND_MAX = 1e10
IMAG_TOL = 1e-8


def eig_tolerance(gam):
    """Coincidence tolerance ``1e-7 (1 + max|gamma|)`` per batch item."""
    return 1e-7 * (1.0 + np.max(np.abs(gam), axis=-1))


@dataclass
class EigenSystem:
    A: np.ndarray
    gamma: np.ndarray
    Ainv: np.ndarray
    cond: np.ndarray


@dataclass
class PBundle:
    P: np.ndarray
    dP: np.ndarray   # (W, C, C)
    d2P: np.ndarray  # (W, W, C, C), symmetric in the first two axes


def eigendecompose(Q, *, check=True) -> EigenSystem:
    """Complex eigensystem of one generator or a batch ``(n, C, C)``."""
    Q = np.asarray(Q, dtype=float)
    gam, A = np.linalg.eig(Q)
    A = A.astype(complex)
    gam = gam.astype(complex)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(A)
    cond = np.where(np.isfinite(cond), cond, np.inf)
    if check and np.any(cond > COND_MAX):
        raise NearDefectiveError(
            f"eigenvector matrix condition {np.max(cond):.3g} exceeds {COND_MAX:g}; "
            "use the block-exponential fallback")
    with np.errstate(all="ignore"):
        Ainv = np.linalg.inv(A) if np.all(np.isfinite(cond)) else _safe_inv(A)
    return EigenSystem(A, gam, Ainv, cond)


def _safe_inv(A):
    out = np.empty_like(A)
    flat_in, flat_out = A.reshape(-1, *A.shape[-2:]), out.reshape(-1, *A.shape[-2:])
    for i, a in enumerate(flat_in):
        try:
            flat_out[i] = np.linalg.inv(a)
        except np.linalg.LinAlgError:
            flat_out[i] = np.nan
    return out


def emat(gam, dt, tau=None):
    """First divided differences of ``exp(gamma dt)``; shape ``(..., C, C)``."""
    gam = np.asarray(gam, dtype=complex)
    dt = np.asarray(dt, dtype=float)[..., None, None]
    if tau is None:
        tau = eig_tolerance(gam)
    tau = np.asarray(tau)[..., None, None]
    gl, gm = gam[..., :, None], gam[..., None, :]
    diff = gl - gm
    same = np.abs(diff) <= tau
    safe = np.where(same, 1.0, diff)
    # exp(gm dt) * expm1((gl - gm) dt) / (gl - gm) avoids cancellation
    distinct = np.exp(gm * dt) * np.expm1(diff * dt) / safe
    limit = dt * np.exp(gl * dt)
    return np.where(same, limit, distinct)


def udot_cases(gam, tau=None):
    """Case codes ``(C, C, C)`` selecting the second divided-difference formula.

    1: all distinct, 2: l = y, 3: y = m, 4: l = m, 5: all three coincide.
    """
    gam = np.asarray(gam, dtype=complex)
    if tau is None:
        tau = eig_tolerance(gam)
    tau = np.asarray(tau)[..., None, None, None]
    gl = gam[..., :, None, None]
    gy = gam[..., None, :, None]
    gm = gam[..., None, None, :]
    ly = np.abs(gl - gy) <= tau
    ym = np.abs(gy - gm) <= tau
    lm = np.abs(gl - gm) <= tau
    n_eq = ly.astype(int) + ym + lm
    code = np.ones(n_eq.shape, dtype=int)
    code = np.where(ly & (n_eq == 1), 2, code)
    code = np.where(ym & (n_eq == 1), 3, code)
    code = np.where(lm & (n_eq == 1), 4, code)
    code = np.where(n_eq >= 2, 5, code)
    return code


def fmat(gam, dt, E=None, tau=None):
    """Second divided differences ``F[l, y, m]`` of ``exp(gamma dt)``."""
    gam = np.asarray(gam, dtype=complex)
    if tau is None:
        tau = eig_tolerance(gam)
    if E is None:
        E = emat(gam, dt, tau)
    dt = np.asarray(dt, dtype=float)[..., None, None, None]
    code = udot_cases(gam, tau)
    gl = gam[..., :, None, None]
    gy = gam[..., None, :, None]
    gm = gam[..., None, None, :]
    E_ly = E[..., :, :, None]
    E_ym = E[..., None, :, :]
    E_lm = E[..., :, None, :]
    E_yl = np.swapaxes(E, -1, -2)[..., :, :, None]   # E[y, l] laid out as [l, y]
    E_my = np.swapaxes(E, -1, -2)[..., None, :, :]   # E[m, y] laid out as [y, m]
    el = dt * np.exp(gl * dt)
    em = dt * np.exp(gm * dt)

    def div(num, den):
        ok = den != 0
        return np.where(ok, num / np.where(ok, den, 1.0), 0.0)

    with np.errstate(all="ignore"):
        # distinct: pick the ordering with the widest denominator
        d_lm, d_ly, d_ym = np.abs(gl - gm), np.abs(gl - gy), np.abs(gy - gm)
        c1a = div(E_ly - E_ym, gl - gm)
        c1b = div(E_lm - E_my, gl - gy)
        c1c = div(E_yl - E_lm, gy - gm)
        best_a = (d_lm >= d_ly) & (d_lm >= d_ym)
        best_b = ~best_a & (d_ly >= d_ym)
        c1 = np.where(best_a, c1a, np.where(best_b, c1b, c1c))
        c2 = div(el - E_lm, gl - gm)
        c3 = div(E_lm - em, gl - gm)
        c4 = div(el - E_ly, gl - gy)
        c5 = 0.5 * dt * el
    F = np.select([code == 1, code == 2, code == 3, code == 4], [c1, c2, c3, c4], c5)
    return F


def _sandwich(A, X, Ainv):
    return A[..., None, :, :] @ X @ Ainv[..., None, :, :]


def derivative_core(A, gam, Ainv, dt, dQ, d2Q=None, *, eta_diag=False):
    """Batched P, dP, d2P from eigensystems.

    ``A``, ``Ainv``: ``(n, C, C)``; ``gam``: ``(n, C)``; ``dQ``: ``(n, K, C, C)``.
    ``d2Q`` is ``(n, K, K, C, C)`` or, with ``eta_diag``, implied as
    ``d2Q[a, b] = delta_ab dQ[a]`` (log-intensity axes). Returns complex arrays.
    """
    tau = eig_tolerance(gam)
    E = emat(gam, dt, tau)
    F = fmat(gam, dt, E, tau)
    expg = np.exp(gam * np.asarray(dt, dtype=float)[..., None])
    P = (A * expg[..., None, :]) @ Ainv
    G = Ainv[:, None] @ dQ.astype(complex) @ A[:, None]          # (n, K, C, C)
    dP = _sandwich(A, G * E[:, None], Ainv)
    # U[a, b, l, m] = sum_y G_a[l, y] G_b[y, m] F[l, y, m]
    GF = G[:, :, :, :, None] * F[:, None]                         # (n, K, l, y, m)
    U = np.einsum("nalym,nbym->nablm", GF, G, optimize=True)
    inner = U + np.swapaxes(U, 1, 2)
    K = dQ.shape[1]
    if eta_diag:
        idx = np.arange(K)
        inner[:, idx, idx] += G * E[:, None]
    elif d2Q is not None:
        G2 = Ainv[:, None, None] @ d2Q.astype(complex) @ A[:, None, None]
        inner += G2 * E[:, None, None]
    n, C = gam.shape
    d2P = (A[:, None, None] @ inner @ Ainv[:, None, None])
    return P, dP, d2P


def _real(x, what):
    scale = 1.0 + np.max(np.abs(x.real)) if x.size else 1.0
    im = np.max(np.abs(x.imag)) if x.size else 0.0
    if not np.isfinite(im) or im > IMAG_TOL * scale:
        raise ComplexResidualError(f"imaginary residual {im:.3g} in {what}")
    return np.ascontiguousarray(x.real)


def imag_residual(*arrays):
    """Per-batch-item maximum imaginary part relative to ``1 + max|Re|``."""
    out = None
    for x in arrays:
        ax = tuple(range(1, x.ndim))
        r = np.max(np.abs(x.imag), axis=ax) / (1.0 + np.max(np.abs(x.real), axis=ax))
        r = np.where(np.isfinite(r), r, np.inf)
        out = r if out is None else np.maximum(out, r)
    return out


def clamp_probabilities(P):
    return np.clip(P, 0.0, 1.0)


def pbundle(eig: EigenSystem, dQ, d2Q, dt) -> PBundle:
    """``P = exp(dt Q)`` with full parameter derivatives for one interval."""
    dQ = np.asarray(dQ, dtype=float)
    W = dQ.shape[0]
    C = eig.gamma.shape[-1]
    active = np.flatnonzero(np.any(dQ != 0, axis=(1, 2)))
    P = (eig.A * np.exp(eig.gamma * dt)[None, :]) @ eig.Ainv
    dP = np.zeros((W, C, C))
    d2P = np.zeros((W, W, C, C))
    if active.size:
        sub_d2 = np.asarray(d2Q, dtype=float)[np.ix_(active, active)]
        Pc, dPc, d2Pc = derivative_core(eig.A[None], eig.gamma[None], eig.Ainv[None],
                                        np.array([dt]), dQ[active][None], sub_d2[None])
        dP[active] = _real(dPc[0], "dP")
        d2P[np.ix_(active, active)] = _real(d2Pc[0], "d2P")
    P = clamp_probabilities(_real(P, "P"))
    return PBundle(P, dP, d2P)


# --- independent evaluations -------------------------------------------------

def series_expm_oracle(Q, dt=1.0):
    """Scaling-and-squaring Taylor evaluation of ``exp(dt Q)``."""
    X = np.asarray(Q, dtype=float) * dt
    n = X.shape[0]
    norm = np.max(np.sum(np.abs(X), axis=0)) if X.size else 0.0
    s = max(0, int(np.ceil(np.log2(norm / 0.25)))) if norm > 0.25 else 0
    Y = X / 2.0 ** s
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, 40):
        term = term @ Y / k
        out = out + term
        if np.max(np.abs(term)) < 1e-20:
            break
    for _ in range(s):
        out = out @ out
    return out


def block_pbundle(Q, dQ, d2Q, dt, *, eta_diag=False):
    """P, dP, d2P from block-triangular exponentials (no eigendecomposition).

    ``exp([[X, E_a], [0, X]])`` carries the first derivative in its upper
    right block; second derivatives come from 3x3 block-triangular forms.
    Used for defective or ill-conditioned generators.
    """
    Q = np.asarray(Q, dtype=float)
    C = Q.shape[0]
    K = dQ.shape[0]
    X = dt * Q
    P = linalg.expm(X)
    dP = np.zeros((K, C, C))
    d2P = np.zeros((K, K, C, C))
    Z = np.zeros((C, C))
    for a in range(K):
        if not np.any(dQ[a]):
            continue
        Ea = dt * dQ[a]
        big = linalg.expm(np.block([[X, Ea], [Z, X]]))
        dP[a] = big[:C, C:]
    for a in range(K):
        if not np.any(dQ[a]):
            continue
        Ea = dt * dQ[a]
        for b in range(a, K):
            if not np.any(dQ[b]):
                continue
            Eb = dt * dQ[b]
            if eta_diag:
                Eab = Ea if a == b else Z
            else:
                Eab = dt * d2Q[a, b]
            m1 = linalg.expm(np.block([[X, Ea, Eab], [Z, X, Eb], [Z, Z, X]]))
            m2 = linalg.expm(np.block([[X, Eb, Z], [Z, X, Ea], [Z, Z, X]]))
            d2P[a, b] = m1[:C, 2 * C:] + m2[:C, 2 * C:]
            d2P[b, a] = d2P[a, b]
    return clamp_probabilities(P), dP, d2P


def batched_pbundle(Q, dt, dQ, *, eta_diag=True, d2Q=None, on_fallback=None):
    """P, dP, d2P for a batch of generators ``(n, C, C)`` (real outputs).

    Items whose eigenvector matrix is ill-conditioned or whose complex
    residual is too large are recomputed by ``block_pbundle``.
    """
    n, C = Q.shape[0], Q.shape[-1]
    K = dQ.shape[1]
    if n == 0:
        return np.zeros((0, C, C)), np.zeros((0, K, C, C)), np.zeros((0, K, K, C, C))
    eig = eigendecompose(Q, check=False)
    good = eig.cond <= COND_MAX
    P = np.empty((n, C, C))
    dP = np.empty((n, K, C, C))
    d2P = np.empty((n, K, K, C, C))
    redo = ~good
    if np.any(good):
        g = np.flatnonzero(good)
        with np.errstate(all="ignore"):
            Pc, dPc, d2Pc = derivative_core(eig.A[g], eig.gamma[g], eig.Ainv[g], dt[g], dQ[g],
                                            None if d2Q is None else d2Q[g], eta_diag=eta_diag)
        res = imag_residual(Pc, dPc, d2Pc)
        bad = res > IMAG_TOL
        P[g], dP[g], d2P[g] = Pc.real, dPc.real, d2Pc.real
        redo[g[bad]] = True
    idx = np.flatnonzero(redo)
    if idx.size:
        if on_fallback is not None:
            on_fallback(idx)
        else:
            warnings.warn(f"{idx.size} generator(s) evaluated by block-exponential fallback",
                          RuntimeWarning, stacklevel=2)
        for i in idx:
            P[i], dP[i], d2P[i] = block_pbundle(Q[i], dQ[i], None if d2Q is None else d2Q[i],
                                                dt[i], eta_diag=eta_diag)
    return clamp_probabilities(P), dP, d2P
