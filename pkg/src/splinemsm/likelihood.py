"""Log-likelihood with analytic gradient and Hessian.

Each record contributes one of four kinds of likelihood term. The kernels
below work on a generic set of parameter axes: callers supply the building
blocks (a row of ``P`` or the exact-time intensities) together with their
first and second derivatives along those axes.

``Likelihood`` evaluates the model on log-intensity axes (one per transition
and piece, plus one per transition at the exact observation time) and maps
to ``theta`` with the linear design: ``g = sum J^T g_loc`` and
``H = sum J^T h_loc J``.
"""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, DegenerateContributionError
from .expmd import batched_pbundle
from .panel import Kind

L_FLOOR = 1e-300
CHUNK = 1024
THREADS_ENV = "SPLINEMSM_NUM_THREADS"


# --- kernels (batched over records, generic axes) -----------------------------

def kernel_interval(v, dv, d2v, zc):
    i = np.arange(v.shape[0])
    return v[i, zc], dv[i, :, zc], d2v[i, :, :, zc]


def kernel_censored(v, dv, d2v, mask):
    m = mask.astype(float)
    return (np.einsum("nc,nc->n", v, m), np.einsum("nac,nc->na", dv, m),
            np.einsum("nabc,nc->nab", d2v, m))


def kernel_death(v, dv, d2v, vq, dvq, d2vq):
    """``L = sum_c v_c vq_c`` with both factors depending on the axes."""
    L = np.einsum("nc,nc->n", v, vq)
    dL = np.einsum("nac,nc->na", dv, vq) + np.einsum("nc,nac->na", v, dvq)
    cross = np.einsum("nac,nbc->nab", dv, dvq)
    d2L = (np.einsum("nabc,nc->nab", d2v, vq) + cross + np.swapaxes(cross, 1, 2)
           + np.einsum("nc,nabc->nab", v, d2vq))
    return L, dL, d2L


def kernel_living(I, dI, d2I, q, dq, d2q):
    """``L = exp(I) q`` for an exactly observed living state."""
    e = np.exp(I)
    L = e * q
    dL = e[:, None] * (dq + q[:, None] * dI)
    cross = dq[:, :, None] * dI[:, None, :]
    d2L = e[:, None, None] * (d2q + cross + np.swapaxes(cross, 1, 2)
                              + q[:, None, None] * (dI[:, :, None] * dI[:, None, :] + d2I))
    return L, dL, d2L


def contribution(rec, pb, qb_prev, qb_cur=None):
    """``(L, dL, d2L)`` of one record from full parameter-space bundles.

    ``pb`` is the ``PBundle`` over the interval, ``qb_prev``/``qb_cur`` the
    generator bundles at the left endpoint and at the observation time.
    """
    zp = rec.z_prev - 1
    kind = Kind(rec.kind)
    qb_cur = qb_cur if qb_cur is not None else qb_prev
    v = pb.P[zp][None]
    dv = pb.dP[:, zp][None]
    d2v = pb.d2P[:, :, zp][None]
    if kind == Kind.INTERVAL_CENSORED:
        out = kernel_interval(v, dv, d2v, np.array([rec.z_cur - 1]))
    elif kind == Kind.CENSORED_STATE:
        mask = np.zeros((1, pb.P.shape[0]), dtype=bool)
        mask[0, [s - 1 for s in rec.censored_set]] = True
        out = kernel_censored(v, dv, d2v, mask)
    elif kind == Kind.EXACT_DEATH:
        d = rec.z_cur - 1
        vq = qb_cur.Q[:, d].copy()
        dvq = qb_cur.dQ[:, :, d].copy()
        d2vq = qb_cur.d2Q[:, :, :, d].copy()
        vq[d] = 0.0
        dvq[:, d] = 0.0
        d2vq[:, :, d] = 0.0
        out = kernel_death(v, dv, d2v, vq[None], dvq[None], d2vq[None])
    else:
        dt = rec.t_cur - rec.t_prev
        I = np.array([qb_prev.Q[zp, zp] * dt])
        dI = qb_prev.dQ[:, zp, zp][None] * dt
        d2I = qb_prev.d2Q[:, :, zp, zp][None] * dt
        zc = rec.z_cur - 1
        if zc == zp:
            W = dI.shape[1]
            q, dq, d2q = np.ones(1), np.zeros((1, W)), np.zeros((1, W, W))
        else:
            q = np.array([qb_cur.Q[zp, zc]])
            dq = qb_cur.dQ[:, zp, zc][None]
            d2q = qb_cur.d2Q[:, :, zp, zc][None]
        out = kernel_living(I, dI, d2I, q, dq, d2q)
    L, dL, d2L = (x[0] for x in out)
    if not np.isfinite(L) or L <= 0:
        raise DegenerateContributionError(
            f"non-positive likelihood contribution for subject {rec.subject}",
            subject=rec.subject, interval=(rec.t_prev, rec.t_cur))
    return float(L), dL, d2L


# --- results -------------------------------------------------------------------

@dataclass
class LikelihoodResult:
    ll: float
    g: np.ndarray
    H: np.ndarray
    counts: dict = field(default_factory=dict)
    n_floored: int = 0
    scores: np.ndarray | None = None    # per-subject score vectors
    asymmetry: float = 0.0


def penalized(theta, S, result: LikelihoodResult):
    """``(l_p, g_p, H_p)`` for penalty matrix ``S``."""
    theta = np.asarray(theta, dtype=float)
    S = np.asarray(S, dtype=float)
    if S.shape != (theta.size, theta.size):
        raise ConfigurationError(
            f"penalty shape {S.shape} does not match {theta.size} parameters")
    St = S @ theta
    lp = result.ll - 0.5 * float(theta @ St)
    gp = None if result.g is None else result.g - St
    Hp = None if result.H is None else result.H - S
    return lp, gp, Hp


def reachability(n_states, transitions):
    """Boolean ``(C, C)`` matrix: ``s`` reachable from ``r`` in zero or more jumps."""
    C = n_states
    R = np.eye(C, dtype=bool)
    for r, s in transitions:
        R[r - 1, s - 1] = True
    for k in range(C):
        R = R | (R[:, [k]] & R[[k], :])
    return R


def _piece_grid(t0, t1, step):
    if step is None:
        return np.array([t0])
    k0 = np.floor(t0 / step + 1e-9) + 1
    pts = np.arange(k0, np.ceil(t1 / step - 1e-9)) * step
    pts = pts[(pts > t0 + 1e-9 * step) & (pts < t1 - 1e-9 * step)]
    return np.concatenate([[t0], pts])


def n_threads_from_env(default=1):
    try:
        return max(1, int(os.environ.get(THREADS_ENV, default)))
    except ValueError:
        return default


class Likelihood:
    """Log-likelihood of a panel under a model design.

    ``grid_step`` inserts extra piecewise-constant breakpoints at multiples of
    the step inside each interval (``None`` keeps one piece per interval).
    """

    def __init__(self, design, panel, *, grid_step=None, n_threads=None):
        self.design = design
        self.panel = panel
        self.C = design.spec.n_states
        self.R = design.R
        self.W = design.W
        self.n_threads = n_threads or n_threads_from_env()
        self.grid_step = grid_step
        self._check_structure()
        n = len(panel)
        grids = [_piece_grid(a, b, grid_step) for a, b in zip(panel.t_prev, panel.t_cur)]
        self.npc = max((g.size for g in grids), default=1)
        starts = np.zeros((n, self.npc))
        dts = np.zeros((n, self.npc))
        mask = np.zeros((n, self.npc), dtype=bool)
        for i, g in enumerate(grids):
            ends = np.append(g[1:], panel.t_cur[i])
            starts[i, :g.size] = g
            starts[i, g.size:] = g[-1]
            dts[i, :g.size] = ends - g
            mask[i, :g.size] = True
        self.piece_dt = dts
        self.piece_mask = mask
        covs = panel.covariates
        Xp = np.empty((n, self.npc, self.R, self.W))
        for k in range(self.npc):
            Xp[:, k] = design.eta_design(covs, starts[:, k])
        self.Xpiece = Xp
        self.Xcur = design.eta_design(covs, panel.t_cur)
        self.kind = panel.kind
        self.zp = panel.z_prev - 1
        self.zc = np.where(panel.kind == Kind.CENSORED_STATE, 0, panel.z_cur - 1)
        _, self.subject_index = np.unique(panel.subject, return_inverse=True)
        self.n_subjects = int(self.subject_index.max() + 1) if n else 0
        self.counts = panel.kind_counts()
        self.n_fallback = 0
        self.chunks = [np.arange(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]

    def _check_structure(self):
        p, C = self.panel, self.C
        reach = reachability(C, self.design.transitions)
        adj = np.zeros((C, C), dtype=bool)
        for r, s in self.design.transitions:
            adj[r - 1, s - 1] = True
        for i in range(len(p)):
            zp, kind = p.z_prev[i] - 1, p.kind[i]
            if kind == Kind.INTERVAL_CENSORED:
                ok = reach[zp, p.z_cur[i] - 1]
            elif kind == Kind.CENSORED_STATE:
                ok = np.any(reach[zp] & p.censored_mask[i])
            elif kind == Kind.EXACT_DEATH:
                d = p.z_cur[i] - 1
                ok = np.any(reach[zp] & adj[:, d])
            else:
                ok = p.z_cur[i] == p.z_prev[i] or adj[zp, p.z_cur[i] - 1]
            if not ok:
                raise DegenerateContributionError(
                    f"subject {p.subject[i]}: observation {p.z_prev[i]} -> {p.z_cur[i]} "
                    f"on ({p.t_prev[i]:g}, {p.t_cur[i]:g}] is impossible under the "
                    "allowed transitions", subject=p.subject[i],
                    interval=(p.t_prev[i], p.t_cur[i]))

    # -- evaluation -----------------------------------------------------------
    def __call__(self, theta, *, derivatives=2, scores=False):
        theta = np.asarray(theta, dtype=float)
        if derivatives == 0:
            parts = self._map(lambda idx: self._value_chunk(theta, idx))
            ll = float(sum(p[0] for p in parts))
            return LikelihoodResult(ll, None, None, dict(self.counts),
                                    int(sum(p[1] for p in parts)))
        parts = self._map(lambda idx: self._chunk(theta, idx, scores))
        g = np.zeros(self.W)
        H = np.zeros((self.W, self.W))
        ll, nfl = 0.0, 0
        S = np.zeros((self.n_subjects, self.W)) if scores else None
        for idx, (cll, cg, cH, cnf, cs) in zip(self.chunks, parts):
            ll += cll
            g += cg
            H += cH
            nfl += cnf
            if scores:
                np.add.at(S, self.subject_index[idx], cs)
        asym = float(np.max(np.abs(H - H.T))) if H.size else 0.0
        H = 0.5 * (H + H.T)
        if nfl:
            warnings.warn(f"{nfl} likelihood contribution(s) floored at {L_FLOOR:g}",
                          RuntimeWarning, stacklevel=2)
        return LikelihoodResult(ll, g, H, dict(self.counts), nfl, S, asym)

    def loglik(self, theta):
        return self(theta, derivatives=0).ll

    def _map(self, fn):
        if self.n_threads > 1 and len(self.chunks) > 1:
            with ThreadPoolExecutor(self.n_threads) as ex:
                return list(ex.map(fn, self.chunks))
        return [fn(idx) for idx in self.chunks]

    def _eta(self, theta, idx):
        ep = self.Xpiece[idx] @ theta        # (m, npc, R)
        ec = self.Xcur[idx] @ theta          # (m, R)
        self.design.check_eta(ep.reshape(-1, self.R))
        self.design.check_eta(ec)
        return np.exp(ep), np.exp(ec)

    def _value_chunk(self, theta, idx):
        qp, qc = self._eta(theta, idx)
        m, C = idx.size, self.C
        kind = self.kind[idx]
        zp, zc = self.zp[idx], self.zc[idx]
        L = np.zeros(m)
        need_p = kind != Kind.EXACT_LIVING
        v = np.zeros((m, C))
        v[np.arange(m), zp] = 1.0
        pm = self.piece_mask[idx]
        for k in range(self.npc):
            sel = np.flatnonzero(need_p & pm[:, k])
            if sel.size:
                Q = self.design.generator(qp[sel, k])
                P = np.clip(linalg.expm(Q * self.piece_dt[idx][sel, k][:, None, None]), 0, 1)
                v[sel] = np.einsum("nc,ncd->nd", v[sel], P)
        rows = np.arange(m)
        ic = kind == Kind.INTERVAL_CENSORED
        L[ic] = v[rows[ic], zc[ic]]
        cs = kind == Kind.CENSORED_STATE
        L[cs] = np.sum(v[cs] * self.panel.censored_mask[idx][cs], axis=1)
        ed = kind == Kind.EXACT_DEATH
        if np.any(ed):
            Qc = self.design.generator(qc[ed])
            d = zc[ed]
            vq = Qc[np.arange(d.size), :, d]
            vq[np.arange(d.size), d] = 0.0
            L[ed] = np.sum(v[ed] * vq, axis=1)
        el = kind == Kind.EXACT_LIVING
        if np.any(el):
            I, q = self._living_value(qp[el], qc[el], zp[el], zc[el], idx[el])
            L[el] = np.exp(I) * q
        floored = ~(L >= L_FLOOR)
        return float(np.sum(np.log(np.where(floored, L_FLOOR, L)))), int(floored.sum())

    def _living_value(self, qp, qc, zp, zc, idx):
        out_from = self.design.from_idx
        own = out_from[None, :] == zp[:, None]                          # (m, R)
        I = -np.einsum("nk,nka,na->n", self.piece_dt[idx], qp, own.astype(float))
        q = np.ones(zp.size)
        moved = zc != zp
        for j in np.flatnonzero(moved):
            a = self._trans_index(zp[j], zc[j])
            q[j] = qc[j, a]
        return I, q

    def _trans_index(self, r0, s0):
        hit = np.flatnonzero((self.design.from_idx == r0) & (self.design.to_idx == s0))
        return int(hit[0])

    def _chunk(self, theta, idx, want_scores):
        qp, qc = self._eta(theta, idx)
        m, C, R, npc = idx.size, self.C, self.R, self.npc
        Lx = R * (npc + 1)
        cur = slice(R * npc, Lx)
        kind = self.kind[idx]
        zp, zc = self.zp[idx], self.zc[idx]
        rows = np.arange(m)
        L = np.zeros(m)
        dL = np.zeros((m, Lx))
        d2L = np.zeros((m, Lx, Lx))

        need_p = kind != Kind.EXACT_LIVING
        sel_p = np.flatnonzero(need_p)
        if sel_p.size:
            v, dv, d2v = self._propagate(qp[sel_p], idx[sel_p], zp[sel_p], Lx)
            kp = kind[sel_p]
            for kk, fn in ((Kind.INTERVAL_CENSORED, None), (Kind.CENSORED_STATE, None),
                           (Kind.EXACT_DEATH, None)):
                loc = np.flatnonzero(kp == kk)
                if not loc.size:
                    continue
                tgt = sel_p[loc]
                if kk == Kind.INTERVAL_CENSORED:
                    res = kernel_interval(v[loc], dv[loc], d2v[loc], zc[tgt])
                elif kk == Kind.CENSORED_STATE:
                    res = kernel_censored(v[loc], dv[loc], d2v[loc],
                                          self.panel.censored_mask[idx[tgt]])
                else:
                    vq, dvq, d2vq = self._death_factor(qc[tgt], zc[tgt], Lx, cur)
                    res = kernel_death(v[loc], dv[loc], d2v[loc], vq, dvq, d2vq)
                L[tgt], dL[tgt], d2L[tgt] = res
        el = np.flatnonzero(kind == Kind.EXACT_LIVING)
        if el.size:
            L[el], dL[el], d2L[el] = self._living(qp[el], qc[el], zp[el], zc[el], idx[el], Lx, cur)

        floored = ~(L >= L_FLOOR)
        Ls = np.where(floored, 1.0, L)
        gl = dL / Ls[:, None]
        hl = d2L / Ls[:, None, None] - gl[:, :, None] * gl[:, None, :]
        gl[floored] = 0.0
        hl[floored] = 0.0
        lls = np.where(floored, np.log(L_FLOOR), np.log(Ls))
        J = np.concatenate([self.Xpiece[idx].reshape(m, R * npc, self.W), self.Xcur[idx]], axis=1)
        sc = np.einsum("nl,nlw->nw", gl, J)
        g = sc.sum(axis=0)
        T = hl @ J
        H = np.tensordot(J, T, axes=([0, 1], [0, 1]))
        return float(lls.sum()), g, H, int(floored.sum()), (sc if want_scores else None)

    def _propagate(self, qp, idx, zp, Lx):
        """Row ``e_zp^T P_1 ... P_K`` and its derivatives on the local axes."""
        m, C, R = zp.size, self.C, self.R
        v = np.zeros((m, C))
        v[np.arange(m), zp] = 1.0
        dv = np.zeros((m, Lx, C))
        d2v = np.zeros((m, Lx, Lx, C))
        pm = self.piece_mask[idx]
        dts = self.piece_dt[idx]
        eyeR = np.eye(R)
        for k in range(self.npc):
            sel = np.flatnonzero(pm[:, k])
            if not sel.size:
                continue
            q = qp[sel, k]
            Q = self.design.generator(q)
            M = self.design.generator((eyeR[None] * q[:, :, None]).reshape(-1, R)
                                      ).reshape(sel.size, R, C, C)
            P, dP, d2P = batched_pbundle(Q, dts[sel, k], M, eta_diag=True,
                                         on_fallback=self._note_fallback)
            ks = slice(k * R, (k + 1) * R)
            vs, dvs, d2vs = v[sel], dv[sel], d2v[sel]
            nv = np.einsum("nc,ncd->nd", vs, P)
            ndv = dvs @ P
            ndv[:, ks] += np.einsum("nc,nacd->nad", vs, dP)
            nd2v = d2vs @ P[:, None]
            cross = np.einsum("nlc,nbcd->nlbd", dvs, dP)
            nd2v[:, :, ks] += cross
            nd2v[:, ks, :] += np.swapaxes(cross, 1, 2)
            nd2v[:, ks, ks] += np.einsum("nc,nabcd->nabd", vs, d2P)
            v[sel], dv[sel], d2v[sel] = nv, ndv, nd2v
        return v, dv, d2v

    def _note_fallback(self, idx):
        self.n_fallback += len(idx)
        warnings.warn(f"{len(idx)} generator(s) evaluated by block-exponential fallback",
                      RuntimeWarning, stacklevel=3)

    def _death_factor(self, qc, d, Lx, cur):
        m, C = d.size, self.C
        f, t = self.design.from_idx, self.design.to_idx
        into = t[None, :] == d[:, None]                   # (m, R)
        vq = np.zeros((m, C))
        dvq = np.zeros((m, Lx, C))
        d2vq = np.zeros((m, Lx, Lx, C))
        n_i, a_i = np.nonzero(into)
        vals = qc[n_i, a_i]
        vq[n_i, f[a_i]] = vals
        base = cur.start
        dvq[n_i, base + a_i, f[a_i]] = vals
        d2vq[n_i, base + a_i, base + a_i, f[a_i]] = vals
        return vq, dvq, d2vq

    def _living(self, qp, qc, zp, zc, idx, Lx, cur):
        m, R, npc = zp.size, self.R, self.npc
        own = (self.design.from_idx[None, :] == zp[:, None]).astype(float)   # (m, R)
        dts = self.piece_dt[idx]                                               # (m, npc)
        dI_p = -(dts[:, :, None] * qp * own[:, None, :]).reshape(m, npc * R)
        I = dI_p.sum(axis=1)
        dI = np.zeros((m, Lx))
        dI[:, :npc * R] = dI_p
        d2I = np.zeros((m, Lx, Lx))
        ar = np.arange(npc * R)
        d2I[:, ar, ar] = dI_p
        q = np.ones(m)
        dq = np.zeros((m, Lx))
        d2q = np.zeros((m, Lx, Lx))
        for j in np.flatnonzero(zc != zp):
            a = self._trans_index(zp[j], zc[j])
            q[j] = qc[j, a]
            dq[j, cur.start + a] = q[j]
            d2q[j, cur.start + a, cur.start + a] = q[j]
        return kernel_living(I, dI, d2I, q, dq, d2q)

    def max_intensity(self, theta):
        """Largest intensity over all piece and observation-time design rows."""
        if not len(self.panel):
            return 0.0
        theta = np.asarray(theta, dtype=float)
        eta = max(float(np.max(self.Xpiece @ theta)), float(np.max(self.Xcur @ theta)))
        return float(np.exp(min(eta, 709.0)))
