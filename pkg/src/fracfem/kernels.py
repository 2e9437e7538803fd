"""Hot loops of the stiffness assembly, numba and numpy variants.

All kernels accumulate into a raw dense matrix ``R`` (interior dofs only);
the assembly module scales by C(n, s)/2 afterwards.  Every write to
``R[i, j]`` is mirrored by an identical write to ``R[j, i]`` in the same
order, so the result is bitwise symmetric.
"""
from __future__ import annotations

import numpy as np

from ._jit import njit


# ---------------------------------------------------------------------------
# touching pairs


def _touching_numpy(R, vx, vy, dofs, jac, xb, yb, w, delta, expo):
    upper = np.triu_indices(delta.shape[1])
    dd = delta[:, upper[0]] * delta[:, upper[1]]
    for p in range(len(jac)):
        diff = xb @ vx[p] - yb @ vy[p]
        r2 = np.einsum("qd,qd->q", diff, diff)
        k = w * r2**expo
        vals = jac[p] * (k @ dd)
        _scatter_upper(R, dofs[p], upper, vals)


def _scatter_upper(R, dofs, upper, vals):
    for a, b, v in zip(upper[0], upper[1], vals):
        i, j = dofs[a], dofs[b]
        if i < 0 or j < 0:
            continue
        if a == b:
            R[i, i] += v
        else:
            R[i, j] += v
            R[j, i] += v


@njit
def _touching_numba(R, vx, vy, dofs, jac, xb, yb, w, delta, expo):
    npairs = jac.shape[0]
    nq = w.shape[0]
    nv = xb.shape[1]
    dim = vx.shape[2]
    nu = delta.shape[1]
    loc = np.zeros((nu, nu))
    for p in range(npairs):
        loc[:, :] = 0.0
        for q in range(nq):
            r2 = 0.0
            for d in range(dim):
                xd = 0.0
                yd = 0.0
                for i in range(nv):
                    xd += xb[q, i] * vx[p, i, d]
                    yd += yb[q, i] * vy[p, i, d]
                r2 += (xd - yd) * (xd - yd)
            k = w[q] * r2**expo
            for a in range(nu):
                ka = k * delta[q, a]
                for b in range(a, nu):
                    loc[a, b] += ka * delta[q, b]
        for a in range(nu):
            i = dofs[p, a]
            if i < 0:
                continue
            for b in range(a, nu):
                j = dofs[p, b]
                if j < 0:
                    continue
                v = jac[p] * loc[a, b]
                if a == b:
                    R[i, i] += v
                else:
                    R[i, j] += v
                    R[j, i] += v


def touching_accumulate(R, vx, vy, dofs, jac, xb, yb, w, delta, expo, backend):
    """Add ``jac[p] * sum_q w_q K(x_q - y_q) delta_qa delta_qb`` for each pair.

    vx, vy : (P, n+1, n) vertex coordinates in canonical pair order
    dofs : (P, U) dof index of every union function, -1 if none
    """
    if len(jac) == 0:
        return
    fn = _touching_numba if backend == "numba" else _touching_numpy
    fn(R, vx, vy, dofs, jac, xb, yb, w, delta, expo)


# ---------------------------------------------------------------------------
# disjoint pairs


@njit
def _cross_numba(R, pts, wts, nq, lam, elems, edofs, cent, diam, thresholds, expo):
    ne = elems.shape[0]
    nv = elems.shape[1]
    dim = pts.shape[3]
    ntier = thresholds.shape[0]
    qmax = pts.shape[2]
    tmp = np.zeros((qmax, nv))
    loc = np.zeros((nv, nv))
    active = np.zeros(ne, dtype=np.bool_)
    for t in range(ne):
        for a in range(nv):
            if edofs[t, a] >= 0:
                active[t] = True
    for t in range(ne):
        if not active[t]:
            continue
        for u in range(t + 1, ne):
            if not active[u]:
                continue
            touch = False
            for a in range(nv):
                for b in range(nv):
                    if elems[t, a] == elems[u, b]:
                        touch = True
            if touch:
                continue
            dc = 0.0
            for d in range(dim):
                dc += (cent[t, d] - cent[u, d]) ** 2
            hmax = max(diam[t], diam[u])
            sep = (np.sqrt(dc) - 0.5 * (diam[t] + diam[u])) / hmax
            tier = ntier - 1
            for j in range(ntier - 1):
                if sep <= thresholds[j]:
                    tier = j
                    break
            m = nq[tier]
            tmp[:m, :] = 0.0
            for p in range(m):
                for q in range(m):
                    r2 = 0.0
                    for d in range(dim):
                        r2 += (pts[tier, t, p, d] - pts[tier, u, q, d]) ** 2
                    k = wts[tier, t, p] * wts[tier, u, q] * r2**expo
                    for b in range(nv):
                        tmp[p, b] += k * lam[tier, q, b]
            loc[:, :] = 0.0
            for p in range(m):
                for a in range(nv):
                    la = lam[tier, p, a]
                    for b in range(nv):
                        loc[a, b] += la * tmp[p, b]
            for a in range(nv):
                i = edofs[t, a]
                if i < 0:
                    continue
                for b in range(nv):
                    j = edofs[u, b]
                    if j < 0:
                        continue
                    v = 2.0 * loc[a, b]
                    R[i, j] -= v
                    R[j, i] -= v


def _cross_numpy(R, pts, wts, nq, lam, elems, edofs, cent, diam, thresholds, expo):
    ne, nv = elems.shape
    active = (edofs >= 0).any(axis=1)
    ntier = len(thresholds)
    for t in range(ne):
        if not active[t]:
            continue
        us = np.arange(t + 1, ne)
        us = us[active[us]]
        touch = (elems[us][:, :, None] == elems[t][None, None, :]).any(axis=(1, 2))
        us = us[~touch]
        if len(us) == 0:
            continue
        hmax = np.maximum(diam[t], diam[us])
        sep = (np.linalg.norm(cent[us] - cent[t], axis=1) - 0.5 * (diam[t] + diam[us])) / hmax
        tier = np.full(len(us), ntier - 1)
        for j in range(ntier - 2, -1, -1):
            tier[sep <= thresholds[j]] = j
        for j in range(ntier):
            sel = us[tier == j]
            if len(sel) == 0:
                continue
            m = nq[j]
            x = pts[j, t, :m]
            y = pts[j, sel, :m]
            r2 = np.sum((x[None, :, None, :] - y[:, None, :, :]) ** 2, axis=-1)
            k = wts[j, t, :m][None, :, None] * wts[j, sel, :m][:, None, :] * r2**expo
            loc = np.einsum("pa,upq,qb->uab", lam[j, :m], k, lam[j, :m])
            for a in range(nv):
                i = edofs[t, a]
                if i < 0:
                    continue
                for b in range(nv):
                    js = edofs[sel, b]
                    ok = js >= 0
                    v = 2.0 * loc[ok, a, b]
                    np.subtract.at(R, (np.full(ok.sum(), i), js[ok]), v)
                    np.subtract.at(R, (js[ok], np.full(ok.sum(), i)), v)


def cross_accumulate(R, pts, wts, nq, lam, elems, edofs, cent, diam, thresholds, expo, backend):
    """Subtract ``2 int_T int_T' phi_a(x) phi_b(y) K`` for all disjoint pairs.

    pts : (tiers, ne, qmax, n) physical points of each element rule tier
    wts : (tiers, ne, qmax) physical weights (zero padded)
    nq : (tiers,) points per tier
    lam : (tiers, qmax, n+1) barycentric coordinates of the rule points
    thresholds : (tiers,) relative separation upper bounds; the last tier
        catches everything beyond the previous threshold
    """
    fn = _cross_numba if backend == "numba" else _cross_numpy
    fn(R, pts, wts, nq, lam, elems, edofs, cent, diam, thresholds, expo)
