"""Compiled stencil, interpolation and update kernels."""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_jit = nb.njit(cache=True, nogil=True)


@_jit
def trilinear(u, h, L, pts):
    n = u.shape[0]
    m = pts.shape[0]
    out = np.empty(m)
    for p in range(m):
        fx = (pts[p, 0] + L) / h
        fy = (pts[p, 1] + L) / h
        fz = (pts[p, 2] + L) / h
        i = min(max(int(math.floor(fx)), 0), n - 2)
        j = min(max(int(math.floor(fy)), 0), n - 2)
        k = min(max(int(math.floor(fz)), 0), n - 2)
        tx = fx - i
        ty = fy - j
        tz = fz - k
        acc = 0.0
        for di in range(2):
            wx = tx if di else 1.0 - tx
            for dj in range(2):
                wy = ty if dj else 1.0 - ty
                for dk in range(2):
                    wz = tz if dk else 1.0 - tz
                    acc += wx * wy * wz * u[i + di, j + dj, k + dk]
        out[p] = acc
    return out


@_jit
def sample_pd(phi, pi, h, L, pts):
    """Trilinear samples of phi, pi and the centred nodal gradient of phi."""
    n = phi.shape[0]
    m = pts.shape[0]
    out = np.zeros((m, 5))
    inv2h = 0.5 / h
    for p in range(m):
        fx = (pts[p, 0] + L) / h
        fy = (pts[p, 1] + L) / h
        fz = (pts[p, 2] + L) / h
        i = min(max(int(math.floor(fx)), 1), n - 3)
        j = min(max(int(math.floor(fy)), 1), n - 3)
        k = min(max(int(math.floor(fz)), 1), n - 3)
        tx = fx - i
        ty = fy - j
        tz = fz - k
        for di in range(2):
            wx = tx if di else 1.0 - tx
            for dj in range(2):
                wy = ty if dj else 1.0 - ty
                for dk in range(2):
                    wz = tz if dk else 1.0 - tz
                    w = wx * wy * wz
                    a, b, c = i + di, j + dj, k + dk
                    out[p, 0] += w * phi[a, b, c]
                    out[p, 1] += w * pi[a, b, c]
                    out[p, 2] += w * (phi[a + 1, b, c] - phi[a - 1, b, c]) * inv2h
                    out[p, 3] += w * (phi[a, b + 1, c] - phi[a, b - 1, c]) * inv2h
                    out[p, 4] += w * (phi[a, b, c + 1] - phi[a, b, c - 1]) * inv2h
    return out


@_jit
def flat_rhs(phi, pi, h, S, kappa, use_F, ext, use_ext, dpi, F):
    """``dpi = lap phi - F`` on interior nodes; stores ``F`` (with ``ext``).

    ``S`` is the symmetric part of the quadratic form; boundary shells of
    ``dpi`` are left at zero.
    """
    n = phi.shape[0]
    ih2 = 1.0 / (h * h)
    i2h = 0.5 / h
    for i in range(2, n - 2):
        for j in range(2, n - 2):
            for k in range(2, n - 2):
                c = phi[i, j, k]
                lap = (phi[i + 1, j, k] + phi[i - 1, j, k] + phi[i, j + 1, k]
                       + phi[i, j - 1, k] + phi[i, j, k + 1] + phi[i, j, k - 1]
                       - 6.0 * c) * ih2
                f = 0.0
                if use_F:
                    d0 = pi[i, j, k]
                    d1 = (phi[i + 1, j, k] - phi[i - 1, j, k]) * i2h
                    d2 = (phi[i, j + 1, k] - phi[i, j - 1, k]) * i2h
                    d3 = (phi[i, j, k + 1] - phi[i, j, k - 1]) * i2h
                    f = (S[0, 0] * d0 * d0 + S[1, 1] * d1 * d1 + S[2, 2] * d2 * d2
                         + S[3, 3] * d3 * d3
                         + 2.0 * (S[0, 1] * d0 * d1 + S[0, 2] * d0 * d2 + S[0, 3] * d0 * d3
                                  + S[1, 2] * d1 * d2 + S[1, 3] * d1 * d3 + S[2, 3] * d2 * d3)
                         + kappa * c * c * c)
                if use_ext:
                    f += ext[i, j, k]
                F[i, j, k] = f
                dpi[i, j, k] = lap - f


@_jit
def add_sparse_source(idx, coef, basis, dpi, F):
    """Add ``sum_m coef[m] basis[m, p]`` to ``F`` at listed nodes."""
    for p in range(idx.shape[0]):
        s = 0.0
        for m in range(coef.shape[0]):
            s += coef[m] * basis[m, p]
        i, j, k = idx[p, 0], idx[p, 1], idx[p, 2]
        F[i, j, k] += s
        dpi[i, j, k] -= s


@_jit
def add_sparse_values(idx, vals, dpi, F):
    for p in range(idx.shape[0]):
        i, j, k = idx[p, 0], idx[p, 1], idx[p, 2]
        F[i, j, k] += vals[p]
        dpi[i, j, k] -= vals[p]


@_jit
def metric_rhs(phi, pi, h, idx, gi, b, F, dpi):
    """Overwrite ``dpi`` at metric nodes with the full operator solve.

    ``gi`` rows hold ``g^00, g^01, g^02, g^03, g^11, g^12, g^13, g^22, g^23, g^33``.
    Returns the smallest ``|g^00|`` encountered.
    """
    ih2 = 1.0 / (h * h)
    i2h = 0.5 / h
    i4h2 = 0.25 * ih2
    gmin = np.inf
    for p in range(idx.shape[0]):
        i, j, k = idx[p, 0], idx[p, 1], idx[p, 2]
        c = phi[i, j, k]
        p11 = (phi[i + 1, j, k] - 2.0 * c + phi[i - 1, j, k]) * ih2
        p22 = (phi[i, j + 1, k] - 2.0 * c + phi[i, j - 1, k]) * ih2
        p33 = (phi[i, j, k + 1] - 2.0 * c + phi[i, j, k - 1]) * ih2
        p12 = (phi[i + 1, j + 1, k] - phi[i + 1, j - 1, k]
               - phi[i - 1, j + 1, k] + phi[i - 1, j - 1, k]) * i4h2
        p13 = (phi[i + 1, j, k + 1] - phi[i + 1, j, k - 1]
               - phi[i - 1, j, k + 1] + phi[i - 1, j, k - 1]) * i4h2
        p23 = (phi[i, j + 1, k + 1] - phi[i, j + 1, k - 1]
               - phi[i, j - 1, k + 1] + phi[i, j - 1, k - 1]) * i4h2
        q1 = (pi[i + 1, j, k] - pi[i - 1, j, k]) * i2h
        q2 = (pi[i, j + 1, k] - pi[i, j - 1, k]) * i2h
        q3 = (pi[i, j, k + 1] - pi[i, j, k - 1]) * i2h
        f1 = (phi[i + 1, j, k] - phi[i - 1, j, k]) * i2h
        f2 = (phi[i, j + 1, k] - phi[i, j - 1, k]) * i2h
        f3 = (phi[i, j, k + 1] - phi[i, j, k - 1]) * i2h
        g = gi[p]
        spatial = (g[4] * p11 + g[7] * p22 + g[9] * p33
                   + 2.0 * (g[5] * p12 + g[6] * p13 + g[8] * p23))
        mixed = 2.0 * (g[1] * q1 + g[2] * q2 + g[3] * q3)
        first = b[p, 0] * pi[i, j, k] + b[p, 1] * f1 + b[p, 2] * f2 + b[p, 3] * f3
        g00 = g[0]
        gmin = min(gmin, abs(g00))
        dpi[i, j, k] = (F[i, j, k] - spatial - mixed - first) / g00
    return gmin


@_jit
def axpy(out, y, a, x):
    """``out = y + a x`` elementwise over flattened arrays."""
    o = out.ravel()
    yr = y.ravel()
    xr = x.ravel()
    for p in range(o.shape[0]):
        o[p] = yr[p] + a * xr[p]


@_jit
def accumulate(acc, a, x):
    """``acc += a x``."""
    o = acc.ravel()
    xr = x.ravel()
    for p in range(o.shape[0]):
        o[p] += a * xr[p]


@_jit
def max_abs(u):
    """Maximum absolute value; NaN if any entry is not finite."""
    m = 0.0
    ur = u.ravel()
    for p in range(ur.shape[0]):
        v = ur[p]
        if not math.isfinite(v):
            return np.nan
        if abs(v) > m:
            m = abs(v)
    return m


@_jit
def edge_energy(phi, pi, h):
    """``h^3 sum(pi^2 + |D+ phi|^2)`` with forward differences on every edge."""
    n = phi.shape[0]
    s = 0.0
    for i in range(n):
        for j in range(n):
            for k in range(n):
                c = phi[i, j, k]
                e = pi[i, j, k] ** 2
                if i + 1 < n:
                    e += ((phi[i + 1, j, k] - c) / h) ** 2
                if j + 1 < n:
                    e += ((phi[i, j + 1, k] - c) / h) ** 2
                if k + 1 < n:
                    e += ((phi[i, j, k + 1] - c) / h) ** 2
                s += e
    return s * h**3


@_jit
def shell_max(u, shell):
    """Max ``|u|`` on the cube surface ``shell`` nodes in from the boundary."""
    n = u.shape[0]
    lo = shell
    hi = n - 1 - shell
    m = 0.0
    for a in range(lo, hi + 1):
        for b in range(lo, hi + 1):
            for v in (u[lo, a, b], u[hi, a, b], u[a, lo, b], u[a, hi, b],
                      u[a, b, lo], u[a, b, hi]):
                if abs(v) > m:
                    m = abs(v)
    return m
