"""Estimate-side quantities computed from evolution data.

Conventions.  ``u = (t - r)/2`` and ``v = (t + r)/2`` with the derivative
fields ``d_v = d_t + d_r`` and ``d_u = d_t - d_r``.  The leaf ``Sigma_tau``
is the disk ``{t = tau, r <= R}`` joined to the outgoing cone
``S_tau = {t - r = tau - R, r >= R}``; along ``S_tau`` the sphere radius is
``r(t) = t - tau + R`` and ``dv = dt``.  Energies are unnormalised:
``E = int (phi_t^2 + |grad phi|^2)``.

Null infinity is out of reach on a finite grid.  ``E_proxy(tau)`` is the
leaf energy accumulated to the final time ``T`` plus the slice energy at
``t = T`` beyond the cone, ``r > T - tau + R``.  For flat linear evolution
this equals the conserved energy, and it bounds leaf energy plus the flux
through null infinity from above.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .evolve import Observer
from .grid_fields import (OMEGA_PAIRS, DomainError, FieldState, Grid, SphereSampling,
                          apply_Omega, gradient)
from .metric import (MINKOWSKI, MetricSample, MetricSpec, _b_vector, _dginv,
                     metric_fields, metric_time_derivatives)
from .nullform import NullFormSpec, eval_F

TOL_H = 0.05
HARDY_CONSTANT = 6.0
PSI_PHI_CONSTANT = 2.0


class UndefinedRatio(ValueError):
    """Raised when a ratio has a vanishing denominator."""


# ---------------------------------------------------------------------------
# pointwise tensors


def stress_energy(dphi, g, g_inv) -> np.ndarray:
    """``T_{mn} = d_m phi d_n phi - g_{mn} (g^{ab} d_a phi d_b phi) / 2``.

    Accepts a single covector ``(4,)`` with ``(4, 4)`` metrics or batches
    ``(N, 4)`` with ``(N, 4, 4)``.
    """
    d = np.asarray(dphi, dtype=float)
    g = np.asarray(g, dtype=float)
    gi = np.asarray(g_inv, dtype=float)
    sq = np.einsum("...a,...ab,...b->...", d, gi, d)
    return np.einsum("...m,...n->...mn", d, d) - 0.5 * g * sq[..., None, None]


@dataclass(frozen=True)
class MultiplierProfile:
    """Radial multiplier ``f = beta - beta (1+r)^(-alpha)`` with ``chi = f / r``."""

    alpha: float = 0.5
    r_max: float = 100.0
    samples: int = 4001

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def beta(self) -> float:
        return 2.0 / self.alpha

    @property
    def r(self) -> np.ndarray:
        return np.concatenate([[0.0], np.geomspace(1e-6, self.r_max, self.samples - 1)])

    def f(self, r):
        r = np.asarray(r, dtype=float)
        return -self.beta * np.expm1(-self.alpha * np.log1p(r))

    def fprime(self, r):
        r = np.asarray(r, dtype=float)
        return self.alpha * self.beta * (1.0 + r) ** (-self.alpha - 1.0)

    def fsecond(self, r):
        r = np.asarray(r, dtype=float)
        a = self.alpha
        return -a * (a + 1.0) * self.beta * (1.0 + r) ** (-a - 2.0)

    def _series(self, r, order):
        # f = beta sum_{k>=1} c_k r^k with c_k = (-1)^(k+1) (a)_k / k!
        a = self.alpha
        c = [0.0]
        poch = 1.0
        for k in range(1, 7):
            poch *= a + k - 1
            c.append((-1) ** (k + 1) * poch / math.factorial(k))
        # chi = beta sum c_{k+1} r^k ; derivatives termwise
        out = np.zeros_like(r)
        for k in range(order, 6):
            coef = c[k + 1] * math.factorial(k) / math.factorial(k - order)
            out += coef * r ** (k - order)
        return self.beta * out

    def chi(self, r):
        r = np.asarray(r, dtype=float)
        small = r < 1e-3
        out = np.empty_like(r)
        out[small] = self._series(r[small], 0)
        rb = r[~small]
        out[~small] = self.f(rb) / rb
        return out

    def chi_prime(self, r):
        r = np.asarray(r, dtype=float)
        small = r < 1e-3
        out = np.empty_like(r)
        out[small] = self._series(r[small], 1)
        rb = r[~small]
        out[~small] = self.fprime(rb) / rb - self.f(rb) / rb**2
        return out

    def chi_second(self, r):
        r = np.asarray(r, dtype=float)
        small = r < 1e-3
        out = np.empty_like(r)
        out[small] = self._series(r[small], 2)
        rb = r[~small]
        out[~small] = (self.fsecond(rb) / rb - 2.0 * self.fprime(rb) / rb**2
                       + 2.0 * self.f(rb) / rb**3)
        return out

    def check_bounds(self) -> dict:
        r = self.r
        f, fp, chi, chip = self.f(r), self.fprime(r), self.chi(r), self.chi_prime(r)
        b = self.beta
        tiny = 1e-12
        return {
            "f0_zero": bool(abs(f[0]) <= tiny),
            "f_monotone": bool(np.all(np.diff(f) >= -tiny)),
            "f_range": bool(np.all(f >= -tiny) and np.all(f < b)),
            "chi_origin": bool(abs(chi[0] - self.alpha * b) <= 1e-12),
            "chi_bound": bool(np.all(np.abs(chi) <= b / (1.0 + r) * (1 + tiny))),
            "chi_prime_bound": bool(np.all(np.abs(chip) <= b / (1.0 + r) ** 2 * (1 + tiny))),
            "angular_coercive": bool(np.all(chi - 0.5 * fp >= (1.0 + r) ** (-self.alpha - 1.0)
                                            * (1 - 1e-12))),
        }


@dataclass
class CurrentDensities:
    spacelike: np.ndarray
    null: np.ndarray
    K: np.ndarray


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return x[None] if x.ndim == 1 else x


def currents(X_id: str, dphi, phi, sample, x,
             profile: MultiplierProfile | None = None) -> CurrentDensities:
    """Flux densities and bulk scalar of the ``T`` or ``f d_r`` current.

    Parameters
    ----------
    X_id : {"T", "radial_f"}
    dphi : array (4,) or (N, 4)
        ``(d_t phi, d_1 phi, d_2 phi, d_3 phi)``.
    phi : float or array (N,)
    sample : MetricSample or MetricFields
        Metric data at the same events; ``dg`` holds ``d_c g_{ab}``.
    x : array (3,) or (N, 3)
        Spatial positions (needed for the radial field and the null normal).

    Returns
    -------
    CurrentDensities
        ``J(n)`` for ``n = d_t`` and for ``n = d_v``, and ``K``.  For
        ``X = T`` the bulk is ``T^{mn} pi_{mn}`` with ``pi_{mn} = d_t g_{mn} / 2``.
        For ``radial_f`` the current is modified by ``chi phi d phi - phi^2 d chi / 2``.
    """
    d = _as_batch(dphi)
    xs = _as_batch(x)
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    g = np.asarray(sample.g, dtype=float).reshape(-1, 4, 4)
    gi = np.asarray(sample.g_inv, dtype=float).reshape(-1, 4, 4)
    dg = np.asarray(sample.dg, dtype=float).reshape(-1, 4, 4, 4)
    Tl = stress_energy(d, g, gi)
    Tu = np.einsum("nam,nbk,nmk->nab", gi, gi, Tl)
    r = np.linalg.norm(xs, axis=1)
    xhat = np.zeros_like(xs)
    nz = r > 0
    xhat[nz] = xs[nz] / r[nz, None]
    n_t = np.zeros((len(d), 4))
    n_t[:, 0] = 1.0
    n_v = n_t.copy()
    n_v[:, 1:] = xhat
    if X_id == "T":
        X = n_t
        piX = 0.5 * dg[:, 0]
        K = np.einsum("nab,nab->n", Tu, piX)
        Jt = np.einsum("na,nab,nb->n", n_t, Tl, X)
        Jv = np.einsum("na,nab,nb->n", n_v, Tl, X)
        return CurrentDensities(Jt, Jv, K)
    if X_id != "radial_f":
        raise ValueError(f"unknown multiplier {X_id!r}")
    profile = profile or MultiplierProfile()
    f = profile.f(r)
    fp = profile.fprime(r)
    chi = profile.chi(r)
    chip = profile.chi_prime(r)
    chipp = profile.chi_second(r)
    X = np.zeros((len(d), 4))
    X[:, 1:] = f[:, None] * xhat
    # d_a X^b for X^i = f x_i / r: (f' - f/r) xhat_i xhat_j + (f/r) delta_ij
    dX = np.zeros((len(d), 4, 4))
    dX[:, 1:, 1:] = ((fp - chi)[:, None, None] * np.einsum("ni,nj->nij", xhat, xhat)
                     + chi[:, None, None] * np.eye(3))
    Xg = np.einsum("nc,ncab->nab", X, dg)
    lie = Xg + np.einsum("nmb,nam->nab", g, dX) + np.einsum("nam,nbm->nab", g, dX)
    piX = 0.5 * lie
    dchi = np.zeros((len(d), 4))
    dchi[:, 1:] = chip[:, None] * xhat
    ddchi = np.zeros((len(d), 4, 4))
    safe_r = np.where(nz, r, 1.0)
    ddchi[:, 1:, 1:] = ((chipp - np.where(nz, chip / safe_r, 0.0))[:, None, None]
                        * np.einsum("ni,nj->nij", xhat, xhat)
                        + np.where(nz, chip / safe_r, chipp)[:, None, None] * np.eye(3))
    sq = np.einsum("na,nab,nb->n", d, gi, d)
    # box_g chi = g^{ab} d_ab chi + b^a d_a chi
    b = _b_vector(gi, dg)
    box_chi = np.einsum("nab,nab->n", gi, ddchi) + np.einsum("na,na->n", b, dchi)
    K = np.einsum("nab,nab->n", Tu, piX) + chi * sq - 0.5 * box_chi * phi**2
    J = np.einsum("nab,nb->na", Tl, X) + (chi * phi)[:, None] * d - 0.5 * (phi**2)[:, None] * dchi
    Jt = np.einsum("na,na->n", n_t, J)
    Jv = np.einsum("na,na->n", n_v, J)
    return CurrentDensities(Jt, Jv, K)


def K_T_bound(H: float, dphi) -> np.ndarray:
    """``3 H (1 + H + 2 H^2)^3 |d phi|^2``."""
    d = _as_batch(dphi)
    return 3.0 * H * (1.0 + H + 2.0 * H**2) ** 3 * np.einsum("na,na->n", d, d)


def lambda2(lambda1: float, lam: float, H: float) -> float:
    """``lambda1 lam^2 / (2 (1 + 3H)^2)``."""
    return lambda1 * lam**2 / (2.0 * (1.0 + 3.0 * H) ** 2)


def energy_density(dphi, sample) -> np.ndarray:
    """``(g^{ij} d_i phi d_j phi - g^{00} phi_t^2) sqrt(-G) / 2``."""
    d = _as_batch(dphi)
    gi = np.asarray(sample.g_inv, dtype=float).reshape(-1, 4, 4)
    G = np.atleast_1d(np.asarray(sample.det_G, dtype=float))
    sp = np.einsum("ni,nij,nj->n", d[:, 1:], gi[:, 1:, 1:], d[:, 1:])
    return 0.5 * (sp - gi[:, 0, 0] * d[:, 0] ** 2) * np.sqrt(-G)


# ---------------------------------------------------------------------------
# quadrature helpers


def slice_energy(state: FieldState, grid: Grid) -> float:
    """Discrete ``t``-slice energy with forward differences on every edge.

    This is the quantity the semi-discrete flat scheme conserves exactly.
    """
    return _kernels.edge_energy(state.phi, state.pi, grid.h)


def shell_rule(a: float, b: float, h: float, sampling: SphereSampling,
               per_h: float = 2.0, min_nodes: int = 4):
    """Points, volume weights and radii for ``a <= r <= b``.

    Gauss-Legendre in ``r`` with about ``per_h`` nodes per grid spacing,
    times the sphere rule.
    """
    if b <= a:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0)
    m = max(min_nodes, int(math.ceil((b - a) / h * per_h)) + 1)
    xg, wg = np.polynomial.legendre.leggauss(m)
    r = a + 0.5 * (b - a) * (xg + 1.0)
    w = 0.5 * (b - a) * wg
    nd = len(sampling.weights)
    pts = (r[:, None, None] * sampling.nodes[None]).reshape(-1, 3)
    wts = (w[:, None] * r[:, None] ** 2 * sampling.weights[None]).ravel()
    return pts, wts, np.repeat(r, nd)


@dataclass
class PointData:
    """Interpolated field data at points."""

    phi: np.ndarray
    pi: np.ndarray
    grad: np.ndarray  # (M, 3)
    r: np.ndarray
    dr: np.ndarray
    tan2: np.ndarray  # |angular gradient|^2

    @property
    def dv(self) -> np.ndarray:
        return self.pi + self.dr

    @property
    def du(self) -> np.ndarray:
        return self.pi - self.dr

    @property
    def psi_v(self) -> np.ndarray:
        return self.phi + self.r * self.dv

    @property
    def psi_u(self) -> np.ndarray:
        return self.r * self.du - self.phi


def point_data(phi: np.ndarray, pi: np.ndarray, grid: Grid, pts: np.ndarray) -> PointData:
    pts = np.ascontiguousarray(pts, dtype=float)
    if len(pts) and np.abs(pts).max() > grid.R_dom - 2.0 * grid.h + 1e-12:
        raise DomainError("sample points within two spacings of the boundary")
    s = _kernels.sample_pd(phi, pi, grid.h, grid.R_dom, pts)
    r = np.linalg.norm(pts, axis=1)
    grad = s[:, 2:5]
    safe = np.where(r > 0, r, 1.0)
    dr = np.einsum("ni,ni->n", pts, grad) / safe
    g2 = np.einsum("ni,ni->n", grad, grad)
    tan2 = np.maximum(g2 - dr**2, 0.0)
    return PointData(s[:, 0], s[:, 1], grad, r, dr, tan2)


def _trapz(t, y) -> float:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(t) < 2:
        return 0.0
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(t), axis=0))


def _trapz_vec(t, Y) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(t) < 2:
        return np.zeros(Y.shape[1:]) if Y.ndim > 1 else np.zeros(0)
    dt = np.diff(t)
    return np.einsum("k,k...->...", dt, 0.5 * (Y[1:] + Y[:-1]))


def interior_energy(phi, pi, grid: Grid, R: float, sampling: SphereSampling,
                    per_h: float = 2.0) -> float:
    pts, w, _ = shell_rule(0.0, R, grid.h, sampling, per_h)
    d = point_data(phi, pi, grid, pts)
    return float(w @ (d.pi**2 + d.dr**2 + d.tan2))


def exterior_slice_energy(phi, pi, grid: Grid, r0: float, sampling: SphereSampling,
                          per_h: float = 2.0) -> float:
    """``int_{r > r0} pi^2 + |grad phi|^2`` up to two spacings from the boundary."""
    r1 = grid.R_dom - 2.0 * grid.h
    if r0 >= r1:
        return 0.0
    pts, w, _ = shell_rule(r0, r1, grid.h, sampling, per_h)
    d = point_data(phi, pi, grid, pts)
    return float(w @ (d.pi**2 + d.dr**2 + d.tan2))


# ---------------------------------------------------------------------------
# commuted fields


def _Omega_seq(u, grid, seq):
    for pair in seq:
        u = apply_Omega(u, grid, pair)
    return u


def _ring_weights(t0, t1, t2, where: str = "middle"):
    """Three-point first and second derivative weights at one of the levels."""
    h1, h2 = t1 - t0, t2 - t1
    w2 = (2.0 / (h1 * (h1 + h2)), -2.0 / (h1 * h2), 2.0 / (h2 * (h1 + h2)))
    if where == "middle":
        w1 = (-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2)))
    elif where == "end":
        w1 = (h2 / (h1 * (h1 + h2)), -(h1 + h2) / (h1 * h2), (h1 + 2 * h2) / (h2 * (h1 + h2)))
    elif where == "start":
        w1 = (-(2 * h1 + h2) / (h1 * (h1 + h2)), (h1 + h2) / (h1 * h2), -h1 / (h2 * (h1 + h2)))
    else:
        raise ValueError(where)
    return w1, w2


def commuted_pair(ring: Sequence[FieldState], grid: Grid, seq: tuple, j: int,
                  where: str = "middle"):
    """``(t, u, d_t u)`` for ``u = Omega^seq T^j phi`` from a ring of states.

    ``j = 0`` uses the newest state.  ``j >= 1`` uses ``pi`` and three-point
    differences of ``pi`` over the last three levels, evaluated at the
    middle level by default or at the first or last level (``where``).
    Off-centre second differences are first-order accurate.
    """
    if j == 0:
        s = ring[-1]
        return s.t, _Omega_seq(s.phi, grid, seq), _Omega_seq(s.pi, grid, seq)
    if j > 2:
        raise ValueError("T-commutation depth above 2 is not supported")
    if len(ring) < 3:
        raise ValueError(f"T^{j} needs a ring of at least 3 levels, have {len(ring)}")
    s0, s1, s2 = ring[-3], ring[-2], ring[-1]
    w1, w2 = _ring_weights(s0.t, s1.t, s2.t, where)
    s = {"start": s0, "middle": s1, "end": s2}[where]
    dpi = w1[0] * s0.pi + w1[1] * s1.pi + w1[2] * s2.pi
    if j == 1:
        return s.t, _Omega_seq(s.pi, grid, seq), _Omega_seq(dpi, grid, seq)
    ddpi = w2[0] * s0.pi + w2[1] * s1.pi + w2[2] * s2.pi
    if where == "middle":
        return s.t, _Omega_seq(dpi, grid, seq), _Omega_seq(ddpi, grid, seq)
    # d_t pi at an end level from the quadratic through the three levels
    return s.t, _Omega_seq(dpi, grid, seq), _Omega_seq(ddpi, grid, seq)


def _channel_sequences(k: int):
    return list(itertools.product(OMEGA_PAIRS, repeat=k))


# ---------------------------------------------------------------------------
# records


@dataclass
class EnergyBreakdown:
    tau: float
    interior: float
    null_truncated: float
    null_complete: bool
    E_total: float
    proxy: float = float("nan")


@dataclass
class _ChannelLeaf:
    times: list = field(default_factory=list)
    vals: list = field(default_factory=list)
    interior: float | None = None
    remainder: float = 0.0


@dataclass
class LeafRecord:
    """Cone samples and leaf values for one ``tau``."""

    tau: float
    times: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    interior: float = 0.0
    hardy_interior: float = 0.0
    max_phi_inner: float = 0.0
    outer_weighted: float = 0.0
    sph_avg_max: float = 0.0
    remainder: float = 0.0
    stopped: bool = False
    channels: dict = field(default_factory=dict)
    interior_source: float = 0.0
    interior_source_grad: float = 0.0


_ROW = ("e_null", "hardy", "psi", "sph_avg")


@dataclass
class BandRecord:
    tau1: float
    tau2: float
    times: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    bd_times: list = field(default_factory=list)
    bd_rows: list = field(default_factory=list)
    top: np.ndarray | None = None


class FoliationObserver(Observer):
    """Per-leaf and per-band accumulation during a run.

    Parameters
    ----------
    leaves : sequence of float
        Leaf times ``tau``; each must be a step time of the run.
    R : float
    alpha : float
        Weight exponent for the integrated norms.
    p_values : sequence of float
        Exponents of the weighted cone fluxes.
    channels : sequence of (k, j)
        Commuted energies ``E[Omega^k T^j phi]`` to accumulate besides (0, 0).
    bands : bool
        Integrate the space-time region between consecutive leaves
        (``tau = 0`` is always the first boundary).
    nullform : NullFormSpec, optional
        Source ``F`` for the weighted source norms.
    """

    def __init__(self, leaves: Sequence[float], R: float, alpha: float = 0.5,
                 p_values: Sequence[float] = (1.0, 1.5), channels: Sequence = (),
                 bands: bool = True, nullform: NullFormSpec | None = None,
                 sampling: SphereSampling | None = None, per_h: float = 2.0):
        for p in p_values:
            if not 0.0 <= p <= 2.0:
                raise ValueError(f"p = {p} outside [0, 2]")
        self.taus = sorted(float(t) for t in leaves)
        self.R = float(R)
        self.alpha = float(alpha)
        self.p = tuple(float(p) for p in p_values)
        self.channels = tuple(tuple(c) for c in channels if tuple(c) != (0, 0))
        self.nf = nullform if nullform is not None and nullform.enabled else None
        self.sampling = sampling or SphereSampling()
        self.per_h = per_h
        self.leaves = {t: LeafRecord(t) for t in self.taus}
        for rec in self.leaves.values():
            for c in self.channels:
                rec.channels[c] = _ChannelLeaf()
        bounds = sorted(set([0.0] + self.taus))
        self.bands = [BandRecord(a, b) for a, b in zip(bounds[:-1], bounds[1:])] if bands else []
        self.need_ring = any(j > 0 for _, j in self.channels)
        self.ring: deque = deque(maxlen=3)
        self._ring_start = True
        self.grid: Grid | None = None
        self.T_end = 0.0

    # -- observer hooks -----------------------------------------------------
    def start(self, solver, state):
        self.grid = solver.grid
        self._commit(state)

    def after_step(self, solver, state):
        self._commit(state)

    def at_event(self, solver, state, tau):
        pass

    def finish(self, solver, state, record):
        self.T_end = state.t
        g = self.grid
        for rec in self.leaves.values():
            if rec.tau > state.t:
                continue
            rc = state.t - rec.tau + self.R
            rec.remainder = exterior_slice_energy(state.phi, state.pi, g, rc, self.sampling, self.per_h)
            for (k, j), ch in rec.channels.items():
                if len(self.ring) < 3:
                    ch.remainder = float("nan")
                    continue
                tot = 0.0
                for seq in _channel_sequences(k):
                    _, u, ut = commuted_pair(self.ring, g, seq, j, where="end")
                    tot += exterior_slice_energy(u, ut, g, rc, self.sampling, self.per_h)
                ch.remainder = tot
        for band in self.bands:
            band.top = self._top_terms(state, band)

    # -- accumulation -------------------------------------------------------
    def _commit(self, state):
        g = self.grid
        t = state.t
        self.T_end = t
        if self.need_ring:
            self.ring.append(state.copy())
        F = None
        if self.nf is not None:
            F = eval_F(self.nf, state.pi, gradient(state.phi, g.h), state.phi)
        for rec in self.leaves.values():
            if t + 1e-12 < rec.tau:
                continue
            if abs(t - rec.tau) <= 1e-12 * max(1.0, abs(t)):
                self._leaf_values(rec, state, F)
            self._cone_sample(rec, state)
        if self.channels:
            self._channel_samples(state)
        for band in self.bands:
            self._band_sample(band, state, F)

    def _leaf_values(self, rec: LeafRecord, state: FieldState, F):
        g, R, S = self.grid, self.R, self.sampling
        pts, w, rr = shell_rule(0.0, R, g.h, S, self.per_h)
        d = point_data(state.phi, state.pi, g, pts)
        rec.interior = float(w @ (d.pi**2 + d.dr**2 + d.tan2))
        rec.hardy_interior = float(w @ (d.phi / (1.0 + rr)) ** 2)
        inner = g.r <= R
        rec.max_phi_inner = float(np.abs(state.phi[inner]).max())
        if F is not None:
            Fi = _kernels.trilinear(np.ascontiguousarray(F), g.h, g.R_dom, pts)
            rec.interior_source = float(w @ Fi**2)
            gF = gradient(F, g.h)
            rec.interior_source_grad = float(sum(
                w @ _kernels.trilinear(np.ascontiguousarray(gF[a]), g.h, g.R_dom, pts) ** 2
                for a in range(3)))

    def _sphere(self, rad):
        return rad * self.sampling.nodes

    def _cone_ok(self, rec, rad):
        if rad + 2.0 * self.grid.h > self.grid.R_dom:
            rec.stopped = True
            return False
        return True

    def _cone_sample(self, rec: LeafRecord, state: FieldState):
        rad = state.t - rec.tau + self.R
        if not self._cone_ok(rec, rad):
            return
        d = point_data(state.phi, state.pi, self.grid, self._sphere(rad))
        W = self.sampling.weights
        r2 = rad * rad
        row = [
            r2 * (W @ (d.dv**2 + d.tan2)),
            r2 * (W @ (d.phi / (1.0 + rad)) ** 2),
            W @ (d.psi_v**2 + r2 * d.tan2),
            rad * (W @ d.phi**2),
        ]
        psi2 = d.psi_v**2
        row.extend(rad**p * (W @ psi2) for p in self.p)
        rec.times.append(state.t)
        rec.rows.append(row)
        rec.sph_avg_max = max(rec.sph_avg_max, row[3])
        rec.outer_weighted = max(rec.outer_weighted, float(rad * np.abs(d.phi).max()))

    def _channel_samples(self, state):
        for (k, j) in self.channels:
            if j == 0:
                self._channel_at(k, j, [state], "middle")
            elif len(self.ring) == 3:
                if self._ring_start:
                    self._channel_at(k, j, self.ring, "start")
                self._channel_at(k, j, self.ring, "middle")
        if len(self.ring) == 3:
            self._ring_start = False

    def _channel_at(self, k, j, ring, where):
        g = self.grid
        W = self.sampling.weights
        fields = [commuted_pair(ring, g, s, j, where) for s in _channel_sequences(k)]
        t = fields[0][0]
        for rec in self.leaves.values():
            ch = rec.channels[(k, j)]
            if t + 1e-12 < rec.tau:
                continue
            rad = t - rec.tau + self.R
            if rad + 2.0 * g.h > g.R_dom:
                continue
            pts = self._sphere(rad)
            val = 0.0
            for _, u, ut in fields:
                d = point_data(u, ut, g, pts)
                val += rad * rad * (W @ (d.dv**2 + d.tan2))
            ch.times.append(t)
            ch.vals.append(val)
            if abs(t - rec.tau) <= 1e-12 * max(1.0, t):
                ch.interior = sum(interior_energy(u, ut, g, self.R, self.sampling, self.per_h)
                                  for _, u, ut in fields)

    # band rows: ile, D, F^2 r^(3-a), F^2 r^2, then per p: bulk, source
    def _band_sample(self, band: BandRecord, state: FieldState, F):
        g, R, S, t = self.grid, self.R, self.sampling, state.t
        a, b = band.tau1, band.tau2
        if t + 1e-12 < a:
            return
        blocks = []
        if t <= b + 1e-12:
            blocks.append(shell_rule(0.0, R, g.h, S, self.per_h) + (False,))
        r_lo = max(R, t - b + R)
        r_hi = min(t - a + R, g.R_dom - 2.0 * g.h)
        if r_hi > r_lo:
            blocks.append(shell_rule(r_lo, r_hi, g.h, S, self.per_h) + (True,))
        al = self.alpha
        row = np.zeros(4 + 2 * len(self.p))
        for pts, w, rr, ext in blocks:
            d = point_data(state.phi, state.pi, g, pts)
            ile = (d.pi**2 + d.dr**2 + d.tan2) * (1.0 + rr) ** (-al - 1.0) \
                + d.phi**2 / rr * (1.0 + rr) ** (-al - 2.0)
            row[0] += w @ ile
            if F is not None:
                Fi = _kernels.trilinear(np.ascontiguousarray(F), g.h, g.R_dom, pts)
                row[1] += w @ (Fi**2 * (1.0 + rr) ** (al + 1.0))
                if ext:
                    row[2] += w @ (Fi**2 * rr ** (3.0 - al))
                    row[3] += w @ (Fi**2 * rr**2)
            else:
                Fi = None
            if ext:
                # du dv dw = dt dx / (2 r^2)
                wb = 0.5 * w / rr**2
                psv2 = d.psi_v**2
                psa2 = rr**2 * d.tan2
                for q, p in enumerate(self.p):
                    row[4 + 2 * q] += wb @ (rr ** (p - 1.0) * (p * psv2 + (2.0 - p) * psa2))
                    if Fi is not None:
                        row[5 + 2 * q] += wb @ (2.0 * rr ** (p + 1.0) * Fi * d.psi_v)
        band.times.append(t)
        band.rows.append(row)
        if t <= b + 1e-12 and t >= a - 1e-12:
            d = point_data(state.phi, state.pi, g, R * S.nodes)
            W = S.weights
            X = d.psi_v**2
            Y = R * R * d.tan2
            band.bd_times.append(t)
            band.bd_rows.append([R**p * (W @ (Y - X)) for p in self.p])

    def _top_terms(self, state, band):
        g, R, T = self.grid, self.R, state.t
        lo, hi = T - band.tau2 + R, min(T - band.tau1 + R, g.R_dom - 2.0 * g.h)
        if hi <= lo:
            return np.zeros(len(self.p))
        pts, w, rr = shell_rule(lo, hi, g.h, self.sampling, self.per_h)
        d = point_data(state.phi, state.pi, g, pts)
        wb = 0.5 * w / rr**2  # (dr / 2) dw
        X = d.psi_v**2
        Y = rr**2 * d.tan2
        return np.array([wb @ (rr**p * (X + Y)) for p in self.p])

    # -- summaries ------------------------------------------------------------
    def leaf(self, tau: float) -> LeafRecord:
        try:
            return self.leaves[float(tau)]
        except KeyError:
            raise ValueError(f"tau = {tau} is not a recorded leaf") from None

    def cone_integrals(self, tau: float) -> np.ndarray:
        rec = self.leaf(tau)
        if len(rec.rows) == 0:
            return np.zeros(len(_ROW) + len(self.p))
        return _trapz_vec(rec.times, np.asarray(rec.rows))

    def null_complete(self, tau: float, rel: float = 1e-10) -> bool:
        rec = self.leaf(tau)
        if rec.stopped:
            return True
        if len(rec.rows) < 2:
            return False
        e = np.asarray(rec.rows)[:, 0]
        peak = e.max()
        return bool(peak == 0.0 or e[-1] <= rel * peak)

    def proxy(self, tau: float) -> float:
        rec = self.leaf(tau)
        return rec.interior + float(self.cone_integrals(tau)[0]) + rec.remainder

    def band(self, tau1: float, tau2: float) -> BandRecord:
        for b in self.bands:
            if b.tau1 == tau1 and b.tau2 == tau2:
                return b
        raise ValueError(f"no band [{tau1}, {tau2}]")

    def band_integrals(self, band: BandRecord) -> dict:
        tot = _trapz_vec(band.times, np.asarray(band.rows)) if band.rows else np.zeros(4 + 2 * len(self.p))
        bd = 0.5 * _trapz_vec(band.bd_times, np.asarray(band.bd_rows)) if band.bd_rows \
            else np.zeros(len(self.p))
        return {"ile": tot[0], "D": tot[1], "src_r3ma": tot[2], "src_r2": tot[3],
                "bulk": tot[4::2], "source": tot[5::2], "boundary": bd,
                "top": band.top if band.top is not None else np.zeros(len(self.p))}

    def region_integrals(self, tau1: float, tau2: float) -> dict:
        """Sum of band integrals over ``[tau1, tau2]`` (both must be band edges)."""
        sel = [b for b in self.bands if b.tau1 >= tau1 - 1e-12 and b.tau2 <= tau2 + 1e-12]
        if not sel or abs(sel[0].tau1 - tau1) > 1e-12 or abs(sel[-1].tau2 - tau2) > 1e-12:
            raise ValueError(f"[{tau1}, {tau2}] is not a union of recorded bands")
        out = None
        for b in sel:
            bi = self.band_integrals(b)
            if out is None:
                out = {k: np.array(v, dtype=float) for k, v in bi.items()}
            else:
                for k in out:
                    out[k] = out[k] + bi[k]
        return out


# ---------------------------------------------------------------------------
# leaf-level checks


def energy_flux(obs: FoliationObserver, tau: float) -> EnergyBreakdown:
    rec = obs.leaf(tau)
    null = float(obs.cone_integrals(tau)[0])
    return EnergyBreakdown(float(tau), rec.interior, null, obs.null_complete(tau),
                           rec.interior + null, obs.proxy(tau))


def commuted_energy(obs: FoliationObserver, k: int, j: int, tau: float) -> EnergyBreakdown:
    """``E[Omega^k T^j phi](tau)``; ``(0, 0)`` is :func:`energy_flux` itself."""
    if (k, j) == (0, 0):
        return energy_flux(obs, tau)
    if not index_sets().contains_A(k, j):
        raise ValueError(f"({k}, {j}) not in the admissible set")
    rec = obs.leaf(tau)
    if (k, j) not in rec.channels:
        raise ValueError(f"channel ({k}, {j}) was not recorded")
    ch = rec.channels[(k, j)]
    if ch.interior is None:
        raise ValueError(f"ring too shallow for T^{j} at tau = {tau}")
    null = _trapz(ch.times, ch.vals)
    proxy = ch.interior + null + ch.remainder
    return EnergyBreakdown(float(tau), ch.interior, null, obs.null_complete(tau),
                           ch.interior + null, proxy)


@dataclass
class InequalityResult:
    value: float
    bound: float
    ratio: float
    defined: bool = True

    def passed(self, tol_h: float = TOL_H) -> bool:
        return (not self.defined) or self.ratio <= 1.0 + tol_h


def hardy_check(obs: FoliationObserver, tau: float) -> InequalityResult:
    """``[int_{r<=R} (phi/(1+r))^2 + int_{S_tau} (phi/(1+r))^2 r^2] / E_proxy`` vs 6."""
    rec = obs.leaf(tau)
    lhs = rec.hardy_interior + float(obs.cone_integrals(tau)[1])
    E = obs.proxy(tau)
    if not E > 0:
        return InequalityResult(lhs, 0.0, float("nan"), False)
    return InequalityResult(lhs, HARDY_CONSTANT * E, lhs / (HARDY_CONSTANT * E))


def spherical_average_check(obs: FoliationObserver, tau: float) -> InequalityResult:
    """``max_r r int phi^2 dw`` along the cone against ``E_proxy``."""
    rec = obs.leaf(tau)
    E = obs.proxy(tau)
    if not E > 0:
        return InequalityResult(rec.sph_avg_max, 0.0, float("nan"), False)
    return InequalityResult(rec.sph_avg_max, E, rec.sph_avg_max / E)


def psi_phi_equivalence(obs: FoliationObserver, tau: float) -> InequalityResult:
    """Cone defect between the ``psi = r phi`` and ``phi`` energies against ``2 E_proxy``."""
    c = obs.cone_integrals(tau)
    defect = abs(float(c[2]) - float(c[0]))
    E = obs.proxy(tau)
    if not E > 0:
        return InequalityResult(defect, 0.0, 0.0 if defect == 0 else float("nan"), defect == 0)
    return InequalityResult(defect, PSI_PHI_CONSTANT * E, defect / (PSI_PHI_CONSTANT * E))


def p_weighted_flux(obs: FoliationObserver, tau: float, p: float) -> float:
    """``int_{S_tau} r^p (d_v psi)^2 dv dw`` accumulated to the final time."""
    if not 0.0 < p <= 2.0:
        raise ValueError("p must lie in (0, 2]")
    try:
        q = obs.p.index(float(p))
    except ValueError:
        raise ValueError(f"p = {p} was not accumulated") from None
    return float(obs.cone_integrals(tau)[len(_ROW) + q])


@dataclass
class IdentityBalance:
    terms: dict
    lhs: float
    rhs: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def relative(self) -> float:
        m = max(abs(v) for v in self.terms.values())
        return self.residual / m if m > 0 else 0.0


def p_weighted_identity(obs: FoliationObserver, tau1: float, tau2: float, p: float) -> IdentityBalance:
    """Balance of the weighted identity between two leaves.

    ``F(tau2) + bulk + top + source = F(tau1) + int_{r=R} (r^p |ang psi|^2 - r^p psi_v^2) du dw``
    with ``F(tau) = int_{S_tau} r^p psi_v^2 dv dw`` truncated at the final time and
    ``top`` the slice term at that time.
    """
    q = obs.p.index(float(p))
    reg = obs.region_integrals(tau1, tau2)
    F1 = float(obs.cone_integrals(tau1)[len(_ROW) + q])
    F2 = float(obs.cone_integrals(tau2)[len(_ROW) + q])
    terms = {"flux_tau1": F1, "flux_tau2": F2, "bulk": float(reg["bulk"][q]),
             "top": float(reg["top"][q]), "source": float(reg["source"][q]),
             "boundary": float(reg["boundary"][q])}
    lhs = F2 + terms["bulk"] + terms["top"] + terms["source"]
    rhs = F1 + terms["boundary"]
    return IdentityBalance(terms, lhs, rhs)


def D_norm(obs: FoliationObserver, alpha: float, tau1: float, tau2: float) -> float:
    """``int int_{D(tau1, tau2)} |F|^2 (1 + r)^(alpha + 1)``."""
    if abs(alpha - obs.alpha) > 1e-15:
        raise ValueError("alpha differs from the accumulated weight")
    if tau1 < 0 or tau2 > obs.T_end + 1e-12 or tau2 < tau1:
        raise ValueError("tau range outside the run")
    if tau1 == tau2:
        return 0.0
    return float(obs.region_integrals(tau1, tau2)["D"])


def D_norm_grid(F_history, times, grid: Grid, alpha: float) -> float:
    """Trapezoid-in-time grid-sum ``int int |F|^2 (1+r)^(alpha+1)`` over the whole grid."""
    w = (1.0 + grid.r) ** (alpha + 1.0) * grid.h**3
    vals = [float(np.sum(np.asarray(F) ** 2 * w)) for F in F_history]
    return _trapz(times, vals)


def ile_constant(alpha: float) -> float:
    """``(18 beta)^2`` with ``beta = 2 / alpha``."""
    return (18.0 * 2.0 / alpha) ** 2


def ile_integrand(obs: FoliationObserver, alpha: float, tau1: float, tau2: float) -> InequalityResult:
    """Integrated local energy over ``D(tau1, tau2)`` against ``C (E_proxy(tau1) + D)``."""
    if abs(alpha - obs.alpha) > 1e-15:
        raise ValueError("alpha differs from the accumulated weight")
    reg = obs.region_integrals(tau1, tau2)
    lhs = float(reg["ile"])
    E1 = obs.proxy(tau1) if tau1 in obs.leaves else float("nan")
    bound = ile_constant(alpha) * (E1 + float(reg["D"]))
    if not bound > 0:
        return InequalityResult(lhs, bound, float("nan"), False)
    return InequalityResult(lhs, bound, lhs / bound)


# ---------------------------------------------------------------------------
# cross-cone flux


class CrossConeFlux(Observer):
    """``int (d_u psi)^2 dw du`` along the ingoing cone ``v = v0`` between two leaves.

    Along ``v = v0`` the radius is ``r = 2 v0 - t`` and ``du = dt``.  The
    segment runs from ``S_tau1`` to ``S_tau2``.  Besides the flux the
    observer records the ``T`` flux ``int r^2 ((d_u phi)^2 + |ang phi|^2)``
    and ``r int phi^2 dw`` at the segment ends, which bound it through
    ``(d_u psi)^2 = r^2 (d_u phi)^2 - d_u(r phi^2)``.
    """

    def __init__(self, v0: float, tau1: float, tau2: float, R: float,
                 sampling: SphereSampling | None = None):
        self.v0, self.tau1, self.tau2, self.R = float(v0), float(tau1), float(tau2), float(R)
        if self.v0 < 0.5 * (self.tau2 + self.R):
            raise ValueError("v0 too small: segment would enter r < R")
        self.t1 = self.v0 + 0.5 * (self.tau1 - self.R)
        self.t2 = self.v0 + 0.5 * (self.tau2 - self.R)
        self.sampling = sampling or SphereSampling()
        self.times: list = []
        self.rows: list = []
        self.grid = None

    def start(self, solver, state):
        self.grid = solver.grid
        self._sample(state)

    def after_step(self, solver, state):
        self._sample(state)

    def _sample(self, state):
        t = state.t
        pad = 2.0 * self.grid.h
        if t < self.t1 - pad or t > self.t2 + pad:
            return
        rad = 2.0 * self.v0 - t
        if rad <= 0 or rad + 2 * self.grid.h > self.grid.R_dom:
            return
        d = point_data(state.phi, state.pi, self.grid, rad * self.sampling.nodes)
        W = self.sampling.weights
        self.times.append(t)
        self.rows.append([W @ d.psi_u**2, rad * rad * (W @ (d.du**2 + d.tan2)),
                          rad * (W @ d.phi**2)])

    def _series(self):
        t = np.asarray(self.times)
        if len(t) < 2 or t[0] > self.t1 + 1e-9 or t[-1] < self.t2 - 1e-9:
            raise ValueError("segment not covered by the recorded samples")
        return t, np.asarray(self.rows)

    def value(self) -> float:
        t, y = self._series()
        tt = np.concatenate([[self.t1], t[(t > self.t1) & (t < self.t2)], [self.t2]])
        return _trapz(tt, np.interp(tt, t, y[:, 0]))

    def bound(self) -> float:
        """``2 int J^T + |[r int phi^2 dw]|`` over the segment."""
        t, y = self._series()
        tt = np.concatenate([[self.t1], t[(t > self.t1) & (t < self.t2)], [self.t2]])
        J = _trapz(tt, np.interp(tt, t, y[:, 1]))
        ends = np.interp([self.t1, self.t2], t, y[:, 2])
        return 2.0 * J + abs(float(ends[1] - ends[0]))


# ---------------------------------------------------------------------------
# commutators


def _discrete_box(coef, levels, delta, grid: Grid, mask):
    """Discrete ``g^{ab} d_ab u + b^a d_a u`` at the middle of three levels.

    ``coef`` is ``(g_inv (N,4,4), b (N,4))`` at the masked nodes, ``levels``
    the arrays at ``t - delta, t, t + delta``.
    """
    um, u0, up = levels
    h = grid.h
    gi, b = coef
    ut = (up - um) / (2.0 * delta)
    utt = (up - 2.0 * u0 + um) / delta**2
    gx = [np.gradient(u0, h, axis=a)[mask] for a in range(3)]
    gt = [np.gradient(ut, h, axis=a)[mask] for a in range(3)]
    H = np.empty((len(gi), 3, 3))
    for a in range(3):
        H[:, a, a] = ((np.roll(u0, -1, a) - 2.0 * u0 + np.roll(u0, 1, a)) / h**2)[mask]
        for c in range(a + 1, 3):
            H[:, a, c] = H[:, c, a] = np.gradient(np.gradient(u0, h, axis=a), h, axis=c)[mask]
    out = gi[:, 0, 0] * utt[mask]
    out += 2.0 * sum(gi[:, 0, a + 1] * gt[a] for a in range(3))
    out += np.einsum("nij,nij->n", gi[:, 1:, 1:], H)
    out += b[:, 0] * ut[mask] + sum(b[:, a + 1] * gx[a] for a in range(3))
    return out


@dataclass
class CommutatorResult:
    max_residual: float
    max_outside: float
    scale: float
    h: float


def commutator_residual(spec: MetricSpec, grid: Grid, field_fn, t: float, X_id: str = "T",
                        delta: float | None = None, pair=(1, 2),
                        core_frac: float | None = None) -> CommutatorResult:
    """Discrete commutator ``[box_g, X]`` against its coefficient formula.

    ``field_fn(t, x)`` evaluates a smooth field on ``(M, 3)`` points.  For
    ``X = T`` the discrete operator is applied on five time levels spaced
    by ``delta`` and compared with ``-d_t g^{ab} d_ab u - d_t b^a d_a u``; the
    difference of coefficients is formed explicitly so it is exactly zero
    where the metric is flat.  For ``X = Omega`` the comparison uses
    ``-(Omega g^{ab}) d_ab u - (Omega b^a) d_a u`` plus the terms from
    ``[d, Omega]``; spatial derivatives of ``b`` are central differences of
    the analytic field.  ``core_frac`` restricts ``max_residual`` to
    ``r <= core_frac * support_radius``; the default covers the support
    plus two spacings.
    """
    h = grid.h
    delta = 0.5 * h if delta is None else delta
    inner = np.zeros(grid.shape, dtype=bool)
    inner[3:-3, 3:-3, 3:-3] = True
    mask = inner
    idx = np.argwhere(mask)
    X = grid.x[idx]
    pts_all = np.stack(np.meshgrid(grid.x, grid.x, grid.x, indexing="ij"), -1).reshape(-1, 3)

    def lev(s):
        return field_fn(s, pts_all).reshape(grid.shape)

    def coef(s):
        mf = metric_fields(spec, s, X)
        return mf.g_inv, mf.b

    r = np.linalg.norm(X, axis=1)
    if X_id == "T":
        L = [lev(t + k * delta) for k in (-2, -1, 0, 1, 2)]
        c = {k: coef(t + k * delta) for k in (-1, 0, 1)}
        # sum_D [(c(t) - c(t+d)) D u(t+d) - (c(t) - c(t-d)) D u(t-d)] / (2 d)
        dp = (c[0][0] - c[1][0], c[0][1] - c[1][1])
        dm = (c[0][0] - c[-1][0], c[0][1] - c[-1][1])
        comm = (_discrete_box(dp, L[2:5], delta, grid, mask)
                - _discrete_box(dm, L[0:3], delta, grid, mask)) / (2.0 * delta)
        dgi, db = metric_time_derivatives(spec, t, X)
        ref = -_discrete_box((dgi, db), L[1:4], delta, grid, mask)
    elif X_id == "Omega":
        i, j = (pair[0] - 1, pair[1] - 1)
        L = [lev(t + k * delta) for k in (-1, 0, 1)]
        OL = [apply_Omega(u, grid, pair) for u in L]
        c0 = coef(t)
        box_of_Om = _discrete_box(c0, OL, delta, grid, mask)
        # box u one node wider so Omega(box u) is centred on every masked node
        wide = np.zeros(grid.shape, dtype=bool)
        wide[2:-2, 2:-2, 2:-2] = True
        mw = metric_fields(spec, t, grid.x[np.argwhere(wide)])
        box_u = np.zeros(grid.shape)
        box_u[wide] = _discrete_box((mw.g_inv, mw.b), L, delta, grid, wide)
        Om_of_box = apply_Omega(box_u, grid, pair)[mask]
        comm = box_of_Om - Om_of_box
        # reference: -(Omega c) D u + c [D, Omega] u
        mf = metric_fields(spec, t, X)
        dgi = _dginv(mf.g_inv, mf.dg)  # (N, c, a, b)
        Om_gi = X[:, i, None, None] * dgi[:, j + 1] - X[:, j, None, None] * dgi[:, i + 1]
        eps = 1e-5
        db = np.zeros((len(X), 3, 4))
        for a in range(3):
            e = np.zeros(3)
            e[a] = eps
            db[:, a] = (metric_fields(spec, t, X + e).b - metric_fields(spec, t, X - e).b) / (2 * eps)
        Om_b = X[:, i, None] * db[:, j] - X[:, j, None] * db[:, i]
        ref = -_discrete_box((Om_gi, Om_b), L, delta, grid, mask)
        # [d_k, Omega_ij] = delta_ki d_j - delta_kj d_i, applied through g and b
        gi, b = c0
        u0 = L[1]
        ut = (L[2] - L[0]) / (2.0 * delta)
        h_ = grid.h
        D1 = [np.gradient(u0, h_, axis=a) for a in range(3)]
        D1t = [np.gradient(ut, h_, axis=a)[mask] for a in range(3)]
        D2 = [[np.gradient(D1[a], h_, axis=c)[mask] for c in range(3)] for a in range(3)]
        D1m = [d[mask] for d in D1]
        extra = b[:, i + 1] * D1m[j] - b[:, j + 1] * D1m[i]
        extra += 2.0 * (gi[:, 0, i + 1] * D1t[j] - gi[:, 0, j + 1] * D1t[i])
        for k in range(3):
            extra += 2.0 * (gi[:, k + 1, i + 1] * D2[k][j] - gi[:, k + 1, j + 1] * D2[k][i])
        ref = ref + extra
    else:
        raise ValueError(f"unknown commutation field {X_id!r}")
    res = np.abs(comm - ref)
    outside = r > spec.support_radius + 2.0 * h
    if X_id == "T":
        scale = float(np.abs(ref).max())
        mo = float(np.abs(comm[outside]).max(initial=0.0))
    else:
        scale = float(np.abs(ref).max())
        mo = float(res[outside].max(initial=0.0))
    lim = spec.support_radius + 2.0 * h if core_frac is None else core_frac * spec.support_radius
    return CommutatorResult(float(res[r <= lim].max(initial=0.0)), mo, scale, h)


# ---------------------------------------------------------------------------
# index sets


@dataclass(frozen=True)
class CommutationIndex:
    A_set: frozenset
    B_set: frozenset

    def contains_A(self, k: int, j: int) -> bool:
        return (k, j) in self.A_set

    def contains_B(self, k: int, j: int) -> bool:
        return (k, j) in self.B_set


def index_sets(kmax: int = 5, total: int = 8) -> CommutationIndex:
    A = frozenset((k, j) for k in range(kmax + 1) for j in range(total + 1) if k + j <= total)
    B = frozenset((k, j) for (k, j) in A if (k, j + 2) in A)
    return CommutationIndex(A, B)


def _splits(k, j):
    for k1 in range(k + 1):
        for j1 in range(j + 1):
            yield (k1, j1), (k - k1, j - j1)


def check_index_lemma(ix: CommutationIndex | None = None) -> dict:
    """Exhaustive check of the three properties of ``A`` and ``B``.

    For every split ``(k1 + k2, j1 + j2) in A``:

    * ``step``: ``(k_i + 2, j_i + 1) in A`` for at least one part;
    * ``has_B``: ``(k_i, j_i) in B`` for at least one part;

    and ``closed``: both sets are closed under lowering either index.
    """
    ix = ix or index_sets()
    A, B = ix.A_set, ix.B_set
    cases = 0
    fails = {"step": [], "has_B": [], "closed": []}
    for (k, j) in sorted(A):
        for p1, p2 in _splits(k, j):
            cases += 1
            if not ((p1[0] + 2, p1[1] + 1) in A or (p2[0] + 2, p2[1] + 1) in A):
                fails["step"].append((p1, p2))
            if not (p1 in B or p2 in B):
                fails["has_B"].append((p1, p2))
    for S in (A, B):
        for (k, j) in sorted(S):
            for k2 in range(k + 1):
                for j2 in range(j + 1):
                    cases += 1
                    if (k2, j2) not in S:
                        fails["closed"].append(((k, j), (k2, j2)))
    return {"cases": cases, "A_size": len(A), "B_size": len(B),
            "failures": {k: len(v) for k, v in fails.items()},
            "examples": {k: v[:5] for k, v in fails.items()},
            "passed": all(len(v) == 0 for v in fails.values())}


# ---------------------------------------------------------------------------
# decay fits and schedules


@dataclass
class FitResult:
    slope: float
    intercept: float
    residual: float
    target: float
    threshold: float
    passed: bool
    n_points: int
    flagged: str = ""


@dataclass
class DecayReport:
    alpha: float
    taus: np.ndarray
    series: dict
    energy: FitResult
    pointwise: FitResult

    def to_json(self) -> dict:
        return {
            "slope_energy": _finite_or_none(self.energy.slope),
            "slope_pointwise": _finite_or_none(self.pointwise.slope),
            "residuals": {"energy": _finite_or_none(self.energy.residual),
                          "pointwise": _finite_or_none(self.pointwise.residual)},
            "pass": {"energy": bool(self.energy.passed),
                     "pointwise": bool(self.pointwise.passed)},
            "alpha": float(self.alpha),
        }


def _finite_or_none(x):
    return float(x) if np.isfinite(x) else None


def log_slope(tau, values, target: float, slack: float = 0.3) -> FitResult:
    """Least-squares slope of ``log values`` against ``log(1 + tau)``."""
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(values, dtype=float)
    thr = target + slack
    n = len(tau)
    if n < 6:
        return FitResult(np.nan, np.nan, np.nan, target, thr, False, n, "fewer than 6 leaves")
    if (1 + tau.max()) / (1 + tau.min()) < 4.0:
        return FitResult(np.nan, np.nan, np.nan, target, thr, False, n,
                         "leaves span less than a factor 4 in 1 + tau")
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        return FitResult(np.nan, np.nan, np.nan, target, thr, False, n, "degenerate series")
    x = np.log1p(tau)
    ly = np.log(y)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - ly) ** 2)))
    slope = float(coef[0])
    return FitResult(slope, float(coef[1]), res, target, thr, slope <= thr, n)


def fit_decay(taus, E_total, max_phi_inner, alpha: float, series: dict | None = None) -> DecayReport:
    """Energy and inner pointwise decay exponents with the slack-0.3 pass rule."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    taus = np.asarray(taus, dtype=float)
    e = log_slope(taus, E_total, -(2.0 - alpha))
    p = log_slope(taus, max_phi_inner, -(1.0 - 0.5 * alpha))
    s = {"E_total": np.asarray(E_total, float), "max_phi_inner": np.asarray(max_phi_inner, float)}
    s.update(series or {})
    return DecayReport(alpha, taus, s, e, p)


def dyadic_schedule(gamma: float, tau_max: float) -> list[float]:
    """``tau_n = min(gamma^n, tau_max)`` for ``n >= 1`` up to ``tau_max``."""
    if not gamma >= 1.2:
        raise ValueError("gamma must be at least 1.2")
    if not tau_max >= gamma:
        raise ValueError("tau_max must be at least gamma")
    out = []
    n = 1
    while True:
        t = min(gamma**n, tau_max)
        out.append(float(t))
        if t >= tau_max:
            break
        n += 1
    return out


def merge_schedules(*schedules, ndigits: int = 12) -> list[float]:
    vals = sorted({round(float(t), ndigits) for s in schedules for t in s})
    return vals


# ---------------------------------------------------------------------------
# bootstrap monitor


@dataclass
class MonitorReport:
    taus: np.ndarray
    interior: np.ndarray
    interior_grad: np.ndarray
    band_r3ma: np.ndarray
    interior_fit: FitResult
    c_interior: float
    c_band: float


def bootstrap_monitor(obs: FoliationObserver, alpha: float, slack: float = 0.5) -> MonitorReport:
    """Source-side monitors per leaf with fitted constants.

    ``interior`` is ``int_{r<=R} |F|^2`` at each leaf, ``interior_grad`` the
    same for ``|grad F|^2`` and ``band_r3ma`` the band integral of
    ``|F|^2 r^(3-alpha)`` over the exterior part of each band.  The interior
    series is fitted against ``-3 + alpha``; constants are the smallest
    ``c`` that dominate ``c (1+tau)^(-3+alpha)`` and ``c (1+tau1)^(-2+alpha)``.
    """
    taus = np.array(obs.taus)
    interior = np.array([obs.leaf(t).interior_source for t in taus])
    grad = np.array([obs.leaf(t).interior_source_grad for t in taus])
    band = np.array([obs.band_integrals(b)["src_r3ma"] for b in obs.bands])
    b1 = np.array([b.tau1 for b in obs.bands])
    fit = log_slope(taus, interior, -3.0 + alpha, slack)
    c_i = float(np.max(interior * (1 + taus) ** (3 - alpha))) if len(taus) else 0.0
    c_b = float(np.max(band * (1 + b1) ** (2 - alpha))) if len(band) else 0.0
    return MonitorReport(taus, interior, grad, band, fit, c_i, c_b)


__all__ = [
    "stress_energy", "currents", "CurrentDensities", "MultiplierProfile", "K_T_bound",
    "lambda2", "energy_density", "slice_energy", "EnergyBreakdown", "FoliationObserver",
    "energy_flux", "commuted_energy", "hardy_check", "spherical_average_check",
    "psi_phi_equivalence", "p_weighted_flux", "p_weighted_identity", "D_norm",
    "D_norm_grid", "ile_integrand", "ile_constant", "CrossConeFlux", "commutator_residual",
    "index_sets", "check_index_lemma", "CommutationIndex", "fit_decay", "log_slope",
    "DecayReport", "dyadic_schedule", "merge_schedules", "bootstrap_monitor",
    "InequalityResult", "MINKOWSKI", "MetricSample",
]
