"""Time-dependent perturbed Minkowski metrics and their structural checks.

The metric is written as ``g = m + h`` with ``m = diag(-1, 1, 1, 1)`` and a
perturbation ``h`` supported in the ball ``|x| <= R/2``.  All evaluation
routines are vectorised over spatial points; the single-event helper
:func:`eval_metric` wraps the batch code.

Index conventions: the coordinate order is ``(t, x1, x2, x3)`` and derivative
arrays put the differentiation index first, so ``dg[..., c, a, b]`` holds
``d_c g_{ab}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

MINKOWSKI = np.diag([-1.0, 1.0, 1.0, 1.0])
FAMILIES = ("minkowski", "oscillating_bump")
# Bump values below this distance from the support edge are treated as zero.
_EDGE_CUT = 1.0 - 1e-8


class HyperbolicityError(ValueError):
    """Raised when the metric stops being Lorentzian or invertible."""


@dataclass(frozen=True)
class MetricSpec:
    """Parameters of a metric family.

    Parameters
    ----------
    family : {"minkowski", "oscillating_bump"}
    a : float
        Amplitude of the diagonal perturbation.
    a2 : float
        Amplitude of the time-space shift components ``h_{0i}``.
    omega : float
        Temporal frequency.
    theta : tuple of float
        Phase offsets of the three spatial diagonal entries.
    R : float
        Cylinder scale; the perturbation lives in ``|x| <= R/2``.
    """

    family: Literal["minkowski", "oscillating_bump"] = "minkowski"
    a: float = 0.0
    a2: float = 0.0
    omega: float = 0.0
    theta: tuple[float, float, float] = (0.0, 0.0, 0.0)
    R: float = 2.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown metric family {self.family!r}")
        if not self.R > 0:
            raise ValueError("R must be positive")
        theta = tuple(float(v) for v in self.theta)
        if len(theta) != 3:
            raise ValueError("theta needs three phase offsets")
        object.__setattr__(self, "theta", theta)
        for name in ("a", "a2", "omega"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def support_radius(self) -> float:
        return 0.5 * self.R

    @property
    def is_flat(self) -> bool:
        return self.family == "minkowski" or (self.a == 0.0 and self.a2 == 0.0)


@dataclass
class MetricSample:
    """Pointwise metric data at one event."""

    g: np.ndarray
    g_inv: np.ndarray
    det_G: float
    dg: np.ndarray
    b: np.ndarray


@dataclass
class MetricFields:
    """Batched metric data at ``N`` spatial points and one time."""

    g: np.ndarray  # (N, 4, 4)
    g_inv: np.ndarray  # (N, 4, 4)
    det_G: np.ndarray  # (N,)
    dg: np.ndarray  # (N, 4, 4, 4)
    b: np.ndarray  # (N, 4)

    def sample(self, i: int) -> MetricSample:
        return MetricSample(self.g[i], self.g_inv[i], float(self.det_G[i]),
                            self.dg[i], self.b[i])


@dataclass
class HypothesisReport:
    """Outcome of the structural hypothesis check on a sampling lattice."""

    lam: float
    H: float
    lambda1: float
    smallness_margin: float
    passed_A1: bool
    alpha: float
    spatial_samples: int = 0
    temporal_samples: int = 0
    lambda_requested: float = field(default=float("nan"))

    def to_json(self) -> dict:
        return {
            "lambda": float(self.lam),
            "H": float(self.H),
            "lambda1": float(self.lambda1),
            "smallness_margin": float(self.smallness_margin),
            "passed_A1": bool(self.passed_A1),
            "alpha": float(self.alpha),
        }


# ---------------------------------------------------------------------------
# bump profile


def bump(s):
    """Smooth bump ``exp(1 - 1/(1 - s^2))`` on ``s < 1``, zero beyond.

    Values in a ``1e-8`` band below the edge are set to zero; the bump is
    far below double precision resolution there.
    """
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < _EDGE_CUT
    q = 1.0 - s[inside] ** 2
    out[inside] = np.exp(1.0 - 1.0 / q)
    return out


def bump_radial(x: np.ndarray, rho: float, order: int = 1):
    """Radial bump ``B(|x|/rho)`` and its Cartesian derivatives.

    Parameters
    ----------
    x : ndarray, shape (N, 3)
    rho : float
        Support radius.
    order : int
        0, 1 or 2: highest derivative order returned.

    Returns
    -------
    tuple
        ``(B,)``, ``(B, dB)`` or ``(B, dB, ddB)`` with shapes ``(N,)``,
        ``(N, 3)`` and ``(N, 3, 3)``.
    """
    x = np.asarray(x, dtype=float)
    r2 = np.einsum("ni,ni->n", x, x) / rho**2
    inside = r2 < _EDGE_CUT**2
    B = np.zeros(len(x))
    q = 1.0 - r2[inside]
    Bi = np.exp(1.0 - 1.0 / q)
    B[inside] = Bi
    if order == 0:
        return (B,)
    dB = np.zeros_like(x)
    xi = x[inside]
    # d_i B = -2 B x_i / (rho^2 q^2)
    coef1 = -2.0 * Bi / (rho**2 * q**2)
    dB[inside] = coef1[:, None] * xi
    if order == 1:
        return B, dB
    ddB = np.zeros((len(x), 3, 3))
    # d_ij B = -2/rho^2 [B d_ij / q^2 + (4/q^3 - 2/q^4) B x_i x_j / rho^2]
    c_delta = -2.0 * Bi / (rho**2 * q**2)
    c_xx = -2.0 * Bi * (4.0 / q**3 - 2.0 / q**4) / rho**4
    ddB[inside] = (c_delta[:, None, None] * np.eye(3)
                   + c_xx[:, None, None] * np.einsum("ni,nj->nij", xi, xi))
    return B, dB, ddB


# ---------------------------------------------------------------------------
# family evaluation


def _tfac(omega: float, phase: float, t: float, k: int) -> float:
    """k-th time derivative of cos(omega t + phase)."""
    return omega**k * np.cos(omega * t + phase + 0.5 * k * np.pi)


def perturbation(spec: MetricSpec, t: float, x: np.ndarray, k: int = 0):
    """Perturbation ``d_t^k h`` and its first derivatives.

    Returns
    -------
    h : ndarray, shape (N, 4, 4)
        ``d_t^k h_{ab}``.
    dh : ndarray, shape (N, 4, 4, 4)
        ``d_c d_t^k h_{ab}`` with ``c`` first.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    h = np.zeros((n, 4, 4))
    dh = np.zeros((n, 4, 4, 4))
    if spec.is_flat:
        return h, dh
    rho = spec.support_radius
    B, dB = bump_radial(x, rho, order=1)
    om = spec.omega
    phases = [0.0, *spec.theta]
    for a_idx, ph in enumerate(phases):
        c0 = _tfac(om, ph, t, k)
        c1 = _tfac(om, ph, t, k + 1)
        h[:, a_idx, a_idx] = spec.a * B * c0
        dh[:, 0, a_idx, a_idx] = spec.a * B * c1
        dh[:, 1:, a_idx, a_idx] = spec.a * c0 * dB
    if spec.a2 != 0.0:
        s0 = _tfac(om, -0.5 * np.pi, t, k)
        s1 = _tfac(om, -0.5 * np.pi, t, k + 1)
        for i in range(3):
            val = spec.a2 * B * x[:, i] / rho
            h[:, 0, i + 1] = h[:, i + 1, 0] = val * s0
            dh[:, 0, 0, i + 1] = dh[:, 0, i + 1, 0] = val * s1
            # d_j (B x_i / rho) = dB_j x_i / rho + B delta_ij / rho
            grad = dB * x[:, i:i + 1] / rho
            grad[:, i] += B / rho
            dh[:, 1:, 0, i + 1] = dh[:, 1:, i + 1, 0] = spec.a2 * s0 * grad
    return h, dh


def _support_mask(spec: MetricSpec, x: np.ndarray) -> np.ndarray:
    if spec.is_flat:
        return np.zeros(len(x), dtype=bool)
    r2 = np.einsum("ni,ni->n", x, x)
    return r2 < (_EDGE_CUT * spec.support_radius) ** 2


def _invert_checked(g: np.ndarray):
    det = np.linalg.det(g)
    bad = ~(det < -1e-12) | ~np.isfinite(det)
    if np.any(bad):
        raise HyperbolicityError(
            f"metric not Lorentzian/invertible at {int(bad.sum())} point(s);"
            f" det range [{det.min():.3g}, {det.max():.3g}]")
    return np.linalg.inv(g), det


def metric_fields(spec: MetricSpec, t: float, x: np.ndarray) -> MetricFields:
    """Evaluate the metric, inverse, determinant, derivatives and ``b``.

    Points outside the support radius receive exact Minkowski data.

    Raises
    ------
    HyperbolicityError
        If the metric is degenerate or not Lorentzian at any point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    g = np.broadcast_to(MINKOWSKI, (n, 4, 4)).copy()
    g_inv = g.copy()
    det = -np.ones(n)
    dg = np.zeros((n, 4, 4, 4))
    b = np.zeros((n, 4))
    mask = _support_mask(spec, x)
    if np.any(mask):
        hs, dhs = perturbation(spec, t, x[mask])
        gs = MINKOWSKI + hs
        gis, dets = _invert_checked(gs)
        g[mask], g_inv[mask], det[mask], dg[mask] = gs, gis, dets, dhs
        b[mask] = _b_vector(gis, dhs)
    return MetricFields(g, g_inv, det, dg, b)


def _dginv(g_inv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """``d_c g^{ab} = -g^{am} d_c g_{mn} g^{nb}``."""
    return -np.einsum("nam,ncmk,nkb->ncab", g_inv, dg, g_inv, optimize=True)


def _b_vector(g_inv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    # b^b = d_a g^{ab} + g^{ab} d_a ln sqrt(-G)
    dgi = _dginv(g_inv, dg)
    div = np.einsum("naab->nb", dgi)
    dlog = 0.5 * np.einsum("nmk,namk->na", g_inv, dg)
    return div + np.einsum("nab,na->nb", g_inv, dlog)


def metric_time_derivatives(spec: MetricSpec, t: float, x: np.ndarray):
    """Time derivatives ``d_t g^{ab}`` and ``d_t b^b`` at points ``x``.

    Returns
    -------
    dt_ginv : ndarray, shape (N, 4, 4)
    dt_b : ndarray, shape (N, 4)
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    dt_ginv = np.zeros((n, 4, 4))
    dt_b = np.zeros((n, 4))
    mask = _support_mask(spec, x)
    if not np.any(mask):
        return dt_ginv, dt_b
    xs = x[mask]
    h0, dh0 = perturbation(spec, t, xs, 0)
    h1, dh1 = perturbation(spec, t, xs, 1)
    gi, _ = _invert_checked(MINKOWSKI + h0)
    gdot = h1  # d_t g_{ab}
    dgdot = dh1  # d_t d_c g_{ab}
    gidot = -np.einsum("nam,nmk,nkb->nab", gi, gdot, gi, optimize=True)
    # d_t of -g^{am} d_c g_{mn} g^{nb}, contracted over c = a
    t1 = np.einsum("nam,namk,nkb->nb", gidot, dh0, gi, optimize=True)
    t2 = np.einsum("nam,namk,nkb->nb", gi, dgdot, gi, optimize=True)
    t3 = np.einsum("nam,namk,nkb->nb", gi, dh0, gidot, optimize=True)
    ddiv = -(t1 + t2 + t3)
    dlog = 0.5 * np.einsum("nmk,namk->na", gi, dh0)
    ddlog = 0.5 * (np.einsum("nmk,namk->na", gidot, dh0)
                   + np.einsum("nmk,namk->na", gi, dgdot))
    db = ddiv + np.einsum("nab,na->nb", gidot, dlog) + np.einsum("nab,na->nb", gi, ddlog)
    dt_ginv[mask] = gidot
    dt_b[mask] = db
    return dt_ginv, dt_b


def eval_metric(spec: MetricSpec, t: float, x) -> MetricSample:
    """Metric sample at a single event ``(t, x)``."""
    x = np.asarray(x, dtype=float).reshape(1, 3)
    return metric_fields(spec, float(t), x).sample(0)


# ---------------------------------------------------------------------------
# structural hypotheses


def _lattice(spec: MetricSpec, sample_count: int, temporal: int = 64):
    if sample_count < 1:
        raise ValueError("sample_count must be positive")
    rho = spec.support_radius
    axis = np.linspace(-rho, rho, sample_count) if sample_count > 1 else np.zeros(1)
    X = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    if spec.omega != 0.0:
        times = 2.0 * np.pi * np.arange(temporal) / (temporal * abs(spec.omega))
    else:
        times = np.zeros(1)
    return X, times


def ellipticity_bounds(lam: float, H: float) -> float:
    """Uniform ellipticity constant ``lam^2 / (1 + H + 3 H^2 / lam)``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return lam**2 / (1.0 + H + 3.0 * H**2 / lam)


def smallness_margin(H: float, R: float, alpha: float) -> float:
    """Ratio of ``H`` to the admissible size ``alpha / (700 (1 + R/2)^(alpha+1))``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return H * 700.0 * (1.0 + 0.5 * R) ** (alpha + 1.0) / alpha


def c1_norm_H(spec: MetricSpec, sample_count: int = 33, temporal: int = 64) -> float:
    """Lattice estimate of the C^1 size of ``h_{ab}`` and ``g^{ab} - m^{ab}``."""
    if spec.is_flat:
        return 0.0
    X, times = _lattice(spec, sample_count, temporal)
    X = X[_support_mask(spec, X)]
    if len(X) == 0:
        return 0.0
    H = 0.0
    for t in times:
        h, dh = perturbation(spec, t, X)
        gi, _ = _invert_checked(MINKOWSKI + h)
        dgi = _dginv(gi, dh)
        H = max(H, np.abs(h).max(), np.abs(dh).max(),
                np.abs(gi - MINKOWSKI).max(), np.abs(dgi).max())
    return float(H)


def direct_norm_H(spec: MetricSpec, sample_count: int = 33, temporal: int = 64) -> float:
    """Lattice maximum of ``|h_{ab}|`` and ``|d_c h_{ab}|`` alone."""
    if spec.is_flat:
        return 0.0
    X, times = _lattice(spec, sample_count, temporal)
    X = X[_support_mask(spec, X)]
    H = 0.0
    for t in times:
        h, dh = perturbation(spec, t, X)
        if len(X):
            H = max(H, np.abs(h).max(), np.abs(dh).max())
    return float(H)


def a1_lambda(spec: MetricSpec, sample_count: int = 33, temporal: int = 64) -> float:
    """Largest ``lambda`` (capped at 1) for which the hypothesis holds on the lattice."""
    X, times = _lattice(spec, sample_count, temporal)
    lam = 1.0
    if spec.is_flat:
        return lam
    X = X[_support_mask(spec, X)]
    for t in times:
        h, _ = perturbation(spec, t, X)
        g = MINKOWSKI + h
        ev = np.linalg.eigvalsh(g[:, 1:, 1:])
        # a nonpositive top eigenvalue is already caught by ev[:, 0]
        with np.errstate(divide="ignore"):
            inv_max = np.where(ev[:, -1] > 0, 1.0 / ev[:, -1], np.inf)
        lam = min(lam, float((-g[:, 0, 0]).min()), float(ev[:, 0].min()),
                  float(inv_max.min()))
    return lam


def check_A1(spec: MetricSpec, lam: float, sample_count: int = 33,
             alpha: float = 0.5, temporal: int = 64) -> HypothesisReport:
    """Check ``g_00 <= -lam`` and ``lam |x|^2 <= g_ij x^i x^j <= |x|^2 / lam``.

    The check runs on ``sample_count**3`` points of the cube around the
    support and ``temporal`` instants per period of ``omega`` (one instant
    when ``omega = 0``).  The reported ``lam`` is the largest admissible
    value found on that lattice.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError("lambda must lie in (0, 1]")
    if sample_count < 1:
        raise ValueError("empty sample set")
    lam_meas = a1_lambda(spec, sample_count, temporal)
    passed = lam_meas >= lam
    try:
        H = c1_norm_H(spec, sample_count, temporal)
    except HyperbolicityError:
        H = direct_norm_H(spec, sample_count, temporal)
    n_t = 1 if spec.omega == 0.0 else temporal
    lam1 = ellipticity_bounds(lam_meas, H) if lam_meas > 0 else 0.0
    margin = smallness_margin(H, spec.R, alpha)
    return HypothesisReport(lam_meas, H, lam1, margin, bool(passed), alpha,
                            sample_count**3, n_t, lam)


def spectral_check(sample: MetricSample, lambda1: float) -> bool:
    """True iff ``-g^00`` and the spectrum of ``(g^ij)`` lie in ``[lambda1, 1/lambda1]``."""
    lo, hi = lambda1, 1.0 / lambda1
    g00 = -sample.g_inv[0, 0]
    if not (lo <= g00 <= hi):
        return False
    ev = np.linalg.eigvalsh(sample.g_inv[1:, 1:])
    return bool(ev[0] >= lo and ev[-1] <= hi)


def max_speed(lambda1: float) -> float:
    """Conservative characteristic speed bound used for domain sizing."""
    return 1.0 / lambda1
