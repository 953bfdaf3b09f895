"""Quadratic nonlinearities, the null condition and the weighted decomposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_fields import (OMEGA_PAIRS, DomainError, FieldState, Grid, SphereSampling,
                          apply_Omega, gradient, interpolate)

ETA = np.diag([1.0, -1.0, -1.0, -1.0])
NULL_TOL = 1e-12
CROSSCHECK_TOL = 1e-10


@dataclass(frozen=True)
class NullCertificate:
    c: float
    sym_residual: float
    is_null: bool
    crosscheck_max: float = 0.0


@dataclass
class NullFormSpec:
    """``F = A^{ab} d_a phi d_b phi + kappa phi^3`` with ``d_0 = d_t``."""

    A: np.ndarray
    kappa: float = 0.0
    enabled: bool = True
    certificate: NullCertificate | None = None

    def __post_init__(self):
        self.A = np.array(self.A, dtype=float).reshape(4, 4)
        if not np.isfinite(self.A).all() or not np.isfinite(self.kappa):
            raise ValueError("nonlinearity coefficients must be finite")

    @classmethod
    def disabled(cls) -> "NullFormSpec":
        return cls(np.zeros((4, 4)), 0.0, False)

    @property
    def sym(self) -> np.ndarray:
        return 0.5 * (self.A + self.A.T)

    def certify(self, rng: np.random.Generator | None = None) -> NullCertificate:
        self.certificate = validate_null_condition(self.A, rng)
        return self.certificate

    @property
    def is_null(self) -> bool:
        return self.certificate is not None and self.certificate.is_null


def random_null_covectors(rng: np.random.Generator, count: int) -> np.ndarray:
    """Covectors with ``xi_0^2 = |xi|^2`` and ``|xi| = 1``, random sign of ``xi_0``."""
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    s = rng.choice([-1.0, 1.0], size=count)
    return np.column_stack([s, v])


def validate_null_condition(A, rng: np.random.Generator | None = None,
                            samples: int = 100) -> NullCertificate:
    """Decide whether ``A^{ab} xi_a xi_b`` vanishes on the light cone.

    The form vanishes on the cone exactly when the symmetric part of ``A``
    is a multiple of ``diag(1, -1, -1, -1)``.  The decision is cross-checked
    on ``samples`` random null covectors.
    """
    A = np.asarray(A, dtype=float).reshape(4, 4)
    S = 0.5 * (A + A.T)
    c = float(S[0, 0])
    residual = float(np.abs(S - c * ETA).max())
    is_null = residual <= NULL_TOL
    rng = np.random.default_rng(0) if rng is None else rng
    xi = random_null_covectors(rng, samples)
    vals = np.einsum("na,ab,nb->n", xi, A, xi)
    cross = float(np.abs(vals).max())
    if is_null and cross >= CROSSCHECK_TOL * max(1.0, np.abs(A).max()):
        raise AssertionError("null certificate failed its covector cross-check")
    return NullCertificate(c, residual, bool(is_null), cross)


def eval_F(spec: NullFormSpec, pi: np.ndarray, grad, phi: np.ndarray) -> np.ndarray:
    """Pointwise ``A^{ab} d_a phi d_b phi + kappa phi^3``."""
    grad = np.asarray(grad)
    if grad.shape[0] != 3 or grad.shape[1:] != np.shape(pi) or np.shape(phi) != np.shape(pi):
        raise ValueError("eval_F: shape mismatch between pi, grad and phi")
    if not spec.enabled:
        return np.zeros_like(pi)
    d = [pi, grad[0], grad[1], grad[2]]
    S = spec.sym
    out = np.zeros_like(pi, dtype=float)
    for a in range(4):
        if S[a, a] != 0.0:
            out += S[a, a] * d[a] * d[a]
        for b in range(a + 1, 4):
            if S[a, b] != 0.0:
                out += 2.0 * S[a, b] * d[a] * d[b]
    if spec.kappa != 0.0:
        out += spec.kappa * phi**3
    return out


def bilinear(A: np.ndarray, d1, d2):
    """``A^{ab} d1_a d2_b`` for stacked derivative components."""
    out = 0.0
    for a in range(4):
        for b in range(4):
            if A[a, b] != 0.0:
                out = out + A[a, b] * d1[a] * d2[b]
    return out


@dataclass
class PsiIdentityResult:
    residual: float
    dominant: float
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def relative(self) -> float:
        return self.residual / self.dominant if self.dominant > 0 else 0.0


def _sphere_data(state: FieldState, grid: Grid, pts: np.ndarray):
    """Interpolated phi, pi, gradient, radial derivative and angular gradient."""
    g = gradient(state.phi, grid.h)
    phi = interpolate(state.phi, grid, pts)
    pi = interpolate(state.pi, grid, pts)
    grad = np.stack([interpolate(g[a], grid, pts) for a in range(3)])
    r = np.linalg.norm(pts, axis=1)
    xhat = (pts / r[:, None]).T
    dr = np.einsum("an,an->n", xhat, grad)
    # r (angular gradient)_i = sum_j xhat_j Omega_{ji} phi
    ang = np.zeros((3, len(pts)))
    for (i, j) in OMEGA_PAIRS:
        om = interpolate(apply_Omega(state.phi, grid, (i, j)), grid, pts)
        # Omega_{ij} = -Omega_{ji}
        ang[j - 1] += xhat[i - 1] * om
        ang[i - 1] -= xhat[j - 1] * om
    ang /= r
    return phi, pi, grad, dr, ang, xhat, r


def verify_psi_identity(state1: FieldState, state2: FieldState, grid: Grid, A,
                        r: float, R: float, sampling: SphereSampling | None = None,
                        certificate: NullCertificate | None = None) -> PsiIdentityResult:
    """Residual of ``r^2 N(dphi1, dphi2) = c(phi1 phi2 + r (phi1 phi2)_r) + N(dpsi1, dpsi2) + corr``.

    Here ``psi = r phi`` and ``c`` is the multiple of the Minkowski form in
    ``A``.  The left side uses the Cartesian gradients; the right side
    rebuilds the derivatives of ``psi`` from radial and angular parts, the
    latter through the rotation fields.  ``corr`` collects the terms an
    antisymmetric part of ``A`` contributes; it vanishes for ``A = diag(1,-1,-1,-1)``.
    """
    A = np.asarray(A, dtype=float).reshape(4, 4)
    cert = certificate or validate_null_condition(A)
    if not cert.is_null:
        raise ValueError("identity requires a certified null form")
    if r < R:
        raise ValueError("identity is checked in the flat exterior r >= R")
    sampling = sampling or SphereSampling()
    if r + 2 * grid.h > grid.R_dom:
        raise DomainError("sphere outside grid")
    pts = r * sampling.nodes
    f1, p1, g1, dr1, ang1, xhat, rr = _sphere_data(state1, grid, pts)
    f2, p2, g2, dr2, ang2, _, _ = _sphere_data(state2, grid, pts)
    lhs = rr**2 * bilinear(A, [p1, *g1], [p2, *g2])
    # derivatives of psi = r phi: d_t psi = r pi, d_i psi = xhat_i d_r psi + r ang_i
    dpsi1 = [rr * p1] + [xhat[a] * (f1 + rr * dr1) + rr * ang1[a] for a in range(3)]
    dpsi2 = [rr * p2] + [xhat[a] * (f2 + rr * dr2) + rr * ang2[a] for a in range(3)]
    c = cert.c
    Aa = 0.5 * (A - A.T)
    dr_vec = [np.zeros_like(rr), *xhat]
    corr = -rr * (f2 * bilinear(Aa, [p1, *g1], dr_vec) + f1 * bilinear(Aa, dr_vec, [p2, *g2]))
    rhs = c * (f1 * f2 + rr * (f1 * dr2 + f2 * dr1)) + bilinear(A, dpsi1, dpsi2) + corr
    dominant = float(max(np.abs(lhs).max(), np.abs(rhs).max(),
                         np.abs(c * f1 * f2).max()))
    return PsiIdentityResult(float(np.abs(lhs - rhs).max()), dominant, lhs, rhs)
