"""Uniform Cartesian grid, field storage, stencils and spherical sampling.

Arrays are indexed ``u[i, j, k]`` with ``i, j, k`` the node indices along
``x1, x2, x3``; node ``(i, j, k)`` sits at ``((i - c) h, (j - c) h, (k - c) h)``
with ``c = (n - 1) / 2``, so the origin is always a node.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .metric import bump

CHECKPOINT_MAGIC = b"NLWV"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIdd")
# Outermost node shells held at zero.
BOUNDARY_SHELLS = 2


class DomainError(ValueError):
    """Raised when a request falls outside the computational grid."""


@dataclass(frozen=True)
class Grid:
    """Cubic grid of ``n`` nodes per axis and spacing ``h``."""

    n: int
    h: float

    def __post_init__(self):
        if self.n < 7 or self.n % 2 == 0:
            raise ValueError("n must be odd and at least 7")
        if not self.h > 0:
            raise ValueError("spacing must be positive")

    @classmethod
    def for_run(cls, n: int, R: float, T_max: float, c_max: float = 1.0) -> "Grid":
        """Smallest grid with ``R_dom = R + c_max T_max + 2h`` exactly."""
        half = (n - 1) // 2
        if half <= 2:
            raise ValueError("n too small")
        return cls(n, (R + c_max * T_max) / (half - 2))

    @property
    def c(self) -> int:
        return (self.n - 1) // 2

    @property
    def R_dom(self) -> float:
        return self.h * self.c

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @cached_property
    def x(self) -> np.ndarray:
        """1-D node coordinates."""
        return (np.arange(self.n) - self.c) * self.h

    @cached_property
    def r(self) -> np.ndarray:
        """Radius at every node."""
        x = self.x
        return np.sqrt(x[:, None, None] ** 2 + x[None, :, None] ** 2 + x[None, None, :] ** 2)

    def coords(self, axis: int) -> np.ndarray:
        """Broadcastable coordinate array of ``x_{axis+1}``."""
        shp = [1, 1, 1]
        shp[axis] = self.n
        return self.x.reshape(shp)

    def node_points(self, mask: np.ndarray) -> np.ndarray:
        """Coordinates ``(N, 3)`` of the nodes selected by a boolean mask."""
        idx = np.nonzero(mask)
        return np.stack([self.x[i] for i in idx], axis=-1)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def check_domain(self, R: float, c_max: float, T_max: float):
        """Raise when the grid cannot hold a run of length ``T_max``."""
        need = R + c_max * T_max + 2.0 * self.h
        if self.R_dom < need * (1.0 - 1e-12):
            raise DomainError(
                f"R_dom={self.R_dom:.6g} below required {need:.6g} "
                f"(R={R}, c_max={c_max}, T_max={T_max})")

    def interior_slices(self, shells: int = BOUNDARY_SHELLS):
        s = slice(shells, self.n - shells)
        return (s, s, s)


@dataclass
class FieldState:
    """``(phi, pi = d_t phi)`` at time ``t``."""

    t: float
    phi: np.ndarray
    pi: np.ndarray

    def copy(self) -> "FieldState":
        return FieldState(self.t, self.phi.copy(), self.pi.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.phi).all() and np.isfinite(self.pi).all())


@dataclass
class SphereSampling:
    """Product Gauss-Legendre (in ``cos theta``) by trapezoid (azimuth) rule."""

    n_theta: int = 16
    n_phi: int = 32
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_theta < 1 or self.n_phi < 1:
            raise ValueError("sphere rule needs positive sizes")
        mu, wmu = np.polynomial.legendre.leggauss(self.n_theta)
        az = 2.0 * np.pi * np.arange(self.n_phi) / self.n_phi
        st = np.sqrt(1.0 - mu**2)
        nodes = np.stack([
            np.outer(st, np.cos(az)),
            np.outer(st, np.sin(az)),
            np.outer(mu, np.ones_like(az)),
        ], axis=-1).reshape(-1, 3)
        self.nodes = nodes
        self.weights = np.outer(wmu, np.full(self.n_phi, 2.0 * np.pi / self.n_phi)).ravel()

    def integrate(self, values: np.ndarray) -> float:
        """``sum w f`` over the last axis of ``values``."""
        return values @ self.weights


# ---------------------------------------------------------------------------
# initial data


def make_initial_data(grid: Grid, epsilon: float, profile: str, R: float,
                      sigma: float | None = None, phi1_scale: float = 0.0,
                      t0: float = 0.0) -> FieldState:
    """Sample ``phi = eps phi0`` and ``pi = eps phi1`` with ``phi1 = phi1_scale phi0``.

    Parameters
    ----------
    profile : {"compact_bump", "gaussian_bump"}
        ``compact_bump`` is ``B(|x|/R)``; ``gaussian_bump`` is
        ``exp(-|x|^2 / (2 sigma^2))`` cut at ``|x| = R`` with ``sigma <= R/8``.
    """
    r = grid.r
    if profile == "compact_bump":
        if sigma is not None:
            raise ValueError("compact_bump takes no width")
        phi0 = bump(r / R)
    elif profile == "gaussian_bump":
        sigma = R / 8.0 if sigma is None else float(sigma)
        if not 0 < sigma <= R / 8.0 * (1 + 1e-12):
            raise ValueError("gaussian width must satisfy 0 < sigma <= R/8 "
                             "so the profile is negligible at |x| = R")
        phi0 = np.where(r < R, np.exp(-0.5 * (r / sigma) ** 2), 0.0)
    else:
        raise ValueError(f"unknown profile {profile!r}")
    if R + 2 * grid.h > grid.R_dom:
        raise ValueError("profile support exceeds the grid")
    _zero_shells(phi0)
    return FieldState(t0, epsilon * phi0, (epsilon * phi1_scale) * phi0)


def random_bump_field(grid: Grid, rng: np.random.Generator, R: float,
                      n_bumps: int = 3, radius_frac: float = 0.75) -> FieldState:
    """Superposition of smooth bumps confined to ``r <= radius_frac R``.

    Each bump has a random centre, width and amplitude for both ``phi`` and
    ``pi``; the whole field is supported inside the stated ball.
    """
    X = [grid.coords(a) for a in range(3)]
    phi = grid.zeros()
    pi = grid.zeros()
    rmax = radius_frac * R
    for _ in range(n_bumps):
        w = rng.uniform(0.3, 0.6) * rmax
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        centre = d * rng.uniform(0.0, rmax - w)
        dist = np.sqrt(sum((X[a] - centre[a]) ** 2 for a in range(3)))
        prof = bump(dist / w)
        phi += rng.uniform(-1.0, 1.0) * prof
        pi += rng.uniform(-1.0, 1.0) / w * prof
    _zero_shells(phi)
    _zero_shells(pi)
    return FieldState(0.0, phi, pi)


def _zero_shells(u: np.ndarray, shells: int = BOUNDARY_SHELLS):
    for ax in range(3):
        sl = [slice(None)] * 3
        sl[ax] = slice(0, shells)
        u[tuple(sl)] = 0.0
        sl[ax] = slice(u.shape[ax] - shells, None)
        u[tuple(sl)] = 0.0


# ---------------------------------------------------------------------------
# stencils


def d1(u: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centred first derivative, one-sided second order at the two ends."""
    return np.gradient(u, h, axis=axis, edge_order=2)


def d2(u: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Compact centred second derivative, one-sided second order at the ends."""
    u = np.moveaxis(u, axis, 0)
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / h**2
    out[0] = (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / h**2
    out[-1] = (2.0 * u[-1] - 5.0 * u[-2] + 4.0 * u[-3] - u[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def gradient(u: np.ndarray, h: float) -> np.ndarray:
    return np.stack([d1(u, a, h) for a in range(3)])


def hessian(u: np.ndarray, h: float) -> np.ndarray:
    """Full ``(3, 3, n, n, n)`` Hessian from compact and mixed stencils."""
    H = np.empty((3, 3) + u.shape)
    g = [d1(u, a, h) for a in range(3)]
    for a in range(3):
        H[a, a] = d2(u, a, h)
        for b in range(a + 1, 3):
            H[a, b] = H[b, a] = d1(g[a], b, h)
    return H


@dataclass
class Derivatives:
    grad: np.ndarray
    hess: np.ndarray
    grad_pi: np.ndarray


def spatial_derivatives(state: FieldState, grid: Grid) -> Derivatives:
    """Gradient and Hessian of ``phi`` and gradient of ``pi``."""
    return Derivatives(gradient(state.phi, grid.h), hessian(state.phi, grid.h),
                       gradient(state.pi, grid.h))


def laplacian(u: np.ndarray, h: float) -> np.ndarray:
    return sum(d2(u, a, h) for a in range(3))


def _axis_pair(pair) -> tuple[int, int]:
    if isinstance(pair, str):
        pair = (int(pair[0]), int(pair[1]))
    i, j = pair
    if (min(i, j), max(i, j)) not in ((1, 2), (1, 3), (2, 3)) or i == j:
        raise ValueError(f"invalid axis pair {pair!r}")
    return i - 1, j - 1


def apply_Omega(u: np.ndarray, grid: Grid, pair) -> np.ndarray:
    """Rotation generator ``x_i d_j u - x_j d_i u``."""
    i, j = _axis_pair(pair)
    return grid.coords(i) * d1(u, j, grid.h) - grid.coords(j) * d1(u, i, grid.h)


OMEGA_PAIRS = ((1, 2), (1, 3), (2, 3))


# ---------------------------------------------------------------------------
# interpolation


def _check_points(grid: Grid, pts: np.ndarray, margin: float):
    lim = grid.R_dom - margin
    if pts.size and np.abs(pts).max() > lim * (1 + 1e-12):
        raise DomainError("sample points fall outside the grid")


def interpolate(u: np.ndarray, grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``u`` at points ``(M, 3)``."""
    pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=float)
    _check_points(grid, pts, grid.h)
    return _kernels.trilinear(u, grid.h, grid.R_dom, pts)


def interpolate_to_sphere(u: np.ndarray, grid: Grid, r: float,
                          sampling: SphereSampling, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Trilinear samples of ``u`` on the sphere of radius ``r``."""
    if r + grid.h > grid.R_dom:
        raise DomainError(f"sphere r={r:.6g} outside grid R_dom={grid.R_dom:.6g}")
    pts = np.asarray(center, dtype=float) + r * sampling.nodes
    return interpolate(u, grid, pts)


def sample_point_data(state: FieldState, grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Interpolated ``(phi, pi, d1 phi, d2 phi, d3 phi)`` at points, shape ``(M, 5)``.

    Gradients are the centred nodal differences, interpolated trilinearly.
    """
    pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=float)
    _check_points(grid, pts, 2.0 * grid.h)
    return _kernels.sample_pd(state.phi, state.pi, grid.h, grid.R_dom, pts)


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, state: FieldState, grid: Grid):
    """Write the binary checkpoint (header then ``phi`` and ``pi``, ``i`` fastest)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, grid.n,
                              float(grid.h), float(state.t)))
        for arr in (state.phi, state.pi):
            fh.write(np.asarray(arr, dtype="<f8").ravel(order="F").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[Grid, FieldState]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, n, h, t = _HEADER.unpack(head)
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            raise ValueError("not a version-1 checkpoint")
        count = n**3
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != 2 * count:
        raise ValueError("truncated checkpoint")
    phi = data[:count].reshape((n, n, n), order="F").astype(float)
    pi = data[count:].reshape((n, n, n), order="F").astype(float)
    return Grid(n, h), FieldState(t, np.ascontiguousarray(phi), np.ascontiguousarray(pi))


__all__ = [
    "Grid", "FieldState", "SphereSampling", "DomainError", "make_initial_data",
    "random_bump_field", "spatial_derivatives", "interpolate", "interpolate_to_sphere",
    "sample_point_data", "apply_Omega", "write_checkpoint", "read_checkpoint",
]
