"""Finite-difference solvers for the two desk-scale physics systems.

Darcy flow: -div(a grad u) = f on the unit square with u = 0 on the
boundary, discretized in flux form with harmonic-mean face permeabilities
and solved by conjugate gradients.

Convection-diffusion: u_t + (v u)_x = D u_xx + s on x in [-1, 1],
t in [0, 1], u(x, 0) = 0 and zero Dirichlet walls, discretized by central
differences in space and Crank-Nicolson in time on an internally refined
time grid, then subsampled back to the requested space-time mesh.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .gp import Mesh

CG_RTOL = 1e-8
CG_MAXITER = 20_000
DIFFUSION_COEFF = 0.01
MAX_TIME_REFINE = 64


class SolverError(RuntimeError):
    pass


def _harmonic_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


def darcy_operator(a: np.ndarray, h: float) -> sp.csr_matrix:
    """SPD system matrix of the 5-point flux discretization on the interior
    of an m x m grid (boundary rows eliminated by the zero condition)."""
    m = a.shape[0]
    n = m - 2  # interior points per side
    ae = _harmonic_mean(a[1:-1, 1:-1], a[2:, 1:-1]) / h**2    # east faces
    aw = _harmonic_mean(a[1:-1, 1:-1], a[:-2, 1:-1]) / h**2   # west
    an = _harmonic_mean(a[1:-1, 1:-1], a[1:-1, 2:]) / h**2    # north
    as_ = _harmonic_mean(a[1:-1, 1:-1], a[1:-1, :-2]) / h**2  # south

    diag = (ae + aw + an + as_).reshape(-1)
    east = -ae.reshape(-1)[:-n]
    west = -aw.reshape(-1)[n:]
    north = -an.reshape(-1)
    south = -as_.reshape(-1)
    # north/south couple neighbors within a row; mask the row seams
    north = north[:-1]
    south = south[1:]
    seam = np.arange(1, n * n) % n == 0
    north = np.where(seam, 0.0, north)
    south = np.where(seam, 0.0, south)

    return sp.diags(
        [south, west, diag, east, north],
        offsets=[-1, -n, 0, n, 1],
        format="csr",
    )


def solve_darcy(a: np.ndarray, f: np.ndarray, mesh: Mesh,
                rtol: float = CG_RTOL, maxiter: int = CG_MAXITER) -> np.ndarray:
    """Pressure field for permeability ``a`` and source ``f`` on a square
    equally spaced mesh covering [0, 1]²; u = 0 on the boundary."""
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if mesh.ndim != 2 or mesh.shape[0] != mesh.shape[1]:
        raise ValueError(f"Darcy solver needs a square 2-d mesh, got {mesh.shape}")
    if a.shape != mesh.shape or f.shape != mesh.shape:
        raise ValueError("fields must be sampled on the mesh")
    if np.any(a <= 0):
        raise SolverError("permeability must be strictly positive")
    h = mesh.spacing(0)
    if abs(h - mesh.spacing(1)) > 1e-12 * h:
        raise ValueError("mesh spacing must match in both directions")

    system = darcy_operator(a, h)
    rhs = f[1:-1, 1:-1].reshape(-1)
    if not np.any(rhs):
        return np.zeros(mesh.shape)
    solution, info = _cg(system, rhs, rtol=rtol, maxiter=maxiter)
    if info != 0:
        residual = np.linalg.norm(system @ solution - rhs) / np.linalg.norm(rhs)
        raise SolverError(
            f"conjugate gradients did not converge in {maxiter} iterations "
            f"(relative residual {residual:.3e})"
        )
    u = np.zeros(mesh.shape)
    n = mesh.shape[0] - 2
    u[1:-1, 1:-1] = solution.reshape(n, n)
    return u


def _cg(system, rhs, rtol, maxiter):
    try:
        return spla.cg(system, rhs, rtol=rtol, maxiter=maxiter)
    except TypeError:  # scipy < 1.12 spells the tolerance differently
        return spla.cg(system, rhs, tol=rtol, atol=0.0, maxiter=maxiter)


def _convdiff_bands(v_col: np.ndarray, dx: float, diffusion: float) -> np.ndarray:
    """Tridiagonal interior operator A with A u = D u_xx - (v u)_x at one
    time level, as the three bands (upper, main, lower)."""
    n = v_col.size - 2
    d = diffusion / dx**2
    upper = -v_col[2:-1] / (2 * dx) + d          # coupling to u_{i+1}
    lower = v_col[1:-2] / (2 * dx) + d           # coupling to u_{i-1}
    main = np.full(n, -2.0 * d)
    bands = np.zeros((3, n))
    bands[0, 1:] = upper
    bands[1] = main
    bands[2, :-1] = lower
    return bands


def solve_convdiff(v: np.ndarray, s: np.ndarray, mesh: Mesh,
                   diffusion: float = DIFFUSION_COEFF,
                   cfl: float = 0.5) -> np.ndarray:
    """March u from the zero initial state given v and s on the mesh.

    ``mesh`` axes are (x, t); v and s are (m_x, m_t) samples.  The internal
    time step is refined below the mesh step whenever the advective CFL
    number max|v| dt / dx exceeds ``cfl`` (up to a refinement cap), with v
    and s interpolated linearly in time, so the solution is a deterministic
    function of the sampled fields alone.
    """
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if mesh.ndim != 2:
        raise ValueError("space-time mesh must be 2-d (x, t)")
    if v.shape != mesh.shape or s.shape != mesh.shape:
        raise ValueError("fields must be sampled on the mesh")
    m_x, m_t = mesh.shape
    dx = mesh.spacing(0)
    dt_mesh = mesh.spacing(1)

    vmax = float(np.max(np.abs(v)))
    n_sub = int(np.ceil(vmax * dt_mesh / (cfl * dx))) if vmax > 0 else 1
    n_sub = int(np.clip(n_sub, 1, MAX_TIME_REFINE))
    dt = dt_mesh / n_sub

    u = np.zeros((m_x, m_t))
    current = np.zeros(m_x)
    identity = np.zeros((3, m_x - 2))
    identity[1] = 1.0

    for k in range(m_t - 1):
        for j in range(n_sub):
            w0 = 1.0 - j / n_sub
            w1 = 1.0 - (j + 1) / n_sub
            v0 = w0 * v[:, k] + (1 - w0) * v[:, k + 1]
            v1 = w1 * v[:, k] + (1 - w1) * v[:, k + 1]
            s0 = w0 * s[:, k] + (1 - w0) * s[:, k + 1]
            s1 = w1 * s[:, k] + (1 - w1) * s[:, k + 1]

            a0 = _convdiff_bands(v0, dx, diffusion)
            a1 = _convdiff_bands(v1, dx, diffusion)
            rhs = (current[1:-1]
                   + 0.5 * dt * _apply_tridiag(a0, current[1:-1])
                   + 0.5 * dt * (s0 + s1)[1:-1])
            lhs = identity - 0.5 * dt * a1
            current = np.concatenate(([0.0], solve_banded((1, 1), lhs, rhs), [0.0]))
        u[:, k + 1] = current
    return u


def _apply_tridiag(bands: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = bands[1] * x
    out[:-1] += bands[0, 1:] * x[1:]
    out[1:] += bands[2, :-1] * x[:-1]
    return out


def sample_convdiff_inputs(rng, mesh: Mesh):
    """Random velocity and source fields from the parametric families
    v = a1 x + a2 x² + a3 x³ + a4 t and
    s = α exp(-β (x+t)²) + γ cos(η π (x - 0.1 t)), coefficients U(-1, 1)."""
    coeffs = rng.uniform(-1.0, 1.0, size=8)
    v, s = evaluate_convdiff_inputs(coeffs, mesh)
    return v, s, coeffs


def evaluate_convdiff_inputs(coeffs, mesh: Mesh):
    a1, a2, a3, a4, alpha, beta, gamma, eta = np.asarray(coeffs, dtype=np.float64)
    x, t = mesh.coordinate_grids()
    v = a1 * x + a2 * x**2 + a3 * x**3 + a4 * t
    s = alpha * np.exp(-beta * (x + t) ** 2) + gamma * np.cos(eta * np.pi * (x - 0.1 * t))
    return v, s
