"""Gaussian-process noise functions on tensor-product meshes.

The noise covariance uses a multiplicative squared-exponential kernel, so
on a grid it factors as a Kronecker product K = K_1 ⊗ ... ⊗ K_D of small
per-dimension kernel matrices.  Sampling draws a standard-normal tensor and
applies each dimension's Cholesky factor as a mode product, which costs
O(m̄·Σ_d m_d) instead of the O(m̄³) Cholesky of the full covariance.  The
dense full-covariance path is kept for validation and benchmarking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorops

DEFAULT_LENGTH_SCALE = 1e-3
DEFAULT_JITTER = 1e-8
# Length-scale sweep used when tuning; mirrors the configurable range.
LENGTH_SCALE_SWEEP = (1e-2, 5e-3, 1e-3, 5e-4, 1e-4)
# Largest full covariance the dense path will materialize (m̄ x m̄).
DENSE_POINT_CAP = 4096
MAX_JITTER_DOUBLINGS = 8


@dataclass(frozen=True)
class Mesh:
    """Tensor-product sampling grid: one strictly increasing coordinate
    vector per dimension."""

    axes: tuple[np.ndarray, ...]

    def __post_init__(self):
        axes = tuple(np.asarray(g, dtype=np.float64) for g in self.axes)
        if not axes:
            raise ValueError("mesh needs at least one dimension")
        for d, g in enumerate(axes):
            if g.ndim != 1 or g.size == 0:
                raise ValueError(f"mesh axis {d} must be a nonempty 1-d array")
            if g.size > 1 and not np.all(np.diff(g) > 0):
                raise ValueError(f"mesh axis {d} must be strictly increasing")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def regular(cls, shape, lo=0.0, hi=1.0) -> "Mesh":
        """Equally spaced grid over [lo, hi] inclusive in every dimension."""
        los = np.broadcast_to(np.asarray(lo, float), (len(shape),))
        his = np.broadcast_to(np.asarray(hi, float), (len(shape),))
        return cls(tuple(np.linspace(l, h, m) for l, h, m in zip(los, his, shape)))

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(g.size for g in self.axes)

    @property
    def num_points(self) -> int:
        return int(np.prod(self.shape))

    def coordinate_grids(self) -> list[np.ndarray]:
        """Dense coordinate arrays, each of shape ``self.shape``."""
        return list(np.meshgrid(*self.axes, indexing="ij"))

    def spacing(self, dim: int) -> float:
        """Grid step of an equally spaced axis."""
        g = self.axes[dim]
        if g.size < 2:
            raise ValueError(f"axis {dim} has a single point, no spacing")
        steps = np.diff(g)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError(f"axis {dim} is not equally spaced")
        return float(steps[0])


def se_kernel(z, z2, length_scale: float):
    """Squared-exponential kernel exp(-|z - z2|² / l²), unit amplitude."""
    if length_scale <= 0:
        raise ValueError(f"length scale must be positive, got {length_scale}")
    diff = np.asarray(z, float) - np.asarray(z2, float)
    return np.exp(-(diff**2) / length_scale**2)


@dataclass(frozen=True)
class KroneckerGP:
    """Per-dimension kernel matrices and Cholesky factors of a GP whose
    full grid covariance is K_1 ⊗ ... ⊗ K_D (never materialized here)."""

    mesh: Mesh
    length_scale: float
    jitter: float
    kernels: tuple[np.ndarray, ...] = field(repr=False)
    factors: tuple[np.ndarray, ...] = field(repr=False)


def build_gp(mesh: Mesh, length_scale: float = DEFAULT_LENGTH_SCALE,
             jitter: float = DEFAULT_JITTER) -> KroneckerGP:
    """Assemble per-dimension SE kernel matrices and their Cholesky factors.

    Each K_d gets ``jitter`` added to its diagonal; on a Cholesky failure the
    jitter is doubled up to 8 times before giving up.
    """
    if length_scale <= 0:
        raise ValueError(f"length scale must be positive, got {length_scale}")
    if jitter <= 0:
        raise ValueError(f"jitter must be positive, got {jitter}")
    kernels = []
    factors = []
    for d, g in enumerate(mesh.axes):
        base = se_kernel(g[:, None], g[None, :], length_scale)
        eps = jitter
        for attempt in range(MAX_JITTER_DOUBLINGS + 1):
            k = base + eps * np.eye(g.size)
            try:
                l = np.linalg.cholesky(k)
            except np.linalg.LinAlgError:
                eps *= 2.0
                continue
            kernels.append(k)
            factors.append(l)
            break
        else:
            raise np.linalg.LinAlgError(
                f"Cholesky failed for mesh dimension {d} even after raising "
                f"jitter to {eps / 2.0:g}"
            )
    return KroneckerGP(mesh=mesh, length_scale=length_scale, jitter=jitter,
                       kernels=tuple(kernels), factors=tuple(factors))


def _standard_normal(gp: KroneckerGP, rng, size):
    shape = gp.mesh.shape if size is None else (size, *gp.mesh.shape)
    return rng.standard_normal(shape)


def sample_noise(gp: KroneckerGP, rng=None, size: int | None = None,
                 eta: np.ndarray | None = None) -> np.ndarray:
    """Draw GP noise via mode products with the per-dimension factors.

    The vectorization of the result is N(0, K_1 ⊗ ... ⊗ K_D).  Pass ``eta``
    (a standard-normal tensor of mesh shape, or (n, *mesh) for a batch) to
    make the draw reproducible against the dense path.
    """
    if eta is None:
        if rng is None:
            raise ValueError("sample_noise needs an rng when eta is not given")
        eta = _standard_normal(gp, rng, size)
    eta = np.asarray(eta, dtype=np.float64)
    offset = eta.ndim - gp.mesh.ndim
    if offset not in (0, 1) or eta.shape[offset:] != gp.mesh.shape:
        raise ValueError(
            f"eta shape {eta.shape} does not match mesh shape {gp.mesh.shape}"
        )
    return tensorops.multi_mode_product(eta, gp.factors, start_mode=offset)


def sample_noise_dense(gp: KroneckerGP, rng=None, size: int | None = None,
                       eta: np.ndarray | None = None,
                       cap: int = DENSE_POINT_CAP) -> np.ndarray:
    """Reference sampler: materialize K, Cholesky it, multiply.

    Distributionally identical to :func:`sample_noise`; with a shared ``eta``
    the two agree to rounding because the Kronecker product of the
    per-dimension Cholesky factors is the Cholesky factor of the Kronecker
    product.  Cost is O(m̄³); refuse meshes beyond ``cap`` points.
    """
    m_bar = gp.mesh.num_points
    if m_bar > cap:
        raise ValueError(
            f"dense sampler asked for {m_bar} mesh points (cap {cap}); "
            "use sample_noise, which never builds the full covariance"
        )
    if eta is None:
        if rng is None:
            raise ValueError("sample_noise_dense needs an rng when eta is not given")
        eta = _standard_normal(gp, rng, size)
    eta = np.asarray(eta, dtype=np.float64)
    offset = eta.ndim - gp.mesh.ndim
    if offset not in (0, 1) or eta.shape[offset:] != gp.mesh.shape:
        raise ValueError(
            f"eta shape {eta.shape} does not match mesh shape {gp.mesh.shape}"
        )
    cov = dense_covariance(gp)
    chol = np.linalg.cholesky(cov)
    flat = eta.reshape(-1, m_bar) if offset else eta.reshape(1, m_bar)
    out = flat @ chol.T
    return out.reshape(eta.shape)


def dense_covariance(gp: KroneckerGP, cap: int = DENSE_POINT_CAP) -> np.ndarray:
    """Explicit K = K_1 ⊗ ... ⊗ K_D (jittered factors), for validation."""
    if gp.mesh.num_points > cap:
        raise ValueError(f"refusing to materialize a {gp.mesh.num_points}² covariance")
    return tensorops.kron_chain(gp.kernels)
