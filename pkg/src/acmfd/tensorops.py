"""Dense tensor arithmetic used throughout the package.

Tensors are plain float64 numpy arrays in C (row-major) order, so
``vectorize`` with the last index fastest is the one flattening convention
everywhere.  The mode product follows the usual tensor-algebra definition:
contracting a matrix against one tensor mode, which is how Kronecker
matrix-vector actions are evaluated without forming the Kronecker product.
The explicit Kronecker product is kept as the dense fallback and test
oracle only.
"""

from __future__ import annotations

import numpy as np

# Explicit Kronecker products above this element count are refused; the
# Tucker (mode-product) path has no such limit.
DEFAULT_KRON_CAP = 2**26


def mode_product(x: np.ndarray, a: np.ndarray, mode: int) -> np.ndarray:
    """Contract matrix ``a`` against dimension ``mode`` of tensor ``x``.

    Result has ``x``'s shape with ``shape[mode]`` replaced by ``a.shape[0]``:
    ``out[..., i, ...] = sum_j a[i, j] * x[..., j, ...]``.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"mode_product needs a matrix, got ndim={a.ndim}")
    if not -x.ndim <= mode < x.ndim:
        raise ValueError(f"mode {mode} out of range for tensor of ndim {x.ndim}")
    mode = mode % x.ndim
    if a.shape[1] != x.shape[mode]:
        raise ValueError(
            f"mode_product: a has {a.shape[1]} columns but tensor mode {mode} "
            f"has extent {x.shape[mode]}"
        )
    out = np.tensordot(a, x, axes=([1], [mode]))
    # tensordot puts the new index first; restore it to position `mode`.
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def multi_mode_product(x: np.ndarray, mats, start_mode: int = 0) -> np.ndarray:
    """Apply ``mats[d]`` along mode ``start_mode + d`` for every d."""
    out = np.asarray(x, dtype=np.float64)
    for d, a in enumerate(mats):
        out = mode_product(out, a, start_mode + d)
    return out


def vectorize(x: np.ndarray) -> np.ndarray:
    """Flatten in row-major order (last index fastest)."""
    return np.asarray(x, dtype=np.float64).reshape(-1, order="C").copy()


def kron(a: np.ndarray, b: np.ndarray, cap: int = DEFAULT_KRON_CAP) -> np.ndarray:
    """Explicit Kronecker product, guarded against runaway sizes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("kron operates on matrices")
    numel = a.size * b.size
    if numel > cap:
        raise ValueError(
            f"kron result would hold {numel} entries, above the cap of {cap}; "
            "use the mode-product path instead"
        )
    return np.kron(a, b)


def kron_chain(mats, cap: int = DEFAULT_KRON_CAP) -> np.ndarray:
    """Left-to-right Kronecker chain: mats[0] ⊗ mats[1] ⊗ ..."""
    mats = list(mats)
    if not mats:
        raise ValueError("kron_chain needs at least one matrix")
    out = np.asarray(mats[0], dtype=np.float64)
    for m in mats[1:]:
        out = kron(out, m, cap=cap)
    return out


# FFT wrappers.  numpy's pocketfft is exact for any length, so both the
# power-of-two fast path and arbitrary lengths go through it; `dft_1d`
# below is the independent O(n^2) reference kept for validation.

def fft_1d(x: np.ndarray) -> np.ndarray:
    return np.fft.fft(np.asarray(x))


def ifft_1d(x: np.ndarray) -> np.ndarray:
    return np.fft.ifft(np.asarray(x))


def fft_2d(x: np.ndarray) -> np.ndarray:
    return np.fft.fft2(np.asarray(x))


def ifft_2d(x: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.asarray(x))


def dft_1d(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Reference DFT from the definition, valid for any length.

    Built as an explicit DFT-matrix multiply; quadratic cost, used as the
    oracle for the fast path and as the fallback reference transform.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    j = np.arange(n)
    sign = 2.0j if inverse else -2.0j
    w = np.exp(sign * np.pi * np.outer(j, j) / n)
    out = x @ w.T
    if inverse:
        out = out / n
    return out


def dft_2d(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Row-column reference DFT on the last two axes."""
    out = dft_1d(np.asarray(x), inverse=inverse)
    out = dft_1d(np.swapaxes(out, -1, -2), inverse=inverse)
    return np.swapaxes(out, -1, -2)
