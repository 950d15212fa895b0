"""The denoising network: an FNO-style operator over the mesh.

Channel lifting, a stack of spectral-convolution layers with truncated
Fourier modes and pointwise bypass weights, GELU nonlinearities, and a
zero-initialized projection head, conditioned on the diffusion step through
a sinusoidal embedding.  The network maps the masked noisy fields (plus
mask and coordinate channels) to a predicted noise field per function.

All mesh-frequency arithmetic lives in the spectral-convolution primitive,
whose closed-form adjoint keeps the public tensors real.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _fft

from . import autodiff as ad
from .autodiff import Node
from .gp import Mesh

# pocketfft thread count for the mesh transforms (they dominate runtime)
FFT_WORKERS = min(4, os.cpu_count() or 1)


@dataclass(frozen=True)
class DenoiserConfig:
    n_functions: int
    mesh_shape: tuple[int, ...]
    channels: int = 32
    layers: int = 3
    modes: int = 8
    time_dim: int = 32
    mask_visible: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mesh_shape", tuple(int(m) for m in self.mesh_shape))
        if self.n_functions < 1:
            raise ValueError("need at least one function channel")
        if self.channels < 1 or self.layers < 1:
            raise ValueError("channels and layers must be positive")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        k = self.modes
        for m in self.mesh_shape[:-1]:
            if 2 * k - 1 > m:
                raise ValueError(
                    f"{k} modes exceed the Nyquist range of a {m}-point mesh "
                    f"dimension (need 2*modes-1 <= m)"
                )
        last = self.mesh_shape[-1]
        if k > last // 2 + 1:
            raise ValueError(
                f"{k} modes exceed the Nyquist range of the {last}-point last "
                f"mesh dimension (need modes <= m//2 + 1)"
            )

    @property
    def ndim(self) -> int:
        return len(self.mesh_shape)

    @property
    def input_channels(self) -> int:
        per_function = 2 if self.mask_visible else 1
        return self.n_functions * per_function + self.ndim

    def mode_indices(self) -> list[np.ndarray]:
        """Retained wavenumbers per mesh dimension.

        The transforms are real-input FFTs, so the last axis carries the
        half spectrum and keeps only the K lowest non-negative frequencies;
        every other axis keeps both signs (2K-1 indices).
        """
        k = self.modes
        out = [np.concatenate([np.arange(k), np.arange(m - k + 1, m)])
               for m in self.mesh_shape[:-1]]
        out.append(np.arange(k))
        return out


def init_params(config: DenoiserConfig, rng) -> dict[str, np.ndarray]:
    """Fresh parameter arrays (complex spectral weights as re/im pairs).

    The projection head starts at zero so the untrained network predicts
    zero noise everywhere.
    """
    w = config.channels
    c_in = config.input_channels
    n_modes = tuple(len(idx) for idx in config.mode_indices())
    params: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params["lift_w"] = uniform((w, c_in), c_in)
    params["lift_b"] = np.zeros(w)
    params["time_w"] = uniform((w, config.time_dim), config.time_dim)
    params["time_b"] = np.zeros(w)
    spec_scale = 1.0 / (w * w)
    for i in range(config.layers):
        params[f"spec{i}_re"] = spec_scale * rng.random((w, w, *n_modes))
        params[f"spec{i}_im"] = spec_scale * rng.random((w, w, *n_modes))
        params[f"bypass{i}_w"] = uniform((w, w), w)
        params[f"bypass{i}_b"] = np.zeros(w)
    params["proj_w"] = np.zeros((config.n_functions, w))
    params["proj_b"] = np.zeros(config.n_functions)
    return params


def as_nodes(params: dict[str, np.ndarray]) -> dict[str, Node]:
    return {name: Node(value) for name, value in params.items()}


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps; shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def channel_linear(x: Node, w: Node, b: Node | None = None) -> Node:
    """Pointwise linear map over the channel axis of (B, C, *mesh)."""
    shape = x.value.shape
    flat = x.value.reshape(shape[0], shape[1], -1)
    value = np.matmul(w.value, flat).reshape(shape[0], -1, *shape[2:])
    if b is not None:
        value += b.value.reshape((1, -1) + (1,) * (x.value.ndim - 2))

    def vjp(g):
        g2 = g.reshape(g.shape[0], g.shape[1], -1)
        gx = np.matmul(w.value.T, g2).reshape(shape) if x.requires_grad else None
        gw = np.tensordot(g2, flat, axes=([0, 2], [0, 2]))
        if b is None:
            return gx, gw
        gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return ad.make_node(value, parents, vjp)


def add_time(x: Node, w: Node, b: Node, emb: np.ndarray) -> Node:
    """Add a learned projection of the step embedding to every mesh point.

    ``emb`` is the (B, time_dim) sinusoidal embedding, a constant.
    """
    proj = emb @ w.value.T + b.value  # (B, W)
    mesh_axes = tuple(range(2, x.value.ndim))
    value = x.value + proj.reshape(proj.shape + (1,) * len(mesh_axes))

    def vjp(g):
        g_proj = g.sum(axis=mesh_axes)  # (B, W)
        gw = g_proj.T @ emb
        gb = g_proj.sum(axis=0)
        return g, gw, gb

    return ad.make_node(value, (x, w, b), vjp)


def _mix_modes(weights: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """Channel contraction per retained mode: out[b,o,k] = Σ_c w[o,c,k] m[b,c,k].

    Runs as one batched matmul over the flattened mode axis.
    """
    b, c = modes.shape[:2]
    o = weights.shape[0]
    mode_shape = modes.shape[2:]
    w_k = weights.reshape(o, c, -1).transpose(2, 0, 1)   # (K, O, C)
    m_k = modes.reshape(b, c, -1).transpose(2, 1, 0)     # (K, C, B)
    out = (w_k @ m_k).transpose(2, 1, 0)                 # (B, O, K)
    return out.reshape(b, o, *mode_shape)


def spectral_conv(x: Node, w_re: Node, w_im: Node, mode_idx: list[np.ndarray]) -> Node:
    """Fourier-space channel mixing on the retained low modes.

    Forward: real FFT over the mesh axes, multiply the retained half-
    spectrum modes by the complex weight matrices (contracting channels),
    zero every other mode, inverse real FFT.  Linear in ``x``.  The adjoint
    contracts with the conjugate weights; the half-spectrum duplication
    factors cancel against the FFT normalization in the input gradient and
    appear explicitly in the weight gradient.
    """
    mesh_axes = tuple(range(2, x.value.ndim))
    mesh_shape = x.value.shape[2:]
    n = float(np.prod(mesh_shape))
    weights = w_re.value + 1j * w_im.value

    def gather(spectrum):
        out = spectrum
        for ax, idx in zip(mesh_axes, mode_idx):
            out = np.take(out, idx, axis=ax)
        return out

    def scatter(modes, out_channels):
        half = mesh_shape[:-1] + (mesh_shape[-1] // 2 + 1,)
        full = np.zeros((x.value.shape[0], out_channels) + half, dtype=np.complex128)
        sel = np.ix_(np.arange(full.shape[0]), np.arange(out_channels), *mode_idx)
        full[sel] = modes
        return full

    # Doubling mask: every retained half-spectrum bin except the last-axis
    # DC (and Nyquist, if ever retained) represents two full-spectrum bins.
    last = mesh_shape[-1]
    dup = np.full(len(mode_idx[-1]), 2.0)
    dup[mode_idx[-1] == 0] = 1.0
    if last % 2 == 0:
        dup[mode_idx[-1] == last // 2] = 1.0
    dup = dup.reshape((1,) * (len(mode_idx) - 1) + (-1,))

    x_modes = gather(_fft.rfftn(x.value, axes=mesh_axes, workers=FFT_WORKERS))
    y_modes = _mix_modes(weights, x_modes)
    value = _fft.irfftn(scatter(y_modes, weights.shape[0]), s=mesh_shape,
                        axes=mesh_axes, workers=FFT_WORKERS)

    def vjp(g):
        g_modes = gather(_fft.rfftn(g, axes=mesh_axes, workers=FFT_WORKERS))
        gx = None
        if x.requires_grad:
            gx = _fft.irfftn(
                scatter(_mix_modes(weights.conj().transpose(1, 0, *range(2, weights.ndim)),
                                   g_modes), x.value.shape[1]),
                s=mesh_shape, axes=mesh_axes, workers=FFT_WORKERS,
            )
        b, o = g_modes.shape[:2]
        c = x_modes.shape[1]
        g_k = g_modes.reshape(b, o, -1).transpose(2, 1, 0)        # (K, O, B)
        x_k = x_modes.conj().reshape(b, c, -1).transpose(2, 0, 1)  # (K, B, C)
        gw = (g_k @ x_k).transpose(1, 2, 0).reshape(weights.shape)
        gw *= dup / n
        return gx, gw.real, gw.imag

    return ad.make_node(value, (x, w_re, w_im), vjp)


def assemble_input(masked_values: np.ndarray, masks: np.ndarray,
                   mesh: Mesh, config: DenoiserConfig) -> np.ndarray:
    """Stack network input channels: masked fields, masks (if visible), and
    mesh coordinates, all shaped (B, C_in, *mesh)."""
    b = masked_values.shape[0]
    blocks = [masked_values]
    if config.mask_visible:
        blocks.append(masks)
    coords = np.stack(mesh.coordinate_grids())
    blocks.append(np.broadcast_to(coords, (b, *coords.shape)))
    return np.ascontiguousarray(np.concatenate(blocks, axis=1))


def forward(params: dict[str, Node], x: np.ndarray, t, config: DenoiserConfig) -> Node:
    """Predicted noise fields, shape (B, M, *mesh)."""
    if x.ndim != 2 + config.ndim or x.shape[1] != config.input_channels:
        raise ValueError(
            f"input shape {x.shape} does not match (B, {config.input_channels}, "
            f"{', '.join(map(str, config.mesh_shape))})"
        )
    if tuple(x.shape[2:]) != config.mesh_shape:
        raise ValueError(f"mesh dims {x.shape[2:]} != configured {config.mesh_shape}")
    emb = time_embedding(t, config.time_dim)
    if emb.shape[0] != x.shape[0]:
        raise ValueError(f"got {emb.shape[0]} steps for a batch of {x.shape[0]}")

    mode_idx = config.mode_indices()
    h = channel_linear(ad.constant(x), params["lift_w"], params["lift_b"])
    h = add_time(h, params["time_w"], params["time_b"], emb)
    for i in range(config.layers):
        spec = spectral_conv(h, params[f"spec{i}_re"], params[f"spec{i}_im"], mode_idx)
        bypass = channel_linear(h, params[f"bypass{i}_w"], params[f"bypass{i}_b"])
        h = ad.gelu(ad.add(spec, bypass))
    return channel_linear(h, params["proj_w"], params["proj_b"])


def predict(params: dict[str, np.ndarray], x: np.ndarray, t,
            config: DenoiserConfig) -> np.ndarray:
    """Forward pass without recording a graph."""
    with ad.no_grad():
        return forward(as_nodes(params), x, t, config).value
