"""Evaluation metrics: relative L2 error, equation error by re-solving the
governing PDE from generated inputs, mean relative pairwise distance
(sample diversity), and empirical coverage probability (calibration)."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .gp import Mesh
from .pde import solve_convdiff, solve_darcy

log = logging.getLogger(__name__)

PERMEABILITY_FLOOR = 1e-6


def relative_l2(pred: np.ndarray, truth: np.ndarray) -> float:
    """||pred - truth||_2 / ||truth||_2 over all entries."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    denom = np.linalg.norm(truth.reshape(-1))
    if denom == 0.0:
        raise ValueError("relative L2 is undefined against an all-zero truth")
    return float(np.linalg.norm((pred - truth).reshape(-1)) / denom)


def equation_error(values: dict[str, np.ndarray], system: str, mesh: Mesh) -> float:
    """Re-solve the PDE from the instance's input fields and return the
    relative L2 distance of its solution field from the re-solved one."""
    if system == "darcy":
        a = np.asarray(values["a"], dtype=np.float64)
        if np.any(a < PERMEABILITY_FLOOR):
            clipped = int(np.sum(a < PERMEABILITY_FLOOR))
            log.warning("clipping %d non-positive permeability values", clipped)
            a = np.clip(a, PERMEABILITY_FLOOR, None)
        resolved = solve_darcy(a, values["f"], mesh)
    elif system == "convdiff":
        resolved = solve_convdiff(values["v"], values["s"], mesh)
    else:
        raise ValueError(f"unknown system {system!r}")
    return relative_l2(values["u"], resolved)


def mrpd(samples) -> float:
    """Mean over unordered pairs of 2||x_i - x_j|| / (||x_i|| + ||x_j||).

    Samples are compared on their concatenated function values; all-zero
    pairs are skipped with a warning.  Ranges over [0, 2].
    """
    flats = [np.asarray(s, dtype=np.float64).reshape(-1) for s in samples]
    if len(flats) < 2:
        raise ValueError("MRPD needs at least two samples")
    norms = [np.linalg.norm(x) for x in flats]
    values = []
    for i in range(len(flats)):
        for j in range(i + 1, len(flats)):
            denom = norms[i] + norms[j]
            if denom == 0.0:
                warnings.warn("skipping an all-zero sample pair in MRPD", stacklevel=2)
                continue
            values.append(2.0 * np.linalg.norm(flats[i] - flats[j]) / denom)
    if not values:
        raise ValueError("every MRPD pair was degenerate")
    return float(np.mean(values))


def ecp(truth: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    """Fraction of truth values inside the closed interval [lo, hi]."""
    truth = np.asarray(truth, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if lo.shape != truth.shape or hi.shape != truth.shape:
        raise ValueError("interval arrays must match the truth shape")
    if np.any(lo > hi):
        raise ValueError("interval bounds are inverted somewhere")
    return float(np.mean((truth >= lo) & (truth <= hi)))


@dataclass
class MetricReport:
    """One task's metric values plus enough context to interpret them."""

    task: str
    values: dict
    counts: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task": self.task, "values": self.values,
                "counts": self.counts, "tolerances": self.tolerances}
