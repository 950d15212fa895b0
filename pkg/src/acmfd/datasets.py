"""Multi-physics dataset generation and the on-disk dataset layout.

Darcy inputs are drawn at twice the target resolution and restricted to
the target sub-mesh (so the fields carry the same fine-scale character as
a high-resolution pipeline); the pressure is then solved on the target
mesh itself, which keeps every stored triple exactly reproducible by
re-running the solver on the stored inputs.
"""

from __future__ import annotations

import logging

import numpy as np

from .container import read_container, write_container
from .gp import Mesh
from .grf import GrfSpec, restrict, sample_grf
from .pde import SolverError, sample_convdiff_inputs, solve_convdiff, solve_darcy

log = logging.getLogger(__name__)

SYSTEMS = ("darcy", "convdiff")
FUNCTION_NAMES = {"darcy": ("a", "f", "u"), "convdiff": ("v", "s", "u")}
SPLITS = ("train", "valid", "test")
MAX_SOLVER_RETRIES = 5

# Random-field families for the Darcy inputs: the permeability is the
# exponential of a (-Δ+16)^-2 field, the source a (-Δ+25)^-7.5 field.
DARCY_PERMEABILITY_GRF = dict(shift=16.0, exponent=2.0, post_map="exp")
DARCY_SOURCE_GRF = dict(shift=25.0, exponent=7.5, post_map="identity")


def default_mesh(system: str, shape) -> Mesh:
    if system == "darcy":
        return Mesh.regular(shape)
    if system == "convdiff":
        return Mesh((np.linspace(-1.0, 1.0, shape[0]),
                     np.linspace(0.0, 1.0, shape[1])))
    raise ValueError(f"unknown system {system!r} (expected one of {SYSTEMS})")


def generate_darcy_instance(rng, mesh: Mesh) -> dict[str, np.ndarray]:
    fine_dims = tuple(2 * m - 1 for m in mesh.shape)
    grf_a = GrfSpec(dims=fine_dims, **DARCY_PERMEABILITY_GRF)
    grf_f = GrfSpec(dims=fine_dims, **DARCY_SOURCE_GRF)
    for attempt in range(MAX_SOLVER_RETRIES):
        a = restrict(sample_grf(grf_a, rng), 2, mesh.ndim)
        f = restrict(sample_grf(grf_f, rng), 2, mesh.ndim)
        try:
            u = solve_darcy(a, f, mesh)
        except SolverError as exc:
            log.warning("darcy solve failed (attempt %d): %s", attempt + 1, exc)
            continue
        return {"a": a, "f": f, "u": u}
    raise SolverError(f"darcy instance failed {MAX_SOLVER_RETRIES} times")


def generate_convdiff_instance(rng, mesh: Mesh) -> dict[str, np.ndarray]:
    for attempt in range(MAX_SOLVER_RETRIES):
        v, s, _coeffs = sample_convdiff_inputs(rng, mesh)
        try:
            u = solve_convdiff(v, s, mesh)
        except SolverError as exc:
            log.warning("convdiff solve failed (attempt %d): %s", attempt + 1, exc)
            continue
        return {"v": v, "s": s, "u": u}
    raise SolverError(f"convdiff instance failed {MAX_SOLVER_RETRIES} times")


_GENERATORS = {"darcy": generate_darcy_instance, "convdiff": generate_convdiff_instance}


def build_dataset(system: str, n_train: int, n_valid: int, n_test: int,
                  mesh_shape, seed: int, out_path, meta_extra: dict | None = None,
                  jobs: int = 1) -> Mesh:
    """Generate instances, solve each, and write the dataset container.

    Instance i draws from its own stream seeded by (seed, i), so the file
    is byte-identical for a given seed regardless of ``jobs``.
    """
    counts = {"train": n_train, "valid": n_valid, "test": n_test}
    if min(counts.values()) < 1:
        raise ValueError("every split needs at least one instance")
    if system not in SYSTEMS:
        raise ValueError(f"unknown system {system!r} (expected one of {SYSTEMS})")
    mesh = default_mesh(system, mesh_shape)
    names = FUNCTION_NAMES[system]
    generate = _GENERATORS[system]
    total = sum(counts.values())

    def make(index: int) -> dict[str, np.ndarray]:
        return generate(np.random.default_rng([seed, index]), mesh)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            instances = list(pool.map(make, range(total)))
    else:
        instances = [make(i) for i in range(total)]

    arrays: dict[str, np.ndarray] = {}
    for d, axis in enumerate(mesh.axes):
        arrays[f"mesh/axis{d}"] = axis
    index = 0
    for split in SPLITS:
        chunk = instances[index:index + counts[split]]
        for name in names:
            arrays[f"{split}/{name}"] = np.stack([inst[name] for inst in chunk])
        index += counts[split]

    meta = {
        "kind": "dataset",
        "system": system,
        "names": list(names),
        "seed": seed,
        "counts": counts,
        "mesh_shape": list(mesh.shape),
    }
    if meta_extra:
        meta.update(meta_extra)
    write_container(out_path, arrays, meta)
    return mesh


def load_dataset(path):
    """Read a dataset container back into (splits, names, mesh, meta);
    splits maps split name to an (n, M, *mesh) array."""
    arrays, meta = read_container(path)
    if meta.get("kind") != "dataset":
        raise ValueError(f"{path} is not a dataset container")
    names = tuple(meta["names"])
    axes = []
    d = 0
    while f"mesh/axis{d}" in arrays:
        axes.append(arrays[f"mesh/axis{d}"])
        d += 1
    mesh = Mesh(tuple(axes))
    splits = {}
    for split in SPLITS:
        stacked = [arrays[f"{split}/{name}"] for name in names]
        splits[split] = np.stack(stacked, axis=1)
    return splits, names, mesh, meta
