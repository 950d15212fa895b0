"""Forward functional diffusion, random-mask training, and conditioned
generation.

Each of the M functions on the shared mesh is corrupted by its own GP noise
draw: f_t = √α̂_t f_0 + √(1-α̂_t) ξ_t.  Training minimizes the masked
zero-regularized denoising loss: where the mask marks a value as
conditioned, the network sees the clean value and must predict zero noise;
elsewhere it sees the noisy value and must recover the noise.  Generation
runs the reverse chain over everything that is not conditioned, holding the
conditioned entries fixed, so one trained model serves prediction, inverse
inference, completion, and joint simulation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import denoiser as dn
from .gp import KroneckerGP, Mesh, sample_noise
from .optim import AdamState, adam_step
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class FunctionBundle:
    """M named scalar fields on one shared mesh."""

    mesh: Mesh
    names: tuple[str, ...]
    values: np.ndarray  # (M, *mesh)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        expected = (len(self.names), *self.mesh.shape)
        if values.shape != expected:
            raise ValueError(f"values shape {values.shape} != {expected}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]


@dataclass(frozen=True)
class Normalization:
    """Per-function z-score statistics, learned from the training split."""

    mean: np.ndarray  # (M,)
    std: np.ndarray   # (M,)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("normalization stats must be finite")
        if np.any(std <= 0):
            raise ValueError("normalization std must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def from_data(cls, values: np.ndarray, mesh_ndim: int) -> "Normalization":
        """values: (n, M, *mesh); statistics pooled over instances and mesh."""
        axes = (0, *range(2, 2 + mesh_ndim))
        return cls(mean=values.mean(axis=axes), std=values.std(axis=axes))

    def _shaped(self, arr: np.ndarray, mesh_ndim: int) -> np.ndarray:
        return arr.reshape((-1,) + (1,) * mesh_ndim)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Normalize one bundle (M, *mesh)."""
        nd = values.ndim - 1
        return (values - self._shaped(self.mean, nd)) / self._shaped(self.std, nd)

    def invert(self, values: np.ndarray) -> np.ndarray:
        """Denormalize one bundle (M, *mesh)."""
        nd = values.ndim - 1
        return values * self._shaped(self.std, nd) + self._shaped(self.mean, nd)

    def apply_batch(self, values: np.ndarray) -> np.ndarray:
        """Normalize a stack (n, M, *mesh)."""
        nd = values.ndim - 2
        return (values - self._shaped(self.mean, nd)) / self._shaped(self.std, nd)

    def invert_batch(self, values: np.ndarray) -> np.ndarray:
        nd = values.ndim - 2
        return values * self._shaped(self.std, nd) + self._shaped(self.mean, nd)


@dataclass(frozen=True)
class MaskPolicy:
    """How conditioning masks are drawn during training.

    per_value  - every entry of every function independently 1 w.p. p
    per_function - each function all-ones w.p. p, else all-zeros
    fixed      - a caller-supplied mask, echoed verbatim
    """

    kind: str
    p: float = 0.5
    masks: np.ndarray | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("per_value", "per_function", "fixed"):
            raise ValueError(f"unknown mask policy {self.kind!r}")
        if self.kind != "fixed" and not 0.0 <= self.p <= 1.0:
            raise ValueError(f"mask probability must lie in [0, 1], got {self.p}")
        if self.kind == "fixed":
            if self.masks is None:
                raise ValueError("fixed policy needs masks")
            m = np.asarray(self.masks, dtype=np.float64)
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ValueError("masks must be binary")
            object.__setattr__(self, "masks", m)

    @classmethod
    def per_value(cls, p: float = 0.5, weight: float = 1.0) -> "MaskPolicy":
        return cls("per_value", p=p, weight=weight)

    @classmethod
    def per_function(cls, p: float = 0.5, weight: float = 1.0) -> "MaskPolicy":
        return cls("per_function", p=p, weight=weight)

    @classmethod
    def fixed(cls, masks, weight: float = 1.0) -> "MaskPolicy":
        return cls("fixed", masks=masks, weight=weight)


def sample_mask(policy: MaskPolicy, shape: tuple[int, ...], mesh_ndim: int,
                rng) -> np.ndarray:
    """Draw a binary mask of the given (..., M, *mesh) shape.

    ``mesh_ndim`` says how many trailing axes are mesh axes; the
    per-function policy draws one Bernoulli per remaining leading entry.
    """
    if policy.kind == "per_value":
        return (rng.random(shape) < policy.p).astype(np.float64)
    if policy.kind == "per_function":
        lead = shape[: len(shape) - mesh_ndim]
        flags = (rng.random(lead) < policy.p).astype(np.float64)
        flags = flags.reshape(lead + (1,) * mesh_ndim)
        return np.ascontiguousarray(np.broadcast_to(flags, shape))
    return np.ascontiguousarray(np.broadcast_to(policy.masks, shape))


def forward_diffuse(f0: np.ndarray, t, sched: NoiseSchedule, gp: KroneckerGP,
                    rng=None, xi: np.ndarray | None = None):
    """Noise the bundle to step t: f_t = √α̂_t f_0 + √(1-α̂_t) ξ_t.

    f0 is (M, *mesh) or (B, M, *mesh); t is a step or one step per batch
    element.  Every function (and batch element) gets an independent GP
    noise draw.  Returns (f_t, xi).
    """
    f0 = np.asarray(f0, dtype=np.float64)
    batched = f0.ndim == gp.mesh.ndim + 2
    if not batched and f0.ndim != gp.mesh.ndim + 1:
        raise ValueError(f"bundle shape {f0.shape} does not fit mesh {gp.mesh.shape}")
    t = np.asarray(t)
    if np.any((t < 1) | (t > sched.num_steps)):
        raise ValueError(f"steps must lie in [1, {sched.num_steps}]")
    if t.ndim == 1 and (not batched or t.shape[0] != f0.shape[0]):
        raise ValueError("one step per batch element required")
    if xi is None:
        draws = int(np.prod(f0.shape[: f0.ndim - gp.mesh.ndim]))
        xi = sample_noise(gp, rng, size=draws).reshape(f0.shape)
    a_hat = sched.alpha_hat[t]
    if t.ndim == 1:
        a_hat = a_hat.reshape((-1,) + (1,) * (f0.ndim - 1))
    f_t = np.sqrt(a_hat) * f0 + np.sqrt(1.0 - a_hat) * xi
    return f_t, xi


def apply_mask(f0: np.ndarray, f_t: np.ndarray, xi: np.ndarray, mask: np.ndarray):
    """Masked instances: clean values and zero noise targets where the mask
    is one, noisy values and true noise elsewhere.  Exact selection, no
    arithmetic on the retained entries."""
    f_hat = np.where(mask == 1.0, f0, f_t)
    xi_hat = np.where(mask == 1.0, 0.0, xi)
    return f_hat, xi_hat


def denoising_loss(param_nodes, f0: np.ndarray, sched: NoiseSchedule,
                   gp: KroneckerGP, policies, rng,
                   config: dn.DenoiserConfig) -> ad.Node:
    """Masked denoising loss for one normalized minibatch (B, M, *mesh).

    Draws one step t per batch element, one GP noise draw per function, and
    one mask per policy; the per-policy mean-squared losses are combined
    with the policy weights.  All policies share the same noisy instance
    and go through a single stacked network evaluation.
    """
    if not policies:
        raise ValueError("need at least one mask policy")
    b = f0.shape[0]
    t = rng.integers(1, sched.num_steps + 1, size=b)
    f_t, xi = forward_diffuse(f0, t, sched, gp, rng)

    inputs, targets, weights = [], [], []
    for policy in policies:
        mask = sample_mask(policy, f0.shape, gp.mesh.ndim, rng)
        f_hat, xi_hat = apply_mask(f0, f_t, xi, mask)
        inputs.append(dn.assemble_input(f_hat, mask, gp.mesh, config))
        targets.append(xi_hat)
        weights.append(np.full_like(xi_hat, policy.weight / xi_hat.size))

    x_all = np.concatenate(inputs, axis=0)
    t_all = np.concatenate([t] * len(policies))
    pred = dn.forward(param_nodes, x_all, t_all, config)
    return ad.weighted_squared_error(pred, np.concatenate(targets, axis=0),
                                     np.concatenate(weights, axis=0))


@dataclass(frozen=True)
class TaskSpec:
    """Which entries are conditioned (held fixed) and which are requested.

    Everything not conditioned is jointly generated; ``targets`` marks the
    subset the caller wants back.  Conditioned and target locations may
    overlap in functions but never in entries.
    """

    conditioned: np.ndarray  # (M, *mesh), 1 = conditioned
    targets: np.ndarray      # (M, *mesh), 1 = requested

    def __post_init__(self):
        c = np.asarray(self.conditioned, dtype=np.float64)
        s = np.asarray(self.targets, dtype=np.float64)
        if c.shape != s.shape:
            raise ValueError("conditioned and target masks must share a shape")
        for name, m in (("conditioned", c), ("targets", s)):
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ValueError(f"{name} mask must be binary")
        if np.any(c * s != 0.0):
            raise ValueError("conditioned and target locations must be disjoint")
        object.__setattr__(self, "conditioned", c)
        object.__setattr__(self, "targets", s)

    @property
    def has_targets(self) -> bool:
        return bool(np.any(self.targets == 1.0))

    @classmethod
    def from_regions(cls, names, mesh: Mesh, conditioned: dict, targets: dict) -> "TaskSpec":
        """Build masks from {function name: region} maps; regions are
        'all', 'left', or 'right' halves along the first mesh axis."""
        c = np.zeros((len(names), *mesh.shape))
        s = np.zeros_like(c)
        for spec_map, out in ((conditioned, c), (targets, s)):
            for name, region in spec_map.items():
                if name not in names:
                    raise ValueError(f"unknown function {name!r}; have {list(names)}")
                out[list(names).index(name)] = region_mask(mesh, region)
        return cls(conditioned=c, targets=s)


def region_mask(mesh: Mesh, region: str) -> np.ndarray:
    """Indicator of a named region: 'all', or the 'left'/'right' half of the
    domain split at the midpoint of the first mesh axis."""
    if region == "all":
        return np.ones(mesh.shape)
    axis = mesh.axes[0]
    mid = 0.5 * (axis[0] + axis[-1])
    if region == "left":
        line = axis < mid
    elif region == "right":
        line = axis >= mid
    else:
        raise ValueError(f"unknown region {region!r} (use all/left/right)")
    out = np.zeros(mesh.shape)
    out[line] = 1.0
    return out


def generate(params: dict[str, np.ndarray], config: dn.DenoiserConfig,
             stats: Normalization, mesh: Mesh, task: TaskSpec,
             cond_values: np.ndarray, sched: NoiseSchedule, gp: KroneckerGP,
             rng, n_samples: int = 1, normalized: bool = False,
             max_batch: int = 64) -> np.ndarray:
    """Reverse-chain sampling of everything the task leaves unconditioned.

    cond_values is (M, *mesh), or (n_samples, M, *mesh) to condition each
    sample on its own values (e.g. batching several test instances); only
    conditioned entries are read (raw scale unless ``normalized``).
    Returns (n_samples, M, *mesh) in raw scale, with conditioned entries
    equal to the conditioned inputs exactly.  Fresh rng state gives i.i.d.
    posterior samples.
    """
    if not task.has_targets:
        return np.zeros((n_samples, 0, *mesh.shape))
    cond = task.conditioned
    cv_raw = np.asarray(cond_values, dtype=np.float64)
    per_sample = cv_raw.ndim == mesh.ndim + 2
    if per_sample and cv_raw.shape[0] != n_samples:
        raise ValueError(
            f"per-sample conditioning needs {n_samples} value sets, got "
            f"{cv_raw.shape[0]}"
        )
    cv_all = cv_raw if normalized else (
        stats.apply_batch(cv_raw) if per_sample else stats.apply(cv_raw))
    m = cond.shape[0]

    chunks = []
    for start in range(0, n_samples, max_batch):
        b = min(max_batch, n_samples - start)
        cv = cv_all[start:start + b] if per_sample else cv_all
        state = sample_noise(gp, rng, size=b * m).reshape(b, m, *mesh.shape)
        state = np.where(cond == 1.0, cv, state)
        mask_b = np.broadcast_to(cond, state.shape)
        with ad.no_grad():
            for t in range(sched.num_steps, 0, -1):
                x = dn.assemble_input(state, mask_b, mesh, config)
                pred = dn.predict(params, x, np.full(b, t), config)
                nxt = (state - sched.beta[t] / np.sqrt(1.0 - sched.alpha_hat[t]) * pred)
                nxt /= np.sqrt(1.0 - sched.beta[t])
                if t > 1:
                    eps = sample_noise(gp, rng, size=b * m).reshape(state.shape)
                    nxt += np.sqrt(sched.beta_hat[t]) * eps
                state = np.where(cond == 1.0, cv, nxt)
        chunks.append(state)
    out = stats.invert_batch(np.concatenate(chunks, axis=0))
    return np.where(cond == 1.0, cv_raw, out)


@dataclass(frozen=True)
class EnsembleSummary:
    mean: np.ndarray                      # (M, *mesh)
    std: np.ndarray                       # (M, *mesh)
    intervals: dict                       # alpha -> (lo, hi), each (M, *mesh)
    n_samples: int


def predict_ensemble(params, config, stats, mesh, task, cond_values, sched,
                     gp, rng, n_samples: int, alphas=(0.9, 0.95, 0.99),
                     max_batch: int = 64) -> EnsembleSummary:
    """Pointwise mean, std, and central intervals over repeated generations."""
    if n_samples < 2:
        raise ValueError("need at least two samples for ensemble statistics")
    samples = generate(params, config, stats, mesh, task, cond_values, sched,
                       gp, rng, n_samples=n_samples, max_batch=max_batch)
    intervals = {}
    for alpha in alphas:
        lo = np.quantile(samples, (1.0 - alpha) / 2.0, axis=0)
        hi = np.quantile(samples, (1.0 + alpha) / 2.0, axis=0)
        intervals[alpha] = (lo, hi)
    return EnsembleSummary(mean=samples.mean(axis=0), std=samples.std(axis=0, ddof=1),
                           intervals=intervals, n_samples=n_samples)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    stats: Normalization
    history: list        # (epoch, train_loss, valid_loss) records
    best_epoch: int
    best_valid: float


def train(train_values: np.ndarray, valid_values: np.ndarray, mesh: Mesh,
          config: dn.DenoiserConfig, sched: NoiseSchedule, gp: KroneckerGP,
          policies, *, epochs: int, batch_size: int, lr: float, seed: int,
          valid_every: int = 20, log=None) -> TrainResult:
    """Minibatch Adam on the masked denoising loss.

    Raw-valued splits of shape (n, M, *mesh); normalization is fit on the
    training split only.  Deterministic for a fixed seed.  Returns the
    parameters from the best validation epoch.
    """
    train_values = np.asarray(train_values, dtype=np.float64)
    if train_values.ndim != mesh.ndim + 2 or train_values.shape[0] == 0:
        raise ValueError("training set must be a nonempty (n, M, *mesh) array")
    stats = Normalization.from_data(train_values, mesh.ndim)
    tr = stats.apply_batch(train_values)
    va = stats.apply_batch(np.asarray(valid_values, dtype=np.float64))

    seeds = np.random.SeedSequence(seed).spawn(3)
    params = dn.init_params(config, np.random.default_rng(seeds[0]))
    opt = AdamState()
    rng = np.random.default_rng(seeds[1])
    valid_seed = seeds[2]

    n = tr.shape[0]
    history = []
    best_valid = np.inf
    best_epoch = 0
    best_params = copy.deepcopy(params)

    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            batch = tr[perm[start:start + batch_size]]
            nodes = dn.as_nodes(params)
            loss = denoising_loss(nodes, batch, sched, gp, policies, rng, config)
            if not np.isfinite(loss.value):
                raise FloatingPointError(
                    f"training diverged: non-finite loss at epoch {epoch}"
                )
            ad.backward(loss)
            adam_step(params, {k: nodes[k].grad for k in params}, opt, lr)
            epoch_losses.append(float(loss.value))

        if epoch % valid_every == 0 or epoch == epochs:
            vloss = validation_loss(params, va, sched, gp, policies,
                                    np.random.default_rng(valid_seed), config,
                                    batch_size)
            record = (epoch, float(np.mean(epoch_losses)), vloss)
            history.append(record)
            if log is not None:
                log(*record)
            if vloss < best_valid:
                best_valid = vloss
                best_epoch = epoch
                best_params = copy.deepcopy(params)

    return TrainResult(params=best_params, stats=stats, history=history,
                       best_epoch=best_epoch, best_valid=best_valid)


def validation_loss(params, values: np.ndarray, sched, gp, policies, rng,
                    config, batch_size: int) -> float:
    """Average denoising loss over a normalized split, no gradients.

    The caller controls the rng; reusing one seed makes successive
    evaluations comparable across epochs.
    """
    if values.shape[0] == 0:
        return np.nan
    total = 0.0
    with ad.no_grad():
        nodes = dn.as_nodes(params)
        for start in range(0, values.shape[0], batch_size):
            batch = values[start:start + batch_size]
            loss = denoising_loss(nodes, batch, sched, gp, policies, rng, config)
            total += float(loss.value) * batch.shape[0]
    return total / values.shape[0]
