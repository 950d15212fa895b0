"""Command-line surface: dataset generation, training, prediction,
unconditional generation, evaluation, and the noise-sampler benchmark.

Exit codes: 0 success, 2 usage/configuration errors, 3 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from .config import ConfigError, RunConfig, load_config, config_from_dict
from .container import ContainerError, read_container, write_container
from .datasets import FUNCTION_NAMES, build_dataset, load_dataset
from .gp import Mesh, build_gp, sample_noise, sample_noise_dense, DENSE_POINT_CAP
from .metrics import equation_error, mrpd, relative_l2
from .pde import SolverError
from .schedule import linear_schedule

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def schedule_from(config: RunConfig):
    return linear_schedule(config.schedule.steps, config.schedule.beta_start,
                           config.schedule.beta_end)


def gp_from(config: RunConfig, mesh: Mesh):
    return build_gp(mesh, config.gp.length_scale, config.gp.jitter)


def denoiser_config_from(config: RunConfig, names) -> dn.DenoiserConfig:
    arch = config.denoiser
    return dn.DenoiserConfig(
        n_functions=len(names), mesh_shape=tuple(config.mesh),
        channels=arch.channels, layers=arch.layers, modes=arch.modes,
        time_dim=arch.time_dim, mask_visible=arch.mask_visible,
    )


def mask_policies_from(config: RunConfig):
    masking = config.masking
    policies = []
    if masking.per_value_weight > 0:
        policies.append(df.MaskPolicy.per_value(masking.p, masking.per_value_weight))
    if masking.per_function_weight > 0:
        policies.append(df.MaskPolicy.per_function(masking.p, masking.per_function_weight))
    if not policies:
        raise ConfigError("both mask policy weights are zero; nothing to train")
    return policies


def save_checkpoint(path, params, stats, mesh, names, config: RunConfig,
                    extra: dict | None = None) -> None:
    arrays = {f"param/{name}": value for name, value in params.items()}
    arrays["stats/mean"] = stats.mean
    arrays["stats/std"] = stats.std
    for d, axis in enumerate(mesh.axes):
        arrays[f"mesh/axis{d}"] = axis
    meta = {"kind": "checkpoint", "system": config.system, "names": list(names),
            "config": config.to_dict()}
    if extra:
        meta.update(extra)
    write_container(path, arrays, meta)


def load_checkpoint(path):
    arrays, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ContainerError(f"{path} is not a checkpoint container")
    params = {name[len("param/"):]: value for name, value in arrays.items()
              if name.startswith("param/")}
    stats = df.Normalization(arrays["stats/mean"], arrays["stats/std"])
    axes = []
    d = 0
    while f"mesh/axis{d}" in arrays:
        axes.append(arrays[f"mesh/axis{d}"])
        d += 1
    mesh = Mesh(tuple(axes))
    config = config_from_dict(meta["config"])
    return params, stats, mesh, tuple(meta["names"]), config, meta


def parse_task(spec: str, names):
    """Task strings like "a,f->u" or "u:left->u:right"; regions default to
    the whole domain."""

    def entries(side, what):
        out = {}
        for token in side.split(","):
            token = token.strip()
            if not token:
                continue
            name, _, region = token.partition(":")
            name = name.strip()
            region = region.strip() or "all"
            if name not in names:
                raise ConfigError(
                    f"unknown function {name!r} in task {what}; dataset has "
                    f"{', '.join(names)}"
                )
            if region not in ("all", "left", "right"):
                raise ConfigError(f"unknown region {region!r} (use all/left/right)")
            if name in out:
                raise ConfigError(f"function {name!r} listed twice in task {what}")
            out[name] = region
        return out

    left, arrow, right = spec.partition("->")
    if not arrow:
        raise ConfigError("task must look like 'cond1,cond2->target'")
    conditioned = entries(left, "conditions")
    targets = entries(right, "target")
    if len(targets) != 1:
        raise ConfigError("exactly one target function is required")
    return conditioned, targets


def instance_rng(seed: int, stream: int, index: int):
    return np.random.default_rng(np.random.SeedSequence((seed, stream, index)))


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    system = args.system or config.system
    if args.system and args.system != config.system:
        raise ConfigError(
            f"--system {args.system} contradicts config system {config.system}"
        )
    mesh = build_dataset(system, config.data.n_train, config.data.n_valid,
                         config.data.n_test, config.mesh, config.seed, args.out,
                         meta_extra={"config": config.to_dict()}, jobs=args.jobs)
    counts = (config.data.n_train, config.data.n_valid, config.data.n_test)
    print(f"wrote {args.out}: {system} {'x'.join(map(str, mesh.shape))}, "
          f"splits {counts[0]}/{counts[1]}/{counts[2]}, seed {config.seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    splits, names, mesh, meta = load_dataset(args.data)
    if meta["system"] != config.system:
        raise ConfigError(
            f"dataset system {meta['system']!r} does not match config "
            f"system {config.system!r}"
        )
    if tuple(mesh.shape) != tuple(config.mesh):
        raise ConfigError(
            f"dataset mesh {mesh.shape} does not match config mesh "
            f"{tuple(config.mesh)}"
        )
    sched = schedule_from(config)
    gp = gp_from(config, mesh)
    dconfig = denoiser_config_from(config, names)
    policies = mask_policies_from(config)

    def log(epoch, train_loss, valid_loss):
        print(f"{epoch}\t{train_loss:.6f}\t{valid_loss:.6f}", flush=True)

    start = time.time()
    result = df.train(splits["train"], splits["valid"], mesh, dconfig, sched,
                      gp, policies, epochs=config.optim.epochs,
                      batch_size=config.optim.batch_size, lr=config.optim.lr,
                      seed=config.seed, valid_every=config.optim.valid_every,
                      log=log)
    save_checkpoint(args.out, result.params, result.stats, mesh, names, config,
                    extra={"best_epoch": result.best_epoch,
                           "best_valid": result.best_valid,
                           "train_seconds": time.time() - start})
    print(f"wrote {args.out}: best valid loss {result.best_valid:.6f} at "
          f"epoch {result.best_epoch}")
    return EXIT_OK


def _check_mesh_match(ckpt_mesh: Mesh, data_mesh: Mesh) -> None:
    if ckpt_mesh.shape != data_mesh.shape or any(
        not np.allclose(a, b) for a, b in zip(ckpt_mesh.axes, data_mesh.axes)
    ):
        raise ConfigError(
            f"checkpoint was trained on a {ckpt_mesh.shape} mesh but the "
            f"dataset uses {data_mesh.shape}; refusing to predict"
        )


def cmd_predict(args) -> int:
    params, stats, mesh, names, config, _meta = load_checkpoint(args.ckpt)
    splits, data_names, data_mesh, data_meta = load_dataset(args.data)
    if tuple(data_names) != tuple(names):
        raise ConfigError(
            f"dataset functions {data_names} do not match checkpoint {names}"
        )
    _check_mesh_match(mesh, data_mesh)
    cond_map, target_map = parse_task(args.task, names)
    task = df.TaskSpec.from_regions(names, mesh, cond_map, target_map)

    sched = schedule_from(config)
    gp = gp_from(config, mesh)
    dconfig = denoiser_config_from(config, names)
    seed = config.seed if args.seed is None else args.seed
    n_samples = args.samples
    alphas = tuple(config.predict.alphas)

    test = splits["test"]
    n_test = test.shape[0] if args.limit is None else min(args.limit, test.shape[0])
    tmask = task.targets == 1.0

    rel = []
    covered = {alpha: 0 for alpha in alphas}
    total = {alpha: 0 for alpha in alphas}
    group = max(1, 64 // n_samples)
    for start in range(0, n_test, group):
        stop = min(start + group, n_test)
        block = test[start:stop]
        cond_batch = np.repeat(block, n_samples, axis=0)
        out = df.generate(params, dconfig, stats, mesh, task, cond_batch,
                          sched, gp, instance_rng(seed, 1, start),
                          n_samples=cond_batch.shape[0])
        out = out.reshape(stop - start, n_samples, *block.shape[1:])
        for i in range(stop - start):
            truth = block[i]
            ens = out[i]
            rel.append(relative_l2(ens.mean(axis=0)[tmask], truth[tmask]))
            for alpha in alphas:
                lo = np.quantile(ens, (1 - alpha) / 2, axis=0)
                hi = np.quantile(ens, (1 + alpha) / 2, axis=0)
                inside = (truth >= lo) & (truth <= hi)
                covered[alpha] += int(np.sum(inside[tmask]))
                total[alpha] += int(np.sum(tmask))

    report = {
        "task": args.task,
        "system": config.system,
        "n_instances": n_test,
        "samples_per_instance": n_samples,
        "seed": seed,
        "relative_l2": {
            "mean": float(np.mean(rel)),
            "std": float(np.std(rel)),
            "per_instance": [float(r) for r in rel],
        },
        "ecp": {str(alpha): covered[alpha] / total[alpha] for alpha in alphas},
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"task {args.task}: relative L2 {report['relative_l2']['mean']:.4f} "
          f"± {report['relative_l2']['std']:.4f} over {n_test} instances")
    return EXIT_OK


def cmd_generate(args) -> int:
    params, stats, mesh, names, config, _meta = load_checkpoint(args.ckpt)
    sched = schedule_from(config)
    gp = gp_from(config, mesh)
    dconfig = denoiser_config_from(config, names)
    seed = config.seed if args.seed is None else args.seed

    task = df.TaskSpec(np.zeros((len(names), *mesh.shape)),
                       np.ones((len(names), *mesh.shape)))
    samples = df.generate(params, dconfig, stats, mesh, task,
                          np.zeros((len(names), *mesh.shape)), sched, gp,
                          instance_rng(seed, 2, 0), n_samples=args.count)
    arrays = {f"gen/{name}": samples[:, k] for k, name in enumerate(names)}
    for d, axis in enumerate(mesh.axes):
        arrays[f"mesh/axis{d}"] = axis
    write_container(args.out, arrays, {
        "kind": "generated", "system": config.system, "names": list(names),
        "count": args.count, "seed": seed,
    })
    print(f"wrote {args.out}: {args.count} unconditional samples")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    arrays, meta = read_container(args.gen)
    if meta.get("kind") != "generated":
        raise ConfigError(f"{args.gen} is not a generated-samples container")
    if args.system != meta["system"]:
        raise ConfigError(
            f"--system {args.system} does not match the container's system "
            f"{meta['system']!r}"
        )
    names = tuple(meta["names"])
    axes = []
    d = 0
    while f"mesh/axis{d}" in arrays:
        axes.append(arrays[f"mesh/axis{d}"])
        d += 1
    mesh = Mesh(tuple(axes))
    stacks = np.stack([arrays[f"gen/{name}"] for name in names], axis=1)

    errors = []
    for i in range(stacks.shape[0]):
        values = {name: stacks[i, k] for k, name in enumerate(names)}
        errors.append(equation_error(values, args.system, mesh))
    diversity = mrpd(list(stacks))

    report = {
        "system": args.system,
        "count": int(stacks.shape[0]),
        "equation_error": {
            "mean": float(np.mean(errors)),
            "median": float(np.median(errors)),
            "per_instance": [float(e) for e in errors],
        },
        "mrpd": diversity,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"equation error median {report['equation_error']['median']:.4f}, "
          f"MRPD {diversity:.4f} over {stacks.shape[0]} samples")
    return EXIT_OK


def cmd_bench_sampler(args) -> int:
    try:
        shape = tuple(int(p) for p in args.mesh.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"bad mesh spec {args.mesh!r} (use e.g. 64x64)") from exc
    mesh = Mesh.regular(shape)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)

    start = time.time()
    for _ in range(args.trials):
        gp = build_gp(mesh, args.length_scale)
        sample_noise(gp, rng)
    tucker = (time.time() - start) / args.trials

    dense = None
    if mesh.num_points <= DENSE_POINT_CAP:
        gp = build_gp(mesh, args.length_scale)
        start = time.time()
        for _ in range(args.trials):
            sample_noise_dense(gp, rng)
        dense = (time.time() - start) / args.trials
    result = {"mesh": list(shape), "trials": args.trials,
              "tucker_seconds": tucker, "dense_seconds": dense,
              "speedup": None if dense is None else dense / tucker}
    print(f"tucker sampler: {tucker * 1e3:.3f} ms/sample (incl. per-dim Cholesky)")
    if dense is None:
        print(f"dense sampler skipped: {mesh.num_points} points exceed the "
              f"{DENSE_POINT_CAP}-point covariance cap")
    else:
        print(f"dense sampler:  {dense * 1e3:.3f} ms/sample (incl. full Cholesky)")
        print(f"speedup: {dense / tucker:.1f}x")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acmfd",
        description="Arbitrarily-conditioned multi-functional diffusion "
                    "for multi-physics emulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a PDE dataset")
    p.add_argument("--system", choices=("darcy", "convdiff"))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoising model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="conditional prediction over the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True,
                   help="e.g. 'a,f->u' or 'u:left->u:right'")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int, help="evaluate only the first N instances")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("generate", help="unconditional joint generation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="equation error and diversity of generated samples")
    p.add_argument("--gen", required=True)
    p.add_argument("--system", required=True, choices=("darcy", "convdiff"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-sampler", help="Kronecker vs dense noise sampling")
    p.add_argument("--mesh", default="64x64")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--length-scale", type=float, default=1e-3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_sampler)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContainerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
