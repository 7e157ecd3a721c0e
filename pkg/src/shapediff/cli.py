"""``shapediff`` command line: template, diffuse, train, sample, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
Logs are ``key=value`` lines on stderr; results are files.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .ddk import DiffusionSchedule, Mode, average_shape, gdk_trajectory, run_trajectory
from .ddm import (CheckpointError, TrainConfig, load_checkpoint, sample, save_checkpoint,
                  train)
from .metrics import MetricError, evaluate
from .network import RegressorModel
from .shape import Shape, icosphere
from .shapeio import (ConfigError, RunConfig, load_config, load_shape, load_shape_dir,
                      load_trajectory, save_shape, save_trajectory)

log = logging.getLogger("shapediff")

CONFIG_ENV = "SHAPEDIFF_CONFIG"


class UsageError(Exception):
    pass


def _kv(**items) -> str:
    return " ".join(f"{k}={v}" for k, v in items.items())


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _config(args, extra_overrides=()) -> RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV) or None
    overrides = list(args.set or []) + list(extra_overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return load_config(path, args.profile, overrides)


def _template_from_config(cfg: RunConfig) -> tuple[Shape, str]:
    t = cfg.template
    if t.source == "icosphere":
        return icosphere(t.level), f"icosphere:{t.level}"
    if t.source == "file":
        if not t.path:
            raise UsageError("template source 'file' needs --template or [template] path")
        return load_shape(t.path), t.path
    raise UsageError("average-shape templates are built with `shapediff template --avg`; pass --template")


def _shape_ext(shape: Shape) -> str:
    return ".obj" if shape.has_edges else ".xyz"


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_template(args) -> int:
    cfg = _config(args)
    if args.icosphere is not None:
        if not 0 <= args.icosphere <= 7:
            raise UsageError("--icosphere level must be in 0..7")
        shape = icosphere(args.icosphere)
        out = Path(args.out or f"icosphere_{args.icosphere}.obj")
    else:
        data = [s for _, s in load_shape_dir(args.avg)]
        if not data:
            raise FileNotFoundError(f"{args.avg}: no shape files")
        a = cfg.average_shape
        npoints = args.npoints if args.npoints is not None else a.npoints
        steps = args.steps if args.steps is not None else a.steps
        if npoints < 1 or steps < 0:
            raise UsageError("--npoints must be >= 1 and --steps >= 0")
        shape = average_shape(data, npoints, steps, a.weights(cfg.diffusion.reduction),
                              seed=cfg.seed, knn_k=cfg.diffusion.knn_k)
        out = Path(args.out or "average.xyz")
    save_shape(shape, out)
    log.info(_kv(event="template", out=out, vertices=shape.n))
    print(f"vertices={shape.n}")
    return 0


def cmd_diffuse(args) -> int:
    if args.steps is not None and args.steps < 1:
        raise UsageError("--steps must be >= 1")
    extra = [f"diffusion.steps={args.steps}"] if args.steps is not None else []
    cfg = _config(args, extra)
    d = cfg.diffusion
    source = load_shape(args.source)
    schedule = d.schedule(cfg.seed)
    if args.kernel == "gdk":
        traj = gdk_trajectory(source, schedule, anchor_id=str(args.source))
    else:
        if args.template:
            template, template_id = load_shape(args.template), str(args.template)
        elif schedule.mode is Mode.TEMPLATE_DESCENT:
            template, template_id = _template_from_config(cfg)
        else:
            template, template_id = None, ""

        def progress(t, T, report):
            if args.log_every and (t % args.log_every == 0 or t == T):
                log.info(_kv(event="diffuse", step=t, of=T, energy=f"{report.total:.9g}"))

        traj = run_trajectory(source, template, d.weights(), schedule, knn_k=d.knn_k,
                              anchor_id=str(args.source), template_id=template_id, progress=progress)
    save_trajectory(traj, args.out)
    Path(args.out, "config.ini").write_text(cfg.to_ini())
    log.info(_kv(event="diffuse_done", kernel=args.kernel, frames=len(traj.frames), out=args.out))
    print(f"frames={len(traj.frames)}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    trajs = [load_trajectory(p) for p in args.traj]
    intervals = {}
    for p, tr in zip(args.traj, trajs):
        intervals.setdefault(tr.schedule.interval_i, p)
    if len(intervals) > 1:
        names = ", ".join(f"{p} (interval {i})" for i, p in intervals.items())
        raise ValueError(f"trajectories use different intervals: {names}")
    T = max(tr.T for tr in trajs)
    tc = TrainConfig(**{k: getattr(cfg.training, k) for k in cfg.training.__dataclass_fields__})
    state = None
    if args.resume:
        model, state, extra = load_checkpoint(args.resume)
        if extra.get("interval") not in (None, trajs[0].schedule.interval_i):
            raise CheckpointError(f"{args.resume}: trained with interval {extra.get('interval')}")
    else:
        model = RegressorModel(cfg.model.hyperparams(T), seed=tc.seed)
    start = state.iteration if state else 0
    if start >= tc.iterations:
        raise ValueError(f"checkpoint is already at iteration {start} of {tc.iterations}")
    log.info(_kv(event="train", trajectories=len(trajs), params=model.hp.n_params(),
                 start=start, iterations=tc.iterations))
    res = train(model, trajs, tc, state=state, log_every=args.log_every)
    extra = {"T": T, "interval": trajs[0].schedule.interval_i,
             "template_id": trajs[0].template_id, "config": cfg.to_dict()}
    save_checkpoint(args.out, res.model, res.state, extra)
    csv_path = Path(args.loss_csv or str(args.out) + ".loss.csv")
    append = bool(args.resume) and csv_path.exists()
    with open(csv_path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(["iteration", "loss", "lr"])
        for it, loss, lr in res.history:
            w.writerow([it, repr(float(loss)), repr(float(lr))])
    first, last = res.history[0][1], res.history[-1][1]
    log.info(_kv(event="train_done", iteration=res.state.iteration, first_loss=f"{first:.6g}",
                 last_loss=f"{last:.6g}", checkpoint=args.out))
    print(f"iterations={res.state.iteration}")
    return 0


def cmd_sample(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    cfg = _config(args)
    model, _, extra = load_checkpoint(args.checkpoint)
    T = int(extra.get("T", model.hp.T))
    interval = int(extra.get("interval", cfg.diffusion.interval))
    if args.template:
        template = load_shape(args.template)
    else:
        template, _ = _template_from_config(cfg)
    latent = None
    if model.hp.latent_dim:
        if not args.latent_from:
            raise UsageError("this checkpoint is latent-conditioned; pass --latent-from SHAPE")
        latent = model.latent(load_shape(args.latent_from).vertices)
    elif args.latent_from:
        raise UsageError("--latent-from needs a latent-conditioned checkpoint")
    schedule = DiffusionSchedule.constant(T, cfg.diffusion.beta, interval_i=interval,
                                          mode=cfg.diffusion.mode, seed=cfg.seed)
    seed = cfg.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = _shape_ext(template)

    def one(k: int):
        return sample(model, template, schedule, np.random.default_rng([seed, k]), latent=latent)

    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as ex:
            results = list(ex.map(one, range(args.count)))
    else:
        results = [one(k) for k in range(args.count)]
    for k, res in enumerate(results):
        save_shape(res.shape, out / f"sample_{k:04d}{ext}")
        if args.keep_frames:
            fdir = out / f"sample_{k:04d}_frames"
            fdir.mkdir(exist_ok=True)
            for shape, t in res.frames:
                save_shape(shape, fdir / f"t_{t:05d}{ext}")
        log.info(_kv(event="sample", index=k, seed=f"{seed}:{k}", reverse_steps=res.model_calls))
    print(f"samples={args.count} reverse_steps={results[0].model_calls}")
    return 0


def cmd_eval(args) -> int:
    gen = [s for _, s in load_shape_dir(args.generated)]
    ref = [s for _, s in load_shape_dir(args.reference)]
    if not gen:
        raise MetricError(f"{args.generated}: no generated shapes")
    if not ref:
        raise MetricError(f"{args.reference}: no reference shapes")
    report, warnings = evaluate(gen, ref, resolution=args.resolution, workers=args.workers)
    for w in warnings:
        log.warning(_kv(event="eval_warning", message=repr(w)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(str(out) + ".txt").write_text(report.to_text())
    Path(str(out) + ".json").write_text(report.to_json())
    sys.stdout.write(report.to_text())
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"INI config file (default: ${CONFIG_ENV})")
    common.add_argument("--profile", choices=("pcl", "mesh", "face"))
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="shapediff", description="Geometry-aware shape diffusion toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("template", parents=[common], help="build an icosphere or average-shape template")
    g = t.add_mutually_exclusive_group(required=True)
    g.add_argument("--icosphere", type=int, metavar="LEVEL")
    g.add_argument("--avg", metavar="DIR", help="dataset directory of shape files")
    t.add_argument("--npoints", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("-o", "--out")
    t.set_defaults(func=cmd_template)

    d = sub.add_parser("diffuse", parents=[common], help="generate a deformation trajectory")
    d.add_argument("--source", required=True)
    d.add_argument("--template")
    d.add_argument("--kernel", choices=("ddk", "gdk"), default="ddk")
    d.add_argument("--steps", type=int)
    d.add_argument("--log-every", type=int, default=0)
    d.add_argument("-o", "--out", required=True, help="trajectory directory")
    d.set_defaults(func=cmd_diffuse)

    r = sub.add_parser("train", parents=[common], help="fit the regressor to trajectories")
    r.add_argument("--traj", nargs="+", required=True, help="trajectory directories")
    r.add_argument("--resume", metavar="CKPT")
    r.add_argument("--loss-csv")
    r.add_argument("--log-every", type=int, default=0)
    r.add_argument("-o", "--out", required=True, help="checkpoint path")
    r.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="run the reverse process from a template")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--template")
    s.add_argument("--latent-from", metavar="SHAPE")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--keep-frames", action="store_true")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("-o", "--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", parents=[common], help="metrics of generated vs reference clouds")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--resolution", type=int, default=28)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("-o", "--out", default="metrics", help="report path prefix (.txt and .json)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"shapediff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"shapediff {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
