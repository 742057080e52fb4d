"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

STAGE1_CKPT = "stage1.ckpt"
STAGE2_CKPT = "stage2.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", help="scene JSON or checkpoint")
    p.add_argument("--dataset", help="dataset directory (transforms_<split>.json)")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--iters", type=int)
    p.add_argument("--nr", type=int, help="secondary rays per shaded pixel")
    p.add_argument("--ray-budget", type=int, dest="ray_budget")
    p.add_argument("--env", help="equirectangular PFM environment")
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surfeltrace", description="Ray-traced surfel inverse rendering.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("pretrain", help="stage 1: radiance and geometry")
    _common(p)
    p.add_argument("--gaussians", type=int, default=64, help="surfel count for initialisation")
    p = sub.add_parser("train-ir", help="stage 2: materials and lighting")
    _common(p)
    p.add_argument("--checkpoint", help="stage-1 checkpoint (default: <out>/stage1.ckpt)")
    p = sub.add_parser("render", help="G-buffer, physically based image and light decomposition")
    _common(p)
    p.add_argument("--split", default="test")
    p = sub.add_parser("relight", help="render under a new environment")
    _common(p)
    p.add_argument("--split", default="test")
    p = sub.add_parser("metrics", help="compare prediction and ground-truth image folders")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--out", help="write the report as JSON")
    p = sub.add_parser("trace-debug", help="print the hit list of one ray")
    p.add_argument("--scene", required=True)
    p.add_argument("--origin", type=float, nargs=3, required=True)
    p.add_argument("--dir", type=float, nargs=3, required=True, dest="direction")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--threads", type=int)
    return parser


# ------------------------------------------------------------------ helpers

def _config(args):
    from .training import TrainConfig, load_config, with_overrides

    cfg = load_config(args.config) if args.config else TrainConfig()
    return with_overrides(cfg, seed=args.seed, n_r=args.nr, ray_budget=args.ray_budget,
                          threads=args.threads)


def _dataset(args):
    from .dataset import load_dataset

    if not args.dataset:
        raise UsageError("--dataset is required")
    return load_dataset(args.dataset)


def _is_checkpoint(path: Path) -> bool:
    from .formats import CHECKPOINT_MAGIC

    with open(path, "rb") as f:
        return f.read(len(CHECKPOINT_MAGIC)) == CHECKPOINT_MAGIC


def _load_scene(path):
    """Scene and (if a checkpoint) its environment."""
    from .formats import load_scene
    from .training import load_checkpoint_scene

    if not path:
        raise UsageError("--scene is required")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    if _is_checkpoint(path):
        scene, env, _ = load_checkpoint_scene(path)
        return scene, env
    return load_scene(path), None


def _write_outputs(trainer, out: Path, ckpt_name: str) -> None:
    from .formats import save_env, save_scene

    out.mkdir(parents=True, exist_ok=True)
    trainer.save(out / ckpt_name)
    save_scene(out / "scene.json", trainer.current_scene())
    save_env(out / "env.pfm", trainer.env)


def _log(rep) -> None:
    if rep.iteration % 100 == 0:
        terms = " ".join(f"{k}={v:.4g}" for k, v in rep.losses.items())
        print(f"stage {rep.stage} iter {rep.iteration} loss {rep.total:.5g} {terms}", flush=True)


# ----------------------------------------------------------------- commands

def cmd_pretrain(args) -> int:
    from .training import Trainer, estimate_base_color, init_scene

    cfg = _config(args)
    ds = _dataset(args)
    train = ds.split("train")
    if not train:
        raise ValueError("dataset has no training views")
    if args.scene:
        scene, _ = _load_scene(args.scene)
    else:
        rng = np.random.default_rng([cfg.seed, 0xA11])
        pts = ds.point_cloud()
        bounds = None
        if pts is None:
            c = np.stack([v.camera.center for v in train])
            mid = c.mean(0)
            r = 0.5 * np.linalg.norm(c - mid, axis=1).mean()
            bounds = (mid - r, mid + r)
        scene = init_scene(args.gaussians, rng, points=pts, bounds=bounds,
                           color=estimate_base_color(train))
    tr = Trainer(scene, train, cfg)
    tr.run(1, args.iters if args.iters is not None else cfg.stage1_iters, _log)
    _write_outputs(tr, Path(args.out), STAGE1_CKPT)
    print(f"wrote {Path(args.out) / STAGE1_CKPT}")
    return EXIT_OK


def cmd_train_ir(args) -> int:
    from .formats import load_env
    from .training import Trainer

    cfg = _config(args)
    ds = _dataset(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / STAGE1_CKPT
    if not ckpt.exists():
        raise FileNotFoundError(f"missing file: {ckpt}")
    tr = Trainer.load(ckpt, ds.split("train"), cfg if args.config else None)
    if not args.config:
        # flag overrides on top of the stored configuration
        from .training import with_overrides

        stored = tr.config
        tr.config = with_overrides(stored, seed=args.seed, n_r=args.nr, ray_budget=args.ray_budget,
                                   threads=args.threads)
        if tr.config.config_hash() != stored.config_hash():
            from .training import ConfigMismatchError

            raise ConfigMismatchError(f"{ckpt}: overrides change the training configuration")
    if args.env:
        tr.env = load_env(args.env, tr.config.env_resolution).requires_grad_(True)
        tr.optimizer.group("env").params[0] = tr.env.log_radiance
    tr.run(2, args.iters if args.iters is not None else tr.config.stage2_iters, _log)
    _write_outputs(tr, Path(args.out), STAGE2_CKPT)
    print(f"wrote {Path(args.out) / STAGE2_CKPT}")
    return EXIT_OK


def _views(args):
    ds = _dataset(args)
    views = ds.split(args.split) or ds.views
    return ds, views


def cmd_render(args) -> int:
    from .formats import load_env, save_image
    from .renderer import render_pbr
    from .shading import EnvCubemap

    scene, env = _load_scene(args.scene)
    if len(scene) == 0:
        raise ValueError("scene has no gaussians")
    if args.env:
        env = load_env(args.env)
    if env is None:
        env = EnvCubemap.constant(1.0)
    cfg = _config(args)
    _, views = _views(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(views):
        maps = render_pbr(scene, env, v.camera, cfg.n_r, seed=[cfg.seed, i], options=cfg.options())
        for key, img in maps.items():
            if key == "X":
                img = np.nan_to_num(img)
            save_image(out / f"{v.name}_{key}.pfm", img)
        save_image(out / f"{v.name}_pbr.png", maps["pbr"])
    print(f"rendered {len(views)} views to {out}")
    return EXIT_OK


def cmd_relight(args) -> int:
    from .formats import load_env, save_image
    from .renderer import relight_view
    from .shading import EnvSampler, build_brdf_lut, prefilter_env

    if not args.env:
        raise UsageError("relight needs --env")
    scene, _ = _load_scene(args.scene)
    if len(scene) == 0:
        raise ValueError("scene has no gaussians")
    env = load_env(args.env)
    cfg = _config(args)
    _, views = _views(args)
    pre, lut, sampler = prefilter_env(env), build_brdf_lut(), EnvSampler(env)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(views):
        img = relight_view(scene, env, v.camera, cfg.n_r, seed=[cfg.seed, i], options=cfg.options(),
                           pre=pre, lut=lut, sampler=sampler)
        save_image(out / f"{v.name}_relit.pfm", img)
        save_image(out / f"{v.name}_relit.png", img)
    print(f"relit {len(views)} views to {out}")
    return EXIT_OK


IMAGE_EXTS = (".pfm", ".png")


def _image_files(folder: Path) -> dict:
    if not folder.is_dir():
        raise FileNotFoundError(f"missing directory: {folder}")
    return {p.name: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def cmd_metrics(args) -> int:
    from .formats import load_image
    from .metrics import compare_sets

    pred, gt = _image_files(Path(args.pred)), _image_files(Path(args.gt))
    names = sorted(set(pred) & set(gt))
    if not names:
        raise FileNotFoundError("no matching image names between the two directories")
    load = lambda p: np.atleast_3d(load_image(p))[..., :3]  # noqa: E731
    rep = compare_sets([load(pred[n]) for n in names], [load(gt[n]) for n in names])
    for line in rep.lines():
        print(line)
    if args.out:
        doc = {k: (None if v is None else ("inf" if isinstance(v, float) and math.isinf(v) else v))
               for k, v in rep.as_dict().items()}
        Path(args.out).write_text(json.dumps(doc, indent=1))
    return EXIT_OK


def cmd_trace_debug(args) -> int:
    from .tracer import TraceOptions, Tracer

    scene, _ = _load_scene(args.scene)
    if len(scene) == 0:
        raise ValueError("scene has no gaussians")
    tracer = Tracer.from_scene(scene, options=TraceOptions(k=args.k, threads=args.threads))
    o = np.asarray([args.origin], dtype=np.float64)
    d = np.asarray([args.direction], dtype=np.float64)
    if not np.any(d):
        raise UsageError("--dir must be non-zero")
    res = {}
    for mode, brute in (("bvh", False), ("brute", True)):
        res[mode] = tracer.trace(o, d, record=len(scene), brute=brute)
    hits = res["bvh"].hits(0)
    print(f"{'#':>3} {'gaussian':>8} {'tau':>14} {'weight':>12}")
    for i, (gid, tau, w) in enumerate(hits):
        print(f"{i:>3} {gid:>8} {tau:>14.9f} {w:>12.6e}")
    r = res["bvh"]
    print(f"opacity {r.opacity[0]:.9f} color {np.array2string(r.color[0], precision=6)}")
    agree = hits == res["brute"].hits(0)
    print(f"brute force agrees: {'yes' if agree else 'no'}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-ir": cmd_train_ir,
    "render": cmd_render,
    "relight": cmd_relight,
    "metrics": cmd_metrics,
    "trace-debug": cmd_trace_debug,
}


def main(argv=None) -> int:
    from .dataset import DatasetError
    from .formats import FormatError
    from .training import ConfigMismatchError, NumericError

    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        if getattr(args, "threads", None):
            os.environ["SURFELTRACE_THREADS"] = str(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, FormatError, ConfigMismatchError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
