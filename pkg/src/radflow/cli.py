"""Command-line entry point.

Subcommands: train, render, evaluate, interpolate, gradcheck. Every
command is a pure function of (config, seed, inputs on disk); reruns with
the same seed produce bit-identical checkpoints, maps, and reports.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import imgio
from .config import ConfigError, RunConfig
from .diffcore import (
    CheckpointError,
    DiffcoreError,
    ValueGraph,
    grad_check,
)
from .evaluation import evaluate_model, export_evaluation
from .field import FieldModel, latent_interpolate, prior_sample
from .imgio import ImageIOError
from .objective import TrainBatch, batch_loss, draw_step_noise
from .render import Camera, render_image
from .scenes import load_dataset, load_scene, arc_camera, default_focal
from .seeding import substream
from .trainer import TrainingAborted, prepare_dataset, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DESK_SCALE_NOTE = "desk-scale defaults (10k steps); reference full-scale runs use 100k-200k"


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.override:
        cfg = cfg.apply_overrides(args.override)
    if args.seed is not None:
        cfg = cfg.apply_overrides([f"seed={args.seed}"])
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_camera_spec(path: str | Path) -> Camera:
    """Camera from a JSON spec: either an explicit pose or an arc shorthand.

    Explicit: {"pose": [16 floats row-major], "focal", "width", "height",
    "near", "far"}. Shorthand: {"scene": name-or-path, "azimuth_deg",
    "resolution", optional "focal"}.
    """
    d = json.loads(Path(path).read_text())
    if "pose" in d:
        return Camera.from_pose(
            np.asarray(d["pose"], dtype=np.float64).reshape(4, 4),
            float(d["focal"]),
            int(d["width"]),
            int(d["height"]),
            float(d["near"]),
            float(d["far"]),
        )
    scene = load_scene(d["scene"])
    res = int(d["resolution"])
    focal = float(d.get("focal", default_focal(res)))
    return arc_camera(scene, float(d["azimuth_deg"]), res, res, focal)


def _render_outputs(out_dir: Path, result: dict, stem: str = "") -> None:
    prefix = f"{stem}_" if stem else ""
    imgio.write_png(out_dir / f"{prefix}color.png", result["color_mean"])
    imgio.write_pfm(out_dir / f"{prefix}depth.pfm", result["depth_mean"])
    imgio.write_pfm(out_dir / f"{prefix}color_var.pfm", result["color_var"].mean(axis=-1))
    imgio.write_pfm(out_dir / f"{prefix}depth_var.pfm", result["depth_var"])


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    model = train(cfg, out_dir)
    n_params = sum(p.data.size for _, p in model.params)
    print(f"trained {cfg.steps} steps ({n_params} parameters) -> {out_dir / 'model.cfnf'}")
    return EXIT_OK


def cmd_render(args) -> int:
    model = FieldModel.load(args.checkpoint)
    camera = load_camera_spec(args.camera)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = substream(args.seed or 0, "rendering")
    latents = model.draw_latent_noise(args.samples, rng) if model.cfg.mode == "cfnerf" else None
    result = render_image(
        model,
        camera,
        latents,
        args.nodes,
        chunk=args.chunk,
        factorized_noise_rng=substream(args.seed or 0, "rendering.noise"),
        k=args.samples,
    )
    _render_outputs(out_dir, result)
    (out_dir / "render.json").write_text(
        json.dumps(
            {
                "checkpoint": str(args.checkpoint),
                "samples": args.samples,
                "nodes": args.nodes,
                "seed": args.seed or 0,
                "note": DESK_SCALE_NOTE,
            },
            indent=2,
        )
        + "\n"
    )
    print(f"rendered {camera.width}x{camera.height} x{args.samples} samples -> {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = FieldModel.load(args.checkpoint)
    dataset = load_dataset(args.dataset)
    report, curves, renders = evaluate_model(
        model,
        dataset,
        args.samples,
        n_nodes=args.nodes,
        bandwidth=args.bandwidth,
        seed=args.seed or 0,
        chunk=args.chunk,
        notes={
            "checkpoint": str(args.checkpoint),
            "samples": args.samples,
            "nodes": args.nodes,
            "eval_bandwidth": args.bandwidth,
            "scale": DESK_SCALE_NOTE,
        },
    )
    out_dir = Path(args.out)
    export_evaluation(out_dir, report, curves, renders, dataset)
    print(
        f"psnr {report.psnr:.2f} dB  ssim {report.ssim:.4f}  nll {report.nll:.3f}  "
        f"ause_rmse {report.ause_rmse:.4f} -> {out_dir / 'report.json'}"
    )
    return EXIT_OK


def cmd_interpolate(args) -> int:
    if args.frames < 2:
        raise ConfigError(["interpolation needs at least 2 frames"])
    model = FieldModel.load(args.checkpoint)
    if model.cfg.mode != "cfnerf":
        raise ConfigError(["latent interpolation requires a cfnerf-mode checkpoint"])
    camera = load_camera_spec(args.camera)
    try:
        s1, s2 = (int(s) for s in args.seeds.split(","))
    except ValueError as e:
        raise ConfigError([f"--seeds must be 'S1,S2' integers (got '{args.seeds}')"]) from e
    z1 = prior_sample(model.params, 1, substream(s1, "interpolate"))[0]
    z2 = prior_sample(model.params, 1, substream(s2, "interpolate"))[0]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.frames):
        lam = i / (args.frames - 1)
        z = latent_interpolate(z1, z2, lam)
        eps = model.eps_from_z(z).reshape(1, -1)
        result = render_image(model, camera, eps, args.nodes, chunk=args.chunk)
        imgio.write_png(out_dir / f"frame_{i:03d}.png", result["color_mean"])
        imgio.write_pfm(out_dir / f"frame_{i:03d}_depth.pfm", result["depth_mean"])
    print(f"wrote {args.frames} interpolation frames -> {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.json")
    dataset = prepare_dataset(cfg)
    origins, dirs, colors, depths, depth_mask = dataset.flat_rays("train")
    rng = substream(cfg.seed, "training")
    idx = rng.integers(0, origins.shape[0], size=cfg.batch_rays)
    batch = TrainBatch(origins[idx], dirs[idx], colors[idx], depths[idx], depth_mask[idx])
    model = FieldModel.create(cfg.field_config(), substream(cfg.seed, "init"))
    noise = draw_step_noise(
        model,
        cfg.batch_rays,
        cfg.nodes_per_ray,
        cfg.latent_samples,
        cfg.entropy_samples,
        dataset.bounds_lo,
        dataset.bounds_hi,
        rng,
        substream(cfg.seed, "entropy"),
    )

    def build(params, inputs):
        total, _ = batch_loss(
            model,
            batch,
            noise,
            near=dataset.near,
            far=dataset.far,
            bandwidth=cfg.bandwidth,
            lambda_entropy=cfg.lambda_entropy,
            lambda_depth=cfg.lambda_depth,
        )
        return total

    graph = ValueGraph(model.params, build)
    report = grad_check(graph, tolerance=args.tolerance, max_entries_per_param=args.max_entries)
    print(report.summary())
    if out_dir:
        (out_dir / "gradcheck.json").write_text(
            json.dumps(
                {
                    "passed": report.passed,
                    "max_rel_err": report.max_rel_err,
                    "tolerance": report.tolerance,
                    "per_param": {
                        pc.name: pc.max_rel_err for pc in report.per_param
                    },
                },
                indent=2,
            )
            + "\n"
        )
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radflow",
        description="Probabilistic radiance fields: train, render with uncertainty, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override, repeatable",
        )

    p_train = sub.add_parser("train", help="train a model on a scene")
    add_config_flags(p_train)
    p_train.add_argument("--out", type=str, required=True)
    p_train.set_defaults(func=cmd_train)

    p_render = sub.add_parser("render", help="render color/depth/uncertainty maps")
    p_render.add_argument("--checkpoint", type=str, required=True)
    p_render.add_argument("--camera", type=str, required=True, help="camera spec JSON")
    p_render.add_argument("--samples", type=int, default=32)
    p_render.add_argument("--nodes", type=int, default=128)
    p_render.add_argument("--chunk", type=int, default=4096)
    p_render.add_argument("--seed", type=int, default=0)
    p_render.add_argument("--out", type=str, required=True)
    p_render.set_defaults(func=cmd_render)

    p_eval = sub.add_parser("evaluate", help="metric report over a dataset's test split")
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.add_argument("--dataset", type=str, required=True)
    p_eval.add_argument("--samples", type=int, default=32)
    p_eval.add_argument("--nodes", type=int, default=128)
    p_eval.add_argument("--bandwidth", type=float, default=0.05)
    p_eval.add_argument("--chunk", type=int, default=4096)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", type=str, required=True)
    p_eval.set_defaults(func=cmd_evaluate)

    p_interp = sub.add_parser("interpolate", help="render a latent-interpolation sequence")
    p_interp.add_argument("--checkpoint", type=str, required=True)
    p_interp.add_argument("--camera", type=str, required=True)
    p_interp.add_argument("--seeds", type=str, required=True, metavar="S1,S2")
    p_interp.add_argument("--frames", type=int, default=8)
    p_interp.add_argument("--nodes", type=int, default=128)
    p_interp.add_argument("--chunk", type=int, default=4096)
    p_interp.add_argument("--out", type=str, required=True)
    p_interp.set_defaults(func=cmd_interpolate)

    p_gc = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    add_config_flags(p_gc)
    p_gc.add_argument("--tolerance", type=float, default=1e-4)
    p_gc.add_argument("--max-entries", type=int, default=None, dest="max_entries")
    p_gc.add_argument("--out", type=str, default=None)
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except DiffcoreError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ImageIOError, json.JSONDecodeError, ValueError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
