"""The training loop: seeded substreams, Adam, JSONL logging, checkpoints."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diffcore import Adam, NonFiniteError, exponential_lr
from .field import FieldModel
from .objective import TrainBatch, batch_loss, draw_step_noise
from .scenes import RayDataset, generate_dataset, load_scene, save_dataset
from .seeding import substream


class TrainingAborted(Exception):
    """Raised when a step produced non-finite values; a checkpoint survives."""

    def __init__(self, step: int, cause: Exception, checkpoint: Path):
        super().__init__(f"step {step}: {cause}; last good checkpoint at {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


def prepare_dataset(cfg: RunConfig, out_dir: Path | None = None) -> RayDataset:
    """Load a saved dataset directory, or generate one from the scene."""
    scene_path = Path(cfg.scene)
    if scene_path.is_dir() and (scene_path / "manifest.json").exists():
        from .scenes import load_dataset

        return load_dataset(scene_path)
    scene = load_scene(cfg.scene)
    rng = substream(cfg.seed, "dataset")
    dataset = generate_dataset(
        scene, cfg.train_views, cfg.test_views, cfg.resolution, rng, cfg.oracle_nodes
    )
    if out_dir is not None:
        save_dataset(dataset, out_dir / "dataset")
    return dataset


def train(cfg: RunConfig, out_dir: str | Path, dataset: RayDataset | None = None) -> FieldModel:
    """Run cfg.steps optimizer steps; writes checkpoints and a JSONL log.

    Fully determined by (cfg, dataset): every random draw comes from a
    named substream of cfg.seed. Wall-clock timing appears only in the log,
    never in checkpoints or other artifacts.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = prepare_dataset(cfg, out_dir)
    origins, dirs, colors, depths, depth_mask = dataset.flat_rays("train")
    n_rays = origins.shape[0]

    model = FieldModel.create(cfg.field_config(), substream(cfg.seed, "init"))
    opt = Adam(model.params, lr=cfg.lr)
    rng_train = substream(cfg.seed, "training")
    rng_entropy = substream(cfg.seed, "entropy")

    ckpt_path = out_dir / "model.cfnf"
    model.save(ckpt_path)  # initial checkpoint; the only one when steps == 0
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            t0 = time.perf_counter()
            idx = rng_train.integers(0, n_rays, size=cfg.batch_rays)
            batch = TrainBatch(
                origins[idx], dirs[idx], colors[idx], depths[idx], depth_mask[idx]
            )
            noise = draw_step_noise(
                model,
                cfg.batch_rays,
                cfg.nodes_per_ray,
                cfg.latent_samples,
                cfg.entropy_samples,
                dataset.bounds_lo,
                dataset.bounds_hi,
                rng_train,
                rng_entropy,
            )
            lr = exponential_lr(step, cfg.steps, cfg.lr, cfg.lr_final)
            try:
                total, breakdown = batch_loss(
                    model,
                    batch,
                    noise,
                    near=dataset.near,
                    far=dataset.far,
                    bandwidth=cfg.bandwidth,
                    lambda_entropy=cfg.lambda_entropy,
                    lambda_depth=cfg.lambda_depth,
                )
                total.backward()
                grads = {
                    name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    for name, p in model.params
                }
                opt.step(grads, lr)
            except NonFiniteError as e:
                # parameters are untouched since the last completed step
                model.save(ckpt_path)
                raise TrainingAborted(step, e, ckpt_path) from e
            entry = {"step": step, **breakdown.to_dict(), "lr": lr}
            entry["ms"] = round((time.perf_counter() - t0) * 1e3, 3)
            log.write(json.dumps(entry) + "\n")
            if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
                model.save(out_dir / f"ckpt_{step + 1:06d}.cfnf")
    model.save(ckpt_path)  # final
    return model
