"""Model evaluation over a dataset's test split: metrics, curves, maps."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import imgio
from .field import FieldModel
from .metrics import (
    MetricReport,
    SparsificationCurve,
    ViewMetrics,
    depth_errors,
    nll_metric,
    psnr,
    sparsification,
    ssim,
)
from .render import render_image
from .scenes import RayDataset
from .seeding import substream


def evaluate_model(
    model: FieldModel,
    dataset: RayDataset,
    k: int,
    *,
    n_nodes: int,
    bandwidth: float,
    seed: int = 0,
    chunk: int = 4096,
    notes: dict | None = None,
) -> tuple[MetricReport, dict[str, SparsificationCurve], list[dict]]:
    """Render every test view and score quality plus uncertainty calibration.

    Returns (report, curves, per-view render payloads). Curves cover RGB
    and depth errors in both absolute and squared flavors, pooled over all
    test-view pixels (depth curves over non-vacuum pixels only).
    """
    test_views = dataset.split_views("test")
    if not test_views:
        raise ValueError("dataset has no test split")
    rng = substream(seed, "rendering")
    if model.cfg.mode == "cfnerf":
        latents = model.draw_latent_noise(k, rng)
    else:
        latents = None

    per_view = []
    renders = []
    rgb_err_sq, rgb_err_abs, rgb_unc = [], [], []
    dep_err_sq, dep_err_abs, dep_unc = [], [], []
    for i, view in enumerate(test_views):
        out = render_image(
            model,
            view.camera,
            latents,
            n_nodes,
            chunk=chunk,
            factorized_noise_rng=substream(seed, f"rendering.noise.{i}"),
            k=k,
        )
        renders.append(out)
        gt = view.image
        pred = out["color_mean"]
        nll = nll_metric(
            gt.reshape(-1, 3), out["color_samples"].reshape(-1, k, 3), bandwidth
        )
        mask = (view.depth > 0) & (out["depth_mean"] > 1e-9)
        if mask.any():
            disp_pred = 1.0 / out["depth_mean"][mask]
            disp_gt = 1.0 / view.depth[mask]
            rmse, mae, d1, d2, d3 = depth_errors(disp_pred, disp_gt, np.ones(mask.sum(), bool))
        else:
            rmse = mae = float("nan")
            d1 = d2 = d3 = float("nan")
        per_view.append(
            ViewMetrics(
                name=f"test_{i:03d}",
                psnr=psnr(pred, gt),
                ssim=ssim(pred, gt),
                nll=nll,
                depth_rmse=rmse,
                depth_mae=mae,
                delta1=d1,
                delta2=d2,
                delta3=d3,
            )
        )
        diff = pred - gt
        rgb_err_sq.append((diff**2).mean(axis=-1).reshape(-1))
        rgb_err_abs.append(np.abs(diff).mean(axis=-1).reshape(-1))
        rgb_unc.append(out["color_var"].mean(axis=-1).reshape(-1))
        if mask.any():
            ddiff = 1.0 / out["depth_mean"][mask] - 1.0 / view.depth[mask]
            dep_err_sq.append(ddiff**2)
            dep_err_abs.append(np.abs(ddiff))
            dep_unc.append(out["depth_var"][mask])

    rgb_err_sq = np.concatenate(rgb_err_sq)
    rgb_err_abs = np.concatenate(rgb_err_abs)
    rgb_unc = np.concatenate(rgb_unc)
    curves = {}
    curve_rmse, ause_rmse = sparsification(rgb_err_sq, rgb_unc)
    curve_mae, ause_mae = sparsification(rgb_err_abs, rgb_unc)
    curves["rgb_rmse"] = curve_rmse
    curves["rgb_mae"] = curve_mae
    if dep_err_sq:
        dep_err_sq = np.concatenate(dep_err_sq)
        dep_err_abs = np.concatenate(dep_err_abs)
        dep_unc = np.concatenate(dep_unc)
        curve_d_rmse, dep_ause_rmse = sparsification(dep_err_sq, dep_unc)
        curve_d_mae, dep_ause_mae = sparsification(dep_err_abs, dep_unc)
        curves["depth_rmse"] = curve_d_rmse
        curves["depth_mae"] = curve_d_mae
    else:
        dep_ause_rmse = dep_ause_mae = float("nan")

    def _agg(vals):
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    report = MetricReport(
        psnr=_agg([v.psnr for v in per_view]),
        ssim=_agg([v.ssim for v in per_view]),
        rmse=_agg([v.depth_rmse for v in per_view]),
        mae=_agg([v.depth_mae for v in per_view]),
        delta1=_agg([v.delta1 for v in per_view]),
        delta2=_agg([v.delta2 for v in per_view]),
        delta3=_agg([v.delta3 for v in per_view]),
        nll=_agg([v.nll for v in per_view]),
        ause_rmse=ause_rmse,
        ause_mae=ause_mae,
        depth_ause_rmse=dep_ause_rmse,
        depth_ause_mae=dep_ause_mae,
        bandwidth=bandwidth,
        notes=notes or {},
        per_view=per_view,
    )
    return report, curves, renders


def export_evaluation(
    out_dir: str | Path,
    report: MetricReport,
    curves: dict[str, SparsificationCurve],
    renders: list[dict],
    dataset: RayDataset,
) -> None:
    """Write report JSON, curve CSVs, and per-view error/uncertainty maps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    for name, curve in curves.items():
        curve.write_csv(out_dir / f"sparsification_{name}.csv")
    map_meta = {}
    for i, (view, out) in enumerate(zip(dataset.split_views("test"), renders)):
        err = np.sqrt(((out["color_mean"] - view.image) ** 2).mean(axis=-1))
        unc = out["color_var"].mean(axis=-1)
        for tag, values in (
            ("error", err),
            ("uncertainty", unc),
            ("depth_error", np.abs(out["depth_mean"] - view.depth)),
            ("depth_uncertainty", out["depth_var"]),
        ):
            fname = f"test_{i:03d}_{tag}.png"
            vmin, vmax = imgio.write_heatmap(out_dir / fname, values)
            map_meta[fname] = {"vmin": vmin, "vmax": vmax}
        imgio.write_png(out_dir / f"test_{i:03d}_pred.png", out["color_mean"])
    (out_dir / "maps.json").write_text(json.dumps(map_meta, indent=2) + "\n")
