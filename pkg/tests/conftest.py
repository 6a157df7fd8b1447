"""Shared fixtures: a micro training run reused by CLI and evaluation tests."""

import json

import numpy as np
import pytest

from radflow.cli import main

MICRO_OVERRIDES = [
    "steps=25",
    "batch_rays=8",
    "nodes_per_ray=8",
    "latent_samples=2",
    "flows=2",
    "cond_dim=6",
    "hidden=12",
    "n_layers=2",
    "freqs_x=2",
    "freqs_d=1",
    "entropy_samples=4",
    "train_views=2",
    "test_views=1",
    "resolution=12",
    "oracle_nodes=1024",
    "checkpoint_every=10",
]


def micro_args(extra=()):
    args = []
    for ov in MICRO_OVERRIDES + list(extra):
        args += ["--override", ov]
    return args


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """A completed micro `train` invocation: returns its output directory."""
    out = tmp_path_factory.mktemp("micro_run")
    rc = main(["train", "--out", str(out), "--seed", "5"] + micro_args())
    assert rc == 0
    return out


@pytest.fixture(scope="session")
def micro_camera_spec(tmp_path_factory):
    path = tmp_path_factory.mktemp("cam") / "camera.json"
    path.write_text(
        json.dumps({"scene": "two-sphere", "azimuth_deg": 50.0, "resolution": 12})
    )
    return path
