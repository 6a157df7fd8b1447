"""Run configuration: defaults, validation, JSON round trip, overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .field import FieldConfig


class ConfigError(Exception):
    """Carries the full list of validation problems."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    scene: str = "two-sphere"
    seed: int = 0
    steps: int = 10_000  # desk-scale default; full runs use 100k-200k
    batch_rays: int = 512
    nodes_per_ray: int = 128
    latent_samples: int = 32
    flows: int = 4
    cond_dim: int = 64
    hidden: int = 512
    n_layers: int = 8
    skip_layer: int = 5
    freqs_x: int = 10
    freqs_d: int = 4
    lambda_entropy: float = 0.01
    lambda_depth: float = 1e-2
    entropy_samples: int = 128
    bandwidth: float = 0.05
    lr: float = 5e-4
    lr_final: float = 5e-5
    gamma: float = 0.9
    mode: str = "cfnerf"
    train_views: int = 4
    test_views: int = 2
    resolution: int = 48
    oracle_nodes: int = 2048
    checkpoint_every: int = 2000
    render_chunk: int = 4096

    def validate(self) -> list[str]:
        problems = []
        for name in (
            "steps",
            "batch_rays",
            "latent_samples",
            "flows",
            "cond_dim",
            "hidden",
            "n_layers",
            "freqs_x",
            "entropy_samples",
            "train_views",
            "test_views",
            "resolution",
            "checkpoint_every",
            "render_chunk",
        ):
            if getattr(self, name) < 1 and not (name == "steps" and self.steps == 0):
                problems.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.nodes_per_ray < 2:
            problems.append(f"nodes_per_ray must be >= 2 (got {self.nodes_per_ray})")
        if self.freqs_d < 0:
            problems.append(f"freqs_d must be >= 0 (got {self.freqs_d})")
        for name in ("lambda_entropy", "lambda_depth"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0 (got {getattr(self, name)})")
        for name in ("bandwidth", "lr", "lr_final"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0 (got {getattr(self, name)})")
        if not 0 < self.gamma < 1:
            problems.append(f"gamma must lie in (0, 1) (got {self.gamma})")
        if self.mode not in ("cfnerf", "snerf-baseline"):
            problems.append(f"mode must be 'cfnerf' or 'snerf-baseline' (got '{self.mode}')")
        if self.oracle_nodes < 1024:
            problems.append(f"oracle_nodes must be >= 1024 (got {self.oracle_nodes})")
        if self.seed < 0:
            problems.append(f"seed must be >= 0 (got {self.seed})")
        return problems

    def field_config(self) -> FieldConfig:
        return FieldConfig(
            n_flows=self.flows,
            cond_dim=self.cond_dim,
            hidden=self.hidden,
            n_layers=self.n_layers,
            skip_layer=self.skip_layer,
            freqs_x=self.freqs_x,
            freqs_d=self.freqs_d,
            gamma=self.gamma,
            mode=self.mode,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"unknown config key '{k}'" for k in sorted(unknown)])
        return RunConfig(**d)

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError([f"config {path} is not valid JSON: {e}"]) from e
        return RunConfig.from_dict(raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def apply_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply `key=value` strings; values parse as JSON, else raw string."""
        d = self.to_dict()
        problems = []
        types = {f.name: f.type for f in fields(RunConfig)}
        for item in overrides:
            if "=" not in item:
                problems.append(f"override '{item}' is not key=value")
                continue
            key, _, raw = item.partition("=")
            key = key.strip()
            if key not in d:
                problems.append(f"unknown config key '{key}'")
                continue
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            want = types[key]
            try:
                if want == "int":
                    value = int(value)
                elif want == "float":
                    value = float(value)
                elif want == "str":
                    value = str(value)
            except (TypeError, ValueError):
                problems.append(f"cannot coerce '{raw}' for key '{key}'")
                continue
            d[key] = value
        if problems:
            raise ConfigError(problems)
        return RunConfig.from_dict(d)
