"""Run configuration with the published defaults.

Full-scale defaults (8 views at 2 m, 35 degree fov, 25 steps, CFG 12,
resolution 1280) describe the real-model deployment through the bridge. The
synthetic backend works in value space directly (identity autoencoder), so
`desk_defaults` shrinks resolutions until a run takes seconds on a CPU.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class RunConfig:
    mesh: str = ""
    prompt: str = ""
    backend: str = "synthetic"  # "synthetic" or a bridge URL
    seed: int = 0
    out_dir: str = "out"
    target: str = "ramp"  # synthetic backend's analytic target

    # denoising
    steps: int = 25
    resolution: int = 1280  # decoded image resolution (bridge path)
    latent_resolution: int = 64
    channels: int = 3
    cfg_scale: float = 12.0
    skip_merge_last: int = 5
    replace_attention_steps: int = 3

    # view weights
    gamma: float = 8.0
    omega_min: float = 1e-3
    interp_steps: int = 8

    # attention bias
    o: float = 2.0
    r: float = 20.0
    delta: float = 0.1
    attended: str = "all"
    bias_resolutions: tuple[int, ...] = (16,)

    # cameras
    n_views: int = 8
    camera_distance: float = 2.0
    fov_deg: float = 35.0
    elevation_deg: float = 0.0

    # texture spaces and resampling
    latent_texture_resolution: int = 128
    texture_resolution: int = 256
    eps_z: float = 1e-3
    filter: str = "bilinear"
    uv_gate_texels: float | None = None

    # dilation
    dilation_grid: int = 64
    dilation_dist: float = 0.02
    dilation_angle_deg: float = 90.0
    dilation_knn: int = 30
    dilation_iters: int = 10
    fallback_color: float = 0.5

    # artifact dumps
    dump_maps: bool = False
    dump_biases: bool = False
    dump_trace: bool = False

    def validate(self) -> None:
        if self.backend == "synthetic" and self.seed is None:
            raise ValueError("synthetic backend requires a seed")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bias_resolutions"] = list(self.bias_resolutions)
        return d


def desk_defaults(**overrides) -> RunConfig:
    """Desk-scale synthetic preset: value-space latents at 64, seconds-fast."""
    cfg = RunConfig(
        backend="synthetic",
        resolution=64,
        latent_resolution=64,
        latent_texture_resolution=128,
        texture_resolution=256,
    )
    return dataclasses.replace(cfg, **overrides)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def load_config(path: str | Path) -> RunConfig:
    """Load RunConfig from JSON or TOML (decided by extension)."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        import tomllib

        raw = tomllib.loads(path.read_text())
    else:
        raw = json.loads(path.read_text())
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - set(_FIELD_TYPES)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "bias_resolutions" in raw:
        raw = dict(raw)
        raw["bias_resolutions"] = tuple(raw["bias_resolutions"])
    cfg = RunConfig(**raw)
    cfg.validate()
    return cfg
