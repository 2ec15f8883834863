"""Command-line entry points.

Subcommands:
  run        mesh + prompt -> texture via the full denoising pipeline
  bake       merge + dilate already-generated view images (no diffusion)
  dump-bias  write attention bias matrices and heatmaps for inspection
  dilate     run surface-space dilation standalone on dumped UV maps

Every run writes a manifest with the exact configuration and sha256 hashes
of its artifacts; replaying the manifest reproduces the hashes bit-for-bit.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import attention, finalize, meshes, raster, wire
from .backends import (
    NAMED_TARGETS,
    BackendError,
    RemoteBackend,
    SyntheticBackend,
)
from .cameras import make_camera_ring
from .config import RunConfig, config_from_dict, load_config
from .finalize import DilationParams
from .pipeline import PipelineError, run_pipeline

BRIDGE_ENV = "SURFTEX_BRIDGE_URL"

_EXIT_CODES = {"mesh-core": 2, "backend": 3}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_mesh(path: str) -> meshes.Mesh:
    try:
        mesh = meshes.load_obj(path)
        return meshes.normalize_mesh(mesh)
    except (OSError, meshes.MeshError) as exc:
        raise StageError("mesh-core", str(exc)) from exc


def _make_backend(cfg: RunConfig):
    if cfg.backend == "synthetic":
        if cfg.target not in NAMED_TARGETS:
            raise StageError("config", f"unknown synthetic target {cfg.target!r}")
        return SyntheticBackend(NAMED_TARGETS[cfg.target])
    backend = RemoteBackend(cfg.backend)
    try:
        backend.health()
    except BackendError as exc:
        raise StageError("backend", str(exc)) from exc
    return backend


def _dilation_params(cfg: RunConfig) -> DilationParams:
    return DilationParams(
        grid_size=cfg.dilation_grid,
        dist_threshold=cfg.dilation_dist,
        angle_threshold_deg=cfg.dilation_angle_deg,
        knn=cfg.dilation_knn,
        iterations=cfg.dilation_iters,
    )


def run(cfg: RunConfig) -> dict:
    """Full pipeline run; returns the manifest dict."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    mesh = _load_mesh(cfg.mesh)
    backend = _make_backend(cfg)
    cameras = make_camera_ring(
        cfg.n_views,
        distance=cfg.camera_distance,
        fov_deg=cfg.fov_deg,
        resolution=cfg.latent_resolution,
        elevation_deg=cfg.elevation_deg,
    )
    try:
        result = run_pipeline(
            mesh, cameras, backend, cfg, collect_trace=cfg.dump_trace
        )
    except PipelineError as exc:
        raise StageError(exc.stage, str(exc)) from exc

    # identity decode on the synthetic path: images are the final latents
    images = [result.latents[i] for i in range(len(cameras))]
    texture, valid, report = finalize.finalize_texture(
        images,
        mesh,
        cameras,
        tex_res=cfg.texture_resolution,
        gamma=cfg.gamma,
        omega_min=cfg.omega_min,
        eps_z=cfg.eps_z,
        filter=cfg.filter,
        params=_dilation_params(cfg),
        fallback_color=cfg.fallback_color,
    )

    artifacts: dict[str, str] = {}

    def emit(name: str, writer) -> None:
        path = out / name
        writer(path)
        artifacts[name] = _sha256(path)

    emit("texture.twtf", lambda p: wire.save_twtf(p, texture))
    emit("texture.png", lambda p: wire.save_png(p, texture, lo=0.0, hi=1.0))
    for i, img in enumerate(images):
        emit(f"view_{i:02d}.png", lambda p, im=img: wire.save_png(p, im, lo=0.0, hi=1.0))
    emit(
        "dilation_report.json",
        lambda p: p.write_text(json.dumps(report.as_dict(), indent=2)),
    )
    if cfg.dump_maps:
        geo = result.geometry
        for i, m in enumerate(geo.maps):
            emit(f"maps_position_{i:02d}.twtf", lambda p, mm=m: wire.save_twtf(p, mm.position))
            emit(f"maps_depth_{i:02d}.twtf", lambda p, mm=m: wire.save_twtf(p, mm.depth))
            emit(f"maps_cosine_{i:02d}.png", lambda p, mm=m: wire.save_png(p, mm.cosine, 0.0, 1.0))
    if cfg.dump_biases and result.geometry.biases:
        for (v, res), bias in sorted(result.geometry.biases.items()):
            name = f"bias_v{v}_r{res}.twtf"
            emit(name, lambda p, b=bias: attention.save_bias(b, p))
            artifacts[name[:-5] + ".json"] = _sha256(out / (name[:-5] + ".json"))

    manifest = {
        "kind": "surftex-run",
        "config": cfg.as_dict(),
        "artifacts": artifacts,
        "elapsed_s": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def bake_only(
    images: list[np.ndarray], cameras, mesh: meshes.Mesh, cfg: RunConfig
) -> tuple[np.ndarray, np.ndarray, finalize.DilationReport]:
    """Merge + dilate pre-rendered images; no diffusion."""
    if len(images) != len(cameras):
        raise StageError(
            "bake", f"{len(images)} images but {len(cameras)} cameras in manifest"
        )
    return finalize.finalize_texture(
        images,
        mesh,
        cameras,
        tex_res=cfg.texture_resolution,
        gamma=cfg.gamma,
        omega_min=cfg.omega_min,
        eps_z=cfg.eps_z,
        filter=cfg.filter,
        params=_dilation_params(cfg),
        fallback_color=cfg.fallback_color,
    )


def dump_bias(
    mesh: meshes.Mesh,
    cameras,
    resolution: int,
    params: attention.BiasParams,
    out_dir: Path,
    query_patch: int | None = None,
    attended: str = "all",
) -> list[Path]:
    """Write per-view bias matrices (TWTF + sidecar) and, for a chosen query
    patch, a per-view heatmap PNG of its weight row."""
    maps = [raster.render_maps(mesh, c) for c in cameras]
    sets = attention.attended_sets(len(cameras), attended)
    biases = attention.build_view_biases(maps, sets, [resolution], params)
    written = []
    for (v, res), bias in sorted(biases.items()):
        path = out_dir / f"bias_v{v}_r{res}.twtf"
        attention.save_bias(bias, path)
        written.append(path)
        if query_patch is not None:
            n_q = bias.entries.shape[0]
            if not 0 <= query_patch < n_q:
                raise StageError(
                    "dump-bias", f"query patch {query_patch} out of range [0, {n_q})"
                )
            row = bias.entries[query_patch]
            heat = row.reshape(len(sets[v]), res, res)
            heat = np.concatenate(list(heat), axis=1)  # attended views side by side
            img_path = out_dir / f"bias_v{v}_r{res}_q{query_patch}.png"
            display = np.where(heat <= attention.NEG_INF / 2, np.log(params.delta) - 1.0, heat)
            wire.save_png(img_path, display)
            written.append(img_path)
    return written


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML RunConfig file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable)")


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    raw = cfg.as_dict()
    for item in args.set:
        if "=" not in item:
            raise StageError("config", f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if key not in raw:
            raise StageError("config", f"unknown config key {key!r}")
        current = raw[key]
        if isinstance(current, bool):
            raw[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int) and not isinstance(current, bool):
            raw[key] = int(value)
        elif isinstance(current, float):
            raw[key] = float(value)
        elif isinstance(current, (list, tuple)):
            raw[key] = [int(x) for x in value.split(",") if x]
        elif current is None:
            raw[key] = None if value.lower() == "none" else float(value)
        else:
            raw[key] = value
    env_bridge = os.environ.get(BRIDGE_ENV)
    if env_bridge and raw.get("backend") not in ("synthetic",):
        raw["backend"] = env_bridge if raw["backend"] in ("", "remote") else raw["backend"]
    return config_from_dict(raw)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="surftex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full pipeline: mesh + prompt -> texture")
    _add_config_args(p_run)
    p_run.add_argument("--mesh", help="OBJ path (overrides config)")
    p_run.add_argument("--prompt", help="text prompt")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out", help="output directory")
    p_run.add_argument("--backend", help='"synthetic" or bridge URL')
    p_run.add_argument("--desk", action="store_true",
                       help="use desk-scale synthetic defaults")

    p_bake = sub.add_parser("bake", help="merge + dilate existing view images")
    _add_config_args(p_bake)
    p_bake.add_argument("--mesh", required=True)
    p_bake.add_argument("--cameras", required=True,
                        help="JSON manifest with a 'cameras' list")
    p_bake.add_argument("--images", nargs="+", required=True,
                        help="PNG or TWTF view images, camera order")
    p_bake.add_argument("--out", default="out")

    p_bias = sub.add_parser("dump-bias", help="write bias matrices + heatmaps")
    _add_config_args(p_bias)
    p_bias.add_argument("--mesh", required=True)
    p_bias.add_argument("--resolution", type=int, default=16)
    p_bias.add_argument("--query-patch", type=int, default=None)
    p_bias.add_argument("--out", default="out")

    p_dil = sub.add_parser("dilate", help="surface-space dilation on dumped UV maps")
    _add_config_args(p_dil)
    p_dil.add_argument("--mesh", required=True)
    p_dil.add_argument("--texture", required=True, help="TWTF or PNG texture")
    p_dil.add_argument("--visibility", required=True, help="TWTF 0/1 visibility map")
    p_dil.add_argument("--out", default="out")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except StageError as exc:
        payload = {"stage": exc.stage, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return _EXIT_CODES.get(exc.stage, 1)


def _dispatch(args) -> int:
    cfg = _build_config(args)
    if args.command == "run":
        if args.desk:
            from .config import desk_defaults

            base = desk_defaults()
            merged = base.as_dict()
            merged.update({k: v for k, v in cfg.as_dict().items()
                           if v != RunConfig.__dataclass_fields__[k].default
                           and k in merged})
            cfg = config_from_dict(merged)
        if args.mesh:
            cfg.mesh = args.mesh
        if args.prompt is not None:
            cfg.prompt = args.prompt
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        if args.backend:
            cfg.backend = args.backend
        if cfg.backend == "remote":
            cfg.backend = os.environ.get(BRIDGE_ENV, cfg.backend)
        if not cfg.mesh:
            raise StageError("config", "no mesh given (--mesh or config file)")
        manifest = run(cfg)
        print(json.dumps({"ok": True, "artifacts": sorted(manifest["artifacts"])}, indent=2))
        return 0

    if args.command == "bake":
        mesh = _load_mesh(args.mesh)
        cam_spec = json.loads(Path(args.cameras).read_text())
        from .cameras import ViewCamera

        cameras = [
            ViewCamera(
                azimuth_deg=c["azimuth_deg"],
                elevation_deg=c.get("elevation_deg", 0.0),
                distance=c.get("distance", cfg.camera_distance),
                fov_deg=c.get("fov_deg", cfg.fov_deg),
                resolution=c.get("resolution", cfg.resolution),
            )
            for c in cam_spec["cameras"]
        ]
        images = []
        for path in args.images:
            if path.endswith(".twtf"):
                images.append(wire.load_twtf(path).astype(np.float64))
            else:
                images.append(wire.load_png(path))
        texture, valid, report = bake_only(images, cameras, mesh, cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        wire.save_twtf(out / "texture.twtf", texture)
        wire.save_png(out / "texture.png", texture, 0.0, 1.0)
        (out / "dilation_report.json").write_text(json.dumps(report.as_dict(), indent=2))
        print(json.dumps({"ok": True, **report.as_dict()}))
        return 0

    if args.command == "dump-bias":
        mesh = _load_mesh(args.mesh)
        cameras = make_camera_ring(
            cfg.n_views, cfg.camera_distance, cfg.fov_deg,
            resolution=args.resolution * 4, elevation_deg=cfg.elevation_deg,
        )
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        params = attention.BiasParams(o=cfg.o, r=cfg.r, delta=cfg.delta)
        written = dump_bias(
            mesh, cameras, args.resolution, params, out,
            query_patch=args.query_patch, attended=cfg.attended,
        )
        print(json.dumps({"ok": True, "files": [str(p) for p in written]}, indent=2))
        return 0

    if args.command == "dilate":
        mesh = _load_mesh(args.mesh)
        tex = (
            wire.load_twtf(args.texture).astype(np.float64)
            if args.texture.endswith(".twtf")
            else wire.load_png(args.texture)
        )
        visibility = wire.load_twtf(args.visibility) > 0.5
        uvmaps = raster.render_uv_space_maps(mesh, tex.shape[0])
        index = finalize.build_subisland_index(uvmaps, mesh, cfg.dilation_grid)
        filled, new_valid, report = finalize.dilate(
            tex, uvmaps, visibility, index, _dilation_params(cfg)
        )
        unreachable = uvmaps.valid & ~new_valid
        filled[unreachable] = cfg.fallback_color
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        wire.save_twtf(out / "texture_dilated.twtf", filled)
        wire.save_png(out / "texture_dilated.png", filled, 0.0, 1.0)
        (out / "dilation_report.json").write_text(json.dumps(report.as_dict(), indent=2))
        print(json.dumps({"ok": True, **report.as_dict()}))
        return 0

    raise StageError("config", f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
