"""The per-step latent merge loop.

Each denoising step runs: predict noise for all views (with attention biases
attached), estimate the denoised views, pull them back into texture space,
merge them with view-dependent weights, step the latent texture, re-render
it, and blend the rendered foreground into each view's own stepped latent.
The merge/re-render path is skipped for the last few steps so low-resolution
reprojection cannot stamp artifacts into the nearly-converged images.

All randomness flows through one injected generator with a fixed draw order
(per step: texture noise first when merging, then per-view image noise), so
a seed pins the entire trajectory bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention, raster, scheduler
from .backends import DenoiseBackend, DenoiseRequest, attach_attention_hooks
from .cameras import ViewCamera, angles_to_reference
from .meshes import Mesh


@dataclass
class ViewGeometry:
    """Static per-view structures reused across all steps."""

    cameras: list[ViewCamera]
    maps: list[raster.RenderedMaps]  # at latent resolution
    uvmaps: raster.UVMaps  # at latent-texture resolution
    gather: list[raster.GatherTable]
    render: list[raster.RenderTable]
    coverage: list[np.ndarray]  # (T, T) bool per view
    cos_tex: list[np.ndarray]  # (T, T) texel cosine toward each view
    thetas: np.ndarray
    position_maps: np.ndarray  # (N, H, W, 3)
    fg_masks: np.ndarray  # (N, H, W)
    depth_maps: np.ndarray  # (N, H, W)
    biases: dict[tuple[int, int], attention.BiasMatrix] | None


def build_view_geometry(
    mesh: Mesh,
    cameras: list[ViewCamera],
    latent_res: int,
    tex_res: int,
    eps_z: float = raster.DEFAULT_EPS_Z,
    filter: str = "bilinear",
    uv_gate_texels: float | None = None,
    bias_resolutions: tuple[int, ...] = (),
    bias_params: attention.BiasParams = attention.BiasParams(),
    attended_scheme: str = "all",
) -> ViewGeometry:
    cams = [c.with_resolution(latent_res) for c in cameras]
    maps = [raster.render_maps(mesh, c) for c in cams]
    uvmaps = raster.render_uv_space_maps(mesh, tex_res)
    gather = [
        raster.build_gather_table(
            uvmaps, m, c, eps_z=eps_z, filter=filter, uv_gate_texels=uv_gate_texels
        )
        for m, c in zip(maps, cams)
    ]
    coverage = [g.covered for g in gather]
    cos_tex = []
    for g in gather:
        cm = np.zeros((tex_res, tex_res))
        cm[g.tex_rows, g.tex_cols] = g.cosine
        cos_tex.append(cm)
    uvmaps.visibility = np.logical_or.reduce(coverage) if coverage else uvmaps.visibility

    biases = None
    if bias_resolutions:
        attended = attention.attended_sets(len(cams), attended_scheme)
        biases = attention.build_view_biases(
            maps, attended, list(bias_resolutions), bias_params
        )

    valid = uvmaps.valid
    render = [
        raster.build_render_table(m, tex_res, tex_valid=valid, filter=filter)
        for m in maps
    ]
    return ViewGeometry(
        cameras=cams,
        maps=maps,
        uvmaps=uvmaps,
        gather=gather,
        render=render,
        coverage=coverage,
        cos_tex=cos_tex,
        thetas=angles_to_reference(cams),
        position_maps=np.stack([m.position for m in maps]),
        fg_masks=np.stack([m.fg_mask for m in maps]),
        depth_maps=np.stack([m.depth for m in maps]),
        biases=biases,
    )


@dataclass
class PipelineTrace:
    omegas: list[np.ndarray] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)
    merged: list[np.ndarray] = field(default_factory=list)
    merge_coverage: list[float] = field(default_factory=list)


@dataclass
class PipelineResult:
    latents: np.ndarray  # (N, H, W, C) final z_0 per view
    texture: scheduler.LatentTexture  # final latent texture state U
    geometry: ViewGeometry
    schedule: scheduler.NoiseSchedule
    trace: PipelineTrace | None


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def run_pipeline(
    mesh: Mesh,
    cameras: list[ViewCamera],
    backend: DenoiseBackend,
    config,
    rng: np.random.Generator | None = None,
    collect_trace: bool = False,
) -> PipelineResult:
    """Run the full multi-view denoising loop.

    config is a RunConfig (or anything with the same fields). The backend is
    called once per step with all views batched.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    sched = scheduler.make_schedule(config.steps)
    geo = build_view_geometry(
        mesh,
        cameras,
        latent_res=config.latent_resolution,
        tex_res=config.latent_texture_resolution,
        eps_z=config.eps_z,
        filter=config.filter,
        uv_gate_texels=config.uv_gate_texels,
        bias_resolutions=tuple(config.bias_resolutions),
        bias_params=attention.BiasParams(o=config.o, r=config.r, delta=config.delta),
        attended_scheme=config.attended,
    )
    n = len(geo.cameras)
    h = w = config.latent_resolution
    c = config.channels
    T = config.steps
    omega_sched = scheduler.ViewWeightSchedule.from_interp_steps(
        timesteps=T,
        interp_steps=config.interp_steps,
        thetas=geo.thetas,
        gamma=config.gamma,
        omega_min=config.omega_min,
    )

    tex_res = config.latent_texture_resolution
    uv_valid = geo.uvmaps.valid
    z = rng.standard_normal((n, h, w, c))
    u = scheduler.LatentTexture(
        data=rng.standard_normal((tex_res, tex_res, c)) * uv_valid[..., None],
        valid=uv_valid.copy(),
    )
    trace = PipelineTrace() if collect_trace else None

    for t in range(T, 0, -1):
        req = DenoiseRequest(
            latents=z,
            step_index=t,
            timestep_value=int(sched.train_indices[t - 1]),
            alpha_bar=sched.abar(t),
            prompt=config.prompt,
            depth_maps=geo.depth_maps,
            cfg_scale=config.cfg_scale,
            biases=geo.biases,
            position_maps=geo.position_maps,
            fg_masks=geo.fg_masks.astype(np.float64),
        )
        req = attach_attention_hooks(req, t, T, config.replace_attention_steps)
        try:
            resp = backend(req)
        except Exception as exc:
            raise PipelineError("backend", f"step {t}: {exc}") from exc
        x0 = np.stack(
            [sched.predict_x0(z[i], resp.eps_hat[i], t) for i in range(n)]
        )

        merging = t > config.skip_merge_last
        if merging:
            partials = [raster.gather_texels(x0[i], geo.gather[i]) for i in range(n)]
            omegas = omega_sched.weights(t)
            merged = scheduler.merge_partial_textures(
                partials, geo.cos_tex, geo.coverage, omegas
            )
            # texels no view saw this step keep their state through the step
            # (zero-information update); dilation repairs them at the end
            orphan = uv_valid & ~merged.valid
            if orphan.any():
                merged.data[orphan] = u.data[orphan] / np.sqrt(sched.abar(t))
            merged.valid = uv_valid.copy()
            eps_tex = rng.standard_normal(u.data.shape)
            u = scheduler.texture_ddpm_step(sched, merged, u, t, eps_tex)
            if trace is not None:
                trace.steps.append(t)
                trace.omegas.append(omegas)
                trace.merged.append(merged.data.copy())
                trace.merge_coverage.append(
                    float((~orphan & uv_valid).sum() / max(uv_valid.sum(), 1))
                )
            z_next = np.empty_like(z)
            for i in range(n):
                eps_img = rng.standard_normal(z[i].shape)
                z_hat = sched.ddpm_step(x0[i], z[i], t, eps_img)
                rendered = raster.sample_view(u.data, geo.render[i])
                z_next[i] = scheduler.blend_latents(geo.fg_masks[i], rendered, z_hat)
            z = z_next
        else:
            z_next = np.empty_like(z)
            for i in range(n):
                eps_img = rng.standard_normal(z[i].shape)
                z_next[i] = sched.ddpm_step(x0[i], z[i], t, eps_img)
            z = z_next

    return PipelineResult(latents=z, texture=u, geometry=geo, schedule=sched, trace=trace)
