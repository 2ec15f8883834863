"""Software rasterization and its inverse: view maps, UV-space maps, and the
texture <-> image resampling pair.

Everything here is deterministic: pixel-center sampling, no antialiasing,
faces rasterized in index order with a strict z-test (first face wins ties).
The forward direction renders per-view geometry buffers (position, normal,
depth, cosine-to-view, UV, face id); the inverse direction projects texels
into a view, applies a visibility test against the view's depth buffer, and
pulls image values back into texture space.

Sampling filters: "bilinear" is the default and what the denoising pipeline
uses; "nearest" makes the render/gather pair an exact inverse on covered
texels, which the verification suite relies on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cameras import ViewCamera
from .meshes import Mesh

logger = logging.getLogger(__name__)

FACE_NONE = -1  # background sentinel for face-id maps
DEFAULT_EPS_Z = 1e-3  # depth-test tolerance for texel visibility, scene units
_NEAR = 1e-6


class ResolutionMismatchError(ValueError):
    pass


@dataclass
class RenderedMaps:
    """Per-view geometry buffers at a fixed square resolution.

    position/normal are world-space; depth is camera-space distance (positive
    on foreground, 0 on background); cosine is dot(normal, direction to eye)
    clamped to [0, 1]; uv holds the interpolated texture coordinates.
    """

    position: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    cosine: np.ndarray  # (H, W)
    fg_mask: np.ndarray  # (H, W) bool
    face_id: np.ndarray  # (H, W) int32, FACE_NONE on background
    uv: np.ndarray  # (H, W, 2)

    @property
    def resolution(self) -> int:
        return self.position.shape[0]


@dataclass
class UVMaps:
    """Texture-space geometry buffers at texel centers.

    visibility starts all-False and is filled in by whoever computes per-view
    coverage (see finalize.merge_final_textures).
    """

    position: np.ndarray  # (T, T, 3)
    normal: np.ndarray  # (T, T, 3)
    face_id: np.ndarray  # (T, T) int32, FACE_NONE outside all charts
    visibility: np.ndarray  # (T, T) bool
    overlap_count: int = 0

    @property
    def resolution(self) -> int:
        return self.face_id.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.face_id != FACE_NONE


def _edge_grid(corners: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Signed barycentric weights of grid points w.r.t. a 2D triangle.

    Returns (lam0, lam1, lam2, ok). Weights are normalized by the doubled
    signed area with orientation factored out, so "inside" is all(lam >= 0)
    for either winding. ok is False for degenerate triangles.
    """
    (x0, y0), (x1, y1), (x2, y2) = corners
    area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
    if abs(area) < 1e-14:
        return None, None, None, False
    gx, gy = np.meshgrid(xs, ys)
    lam0 = ((x2 - x1) * (gy - y1) - (y2 - y1) * (gx - x1)) / area
    lam1 = ((x0 - x2) * (gy - y2) - (y0 - y2) * (gx - x2)) / area
    lam2 = 1.0 - lam0 - lam1
    return lam0, lam1, lam2, True


def _pixel_range(lo: float, hi: float, res: int) -> tuple[int, int]:
    """Index range of pixels whose centers may fall in [lo, hi]."""
    i0 = max(0, int(np.floor(lo - 0.5)))
    i1 = min(res - 1, int(np.ceil(hi - 0.5)))
    return i0, i1


def render_maps(mesh: Mesh, cam: ViewCamera) -> RenderedMaps:
    """Rasterize the mesh: perspective projection, z-buffered, back-face culled,
    perspective-correct interpolation at pixel centers."""
    res = cam.resolution
    zbuf = np.full((res, res), np.inf)
    face_id = np.full((res, res), FACE_NONE, dtype=np.int32)
    position = np.zeros((res, res, 3))
    normal = np.zeros((res, res, 3))
    uv = np.zeros((res, res, 2))

    verts = mesh.vertices
    cam_pts = cam.world_to_camera(verts)
    depth_v = cam_pts[:, 2]
    t = cam.tan_half_fov
    with np.errstate(divide="ignore", invalid="ignore"):
        px = (cam_pts[:, 0] / (depth_v * t) + 1.0) * 0.5 * res
        py = (1.0 - cam_pts[:, 1] / (depth_v * t)) * 0.5 * res
    eye = cam.eye

    for fi in range(mesh.n_faces):
        ia, ib, ic = mesh.faces[fi]
        v0, v1, v2 = verts[ia], verts[ib], verts[ic]
        geom_n = np.cross(v1 - v0, v2 - v0)
        if geom_n @ (eye - v0) <= 0.0:  # back-face cull
            continue
        w = depth_v[[ia, ib, ic]]
        if (w <= _NEAR).any():  # no near-plane clipping at desk scale
            continue
        corners = np.array([[px[ia], py[ia]], [px[ib], py[ib]], [px[ic], py[ic]]])
        x_lo, x_hi = _pixel_range(corners[:, 0].min(), corners[:, 0].max(), res)
        y_lo, y_hi = _pixel_range(corners[:, 1].min(), corners[:, 1].max(), res)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        xs = np.arange(x_lo, x_hi + 1) + 0.5
        ys = np.arange(y_lo, y_hi + 1) + 0.5
        lam0, lam1, lam2, ok = _edge_grid(corners, xs, ys)
        if not ok:
            continue
        inside = (lam0 >= 0.0) & (lam1 >= 0.0) & (lam2 >= 0.0)
        if not inside.any():
            continue
        # perspective-correct barycentrics from the screen-affine ones
        inv_w = lam0 / w[0] + lam1 / w[1] + lam2 / w[2]
        pix_depth = 1.0 / inv_w
        sub_z = zbuf[y_lo : y_hi + 1, x_lo : x_hi + 1]
        win = inside & (pix_depth < sub_z)
        if not win.any():
            continue
        b0 = (lam0 / w[0]) * pix_depth
        b1 = (lam1 / w[1]) * pix_depth
        b2 = 1.0 - b0 - b1
        bw = np.stack([b0[win], b1[win], b2[win]], axis=-1)  # (K, 3)
        rows, cols = np.nonzero(win)
        rows = rows + y_lo
        cols = cols + x_lo
        zbuf[rows, cols] = pix_depth[win]
        face_id[rows, cols] = fi
        position[rows, cols] = bw @ np.stack([v0, v1, v2])
        normal[rows, cols] = bw @ mesh.normals[[ia, ib, ic]]
        uv[rows, cols] = bw @ mesh.uvs[fi]

    fg = face_id != FACE_NONE
    nrm = np.linalg.norm(normal, axis=-1, keepdims=True)
    np.divide(normal, nrm, out=normal, where=nrm > 1e-12)
    # view direction is the camera forward axis (constant per view), so a
    # head-on surface scores 1 across the whole image
    _, _, forward = cam.basis()
    cosine = np.clip(normal @ -forward, 0.0, 1.0)
    cosine[~fg] = 0.0
    depth = np.where(fg, zbuf, 0.0)
    return RenderedMaps(
        position=position,
        normal=normal,
        depth=depth,
        cosine=cosine,
        fg_mask=fg,
        face_id=face_id,
        uv=uv,
    )


def render_uv_space_maps(mesh: Mesh, tex_res: int) -> UVMaps:
    """Rasterize each face in UV space at texel centers.

    Texel (row, col) covers uv = ((col+0.5)/T, (row+0.5)/T). Overlapping
    charts (non-injective UV) resolve last-writer-wins and are counted.
    """
    T = tex_res
    face_id = np.full((T, T), FACE_NONE, dtype=np.int32)
    position = np.zeros((T, T, 3))
    normal = np.zeros((T, T, 3))
    overlap = 0

    for fi in range(mesh.n_faces):
        corners = mesh.uvs[fi] * T  # continuous texel coords
        x_lo, x_hi = _pixel_range(corners[:, 0].min(), corners[:, 0].max(), T)
        y_lo, y_hi = _pixel_range(corners[:, 1].min(), corners[:, 1].max(), T)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        xs = np.arange(x_lo, x_hi + 1) + 0.5
        ys = np.arange(y_lo, y_hi + 1) + 0.5
        lam0, lam1, lam2, ok = _edge_grid(corners, xs, ys)
        if not ok:
            continue
        inside = (lam0 >= 0.0) & (lam1 >= 0.0) & (lam2 >= 0.0)
        if not inside.any():
            continue
        rows, cols = np.nonzero(inside)
        rows = rows + y_lo
        cols = cols + x_lo
        # shared-edge texel centers between adjacent faces of one chart are
        # not genuine chart overlaps
        prev = face_id[rows, cols]
        rewritten = prev != FACE_NONE
        if rewritten.any():
            adjacent = mesh.face_adjacency[fi]
            overlap += int(sum(1 for p in prev[rewritten] if p not in adjacent))
        bw = np.stack([lam0[inside], lam1[inside], lam2[inside]], axis=-1)
        ia, ib, ic = mesh.faces[fi]
        face_id[rows, cols] = fi
        position[rows, cols] = bw @ mesh.vertices[[ia, ib, ic]]
        normal[rows, cols] = bw @ mesh.normals[[ia, ib, ic]]

    nrm = np.linalg.norm(normal, axis=-1, keepdims=True)
    np.divide(normal, nrm, out=normal, where=nrm > 1e-12)
    if overlap:
        logger.warning("UV layout is not injective: %d texels claimed twice", overlap)
    return UVMaps(
        position=position,
        normal=normal,
        face_id=face_id,
        visibility=np.zeros((T, T), dtype=bool),
        overlap_count=overlap,
    )


def downsample_maps(maps: RenderedMaps, factor: int) -> RenderedMaps:
    """Block-reduce by an integer factor.

    fg is any-foreground-in-block; position/normal/depth/cosine/uv average
    over foreground pixels only so background zeros cannot drag positions
    toward the origin. face_id takes the block's first foreground pixel.
    """
    res = maps.resolution
    if res % factor != 0:
        raise ValueError(f"factor {factor} does not divide resolution {res}")
    n = res // factor
    fg = maps.fg_mask.reshape(n, factor, n, factor)
    count = fg.sum(axis=(1, 3)).astype(np.float64)
    out_fg = count > 0
    safe = np.where(out_fg, count, 1.0)

    def fg_mean(a: np.ndarray) -> np.ndarray:
        if a.ndim == 3:
            blocks = a.reshape(n, factor, n, factor, a.shape[-1])
            s = np.where(fg[..., None], blocks, 0.0).sum(axis=(1, 3))
            return s / safe[..., None]
        blocks = a.reshape(n, factor, n, factor)
        return np.where(fg, blocks, 0.0).sum(axis=(1, 3)) / safe

    position = fg_mean(maps.position)
    normal = fg_mean(maps.normal)
    nrm = np.linalg.norm(normal, axis=-1, keepdims=True)
    np.divide(normal, nrm, out=normal, where=nrm > 1e-12)
    depth = fg_mean(maps.depth)
    cosine = fg_mean(maps.cosine)
    uv = fg_mean(maps.uv)

    # representative face id: first foreground pixel in scan order
    blocks_fid = maps.face_id.reshape(n, factor, n, factor).transpose(0, 2, 1, 3)
    flat = blocks_fid.reshape(n, n, factor * factor)
    fg_flat = fg.transpose(0, 2, 1, 3).reshape(n, n, factor * factor)
    first = np.argmax(fg_flat, axis=-1)
    face_id = np.take_along_axis(flat, first[..., None], axis=-1)[..., 0].astype(np.int32)
    face_id[~out_fg] = FACE_NONE

    position[~out_fg] = 0.0
    normal[~out_fg] = 0.0
    depth[~out_fg] = 0.0
    cosine[~out_fg] = 0.0
    uv[~out_fg] = 0.0
    return RenderedMaps(
        position=position,
        normal=normal,
        depth=depth,
        cosine=cosine,
        fg_mask=out_fg,
        face_id=face_id,
        uv=uv,
    )


# ---------------------------------------------------------------------------
# texture -> image sampling
# ---------------------------------------------------------------------------


@dataclass
class RenderTable:
    """Precomputed texture-sampling indices/weights for one view's fg pixels."""

    resolution: int
    tex_res: int
    pix_rows: np.ndarray  # (P,)
    pix_cols: np.ndarray  # (P,)
    idx: np.ndarray  # (P, 4) flat texel indices
    wts: np.ndarray  # (P, 4) weights (already valid-mask renormalized)


def _bilinear_setup(fx: np.ndarray, fy: np.ndarray, size: int):
    """4-tap indices/weights for samples at continuous centers (fx, fy)."""
    gx = fx - 0.5
    gy = fy - 0.5
    x0 = np.clip(np.floor(gx).astype(np.int64), 0, size - 1)
    y0 = np.clip(np.floor(gy).astype(np.int64), 0, size - 1)
    x1 = np.minimum(x0 + 1, size - 1)
    y1 = np.minimum(y0 + 1, size - 1)
    dx = np.clip(gx - x0, 0.0, 1.0)
    dy = np.clip(gy - y0, 0.0, 1.0)
    idx = np.stack([y0 * size + x0, y0 * size + x1, y1 * size + x0, y1 * size + x1], axis=-1)
    wts = np.stack(
        [(1 - dx) * (1 - dy), dx * (1 - dy), (1 - dx) * dy, dx * dy], axis=-1
    )
    return idx, wts


def build_render_table(
    view_maps: RenderedMaps,
    tex_res: int,
    tex_valid: np.ndarray | None = None,
    filter: str = "bilinear",
) -> RenderTable:
    """Map each foreground pixel to texel taps at its interpolated UV.

    Bilinear taps are restricted to valid texels and renormalized, so chart
    borders do not bleed zeros into the image; pixels whose taps are all
    invalid sample zero.
    """
    rows, cols = np.nonzero(view_maps.fg_mask)
    uv = view_maps.uv[rows, cols]
    fu = uv[:, 0] * tex_res
    fv = uv[:, 1] * tex_res
    if filter == "nearest":
        tx = np.clip(np.floor(fu).astype(np.int64), 0, tex_res - 1)
        ty = np.clip(np.floor(fv).astype(np.int64), 0, tex_res - 1)
        idx = np.stack([ty * tex_res + tx] * 4, axis=-1)
        wts = np.zeros((len(rows), 4))
        wts[:, 0] = 1.0
    elif filter == "bilinear":
        idx, wts = _bilinear_setup(fu, fv, tex_res)
    else:
        raise ValueError(f"unknown filter {filter!r}")
    if tex_valid is not None:
        vmask = tex_valid.reshape(-1)[idx]
        wts = wts * vmask
        total = wts.sum(axis=-1, keepdims=True)
        np.divide(wts, total, out=wts, where=total > 1e-12)
    return RenderTable(
        resolution=view_maps.resolution,
        tex_res=tex_res,
        pix_rows=rows,
        pix_cols=cols,
        idx=idx,
        wts=wts,
    )


def sample_view(tex_data: np.ndarray, table: RenderTable) -> np.ndarray:
    """Apply a RenderTable: texture (T, T, C) -> image (H, W, C), bg zero."""
    T = table.tex_res
    C = tex_data.shape[-1]
    flat = tex_data.reshape(T * T, C)
    img = np.zeros((table.resolution, table.resolution, C))
    img[table.pix_rows, table.pix_cols] = np.einsum(
        "pk,pkc->pc", table.wts, flat[table.idx]
    )
    return img


def render_latent(tex, mesh: Mesh, cam: ViewCamera, out_res: int, filter: str = "bilinear") -> np.ndarray:
    """Render a latent texture from a viewpoint: foreground pixels sample the
    texture at their interpolated UV, background pixels are zero."""
    if tex.data.shape[-1] == 0:
        raise ValueError("texture has zero channels")
    maps = render_maps(mesh, cam.with_resolution(out_res))
    table = build_render_table(maps, tex.resolution, tex.valid, filter=filter)
    return sample_view(tex.data, table)


# ---------------------------------------------------------------------------
# image -> texture gathering (inverse rendering)
# ---------------------------------------------------------------------------


@dataclass
class GatherTable:
    """Precomputed image-sampling taps for each covered texel of one view."""

    tex_res: int
    resolution: int
    covered: np.ndarray  # (T, T) bool
    tex_rows: np.ndarray  # (K,)
    tex_cols: np.ndarray  # (K,)
    idx: np.ndarray  # (K, 4) flat pixel indices
    wts: np.ndarray  # (K, 4)
    cosine: np.ndarray = field(default=None)  # (K,) texel cosine toward this view


def build_gather_table(
    uvmaps: UVMaps,
    view_maps: RenderedMaps,
    cam: ViewCamera,
    eps_z: float = DEFAULT_EPS_Z,
    filter: str = "bilinear",
    uv_gate_texels: float | None = None,
) -> GatherTable:
    """Project every charted texel into the view and keep the visible ones.

    A texel is covered iff its 3D point is inside the frustum, faces the
    camera, and passes a one-sided depth test against the foreground-
    interpolated z-buffer (tolerance eps_z). With a uv gate, the texel's own
    UV must additionally agree with the sampled pixel's UV to within the
    given number of texels — this rejects seam crossings and is what makes
    the nearest-filter round trip exact.
    """
    if view_maps.resolution != cam.resolution:
        raise ResolutionMismatchError(
            f"view maps at {view_maps.resolution} but camera at {cam.resolution}"
        )
    res = cam.resolution
    T = uvmaps.resolution
    valid = uvmaps.valid
    t_rows, t_cols = np.nonzero(valid)
    X = uvmaps.position[t_rows, t_cols]
    N = uvmaps.normal[t_rows, t_cols]

    pix, depth = cam.project(X)
    px, py = pix[:, 0], pix[:, 1]
    ok = depth > _NEAR
    ok &= (px >= 0.5) & (px <= res - 0.5) & (py >= 0.5) & (py <= res - 0.5)
    _, _, forward = cam.basis()
    cos_all = N @ -forward
    ok &= cos_all > 0.0

    zflat = np.where(view_maps.fg_mask, view_maps.depth, np.inf).reshape(-1)
    fgflat = view_maps.fg_mask.reshape(-1)

    idx, wts = _bilinear_setup(px, py, res)
    tap_fg = fgflat[idx]
    zw = wts * tap_fg
    zsum = zw.sum(axis=-1)
    ok &= zsum > 1e-12
    safe = np.where(zsum > 1e-12, zsum, 1.0)
    z_interp = np.where(
        zsum > 1e-12,
        np.einsum("kj,kj->k", zw, np.where(tap_fg, zflat[idx], 0.0)) / safe,
        np.inf,
    )
    ok &= depth <= z_interp + eps_z

    ix = np.clip(np.floor(px).astype(np.int64), 0, res - 1)
    iy = np.clip(np.floor(py).astype(np.int64), 0, res - 1)
    nearest = iy * res + ix

    if uv_gate_texels is not None:
        own_uv = np.stack([(t_cols + 0.5) / T, (t_rows + 0.5) / T], axis=-1)
        pix_uv = view_maps.uv.reshape(-1, 2)[nearest]
        gate = np.abs(pix_uv - own_uv).max(axis=-1) * T <= uv_gate_texels
        ok &= gate & fgflat[nearest]

    if filter == "nearest":
        ok &= fgflat[nearest]
        idx = np.stack([nearest] * 4, axis=-1)
        wts = np.zeros_like(wts)
        wts[:, 0] = 1.0
    elif filter == "bilinear":
        total = zw.sum(axis=-1, keepdims=True)
        wts = np.divide(zw, total, out=np.zeros_like(zw), where=total > 1e-12)
    else:
        raise ValueError(f"unknown filter {filter!r}")

    covered = np.zeros((T, T), dtype=bool)
    covered[t_rows[ok], t_cols[ok]] = True
    cosine = np.clip(cos_all[ok], 0.0, 1.0)
    return GatherTable(
        tex_res=T,
        resolution=res,
        covered=covered,
        tex_rows=t_rows[ok],
        tex_cols=t_cols[ok],
        idx=idx[ok],
        wts=wts[ok],
        cosine=cosine,
    )


def gather_texels(img: np.ndarray, table: GatherTable) -> np.ndarray:
    """Apply a GatherTable: image (H, W, C) -> partial texture (T, T, C)."""
    if img.shape[0] != table.resolution:
        raise ResolutionMismatchError(
            f"image at {img.shape[0]} but gather table at {table.resolution}"
        )
    if img.ndim == 2:
        img = img[..., None]
    C = img.shape[-1]
    flat = img.reshape(-1, C)
    out = np.zeros((table.tex_res, table.tex_res, C))
    out[table.tex_rows, table.tex_cols] = np.einsum(
        "pk,pkc->pc", table.wts, flat[table.idx]
    )
    return out


def inverse_render(
    img: np.ndarray,
    mesh: Mesh,
    cam: ViewCamera,
    tex_res: int,
    eps_z: float = DEFAULT_EPS_Z,
    filter: str = "bilinear",
    uv_gate_texels: float | None = None,
):
    """Pull a rendered image back into texture space.

    Returns (LatentTexture, coverage mask): covered texels hold the sampled
    image values, everything else is zero with coverage False.
    """
    from .scheduler import LatentTexture

    if img.shape[0] != cam.resolution or img.shape[1] != cam.resolution:
        raise ResolutionMismatchError(
            f"image {img.shape[:2]} does not match camera resolution {cam.resolution}"
        )
    view_maps = render_maps(mesh, cam)
    uvmaps = render_uv_space_maps(mesh, tex_res)
    table = build_gather_table(
        uvmaps, view_maps, cam, eps_z=eps_z, filter=filter, uv_gate_texels=uv_gate_texels
    )
    data = gather_texels(img, table)
    return LatentTexture(data=data, valid=table.covered.copy()), table.covered
