"""Final texture merge and surface-space UV dilation.

The merged texture leaves texels that no view can see unfilled. Dilation
propagates color to them from valid texels that are nearby *on the surface*,
not merely nearby in UV layout: candidates must pass a 3D distance gate, a
normal-angle gate, and a sub-island adjacency gate. Sub-islands are the UV
charts cut by an s-texel grid; two sub-islands are adjacent when faces
contributing texels to each share a mesh edge (or one face spans both), so
color can cross seams that are contiguous on the surface but never jump
between charts that only happen to be packed side by side.

Fills are computed per iteration against a snapshot of the valid set and
committed in a batch, making the result independent of traversal order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cameras import ViewCamera, angles_to_reference
from .meshes import Mesh
from .raster import (
    DEFAULT_EPS_Z,
    FACE_NONE,
    UVMaps,
    build_gather_table,
    gather_texels,
    render_maps,
    render_uv_space_maps,
)


@dataclass(frozen=True)
class DilationParams:
    grid_size: int = 64  # s, texels
    dist_threshold: float = 0.02  # d_th, scene units
    angle_threshold_deg: float = 90.0  # a_th
    knn: int = 30  # n
    iterations: int = 10  # iter

    def __post_init__(self):
        if min(self.grid_size, self.knn, self.iterations) <= 0:
            raise ValueError("grid size, knn count, and iterations must be positive")
        if self.dist_threshold <= 0:
            raise ValueError("distance threshold must be positive")
        if not 0.0 < self.angle_threshold_deg <= 180.0:
            raise ValueError("angle threshold must be in (0, 180] degrees")


@dataclass
class SubIslandIndex:
    """Per-texel sub-island labels plus their adjacency relation.

    island_id is -1 outside all charts; adjacency is a dense symmetric,
    reflexive boolean matrix over sub-island ids.
    """

    island_id: np.ndarray  # (T, T) int32
    original_islands: np.ndarray  # (T, T) int32
    grid_size: int
    adjacency: np.ndarray  # (n_subs, n_subs) bool

    @property
    def n_subislands(self) -> int:
        return self.adjacency.shape[0]


@dataclass
class DilationReport:
    filled: int
    remaining: int
    iterations_used: int

    def as_dict(self) -> dict:
        return {
            "filled": self.filled,
            "remaining": self.remaining,
            "iterations_used": self.iterations_used,
        }


def original_islands(F: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Connected components of the chart layout, one label per texel.

    Faces belong to the same island when they share a mesh edge *and* their
    UVs agree along it (the edge is not a seam). Texels inherit their face's
    island; -1 outside all charts.
    """
    n_faces = mesh.n_faces
    parent = list(range(n_faces))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    # uv of each face corner keyed by vertex index
    corner_uv = [
        {int(v): tuple(np.round(mesh.uvs[f][k], 9)) for k, v in enumerate(mesh.faces[f])}
        for f in range(n_faces)
    ]
    for f in range(n_faces):
        for g in mesh.face_adjacency[f]:
            if g < f:
                continue
            shared = set(map(int, mesh.faces[f])) & set(map(int, mesh.faces[g]))
            if len(shared) < 2:
                continue
            if all(corner_uv[f][v] == corner_uv[g][v] for v in shared):
                union(f, g)

    roots = {}
    face_island = np.empty(n_faces, dtype=np.int32)
    for f in range(n_faces):
        r = find(f)
        face_island[f] = roots.setdefault(r, len(roots))
    out = np.full(F.shape, -1, dtype=np.int32)
    charted = F != FACE_NONE
    out[charted] = face_island[F[charted]]
    return out


def grid_islands(F: np.ndarray, I_ori: np.ndarray, s: int) -> SubIslandIndex:
    """Cut every original island by an s-texel grid; texels in the same
    island and the same grid cell share a sub-island id."""
    T = F.shape[0]
    rows, cols = np.meshgrid(np.arange(T), np.arange(T), indexing="ij")
    cell = (rows // s) * ((T + s - 1) // s) + (cols // s)
    charted = F != FACE_NONE
    keys = np.stack([I_ori[charted], cell[charted]], axis=-1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    island_id = np.full(F.shape, -1, dtype=np.int32)
    island_id[charted] = inverse.astype(np.int32)
    n_subs = len(uniq)
    adjacency = np.eye(n_subs, dtype=bool) if n_subs else np.zeros((0, 0), dtype=bool)
    return SubIslandIndex(
        island_id=island_id,
        original_islands=I_ori.copy(),
        grid_size=s,
        adjacency=adjacency,
    )


def sub_island_adjacency(index: SubIslandIndex, mesh: Mesh, F: np.ndarray) -> SubIslandIndex:
    """Wire up adjacency: sub-islands touch when some face with texels in one
    shares a mesh edge with some face with texels in the other, or when one
    face spans both. Reflexive and symmetric by construction."""
    n_subs = index.n_subislands
    adj = np.eye(n_subs, dtype=bool)
    charted = F != FACE_NONE
    face_ids = F[charted]
    subs = index.island_id[charted]
    face_to_subs: dict[int, set[int]] = {}
    for f, s_id in zip(face_ids.tolist(), subs.tolist()):
        face_to_subs.setdefault(f, set()).add(s_id)

    for f, own in face_to_subs.items():
        own_list = sorted(own)
        for a in own_list:  # one face spanning several cells joins them
            for b in own_list:
                adj[a, b] = True
        for g in mesh.face_adjacency[f]:
            for b in face_to_subs.get(int(g), ()):
                for a in own_list:
                    adj[a, b] = True
                    adj[b, a] = True
    return SubIslandIndex(
        island_id=index.island_id,
        original_islands=index.original_islands,
        grid_size=index.grid_size,
        adjacency=adj,
    )


def build_subisland_index(uvmaps: UVMaps, mesh: Mesh, s: int) -> SubIslandIndex:
    I_ori = original_islands(uvmaps.face_id, mesh)
    index = grid_islands(uvmaps.face_id, I_ori, s)
    return sub_island_adjacency(index, mesh, uvmaps.face_id)


def knn_valid(positions: np.ndarray, query: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n nearest valid texels to one query point, ties broken
    by index. Returns fewer when fewer exist."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) == 0:
        raise ValueError("no valid texels to search")
    d = np.linalg.norm(positions - np.asarray(query, dtype=np.float64), axis=-1)
    order = np.lexsort((np.arange(len(d)), d))
    return order[: min(n, len(d))]


def dilate(
    U: np.ndarray,
    uvmaps: UVMaps,
    valid: np.ndarray,
    index: SubIslandIndex,
    params: DilationParams = DilationParams(),
) -> tuple[np.ndarray, np.ndarray, DilationReport]:
    """Fill invalid charted texels from surface-space neighbors.

    Candidates are the n nearest valid texels by 3D distance; each one
    contributes weight 1 - (dist/d_th)^2 iff it is valid in the current
    snapshot, the normal angle is below a_th, the sub-islands are adjacent,
    and dist < d_th. Texels acquiring nonzero total weight take the weighted
    average and become valid for the next iteration. Returns (texture,
    validity, report); input texels are never modified.
    """
    out = np.array(U, dtype=np.float64, copy=True)
    if out.ndim == 2:
        out = out[..., None]
    charted = uvmaps.valid
    cur_valid = np.asarray(valid, dtype=bool) & charted
    queue = charted & ~cur_valid

    pos = uvmaps.position.reshape(-1, 3)
    nrm = uvmaps.normal.reshape(-1, 3)
    sub = index.island_id.reshape(-1)
    flat_tex = out.reshape(-1, out.shape[-1])
    cos_th = np.cos(np.deg2rad(params.angle_threshold_deg))

    filled_total = 0
    iterations_used = 0
    for _ in range(params.iterations):
        if not queue.any():
            break
        iterations_used += 1
        p_idx = np.flatnonzero(cur_valid.reshape(-1))
        q_idx = np.flatnonzero(queue.reshape(-1))
        if len(p_idx) == 0:
            break
        k = min(params.knn, len(p_idx))
        tree = cKDTree(pos[p_idx])
        dist, neigh = tree.query(pos[q_idx], k=k)
        if k == 1:
            dist = dist[:, None]
            neigh = neigh[:, None]
        cand = p_idx[neigh]  # (Q, k) flat texel indices

        ok = dist < params.dist_threshold
        # strict angle gate: angle < a_th <=> cos(angle) > cos(a_th)
        dots = np.einsum("qd,qkd->qk", nrm[q_idx], nrm[cand])
        ok &= dots > cos_th
        ok &= index.adjacency[sub[q_idx][:, None], sub[cand]]

        wts = np.where(ok, 1.0 - (dist / params.dist_threshold) ** 2, 0.0)
        total = wts.sum(axis=1)
        fillable = total > 0.0
        if not fillable.any():
            break
        values = np.einsum(
            "qk,qkc->qc", wts[fillable], flat_tex[cand[fillable]]
        ) / total[fillable][:, None]
        targets = q_idx[fillable]
        flat_tex[targets] = values  # batch commit against the snapshot
        filled_total += len(targets)
        cur_flat = cur_valid.reshape(-1)
        cur_flat[targets] = True
        queue_flat = queue.reshape(-1)
        queue_flat[targets] = False

    report = DilationReport(
        filled=filled_total,
        remaining=int(queue.sum()),
        iterations_used=iterations_used,
    )
    return out, cur_valid, report


def merge_final_textures(
    images: list[np.ndarray],
    mesh: Mesh,
    cameras: list[ViewCamera],
    gamma: float = 8.0,
    omega_min: float = 1e-3,
    tex_res: int = 256,
    eps_z: float = DEFAULT_EPS_Z,
    filter: str = "bilinear",
    uvmaps: UVMaps | None = None,
) -> tuple[np.ndarray, np.ndarray, UVMaps]:
    """Bake decoded view images into one texture.

    Per-texel weighted average of the per-view gathers with static weights
    omega_n * cosine; omega_n = max(|cos theta_n|^gamma, omega_min). Returns
    (texture, validity, uvmaps); texels with zero weight are invalid and form
    the dilation queue.
    """
    if len(images) != len(cameras):
        raise ValueError(
            f"{len(images)} images for {len(cameras)} cameras"
        )
    if uvmaps is None:
        uvmaps = render_uv_space_maps(mesh, tex_res)
    thetas = angles_to_reference(cameras)
    omegas = np.maximum(np.abs(np.cos(thetas)) ** gamma, omega_min)

    num = None
    den = np.zeros((tex_res, tex_res))
    valid_total = np.zeros((tex_res, tex_res), dtype=bool)
    for img, cam, om in zip(images, cameras, omegas):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[..., None]
        if img.shape[0] != cam.resolution:
            cam = cam.with_resolution(img.shape[0])
        vmaps = render_maps(mesh, cam)
        table = build_gather_table(uvmaps, vmaps, cam, eps_z=eps_z, filter=filter)
        part = gather_texels(img, table)
        w = np.zeros((tex_res, tex_res))
        w[table.tex_rows, table.tex_cols] = om * table.cosine
        if num is None:
            num = np.zeros((tex_res, tex_res, img.shape[-1]))
        num += w[..., None] * part
        den += w
        valid_total |= table.covered

    valid = den > 1e-12
    safe = np.where(valid, den, 1.0)
    texture = np.where(valid[..., None], num / safe[..., None], 0.0)
    uvmaps.visibility = valid_total
    return texture, valid, uvmaps


def finalize_texture(
    images: list[np.ndarray],
    mesh: Mesh,
    cameras: list[ViewCamera],
    tex_res: int,
    gamma: float = 8.0,
    omega_min: float = 1e-3,
    eps_z: float = DEFAULT_EPS_Z,
    filter: str = "bilinear",
    params: DilationParams = DilationParams(),
    fallback_color: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, DilationReport]:
    """Merge then dilate; unreachable texels get the fallback color."""
    texture, valid, uvmaps = merge_final_textures(
        images, mesh, cameras, gamma=gamma, omega_min=omega_min,
        tex_res=tex_res, eps_z=eps_z, filter=filter,
    )
    index = build_subisland_index(uvmaps, mesh, params.grid_size)
    filled, new_valid, report = dilate(texture, uvmaps, valid, index, params)
    unreachable = uvmaps.valid & ~new_valid
    filled[unreachable] = fallback_color
    return filled, new_valid, report
