"""Triangle meshes with per-corner UVs.

Meshes enter the pipeline already UV-unwrapped (unwrapping is an external
preprocessing step). This module loads Wavefront OBJ files, normalizes
geometry into the canonical [-0.5, 0.5] cube, and exposes the edge-sharing
face adjacency used by the surface-space dilation stage. Mesh instances are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Base class for mesh construction and loading failures."""


class ObjParseError(MeshError):
    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class MissingUVError(MeshError):
    """Raised when a face has no texture-coordinate references."""


class DegenerateMeshError(MeshError):
    """Raised when a mesh has zero extent on every axis."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with mandatory per-corner UVs and per-vertex normals.

    vertices: (V, 3) float64, scene units
    faces: (F, 3) int32 vertex indices
    uvs: (F, 3, 2) float64 per-corner texture coordinates in [0, 1]^2
    normals: (V, 3) float64 unit vectors
    face_adjacency: tuple of frozensets; faces sharing an (unordered) edge
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray
    normals: np.ndarray
    face_adjacency: tuple = field(repr=False)

    @classmethod
    def build(cls, vertices, faces, uvs, normals=None) -> "Mesh":
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
        uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 3, 2)
        if len(uvs) != len(faces):
            raise MeshError(
                f"uv corner count {len(uvs)} does not match face count {len(faces)}"
            )
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError("face index out of range")
        if normals is None:
            normals = vertex_normals(vertices, faces)
        else:
            normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(vertices):
                raise MeshError("normal count does not match vertex count")
            lengths = np.linalg.norm(normals, axis=1)
            bad = np.abs(lengths - 1.0) > 1e-6
            if bad.any():
                safe = np.where(lengths[:, None] > 1e-12, lengths[:, None], 1.0)
                normals = normals / safe
        adjacency = compute_face_adjacency(faces)
        return cls(
            vertices=_readonly(vertices),
            faces=_readonly(faces),
            uvs=_readonly(uvs),
            normals=_readonly(normals),
            face_adjacency=adjacency,
        )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (cross products left unnormalized)."""
    normals = np.zeros_like(vertices)
    if len(faces):
        v0 = vertices[faces[:, 0]]
        v1 = vertices[faces[:, 1]]
        v2 = vertices[faces[:, 2]]
        fn = np.cross(v1 - v0, v2 - v0)  # magnitude = 2 * face area
        for k in range(3):
            np.add.at(normals, faces[:, k], fn)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    lengths = np.where(lengths > 1e-12, lengths, 1.0)
    normals = normals / lengths
    # isolated or degenerate vertices get an arbitrary unit vector
    zero = np.linalg.norm(normals, axis=1) < 0.5
    normals[zero] = (0.0, 0.0, 1.0)
    return normals


def compute_face_adjacency(faces: np.ndarray) -> tuple:
    """Faces are adjacent iff they share an unordered vertex-index edge."""
    edge_map: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(np.asarray(faces, dtype=np.int64)):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_map.setdefault(key, []).append(fi)
    adj: list[set[int]] = [set() for _ in range(len(faces))]
    for shared in edge_map.values():
        for i in shared:
            for j in shared:
                if i != j:
                    adj[i].add(j)
    return tuple(frozenset(s) for s in adj)


def face_adjacency(mesh: Mesh) -> tuple:
    """Edge-sharing adjacency sets, one frozenset per face (symmetric)."""
    return mesh.face_adjacency


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center at the bbox center and scale the longest axis to span [-0.5, 0.5].

    UVs and normals are unchanged (uniform scaling preserves directions).
    Idempotent: normalizing a normalized mesh is an identity up to fp noise.
    """
    lo, hi = mesh.bounds()
    extent = hi - lo
    longest = float(extent.max())
    if longest <= 0.0:
        raise DegenerateMeshError("mesh has zero extent on all axes")
    center = (hi + lo) / 2.0
    vertices = (mesh.vertices - center) / longest
    return Mesh(
        vertices=_readonly(vertices),
        faces=mesh.faces,
        uvs=mesh.uvs,
        normals=mesh.normals,
        face_adjacency=mesh.face_adjacency,
    )


def _resolve_index(raw: int, count: int, path: str, line_no: int, what: str) -> int:
    if raw > 0:
        idx = raw - 1
    elif raw < 0:
        idx = count + raw
    else:
        raise ObjParseError(path, line_no, f"{what} index 0 is not valid in OBJ")
    if not 0 <= idx < count:
        raise ObjParseError(path, line_no, f"{what} index {raw} out of range")
    return idx


def load_obj(path: str) -> Mesh:
    """Load a Wavefront OBJ triangle mesh.

    UV references are mandatory on every face corner. Quads are split fan-wise
    into (0,1,2) + (0,2,3); faces with more than four corners are rejected.
    Negative (relative) indices are supported. When any corner lacks a normal
    reference, all normals are recomputed area-weighted from the geometry.
    """
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    obj_normals: list[list[float]] = []
    # per corner: (vertex idx, uv idx, normal idx or -1)
    corner_rows: list[list[tuple[int, int, int]]] = []

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    positions.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    texcoords.append([float(x) for x in parts[1:3]])
                elif tag == "vn":
                    obj_normals.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    refs = parts[1:]
                    if len(refs) < 3:
                        raise ObjParseError(path, line_no, "face with fewer than 3 corners")
                    if len(refs) > 4:
                        raise ObjParseError(
                            path, line_no, f"{len(refs)}-gon faces are not supported"
                        )
                    corners = []
                    for ref in refs:
                        fields = ref.split("/")
                        vi = _resolve_index(int(fields[0]), len(positions), path, line_no, "vertex")
                        if len(fields) < 2 or fields[1] == "":
                            raise MissingUVError(
                                f"{path}:{line_no}: face corner '{ref}' has no UV reference "
                                "(UVs are mandatory; unwrap the mesh first)"
                            )
                        ti = _resolve_index(int(fields[1]), len(texcoords), path, line_no, "uv")
                        ni = -1
                        if len(fields) >= 3 and fields[2] != "":
                            ni = _resolve_index(
                                int(fields[2]), len(obj_normals), path, line_no, "normal"
                            )
                        corners.append((vi, ti, ni))
                    if len(corners) == 3:
                        corner_rows.append(corners)
                    else:  # quad fan split
                        corner_rows.append([corners[0], corners[1], corners[2]])
                        corner_rows.append([corners[0], corners[2], corners[3]])
                # other records (o, g, s, usemtl, mtllib, ...) are ignored
            except (MeshError, ObjParseError):
                raise
            except (ValueError, IndexError) as exc:
                raise ObjParseError(path, line_no, f"malformed record: {exc}") from exc

    if not corner_rows:
        raise ObjParseError(path, 0, "no faces found")

    vertices = np.asarray(positions, dtype=np.float64)
    faces = np.asarray([[c[0] for c in row] for row in corner_rows], dtype=np.int32)
    uvs = np.asarray(
        [[texcoords[c[1]] for c in row] for row in corner_rows], dtype=np.float64
    )

    normals = None
    if obj_normals and all(c[2] >= 0 for row in corner_rows for c in row):
        # OBJ normals are per corner; fold them into per-vertex averages
        acc = np.zeros((len(vertices), 3), dtype=np.float64)
        src = np.asarray(obj_normals, dtype=np.float64)
        for row in corner_rows:
            for vi, _, ni in row:
                acc[vi] += src[ni]
        lengths = np.linalg.norm(acc, axis=1, keepdims=True)
        ok = lengths[:, 0] > 1e-12
        acc[ok] /= lengths[ok]
        missing = ~ok
        if missing.any():
            fallback = vertex_normals(vertices, faces)
            acc[missing] = fallback[missing]
        normals = acc

    return Mesh.build(vertices, faces, uvs, normals=normals)


def save_obj(mesh: Mesh, path: str) -> None:
    """Write the mesh as OBJ with one vt record per face corner."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for n in mesh.normals:
        lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    for uv3 in mesh.uvs:
        for uv in uv3:
            lines.append(f"vt {uv[0]:.9g} {uv[1]:.9g}")
    for fi, face in enumerate(mesh.faces):
        refs = [
            f"{face[k] + 1}/{3 * fi + k + 1}/{face[k] + 1}" for k in range(3)
        ]
        lines.append("f " + " ".join(refs))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
