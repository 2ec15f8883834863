"""Procedural test meshes with valid UV atlases.

Every generator returns a normalized Mesh whose UV layout is injective.
Spheres and cubes use one chart per face packed into a square grid — a crude
but watertight stand-in for an external unwrapper, and a good stress test for
island-aware dilation since every mesh edge between charts is a UV seam.
"""

from __future__ import annotations

import numpy as np

from .meshes import Mesh, normalize_mesh


def _pack_per_face_charts(n_faces: int, margin: float = 0.12) -> np.ndarray:
    """UV triangles for per-face charts on a ceil(sqrt(F))^2 grid.

    Each face gets a triangle inside its own cell, with margin keeping charts
    from touching across cell borders. The apex is nudged sideways so no
    chart edge is a 45-degree diagonal — otherwise texel centers land exactly
    on hypotenuses and coverage becomes a floating-point coin flip.
    Returns (F, 3, 2) uv corners.
    """
    cells = int(np.ceil(np.sqrt(n_faces)))
    size = 1.0 / cells
    uvs = np.zeros((n_faces, 3, 2), dtype=np.float64)
    lo, hi = margin * size, (1.0 - margin) * size
    local = np.array([[lo, lo], [hi, lo], [lo + 0.13 * (hi - lo), hi]])
    for f in range(n_faces):
        cu, cv = f % cells, f // cells
        uvs[f] = local + np.array([cu * size, cv * size])
    return uvs


def make_quad(side: float = 1.0, z: float = 0.0) -> Mesh:
    """Two triangles spanning [-side/2, side/2]^2 in the z-plane, facing +z.

    The full UV square maps onto the quad, so texture-space positions are an
    affine function of UV — handy for closed-form sampling checks.
    """
    h = side / 2.0
    vertices = [[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]]
    faces = [[0, 1, 2], [0, 2, 3]]
    uvs = [
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
        [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
    ]
    normals = [[0.0, 0.0, 1.0]] * 4
    return Mesh.build(vertices, faces, uvs, normals=normals)


def make_cube(side: float = 1.0) -> Mesh:
    """Axis-aligned cube, 8 shared vertices, 12 faces, 6 UV charts (3x2 grid)."""
    h = side / 2.0
    corners = np.array(
        [
            [-h, -h, -h], [h, -h, -h], [h, h, -h], [-h, h, -h],
            [-h, -h, h], [h, -h, h], [h, h, h], [-h, h, h],
        ]
    )
    # outward-facing quads, CCW seen from outside
    quads = [
        (4, 5, 6, 7),  # +z
        (1, 0, 3, 2),  # -z
        (5, 1, 2, 6),  # +x
        (0, 4, 7, 3),  # -x
        (7, 6, 2, 3),  # +y
        (0, 1, 5, 4),  # -y
    ]
    faces = []
    uvs = []
    margin = 0.1
    for qi, (a, b, c, d) in enumerate(quads):
        cu, cv = qi % 3, qi // 3
        u0, v0 = cu / 3.0, cv / 2.0
        du, dv = 1.0 / 3.0, 1.0 / 2.0
        lo_u, hi_u = u0 + margin * du, u0 + (1 - margin) * du
        lo_v, hi_v = v0 + margin * dv, v0 + (1 - margin) * dv
        quad_uv = [[lo_u, lo_v], [hi_u, lo_v], [hi_u, hi_v], [lo_u, hi_v]]
        faces.append([a, b, c])
        uvs.append([quad_uv[0], quad_uv[1], quad_uv[2]])
        faces.append([a, c, d])
        uvs.append([quad_uv[0], quad_uv[2], quad_uv[3]])
    # shared-vertex normals point along the corner diagonals
    normals = corners / np.linalg.norm(corners, axis=1, keepdims=True)
    return Mesh.build(corners, faces, uvs, normals=normals)


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return verts, faces


def make_icosphere(subdivisions: int = 1, radius: float = 0.5) -> Mesh:
    """Subdivided icosahedron with one UV chart per face.

    Faces: 20 * 4^subdivisions. Normals are exact (radial).
    """
    verts, faces = _icosahedron()
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}
        vlist = list(verts)

        def midpt(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(vlist)
                vlist.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpt(a, b), midpt(b, c), midpt(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)

    vertices = verts * radius
    normals = verts.copy()
    uvs = _pack_per_face_charts(len(faces))
    return Mesh.build(vertices, faces, uvs, normals=normals)


def make_uv_sphere(stacks: int = 8, slices: int = 12, radius: float = 0.5) -> Mesh:
    """Latitude/longitude sphere with a single connected UV chart.

    Seam vertices are shared in 3D but split in UV (per-corner coordinates),
    keeping the parameterization injective. Exercises the one-island path of
    chart analysis, in contrast to the per-face atlases above.
    """
    verts = []
    for i in range(stacks + 1):
        theta = np.pi * i / stacks
        for j in range(slices):
            phi = 2.0 * np.pi * j / slices
            verts.append(
                [
                    radius * np.sin(theta) * np.cos(phi),
                    radius * np.cos(theta),
                    radius * np.sin(theta) * np.sin(phi),
                ]
            )
    verts = np.asarray(verts)

    def vid(i: int, j: int) -> int:
        return i * slices + (j % slices)

    def uv(i: int, j: int) -> list[float]:
        # j may equal slices at the seam: u=1 on the wrapped corner
        return [j / slices, 1.0 - i / stacks]

    faces = []
    uvs = []
    for i in range(stacks):
        for j in range(slices):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            ua, ub = uv(i, j), uv(i + 1, j)
            uc, ud = uv(i + 1, j + 1), uv(i, j + 1)
            if i < stacks - 1:
                faces.append([a, b, c])
                uvs.append([ua, ub, uc])
            if i > 0:
                faces.append([a, c, d])
                uvs.append([ua, uc, ud])
    normals = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    return Mesh.build(verts, faces, uvs, normals=normals)


def make_folded_charts(fold_angle_deg: float = 0.0) -> Mesh:
    """Two quads sharing a 3D edge but living on opposite ends of UV space.

    Chart A occupies the left strip of UV, chart B the right strip, with the
    full UV width between them — surface-adjacent yet UV-remote, the exact
    situation island dilation must handle (and naive UV flood fill gets wrong).
    """
    ang = np.deg2rad(fold_angle_deg)
    # quad A in the xz plane, quad B folded about the shared edge x=0
    a = np.array([[-1, 0, -0.5], [0, 0, -0.5], [0, 0, 0.5], [-1, 0, 0.5]], dtype=np.float64)
    direction = np.array([np.cos(ang), np.sin(ang), 0.0])
    b = np.array([a[1] + direction, a[2] + direction])
    vertices = np.vstack([a, b])  # 0..3 quad A, 4..5 far edge of quad B
    faces = [[0, 1, 2], [0, 2, 3], [1, 4, 5], [1, 5, 2]]
    ua = [[0.05, 0.05], [0.3, 0.05], [0.3, 0.95], [0.05, 0.95]]
    ub = [[0.7, 0.05], [0.95, 0.05], [0.95, 0.95], [0.7, 0.95]]
    uvs = [
        [ua[0], ua[1], ua[2]],
        [ua[0], ua[2], ua[3]],
        [ub[0], ub[1], ub[2]],
        [ub[0], ub[2], ub[3]],
    ]
    return normalize_mesh(Mesh.build(vertices, faces, uvs))
