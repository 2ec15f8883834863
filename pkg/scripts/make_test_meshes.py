#!/usr/bin/env python3
"""Write the procedural test meshes as OBJ files.

Usage: python scripts/make_test_meshes.py [out_dir]
"""

import sys
from pathlib import Path

from surftex.meshes import save_obj
from surftex.primitives import (
    make_cube,
    make_folded_charts,
    make_icosphere,
    make_quad,
    make_uv_sphere,
)


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "meshes")
    out.mkdir(parents=True, exist_ok=True)
    meshes = {
        "quad.obj": make_quad(),
        "cube.obj": make_cube(),
        "icosphere1.obj": make_icosphere(1),
        "icosphere2.obj": make_icosphere(2),
        "uv_sphere.obj": make_uv_sphere(),
        "folded_charts.obj": make_folded_charts(),
    }
    for name, mesh in meshes.items():
        save_obj(mesh, str(out / name))
        print(f"{out / name}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")


if __name__ == "__main__":
    main()
