"""Procedural test meshes: hemisphere, curved door panel, flat quad and a
desk-scale car with separate textured body patches.

Run ``python -m camotex.fixtures OUT_DIR`` to regenerate the packaged assets.
"""

from __future__ import annotations

import json
import os
import sys

import numpy as np

from .geometry import Mesh, make_mesh, save_mesh

PAINT = (0.70, 0.12, 0.10)
GLASS = (0.08, 0.10, 0.13)


def flat_quad(size: float = 1.0) -> Mesh:
    """Square in the x-z plane with an isometric uv layout."""
    v = np.array([[0, 0, 0], [size, 0, 0], [size, 0, size], [0, 0, size]], float)
    faces = [[0, 2, 1], [0, 3, 2]]
    uv = v[:, [0, 2]][np.array(faces)]
    return make_mesh(v, faces, uv=uv, textured=[True, True])


def _grid_faces(nr, nc, offset=0, flip=False):
    faces = []
    for i in range(nr):
        for j in range(nc):
            a = offset + i * (nc + 1) + j
            b, c, d = a + 1, a + nc + 1, a + nc + 2
            tri = [[a, c, b], [b, c, d]]
            if flip:
                tri = [[t[0], t[2], t[1]] for t in tri]
            faces.extend(tri)
    return faces


def hemisphere(n: int = 16, radius: float = 0.3) -> Mesh:
    """Dome over the x-z plane, ``2 n^2`` faces, top-down planar uv projection.

    A square grid is mapped onto the unit disk and lifted onto the sphere, so
    the mesh is a single disk-topology patch without a pole fan.
    """
    s = np.linspace(-1.0, 1.0, n + 1)
    gx, gz = np.meshgrid(s, s)
    dx = gx * np.sqrt(1.0 - gz ** 2 / 2.0)
    dz = gz * np.sqrt(1.0 - gx ** 2 / 2.0)
    rho2 = np.clip(dx ** 2 + dz ** 2, 0.0, 1.0)
    verts = np.stack([dx, np.sqrt(1.0 - rho2), dz], axis=-1).reshape(-1, 3) * radius
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b, c, d = a + 1, a + n + 1, a + n + 2
            if np.linalg.norm(verts[a] - verts[d]) <= np.linalg.norm(verts[b] - verts[c]):
                faces += [[a, d, b], [a, c, d]]
            else:
                faces += [[a, c, b], [b, c, d]]
    faces = np.array(faces)
    uv = 0.5 + verts[:, [0, 2]][faces]
    return make_mesh(verts, faces, uv=uv, textured=np.ones(len(faces), bool),
                     albedo=(0.6, 0.6, 0.6), specular=0.3, shininess=24.0)


def door_panel(width: float = 0.3, height: float = 0.15, bend_radius: float = 0.12,
               nx: int = 12, ny: int = 8) -> Mesh:
    """Cylindrically curved panel with a planar (x, y) uv projection."""
    xs = np.linspace(-width / 2, width / 2, nx + 1)
    arc = np.linspace(-height / 2, height / 2, ny + 1) / bend_radius
    verts = []
    for a in arc:
        for x in xs:
            verts.append([x, bend_radius * np.sin(a), bend_radius * (np.cos(a) - 1.0)])
    verts = np.array(verts)
    faces = np.array(_grid_faces(ny, nx))
    uv = 0.5 + verts[:, :2][faces]
    return make_mesh(verts, faces, uv=uv, textured=np.ones(len(faces), bool),
                     albedo=PAINT, specular=0.5, shininess=32.0)


# ---------------------------------------------------------------------------
# Car

CAR_LENGTH = 0.46
CLEARANCE = 0.028
BELT = 0.09
HALF_WIDTH = 0.09
DOOR_BULGE = 0.006
N_STATIONS = 24
N_SIDE = 5
N_TOP = 10
ROOF_SEGMENTS = (3, 7)  # top segments [3, 7) on the cabin are roof, the rest glass

_PROFILE_X = [-0.23, -0.07, -0.01, 0.10, 0.15, 0.23]
_PROFILE_Y = [0.092, 0.102, 0.145, 0.145, 0.112, 0.105]

ATLAS = {
    "left": (0.02, 0.02, 0.98, 0.22),
    "right": (0.02, 0.24, 0.98, 0.44),
    "hood": (0.02, 0.46, 0.40, 0.98),
    "roof": (0.42, 0.46, 0.70, 0.98),
    "trunk": (0.72, 0.46, 0.98, 0.98),
}


def _top_height(x):
    return np.interp(x, _PROFILE_X, _PROFILE_Y)


def _region(xm):
    if xm < -0.07:
        return "hood"
    if xm < -0.01:
        return "windshield"
    if xm < 0.10:
        return "roof"
    if xm < 0.15:
        return "rear_window"
    return "trunk"


def _section(x):
    """Cross-section ring at station ``x``: left bottom -> over the top -> right bottom."""
    w0 = HALF_WIDTH - 0.012 * max(0.0, abs(x) - 0.19) / 0.04
    ytop = _top_height(x)
    tumble = float(np.clip(0.015 * (ytop - 0.10) / 0.045, 0.0, 0.015))
    pts = []
    for k in range(N_SIDE + 1):
        s = k / N_SIDE
        pts.append([x, CLEARANCE + s * (BELT - CLEARANCE), -(w0 + DOOR_BULGE * np.sin(np.pi * s))])
    for k in range(1, N_TOP):
        a = np.pi * k / N_TOP
        lift = np.sin(a) ** 0.35
        width = w0 - tumble * lift
        pts.append([x, BELT + (ytop - BELT) * lift, -np.cos(a) * width])
    for k in range(N_SIDE, -1, -1):
        s = k / N_SIDE
        pts.append([x, CLEARANCE + s * (BELT - CLEARANCE), w0 + DOOR_BULGE * np.sin(np.pi * s)])
    return np.array(pts)


def _wheel(cx, cz, side, radius=0.032, width=0.024, n=12):
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    inner = cz - side * width / 2
    outer = cz + side * width / 2
    verts = []
    for z in (inner, outer):
        verts.append([cx, radius, z])
        for a in ang:
            verts.append([cx + radius * np.cos(a), radius + radius * np.sin(a), z])
    faces = []
    for k in range(n):
        a, b = 1 + k, 1 + (k + 1) % n
        faces.append([0, b, a])
        faces.append([n + 1, n + 1 + a, n + 1 + b])
        faces.append([a, b, n + 1 + b])
        faces.append([a, n + 1 + b, n + 1 + a])
    return np.array(verts), np.array(faces)


def car(paint=PAINT) -> tuple[Mesh, dict]:
    """Desk-scale car (1:10 of a 4.6 m sedan) with planar-projection uv.

    Returns the mesh and its atlas description ``{patch: {"seed_face", "rect"}}``.
    Textured patches: left/right doors (below the belt line), hood, roof,
    trunk. Windows, wheels, bumpers and underbody are not textured.
    """
    xs = np.linspace(-CAR_LENGTH / 2, CAR_LENGTH / 2, N_STATIONS)
    rings = np.stack([_section(x) for x in xs])  # (S, P, 3)
    n_ring = rings.shape[1]
    verts = list(rings.reshape(-1, 3))
    faces, uv, textured, albedo, spec, shin, patch_of = [], [], [], [], [], [], []

    def add(tri, tri_uv=None, color=PAINT, s=0.5, sh=32.0, patch=None):
        faces.append(tri)
        uv.append(tri_uv if tri_uv is not None else np.zeros((3, 2)))
        textured.append(tri_uv is not None)
        albedo.append(color if tri_uv is None else paint)
        spec.append(s)
        shin.append(sh)
        patch_of.append(patch)

    def vid(i, p):
        return i * n_ring + p

    patch_centers = {}
    for name in ATLAS:
        patch_centers[name] = None

    # planar projections per patch, centered in the patch rectangle
    def side_uv(p, name):
        r = ATLAS[name]
        cu, cv = (r[0] + r[2]) / 2, (r[1] + r[3]) / 2
        x = p[0] if name == "left" else -p[0]
        return [cu + x, cv + ((BELT + CLEARANCE) / 2 - p[1])]

    region_x = {}
    for i in range(N_STATIONS - 1):
        region_x.setdefault(_region((xs[i] + xs[i + 1]) / 2), []).extend([xs[i], xs[i + 1]])
    top_center = {k: (min(v) + max(v)) / 2 for k, v in region_x.items()}

    def top_uv(p, name):
        r = ATLAS[name]
        cu, cv = (r[0] + r[2]) / 2, (r[1] + r[3]) / 2
        return [cu + p[0] - top_center[name], cv + p[2]]

    seg_total = n_ring - 1
    for i in range(N_STATIONS - 1):
        reg = _region((xs[i] + xs[i + 1]) / 2)
        for p in range(seg_total):
            quad = [vid(i, p), vid(i, p + 1), vid(i + 1, p + 1), vid(i + 1, p)]
            tris = [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]]
            if p < N_SIDE:
                name, proj = "left", side_uv
            elif p >= N_SIDE + N_TOP:
                name, proj = "right", side_uv
            else:
                t = p - N_SIDE
                if reg in ("hood", "trunk"):
                    name, proj = reg, top_uv
                elif reg == "roof" and ROOF_SEGMENTS[0] <= t < ROOF_SEGMENTS[1]:
                    name, proj = "roof", top_uv
                else:
                    name, proj = None, None
            for tri in tris:
                if name is None:
                    add(tri, color=GLASS, s=0.9, sh=80.0)
                else:
                    add(tri, np.array([proj(verts[v], name) for v in tri]), patch=name)

    # underbody strip between the two bottom edges
    for i in range(N_STATIONS - 1):
        a, b = vid(i, 0), vid(i, n_ring - 1)
        c, d = vid(i + 1, 0), vid(i + 1, n_ring - 1)
        add([a, c, d], color=(0.08, 0.08, 0.08), s=0.0)
        add([a, d, b], color=(0.08, 0.08, 0.08), s=0.0)

    # end caps as fans around the section centroid
    for i, color in ((0, (0.18, 0.18, 0.2)), (N_STATIONS - 1, (0.55, 0.08, 0.06))):
        center = rings[i].mean(axis=0)
        c = len(verts)
        verts.append(center)
        for p in range(n_ring):
            q = (p + 1) % n_ring
            tri = [c, vid(i, q), vid(i, p)] if i == 0 else [c, vid(i, p), vid(i, q)]
            add(tri, color=color, s=0.3, sh=16.0)

    for cx in (-0.145, 0.145):
        for side in (-1, 1):
            wv, wf = _wheel(cx, side * 0.085, side)
            off = len(verts)
            verts.extend(wv)
            for tri in wf:
                add(list(tri + off), color=(0.05, 0.05, 0.05), s=0.1, sh=8.0)

    mesh = make_mesh(np.array(verts), np.array(faces), np.array(uv), np.array(textured),
                     np.array(albedo), np.array(spec), np.array(shin))
    atlas = {}
    centroids = mesh.corners().mean(axis=1)
    for name, rect in ATLAS.items():
        members = [f for f, p in enumerate(patch_of) if p == name]
        cen = centroids[members].mean(axis=0)
        seed = members[int(np.argmin(np.linalg.norm(centroids[members] - cen, axis=1)))]
        atlas[name] = {"seed_face": int(seed), "rect": list(rect)}
    return mesh, atlas


def write_assets(out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_mesh(hemisphere(), os.path.join(out_dir, "hemisphere.obj"))
    save_mesh(door_panel(), os.path.join(out_dir, "door.obj"))
    mesh, atlas = car()
    save_mesh(mesh, os.path.join(out_dir, "car.obj"))
    with open(os.path.join(out_dir, "car_atlas.json"), "w", encoding="utf-8") as fh:
        json.dump(atlas, fh, indent=2, sort_keys=True)


def asset_path(name: str) -> str:
    return os.path.join(os.path.dirname(__file__), "assets", name)


if __name__ == "__main__":
    write_assets(sys.argv[1] if len(sys.argv) > 1 else asset_path(""))
