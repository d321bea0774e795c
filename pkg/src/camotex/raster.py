"""Compiled visibility kernels shared by the differentiable and reference renderers.

Primary visibility evaluates the exact ray/triangle test for every pixel
center inside each triangle's projected bounding box and keeps the nearest
hit; both renderers call the same kernel, so their silhouettes agree bit for bit.
"""

from __future__ import annotations

import numba
import numpy as np

from .camera import Camera

BACKGROUND = -1


@numba.njit(cache=True)
def _intersect(ox, oy, oz, dx, dy, dz, p0, e1, e2):
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) < 1e-300:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tx, ty, tz = ox - p0[0], oy - p0[1], oz - p0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    return t, u, v


@numba.njit(cache=True)
def _rasterize(tris, origin, fwd, right, up, tan_x, tan_y, width, height, face_id, bary, depth):
    nf = tris.shape[0]
    for f in range(nf):
        p0 = tris[f, 0]
        e1 = tris[f, 1] - p0
        e2 = tris[f, 2] - p0
        cmin, cmax, rmin, rmax = 0, width - 1, 0, height - 1
        behind = False
        lo_c, hi_c, lo_r, hi_r = 1e300, -1e300, 1e300, -1e300
        for k in range(3):
            rx = tris[f, k, 0] - origin[0]
            ry = tris[f, k, 1] - origin[1]
            rz = tris[f, k, 2] - origin[2]
            z = rx * fwd[0] + ry * fwd[1] + rz * fwd[2]
            if z <= 1e-9:
                behind = True
                break
            x = (rx * right[0] + ry * right[1] + rz * right[2]) / z / tan_x
            y = (rx * up[0] + ry * up[1] + rz * up[2]) / z / tan_y
            c = (x + 1.0) / 2.0 * width - 0.5
            r = (1.0 - y) / 2.0 * height - 0.5
            lo_c = min(lo_c, c)
            hi_c = max(hi_c, c)
            lo_r = min(lo_r, r)
            hi_r = max(hi_r, r)
        if not behind:
            if hi_c < -1.0 or lo_c > width or hi_r < -1.0 or lo_r > height:
                continue
            cmin = max(int(np.floor(lo_c)) - 1, 0)
            cmax = min(int(np.ceil(hi_c)) + 1, width - 1)
            rmin = max(int(np.floor(lo_r)) - 1, 0)
            rmax = min(int(np.ceil(hi_r)) + 1, height - 1)
        for i in range(rmin, rmax + 1):
            b = ((i + 0.5) / height * 2.0 - 1.0) * tan_y
            for j in range(cmin, cmax + 1):
                a = ((j + 0.5) / width * 2.0 - 1.0) * tan_x
                dx = fwd[0] + a * right[0] - b * up[0]
                dy = fwd[1] + a * right[1] - b * up[1]
                dz = fwd[2] + a * right[2] - b * up[2]
                t, u, v = _intersect(origin[0], origin[1], origin[2], dx, dy, dz, p0, e1, e2)
                if t > 1e-9 and t < depth[i, j]:
                    depth[i, j] = t
                    face_id[i, j] = f
                    bary[i, j, 0] = u
                    bary[i, j, 1] = v


def rasterize(tris: np.ndarray, camera: Camera):
    """Nearest-hit buffers for triangles ``tris`` (F, 3, 3) seen by ``camera``.

    Returns ``(face_id, bary, depth)``: face ids (-1 for background),
    barycentric weights (H, W, 3) of the three corners, and view depth
    (inf for background).
    """
    h, w = camera.height, camera.width
    face_id = np.full((h, w), BACKGROUND, dtype=np.int64)
    uv = np.zeros((h, w, 2))
    depth = np.full((h, w), np.inf)
    tris = np.ascontiguousarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    if len(tris):
        _rasterize(tris, camera.position, camera.forward, camera.right, camera.up,
                   camera.tan_x, camera.tan_y, w, h, face_id, uv, depth)
    bary = np.stack([1.0 - uv[..., 0] - uv[..., 1], uv[..., 0], uv[..., 1]], axis=-1)
    bary[face_id < 0] = 0.0
    return face_id, bary, depth


@numba.njit(cache=True)
def _occluded(points, dirs, tmax, tris, centers, radii, out):
    n = points.shape[0]
    nf = tris.shape[0]
    for k in range(n):
        ox, oy, oz = points[k, 0], points[k, 1], points[k, 2]
        dx, dy, dz = dirs[k, 0], dirs[k, 1], dirs[k, 2]
        dd = dx * dx + dy * dy + dz * dz
        for f in range(nf):
            # bounding-sphere rejection before the exact test
            cx, cy, cz = centers[f, 0] - ox, centers[f, 1] - oy, centers[f, 2] - oz
            proj = (cx * dx + cy * dy + cz * dz) / dd
            if proj < -radii[f]:
                continue
            qx, qy, qz = cx - proj * dx, cy - proj * dy, cz - proj * dz
            if qx * qx + qy * qy + qz * qz > radii[f] * radii[f]:
                continue
            p0 = tris[f, 0]
            t, u, v = _intersect(ox, oy, oz, dx, dy, dz, p0, tris[f, 1] - p0, tris[f, 2] - p0)
            if t > 1e-9 and t < tmax[k]:
                out[k] = True
                break


def occluded(points: np.ndarray, dirs: np.ndarray, tmax: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Whether each ray ``points + t * dirs``, ``0 < t < tmax``, hits any triangle."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(points), dtype=bool)
    tris = np.ascontiguousarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    if len(points) == 0 or len(tris) == 0:
        return out
    centers = tris.mean(axis=1)
    radii = np.linalg.norm(tris - centers[:, None, :], axis=2).max(axis=1) * (1 + 1e-9) + 1e-12
    _occluded(points, np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3),
              np.ascontiguousarray(tmax, dtype=np.float64).reshape(-1), tris, centers, radii, out)
    return out
