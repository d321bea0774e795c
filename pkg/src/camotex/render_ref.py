"""Deterministic ray-cast reference renderer.

Adds what the differentiable path leaves out: Blinn-Phong highlights, hard
shadows towards every light, a ground plane and distractor objects. Primary
visibility of the vehicle uses the same kernel as :mod:`camotex.render_diff`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .camera import CameraPose, camera_from_spherical
from .geometry import Mesh
from .raster import BACKGROUND, occluded, rasterize
from .scenario import FrameRecord, write_manifest
from .scene import SceneConfig
from .texture import TextureMap, save_png, texel_footprint

CAR, GROUND, DISTRACTOR, BACKDROP = 0, 1, 2, 3
CATEGORY_NAMES = ("car", "ground", "distractor", "background")
SHADOW_BIAS = 1e-5


@dataclass(frozen=True, eq=False)
class ReferenceFrame:
    image: np.ndarray
    pose: CameraPose
    scene_id: str
    box: tuple | None            # (x0, y0, x1, y1) pixel edges, None when the car is not visible
    categories: np.ndarray       # (H, W) uint8 per-pixel category
    hit_mask: np.ndarray         # (H, W) primary ray hits the vehicle
    distractor_boxes: tuple = ()


def mask_box(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def _albedo(mesh, texture, faces, bary):
    albedo = mesh.albedo[faces].copy()
    tex = mesh.textured[faces]
    if tex.any():
        uv = np.einsum("nk,nkc->nc", bary[tex], mesh.uv[faces[tex]])
        idx, w, ok = texel_footprint(uv, texture.mask)
        sampled = np.einsum("nk,nkc->nc", w, texture.image.reshape(-1, 3)[idx])
        rows = np.flatnonzero(tex)[ok]
        albedo[rows] = sampled[ok]
    return albedo


def render_ref(mesh: Mesh, texture: TextureMap, pose: CameraPose, scene: SceneConfig) -> ReferenceFrame:
    cam = camera_from_spherical(pose)
    h, w = pose.height, pose.width
    car_tris = mesh.corners() if mesh.n_faces else np.zeros((0, 3, 3))
    extra = scene.distractor_triangles()
    n_car, n_extra = len(car_tris), len(extra)
    all_tris = np.concatenate([car_tris, extra]) if n_extra else car_tris
    face_id, bary, depth = rasterize(all_tris, cam)

    dirs = cam.pixel_rays().reshape(-1, 3)
    fid = face_id.reshape(-1)
    dep = depth.reshape(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 1] < 0, (scene.ground_height - cam.position[1]) / dirs[:, 1], np.inf)
    t_ground = np.where(t_ground > 0, t_ground, np.inf)
    obj_hit = (fid != BACKGROUND) & (dep <= t_ground)
    ground_hit = ~obj_hit & np.isfinite(t_ground)

    cats = np.full(h * w, BACKDROP, dtype=np.uint8)
    cats[obj_hit & (fid < n_car)] = CAR
    cats[obj_hit & (fid >= n_car)] = DISTRACTOR
    cats[ground_hit] = GROUND

    image = np.tile(np.asarray(scene.background, float), (h * w, 1))
    lit = np.flatnonzero(obj_hit | ground_hit)
    t = np.where(obj_hit, dep, t_ground)[lit]
    points = cam.position[None, :] + t[:, None] * dirs[lit]
    view = -dirs[lit] / np.linalg.norm(dirs[lit], axis=1, keepdims=True)

    normals = np.zeros((len(lit), 3))
    albedo = np.zeros((len(lit), 3))
    spec = np.zeros(len(lit))
    shin = np.ones(len(lit))
    is_obj = obj_hit[lit]
    is_car = is_obj & (fid[lit] < n_car)
    is_dis = is_obj & ~is_car

    if n_extra:
        e1 = extra[:, 1] - extra[:, 0]
        e2 = extra[:, 2] - extra[:, 0]
        extra_n = np.cross(e1, e2)
        extra_n /= np.linalg.norm(extra_n, axis=1, keepdims=True)
        extra_color = np.concatenate([np.tile(d.color, (12, 1)) for d in scene.distractors])
    if is_car.any():
        faces = fid[lit][is_car]
        normals[is_car] = mesh.face_normals()[faces]
        albedo[is_car] = _albedo(mesh, texture, faces, bary.reshape(-1, 3)[lit][is_car])
        spec[is_car] = mesh.specular[faces]
        shin[is_car] = mesh.shininess[faces]
    if is_dis.any():
        k = fid[lit][is_dis] - n_car
        normals[is_dis] = extra_n[k]
        albedo[is_dis] = np.asarray(extra_color)[k]
    is_ground = ~is_obj
    normals[is_ground] = (0.0, 1.0, 0.0)
    albedo[is_ground] = scene.ground_albedo
    flip = np.einsum("ij,ij->i", normals, view) < 0
    normals[flip] *= -1.0

    color = albedo * np.asarray(scene.ambient)[None, :]
    lights = [(np.asarray(l.direction), None, np.asarray(l.intensity)) for l in scene.directional_lights]
    lights += [(None, np.asarray(l.position), np.asarray(l.intensity)) for l in scene.point_lights]
    for direction, position, intensity in lights:
        if direction is not None:
            to_l = np.tile(direction, (len(lit), 1))
            tmax = np.full(len(lit), np.inf)
        else:
            to_l = position[None, :] - points
            tmax = np.linalg.norm(to_l, axis=1)
            to_l = to_l / tmax[:, None]
        ndl = np.maximum(np.einsum("ij,ij->i", normals, to_l), 0.0)
        cand = np.flatnonzero(ndl > 0)
        shadow = np.zeros(len(lit), dtype=bool)
        if len(cand):
            origins = points[cand] + SHADOW_BIAS * normals[cand]
            shadow[cand] = occluded(origins, to_l[cand], tmax[cand], all_tris)
        vis = (~shadow).astype(float)
        half = to_l + view
        half /= np.maximum(np.linalg.norm(half, axis=1, keepdims=True), 1e-12)
        ndh = np.maximum(np.einsum("ij,ij->i", normals, half), 0.0)
        highlight = np.where(ndl > 0, spec * ndh ** shin, 0.0)
        color += vis[:, None] * (albedo * ndl[:, None] + highlight[:, None]) * intensity[None, :]

    image[lit] = np.clip(color, 0.0, 1.0)
    car_mask = (cats == CAR).reshape(h, w)
    dboxes = []
    for k in range(len(scene.distractors)):
        sel = obj_hit & (fid >= n_car + 12 * k) & (fid < n_car + 12 * (k + 1))
        b = mask_box(sel.reshape(h, w))
        if b is not None:
            dboxes.append(b)
    return ReferenceFrame(
        image=image.reshape(h, w, 3), pose=pose, scene_id=scene.scene_id, box=mask_box(car_mask),
        categories=cats.reshape(h, w), hit_mask=car_mask, distractor_boxes=tuple(dboxes),
    )


def _save_categories(cats: np.ndarray, path) -> None:
    from PIL import Image
    Image.fromarray(cats.astype(np.uint8)).save(os.fspath(path), format="PNG")


def load_categories(path) -> np.ndarray:
    from PIL import Image
    with Image.open(os.fspath(path)) as im:
        return np.asarray(im, dtype=np.uint8)


def prerender_dataset(mesh: Mesh, texture: TextureMap, scenario, out_dir, manifest_name="manifest.jsonl",
                      start_index: int = 0, progress=None, appearance=None) -> list[FrameRecord]:
    """Render every ``(pose, scene)`` pair once and write frames plus a manifest.

    ``appearance(index)`` may return ``(texture, tag)`` to vary the vehicle's
    texture per frame; the tag is recorded in the frame's extras.
    """
    frame_dir = os.path.join(out_dir, "frames")
    try:
        os.makedirs(frame_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {frame_dir}: {exc}") from exc
    records = []
    for k, (pose, scene) in enumerate(scenario):
        idx = start_index + k
        extras = {}
        tex = texture
        if appearance is not None:
            tex, extras["appearance"] = appearance(idx)
        frame = render_ref(mesh, tex, pose, scene)
        img_rel = os.path.join("frames", f"{idx:05d}.png")
        cat_rel = os.path.join("frames", f"{idx:05d}_cat.png")
        save_png(frame.image, os.path.join(out_dir, img_rel))
        _save_categories(frame.categories, os.path.join(out_dir, cat_rel))
        records.append(FrameRecord(index=idx, scene_id=scene.scene_id, pose=pose, box=frame.box,
                                   image=img_rel, categories=cat_rel,
                                   distractor_boxes=frame.distractor_boxes, extras=extras))
        if progress is not None:
            progress(k + 1, len(scenario))
    write_manifest(records, os.path.join(out_dir, manifest_name))
    return records
