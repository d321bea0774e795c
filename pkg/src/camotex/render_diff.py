"""Texture-differentiable rasterizer.

Visibility is a hard z-buffer; the image depends on the texture only through
bilinear texel sampling and per-pixel shading scales, so for fixed geometry
the rendered image is affine in the texel values and the vector-Jacobian
product below is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraPose, camera_from_spherical
from .geometry import Mesh, bake_texel_mask
from .raster import BACKGROUND, rasterize
from .scene import SceneConfig, lambert_scale
from .texture import TextureMap, texel_footprint


@dataclass(frozen=True, eq=False)
class Rasterization:
    """Texture-independent part of a render: visibility, sampling footprint
    and shading scale of every covered pixel (row-major order)."""

    pose: CameraPose
    face_id: np.ndarray       # (H, W)
    bary: np.ndarray          # (H, W, 3)
    pixels: np.ndarray        # (N,) flat indices of covered pixels
    faces: np.ndarray         # (N,)
    sampled: np.ndarray       # (N,) True where the texture is sampled
    texel_index: np.ndarray   # (N, 4)
    texel_weight: np.ndarray  # (N, 4)
    scale: np.ndarray         # (N, 3) shading multiplier of the albedo
    fallback: np.ndarray      # (N, 3) material albedo
    textured_face: np.ndarray  # (N,) face is flagged textured
    background: np.ndarray    # (3,)
    texture_shape: tuple      # (H_t, W_t)


@dataclass(frozen=True, eq=False)
class RenderTape:
    """Saved forward state for :func:`render_diff_vjp`."""

    raster: Rasterization
    passthrough: np.ndarray   # (N, 3) pre-clamp value inside [0, 1]

    @property
    def face_id(self):
        return self.raster.face_id


def render_face_ids(mesh: Mesh, pose: CameraPose) -> np.ndarray:
    """Per-pixel index of the nearest face, -1 for background."""
    face_id, _, _ = rasterize(mesh.corners() if mesh.n_faces else np.zeros((0, 3, 3)),
                              camera_from_spherical(pose))
    return face_id


def _view_facing_normals(mesh, faces, dirs):
    n = mesh.face_normals()[faces]
    flip = np.einsum("ij,ij->i", n, dirs) > 0
    n[flip] *= -1.0
    return n


def rasterize_mesh(mesh: Mesh, texture_mask: np.ndarray, pose: CameraPose,
                   scene: SceneConfig) -> Rasterization:
    """Geometry pass of :func:`render_diff`; reusable for any texture with the same mask."""
    cam = camera_from_spherical(pose)
    tris = mesh.corners() if mesh.n_faces else np.zeros((0, 3, 3))
    face_id, bary, depth = rasterize(tris, cam)
    flat_ids = face_id.reshape(-1)
    pixels = np.flatnonzero(flat_ids != BACKGROUND)
    faces = flat_ids[pixels]
    b = bary.reshape(-1, 3)[pixels]
    dirs = cam.pixel_rays().reshape(-1, 3)[pixels]
    points = cam.position[None, :] + depth.reshape(-1)[pixels, None] * dirs

    textured = mesh.textured[faces]
    uv = np.einsum("nk,nkc->nc", b, mesh.uv[faces])
    index = np.zeros((len(pixels), 4), dtype=np.int64)
    weight = np.zeros((len(pixels), 4))
    sampled = np.zeros(len(pixels), dtype=bool)
    if textured.any():
        idx, w, ok = texel_footprint(uv[textured], texture_mask)
        index[textured], weight[textured] = idx, w
        sampled[textured] = ok
    weight[~sampled] = 0.0
    index[~sampled] = 0

    normals = _view_facing_normals(mesh, faces, dirs)
    scale = lambert_scale(normals, points, scene)
    return Rasterization(
        pose=pose, face_id=face_id, bary=bary, pixels=pixels, faces=faces, sampled=sampled,
        texel_index=index, texel_weight=weight, scale=scale,
        fallback=mesh.albedo[faces].copy(), textured_face=textured,
        background=np.asarray(scene.background, float), texture_shape=texture_mask.shape,
    )


def shade(raster: Rasterization, texture: TextureMap):
    """Color a cached rasterization with ``texture``; returns ``(image, tape)``."""
    if texture.mask.shape != raster.texture_shape:
        raise ValueError(f"texture size {texture.mask.shape} does not match the rasterized "
                         f"atlas {raster.texture_shape}")
    h, w = raster.face_id.shape
    flat_tex = texture.image.reshape(-1, 3)
    albedo = raster.fallback.copy()
    if texture.untextured is not None:
        albedo[~raster.textured_face] = np.asarray(texture.untextured, float)
    s = raster.sampled
    albedo[s] = np.einsum("nk,nkc->nc", raster.texel_weight[s], flat_tex[raster.texel_index[s]])
    value = albedo * raster.scale
    image = np.tile(raster.background, (h * w, 1))
    image[raster.pixels] = np.clip(value, 0.0, 1.0)
    passthrough = (value >= 0.0) & (value <= 1.0)
    return image.reshape(h, w, 3), RenderTape(raster, passthrough)


def check_texture(mesh: Mesh, texture: TextureMap) -> None:
    expected = bake_texel_mask(mesh, texture.width, texture.height)
    if not np.array_equal(expected, texture.mask):
        raise ValueError(f"texture of size {texture.height}x{texture.width} does not match the "
                         "mesh atlas (texel mask differs)")


def render_diff(mesh: Mesh, texture: TextureMap, pose: CameraPose, scene: SceneConfig):
    """Render ``mesh`` with ``texture``: ambient plus Lambertian flat shading,
    bilinear texture lookup on textured faces. Returns ``(image, tape)``."""
    check_texture(mesh, texture)
    return shade(rasterize_mesh(mesh, texture.mask, pose, scene), texture)


def render_diff_vjp(tape: RenderTape, image_cotangent: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(image * image_cotangent)`` with respect to the texture."""
    r = tape.raster
    h, w = r.face_id.shape
    cot = np.asarray(image_cotangent, dtype=np.float64)
    if cot.shape != (h, w, 3):
        raise ValueError(f"cotangent shape {cot.shape} != image shape {(h, w, 3)}")
    th, tw = r.texture_shape
    grad = np.zeros((th * tw, 3))
    s = r.sampled
    if s.any():
        per_pixel = cot.reshape(-1, 3)[r.pixels[s]] * r.scale[s] * tape.passthrough[s]
        idx = r.texel_index[s].reshape(-1)
        for c in range(3):
            contrib = (r.texel_weight[s] * per_pixel[:, c:c + 1]).reshape(-1)
            grad[:, c] = np.bincount(idx, weights=contrib, minlength=th * tw)
    return grad.reshape(th, tw, 3)
