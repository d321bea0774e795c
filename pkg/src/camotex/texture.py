"""Texture maps, bilinear texel footprints and PNG helpers."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import Mesh, bake_texel_mask


@dataclass(frozen=True, eq=False)
class TextureMap:
    """``H x W x 3`` image in [0, 1] with the mask of optimizable texels.

    ``untextured`` optionally overrides the albedo of faces without uv (used
    by the two-tone mask map); ``None`` keeps each face's material color.
    """

    image: np.ndarray
    mask: np.ndarray
    untextured: tuple | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"texture must be H x W x 3, got {img.shape}")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != img.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match texture {img.shape[:2]}")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def with_image(self, image) -> "TextureMap":
        return TextureMap(image, self.mask, self.untextured)


def texture_for_mesh(mesh: Mesh, image) -> TextureMap:
    image = np.asarray(image, dtype=np.float64)
    return TextureMap(image, bake_texel_mask(mesh, image.shape[1], image.shape[0]))


def solid_texture(mesh: Mesh, color, width: int = 256, height: int = 256) -> TextureMap:
    """Uniform paint color on every texel."""
    img = np.broadcast_to(np.asarray(color, float), (height, width, 3)).copy()
    return texture_for_mesh(mesh, img)


def random_texture(mesh: Mesh, seed: int, width: int = 256, height: int = 256,
                   grid: int = 32) -> TextureMap:
    """Uniform random ``grid x grid`` color image enlarged by pixel repetition."""
    rng = np.random.default_rng(seed)
    coarse = rng.random((grid, grid, 3))
    rows = np.arange(height) * grid // height
    cols = np.arange(width) * grid // width
    return texture_for_mesh(mesh, coarse[rows][:, cols])


def texel_footprint(uv: np.ndarray, mask: np.ndarray, search: int = 2):
    """Bilinear sampling footprint restricted to masked texels.

    Returns ``(index, weight, valid)``: flat texel indices (N, 4), weights
    (N, 4) that are non-negative and sum to 1 on valid rows, and a validity
    flag. Unmasked texels get zero weight and the remaining weights are
    renormalized. When none of the four neighbours is masked, the nearest
    masked texel within ``search`` texels takes the full weight; rows with no
    masked texel in reach are invalid.
    """
    h, w = mask.shape
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    x = uv[:, 0] * w - 0.5
    y = uv[:, 1] * h - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    xs = [np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)]
    ys = [np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)]
    index = np.stack([ys[0] * w + xs[0], ys[0] * w + xs[1], ys[1] * w + xs[0], ys[1] * w + xs[1]], axis=1)
    weight = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    flat_mask = mask.reshape(-1)
    weight = weight * flat_mask[index]
    total = weight.sum(axis=1)
    ok = total > 0
    weight[ok] /= total[ok, None]

    missing = np.flatnonzero(~ok)
    valid = ok.copy()
    if len(missing):
        cx = np.clip(np.rint(x[missing]).astype(np.int64), 0, w - 1)
        cy = np.clip(np.rint(y[missing]).astype(np.int64), 0, h - 1)
        offs = np.arange(-search, search + 1)
        oy, ox = np.meshgrid(offs, offs, indexing="ij")
        ty = cy[:, None] + oy.reshape(1, -1)
        tx = cx[:, None] + ox.reshape(1, -1)
        inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        flat = np.clip(ty, 0, h - 1) * w + np.clip(tx, 0, w - 1)
        usable = inside & flat_mask[flat]
        dist = (tx - x[missing, None]) ** 2 + (ty - y[missing, None]) ** 2
        dist = np.where(usable, dist, np.inf)
        best = np.argmin(dist, axis=1)
        found = np.isfinite(dist[np.arange(len(missing)), best])
        rows = missing[found]
        index[rows] = flat[found, best[found]][:, None]
        weight[rows] = 0.0
        weight[rows, 0] = 1.0
        valid[rows] = True
        index[missing[~found]] = 0
    return index, weight, valid


# ---------------------------------------------------------------------------
# PNG helpers

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, float) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    """Write an H x W (x 3) float image in [0, 1] as 8-bit PNG."""
    arr = to_uint8(img)
    try:
        Image.fromarray(arr).save(os.fspath(path), format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def save_mask_png(mask: np.ndarray, path) -> None:
    """Write a boolean grid as a 1-bit PNG."""
    Image.fromarray(np.asarray(mask, bool)).convert("1").save(os.fspath(path), format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(os.fspath(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_mask_png(path) -> np.ndarray:
    with Image.open(os.fspath(path)) as im:
        return np.asarray(im.convert("1"), dtype=bool)
