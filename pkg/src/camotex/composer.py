"""Mask-based combination of differentiable and reference renders.

The textured part of the vehicle comes from the differentiable render (after
random photometric transforms), everything else from the reference render.
The per-pixel selection mask is recovered by rendering a two-tone grayscale
map under ambient-only light and thresholding between the two tone bands.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .camera import CameraPose
from .geometry import Mesh
from .render_diff import check_texture, rasterize_mesh, shade
from .scene import SceneConfig
from .texture import TextureMap


class LitSceneError(ValueError):
    pass


class SeparationError(ValueError):
    pass


@dataclass(frozen=True)
class MaskMapSpec:
    c_t: float = 0.8   # gray level of textured texels
    c_n: float = 0.2   # gray level of everything else

    def __post_init__(self):
        for name in ("c_t", "c_n"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if abs(self.c_t - self.c_n) < 0.3:
            raise ValueError(f"|c_t - c_n| = {abs(self.c_t - self.c_n):.3f} < 0.3")


def make_mask_map(spec: MaskMapSpec, texel_mask: np.ndarray) -> TextureMap:
    mask = np.asarray(texel_mask, dtype=bool)
    gray = np.where(mask, spec.c_t, spec.c_n)
    image = np.repeat(gray[..., None], 3, axis=2)
    return TextureMap(image, mask, untextured=(spec.c_n,) * 3)


def dark_scene(ambient: float = 1.0) -> SceneConfig:
    return SceneConfig(ambient=ambient, background=(0.0, 0.0, 0.0), scene_id="dark")


def render_dark(mesh: Mesh, mask_map: TextureMap, pose: CameraPose, scene: SceneConfig | None = None,
                *, allow_lit: bool = False) -> np.ndarray:
    """Render the two-tone map; non-textured faces take the ``c_n`` tone.

    ``allow_lit`` exists only to reproduce the failure of lit mask renders.
    """
    scene = dark_scene() if scene is None else scene
    if not scene.dark and not allow_lit:
        raise LitSceneError("mask renders require a scene without directional or point lights")
    check_texture(mesh, mask_map)
    raster = rasterize_mesh(mesh, mask_map.mask, pose, scene)
    c_t = mask_map.image[mask_map.mask][0] if mask_map.mask.any() else np.ones(3)
    c_n = np.asarray(mask_map.untextured if mask_map.untextured is not None else (0.0,) * 3, float)
    # textured faces whose footprint misses every masked texel still carry the textured tone
    fallback = np.where(raster.textured_face[:, None], c_t[None, :], c_n[None, :])
    image, _ = shade(dataclasses.replace(raster, fallback=fallback), mask_map)
    return image


@dataclass(frozen=True)
class GrayscaleSeparation:
    c_t_min: float
    c_t_max: float
    c_n_min: float
    c_n_max: float
    c_mid: float

    @property
    def textured_above(self) -> bool:
        return self.c_t_min >= self.c_n_max


def separation_threshold(c_t_min, c_t_max, c_n_min, c_n_max) -> GrayscaleSeparation:
    if c_t_min > c_n_max:
        mid = (c_t_min + c_n_max) / 2.0
    elif c_t_max < c_n_min:
        mid = (c_t_max + c_n_min) / 2.0
    else:
        raise SeparationError(
            f"dark-light separation violated: textured range [{c_t_min:.4f}, {c_t_max:.4f}] "
            f"meets non-textured range [{c_n_min:.4f}, {c_n_max:.4f}]")
    return GrayscaleSeparation(float(c_t_min), float(c_t_max), float(c_n_min), float(c_n_max), float(mid))


def measure_separation(mask_image: np.ndarray, face_ids: np.ndarray, mesh: Mesh) -> GrayscaleSeparation:
    """Gray-level ranges of textured vs. non-textured vehicle pixels and the
    threshold between them.

    A group with no visible pixel is placed at the far end of the gray scale
    opposite the other group, so the threshold never claims its pixels.
    """
    gray = np.asarray(mask_image, float).mean(axis=2)
    hit = face_ids >= 0
    tex = np.zeros_like(hit)
    tex[hit] = mesh.textured[face_ids[hit]]
    non = hit & ~tex
    t_vals, n_vals = gray[tex], gray[non]
    if len(t_vals) == 0 and len(n_vals) == 0:
        return separation_threshold(1.0, 1.0, 0.0, 0.0)
    if len(t_vals) == 0:
        t_lo = t_hi = 0.0 if n_vals.max() >= 1.0 else 1.0
    else:
        t_lo, t_hi = t_vals.min(), t_vals.max()
    if len(n_vals) == 0:
        n_lo = n_hi = 1.0 if t_lo <= 0.0 else 0.0
    else:
        n_lo, n_hi = n_vals.min(), n_vals.max()
    return separation_threshold(t_lo, t_hi, n_lo, n_hi)


def binarize(mask_image: np.ndarray, c_mid: float, textured_above: bool = True,
             face_ids: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel 0/1 mask; pixels with ``face_ids < 0`` are forced to 0."""
    gray = np.asarray(mask_image, float).mean(axis=2)
    p = gray >= c_mid if textured_above else gray < c_mid
    if face_ids is not None:
        p &= face_ids >= 0
    return p.astype(np.uint8)


def composite_mask(mesh: Mesh, mask_map: TextureMap, pose: CameraPose, face_ids: np.ndarray):
    """Mask render, separation and binarization for one pose."""
    image = render_dark(mesh, mask_map, pose)
    sep = measure_separation(image, face_ids, mesh)
    return binarize(image, sep.c_mid, sep.textured_above, face_ids), sep


# ---------------------------------------------------------------------------
# Photometric transforms

@dataclass(frozen=True)
class EotConfig:
    brightness: float | tuple = 0.08   # offset range; a scalar b means [-b, b]
    contrast: tuple = (0.85, 1.15)     # multiplicative scale range
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        lo, hi = (float(c) for c in self.contrast)
        if lo <= 0 or hi < lo:
            raise ValueError(f"contrast range {self.contrast} must be positive and ordered")
        if np.ndim(self.brightness) == 0:
            if self.brightness < 0:
                raise ValueError("a scalar brightness must be >= 0")
            b_lo, b_hi = -float(self.brightness), float(self.brightness)
        else:
            b_lo, b_hi = (float(v) for v in self.brightness)
            if b_hi < b_lo:
                raise ValueError(f"brightness range {self.brightness} must be ordered")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        object.__setattr__(self, "contrast", (lo, hi))
        object.__setattr__(self, "brightness", (b_lo, b_hi))

    def sample(self, draw: int, frame: int = 0):
        rng = np.random.default_rng([self.seed, frame, draw])
        lo, hi = self.brightness
        b = rng.uniform(lo, hi) if hi > lo else lo
        lo, hi = self.contrast
        c = rng.uniform(lo, hi) if hi > lo else lo
        return float(b), float(c), rng


@dataclass(frozen=True, eq=False)
class EotTape:
    gain: np.ndarray  # (H, W, 3) local derivative of the output w.r.t. the input


def apply_eot(image: np.ndarray, p: np.ndarray, cfg: EotConfig, draw: int, frame: int = 0):
    """``clamp(c * I + b + noise)`` on pixels with ``p == 1``, identity elsewhere."""
    image = np.asarray(image, float)
    if p.shape != image.shape[:2]:
        raise ValueError(f"mask shape {p.shape} != image shape {image.shape[:2]}")
    b, c, rng = cfg.sample(draw, frame)
    noise = rng.normal(0.0, cfg.noise_std, image.shape) if cfg.noise_std > 0 else 0.0
    value = c * image + b + noise
    sel = np.asarray(p, bool)[..., None]
    out = np.where(sel, np.clip(value, 0.0, 1.0), image)
    inside = (value >= 0.0) & (value <= 1.0)
    gain = np.where(sel, c * inside, 1.0)
    return out, EotTape(gain)


def eot_vjp(tape: EotTape, cotangent: np.ndarray) -> np.ndarray:
    if cotangent.shape != tape.gain.shape:
        raise ValueError(f"cotangent shape {cotangent.shape} != {tape.gain.shape}")
    return cotangent * tape.gain


@dataclass(frozen=True, eq=False)
class ComposeTape:
    p: np.ndarray


def compose(transformed: np.ndarray, reference: np.ndarray, p: np.ndarray):
    """``I_o = I_d' * P + I_p * (1 - P)`` with a 0/1 mask."""
    if transformed.shape != reference.shape:
        raise ValueError(f"image shapes differ: {transformed.shape} vs {reference.shape}")
    if p.shape != transformed.shape[:2]:
        raise ValueError(f"mask shape {p.shape} != image shape {transformed.shape[:2]}")
    sel = np.asarray(p, bool)[..., None]
    return np.where(sel, transformed, reference), ComposeTape(np.asarray(p, bool))


def compose_vjp(tape: ComposeTape, cotangent: np.ndarray) -> np.ndarray:
    """Cotangent for the transformed differentiable image; the reference image is constant."""
    if cotangent.shape[:2] != tape.p.shape:
        raise ValueError(f"cotangent shape {cotangent.shape} != mask shape {tape.p.shape}")
    return np.where(tape.p[..., None], cotangent, 0.0)


@dataclass(frozen=True, eq=False)
class CompositeFrame:
    reference: np.ndarray     # I_p
    rendered: np.ndarray      # I_d
    transformed: np.ndarray   # I_d'
    mask_image: np.ndarray    # I_m
    p: np.ndarray             # P
    output: np.ndarray        # I_o
