"""Camera-pose sampling, the desk-scale scene catalog and dataset manifests."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose
from .scene import DirectionalLight, Distractor, SceneConfig

MAX_POLAR = 45.0


class ManifestError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass(frozen=True)
class PoseSamplingConfig:
    """Camera rings around the vehicle.

    Distances are given in the reference units of the full-size setup and
    multiplied by ``distance_scale`` to obtain scene units.
    """

    distances: tuple = (8.0, 10.0, 14.0, 20.0)
    low_polar_angles: tuple = (5.0, 10.0, 20.0, 30.0)
    high_polar_angles: tuple = (45.0,)
    low_azimuth_step: float = 18.0
    high_azimuth_step: float = 45.0
    distance_scale: float = 0.1
    fov_y: float = 45.0
    width: int = 96
    height: int = 96
    target: tuple = (0.0, 0.06, 0.0)

    def validate(self) -> None:
        for a in (*self.low_polar_angles, *self.high_polar_angles):
            if a > MAX_POLAR:
                raise ValueError(
                    f"polar angle {a} exceeds {MAX_POLAR} degrees: detector accuracy drops "
                    "rapidly for steeper top-down views, so they are excluded")
            if a < 0:
                raise ValueError(f"polar angle {a} is negative")
        if any(a > 30.0 for a in self.low_polar_angles):
            raise ValueError("low polar angles must be <= 30 degrees")
        if any(a <= 30.0 for a in self.high_polar_angles):
            raise ValueError("high polar angles must be > 30 degrees")
        for step in (self.low_azimuth_step, self.high_azimuth_step):
            n = 360.0 / step
            if step <= 0 or abs(n - round(n)) > 1e-9:
                raise ValueError(f"azimuth step {step} must divide 360")
        if not self.distances:
            raise ValueError("at least one distance is required")

    def ring_count(self) -> int:
        return (len(self.low_polar_angles) * round(360.0 / self.low_azimuth_step)
                + len(self.high_polar_angles) * round(360.0 / self.high_azimuth_step))


def _ring(distance, polar, step, cfg):
    n = round(360.0 / step)
    return [CameraPose(r=distance * cfg.distance_scale, theta=float(polar), phi=float(k * step),
                       fov_y=cfg.fov_y, width=cfg.width, height=cfg.height, target=cfg.target)
            for k in range(n)]


def sample_poses(cfg: PoseSamplingConfig, distances=None) -> list[CameraPose]:
    """Full cross-product of distances with the polar/azimuth rings, ordered
    distance-major, then polar angle, then azimuth."""
    cfg.validate()
    poses = []
    for d in (cfg.distances if distances is None else distances):
        for polar in sorted([(a, cfg.low_azimuth_step) for a in cfg.low_polar_angles]
                            + [(a, cfg.high_azimuth_step) for a in cfg.high_polar_angles]):
            poses.extend(_ring(d, polar[0], polar[1], cfg))
    return poses


# ---------------------------------------------------------------------------
# Scene catalog

# documented parameter ranges of generated scenes
AMBIENT_RANGE = (0.30, 0.50)
SUN_INTENSITY_RANGE = (0.45, 0.75)
SUN_ELEVATION_RANGE = (35.0, 75.0)
GROUND_ALBEDO_RANGE = (0.25, 0.60)
BACKGROUND_RANGE = (0.35, 0.90)
DISTRACTOR_COUNT_RANGE = (1, 3)
DISTRACTOR_RING = (0.30, 0.55)      # horizontal distance from the vehicle center
DISTRACTOR_SIZE_RANGE = (0.05, 0.11)
DISTRACTOR_HEIGHT_RANGE = (0.02, 0.06)


@dataclass(frozen=True)
class SceneCatalog:
    train: tuple
    test: tuple
    seed: int

    @property
    def scenes(self) -> tuple:
        return self.train + self.test

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": [s.to_dict() for s in self.train],
                "test": [s.to_dict() for s in self.test]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneCatalog":
        return cls(tuple(SceneConfig.from_dict(s) for s in d["train"]),
                   tuple(SceneConfig.from_dict(s) for s in d["test"]), int(d["seed"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SceneCatalog":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _random_scene(rng: np.random.Generator, scene_id: str) -> SceneConfig:
    ambient = rng.uniform(*AMBIENT_RANGE)
    tint = rng.uniform(0.9, 1.1, 3)
    elev = np.deg2rad(rng.uniform(*SUN_ELEVATION_RANGE))
    azim = rng.uniform(0.0, 2 * np.pi)
    sun_dir = (np.cos(elev) * np.cos(azim), np.sin(elev), np.cos(elev) * np.sin(azim))
    sun = DirectionalLight(sun_dir, rng.uniform(*SUN_INTENSITY_RANGE) * tint)
    ground = rng.uniform(*GROUND_ALBEDO_RANGE) * rng.uniform(0.85, 1.15, 3)
    background = rng.uniform(*BACKGROUND_RANGE, 3)
    distractors = []
    n = rng.integers(DISTRACTOR_COUNT_RANGE[0], DISTRACTOR_COUNT_RANGE[1] + 1)
    for k in range(n):
        ang = 2 * np.pi * (k + rng.uniform(0.1, 0.9)) / n
        dist = rng.uniform(*DISTRACTOR_RING)
        size = rng.uniform(*DISTRACTOR_SIZE_RANGE, 2)
        height = rng.uniform(*DISTRACTOR_HEIGHT_RANGE)
        color = rng.uniform(0.15, 0.95, 3)
        distractors.append(Distractor((float(dist * np.cos(ang)), float(dist * np.sin(ang))),
                                      (float(size[0]), float(height), float(size[1])),
                                      tuple(float(c) for c in color), float(rng.uniform(0, 90))))
    return SceneConfig(
        ambient=(ambient, ambient, ambient),
        directional_lights=(sun,),
        ground_albedo=tuple(np.clip(ground, 0.0, 1.0)),
        background=tuple(background),
        distractors=tuple(distractors),
        scene_id=scene_id,
    )


def build_scene_catalog(n_train: int = 9, n_test: int = 1, seed: int = 0) -> SceneCatalog:
    """Deterministic catalog of randomized desk scenes, split by scene id."""
    if n_train < 1 or n_test < 1:
        raise ValueError("scene counts must be >= 1")
    rng = np.random.default_rng(seed)
    scenes = [_random_scene(rng, f"scene{k:02d}") for k in range(n_train + n_test)]
    return SceneCatalog(tuple(scenes[:n_train]), tuple(scenes[n_train:]), seed)


def desk_scenario(scenes, cfg: PoseSamplingConfig, offset: int = 0) -> list[tuple[CameraPose, SceneConfig]]:
    """One distance per scene (cycling through ``cfg.distances``), all rings:
    ``cfg.ring_count()`` frames per scene."""
    pairs = []
    for k, scene in enumerate(scenes):
        d = cfg.distances[(k + offset) % len(cfg.distances)]
        pairs.extend((pose, scene) for pose in sample_poses(cfg, distances=(d,)))
    return pairs


def full_scenario(scenes, cfg: PoseSamplingConfig) -> list[tuple[CameraPose, SceneConfig]]:
    return [(pose, scene) for scene in scenes for pose in sample_poses(cfg)]


# ---------------------------------------------------------------------------
# Manifest

@dataclass(frozen=True)
class FrameRecord:
    """One pre-rendered frame: pose, scene, vehicle box and file paths
    (relative to the manifest's directory)."""

    index: int
    scene_id: str
    pose: CameraPose
    box: tuple | None
    image: str
    categories: str = ""
    distractor_boxes: tuple = ()
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "scene_id": self.scene_id,
            "pose": self.pose.to_dict(),
            "box": None if self.box is None else list(self.box),
            "image": self.image,
            "categories": self.categories,
            "distractor_boxes": [list(b) for b in self.distractor_boxes],
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        box = d["box"]
        return cls(
            index=int(d["index"]),
            scene_id=str(d["scene_id"]),
            pose=CameraPose.from_dict(d["pose"]),
            box=None if box is None else tuple(float(v) for v in box),
            image=str(d["image"]),
            categories=str(d.get("categories", "")),
            distractor_boxes=tuple(tuple(float(v) for v in b) for b in d.get("distractor_boxes", [])),
            extras=dict(d.get("extras", {})),
        )


def write_manifest(frames, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in frames:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_manifest(path) -> list[FrameRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(FrameRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(path, lineno, f"malformed record: {exc}") from None
    return out


def manifest_dir(path) -> str:
    return os.path.dirname(os.path.abspath(path))
