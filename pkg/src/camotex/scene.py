"""Scene lighting, ground plane and distractor objects."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _rgb(v) -> tuple:
    arr = np.broadcast_to(np.asarray(v, dtype=float), (3,))
    return tuple(float(x) for x in arr)


@dataclass(frozen=True)
class DirectionalLight:
    direction: tuple  # points from the surface towards the light
    intensity: tuple

    def __post_init__(self):
        d = np.asarray(self.direction, float)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("light direction must be non-zero")
        object.__setattr__(self, "direction", tuple(float(x) for x in d / n))
        object.__setattr__(self, "intensity", _rgb(self.intensity))


@dataclass(frozen=True)
class PointLight:
    position: tuple
    intensity: tuple

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        object.__setattr__(self, "intensity", _rgb(self.intensity))


@dataclass(frozen=True)
class Distractor:
    """Axis-aligned-up box resting on the ground, rotated by ``yaw`` degrees."""

    center: tuple  # (x, z) on the ground
    size: tuple    # (sx, sy, sz)
    color: tuple
    yaw: float = 0.0

    def triangles(self, ground: float = 0.0) -> np.ndarray:
        sx, sy, sz = (float(s) / 2 for s in self.size)
        corners = np.array([[x, y, z] for x in (-sx, sx) for y in (0.0, 2 * sy) for z in (-sz, sz)])
        t = np.deg2rad(self.yaw)
        rot = np.array([[np.cos(t), 0, np.sin(t)], [0, 1, 0], [-np.sin(t), 0, np.cos(t)]])
        corners = corners @ rot.T + np.array([self.center[0], ground, self.center[1]])
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        tris = []
        for a, b, c, d in quads:
            tris.append(corners[[a, b, c]])
            tris.append(corners[[a, c, d]])
        return np.array(tris)


@dataclass(frozen=True)
class SceneConfig:
    """Lighting and environment. Without directional and point lights the
    scene is in dark-light mode (ambient only)."""

    ambient: tuple = (1.0, 1.0, 1.0)
    directional_lights: tuple = ()
    point_lights: tuple = ()
    ground_height: float = 0.0
    ground_albedo: tuple = (0.45, 0.45, 0.45)
    background: tuple = (0.6, 0.7, 0.85)
    distractors: tuple = ()
    scene_id: str = "default"
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "ambient", _rgb(self.ambient))
        object.__setattr__(self, "ground_albedo", _rgb(self.ground_albedo))
        object.__setattr__(self, "background", _rgb(self.background))
        object.__setattr__(self, "directional_lights", tuple(self.directional_lights))
        object.__setattr__(self, "point_lights", tuple(self.point_lights))
        object.__setattr__(self, "distractors", tuple(self.distractors))

    @property
    def dark(self) -> bool:
        return not self.directional_lights and not self.point_lights

    def dark_variant(self, ambient=1.0) -> "SceneConfig":
        return SceneConfig(ambient=ambient, ground_height=self.ground_height,
                           ground_albedo=self.ground_albedo, background=self.background,
                           distractors=self.distractors, scene_id=f"{self.scene_id}-dark")

    def distractor_triangles(self) -> np.ndarray:
        if not self.distractors:
            return np.zeros((0, 3, 3))
        return np.concatenate([d.triangles(self.ground_height) for d in self.distractors])

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "ambient": list(self.ambient),
            "directional_lights": [{"direction": list(l.direction), "intensity": list(l.intensity)}
                                   for l in self.directional_lights],
            "point_lights": [{"position": list(l.position), "intensity": list(l.intensity)}
                             for l in self.point_lights],
            "ground_height": self.ground_height,
            "ground_albedo": list(self.ground_albedo),
            "background": list(self.background),
            "distractors": [{"center": list(d.center), "size": list(d.size), "color": list(d.color),
                             "yaw": d.yaw} for d in self.distractors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(
            ambient=d.get("ambient", (1.0, 1.0, 1.0)),
            directional_lights=[DirectionalLight(tuple(l["direction"]), tuple(l["intensity"]))
                                for l in d.get("directional_lights", [])],
            point_lights=[PointLight(tuple(l["position"]), tuple(l["intensity"]))
                          for l in d.get("point_lights", [])],
            ground_height=float(d.get("ground_height", 0.0)),
            ground_albedo=d.get("ground_albedo", (0.45, 0.45, 0.45)),
            background=d.get("background", (0.6, 0.7, 0.85)),
            distractors=[Distractor(tuple(x["center"]), tuple(x["size"]), tuple(x["color"]),
                                    float(x.get("yaw", 0.0))) for x in d.get("distractors", [])],
            scene_id=str(d.get("scene_id", "default")),
        )


def lambert_scale(normals: np.ndarray, points: np.ndarray, scene: SceneConfig) -> np.ndarray:
    """``ambient + sum_l max(0, n . l) * intensity_l`` per point, shape (N, 3)."""
    scale = np.tile(np.asarray(scene.ambient), (len(normals), 1))
    for light in scene.directional_lights:
        ndl = np.maximum(normals @ np.asarray(light.direction), 0.0)
        scale = scale + ndl[:, None] * np.asarray(light.intensity)[None, :]
    for light in scene.point_lights:
        to_l = np.asarray(light.position)[None, :] - points
        to_l /= np.linalg.norm(to_l, axis=1, keepdims=True)
        ndl = np.maximum(np.einsum("ij,ij->i", normals, to_l), 0.0)
        scale = scale + ndl[:, None] * np.asarray(light.intensity)[None, :]
    return scale
