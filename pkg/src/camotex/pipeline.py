"""Stage functions shared by the command line and the acceptance suite."""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass

import numpy as np

from .fixtures import PAINT, asset_path
from .geometry import DistortionReport, Mesh, distortion_energy, load_mesh, relax_uv
from .render_ref import prerender_dataset
from .scenario import PoseSamplingConfig, SceneCatalog, desk_scenario, read_manifest
from .texture import TextureMap, random_texture, solid_texture

ATTACK_SET, TEST_SET, VICTIM_SET = "attack", "test", "victim"
MANIFEST = "manifest.jsonl"


def load_atlas(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        atlas = json.load(fh)
    for name, entry in atlas.items():
        if "seed_face" not in entry or "rect" not in entry or len(entry["rect"]) != 4:
            raise ValueError(f"atlas entry {name!r} needs seed_face and a 4-value rect")
    return atlas


def default_car() -> tuple[Mesh, dict]:
    return load_mesh(asset_path("car.obj")), load_atlas(asset_path("car_atlas.json"))


@dataclass
class UvResult:
    mesh: Mesh
    before: DistortionReport
    after: DistortionReport
    traces: dict


def prepare_uv(mesh: Mesh, atlas: dict, iterations: int = 100) -> UvResult:
    """Relax every atlas patch in name order and place it in its rectangle."""
    before = distortion_energy(mesh)
    traces = {}
    for name in sorted(atlas):
        entry = atlas[name]
        trace = []
        mesh = relax_uv(mesh, int(entry["seed_face"]), iterations, rect=tuple(entry["rect"]), trace=trace)
        traces[name] = trace
    return UvResult(mesh, before, distortion_energy(mesh), traces)


def clean_texture(mesh: Mesh, size: int = 256) -> TextureMap:
    return solid_texture(mesh, PAINT, size, size)


def appearance_variants(mesh: Mesh, clean: TextureMap, seed: int, mix=(0.7, 0.0, 0.3)):
    """Per-frame vehicle appearance for detector training, drawn with
    probabilities ``mix`` = (random solid paint, random block texture, clean)."""
    if len(mix) != 3 or min(mix) < 0 or not np.isclose(sum(mix), 1.0):
        raise ValueError("mix must be three non-negative fractions summing to 1")
    def pick(index):
        rng = np.random.default_rng([seed, index])
        u = rng.random()
        if u < mix[0]:
            h, s, v = rng.random(), rng.uniform(0.0, 0.9), rng.uniform(0.15, 0.95)
            color = colorsys.hsv_to_rgb(h, s, v)
            return solid_texture(mesh, color, clean.width, clean.height), "solid"
        if u < mix[0] + mix[1]:
            return random_texture(mesh, int(rng.integers(1 << 31)), clean.width, clean.height), "random"
        return clean, "clean"
    return pick


def render_datasets(mesh: Mesh, clean: TextureMap, catalog: SceneCatalog, cfg: PoseSamplingConfig,
                    out_dir, variants: bool = True, seed: int = 0, progress=None,
                    mix=(0.7, 0.0, 0.3)) -> dict:
    """Write the attack (training scenes, clean paint), test (held-out scenes,
    clean paint) and victim (training scenes, varied paint) datasets."""
    os.makedirs(out_dir, exist_ok=True)
    catalog.save(os.path.join(out_dir, "catalog.json"))
    n_train = len(catalog.train)
    jobs = [(ATTACK_SET, desk_scenario(catalog.train, cfg), None),
            (TEST_SET, desk_scenario(catalog.test, cfg, offset=n_train), None)]
    if variants:
        jobs.append((VICTIM_SET, desk_scenario(catalog.train, cfg), appearance_variants(mesh, clean, seed, mix)))
    paths = {}
    for name, scenario, appearance in jobs:
        sub = os.path.join(out_dir, name)
        os.makedirs(sub, exist_ok=True)
        prerender_dataset(mesh, clean, scenario, sub, MANIFEST, appearance=appearance,
                          progress=None if progress is None else (lambda i, n, name=name: progress(name, i, n)))
        paths[name] = os.path.join(sub, MANIFEST)
    return paths


def scenes_by_id(catalog: SceneCatalog) -> dict:
    return {s.scene_id: s for s in catalog.scenes}


def gt_boxes(records) -> list:
    return [r.box for r in records]


def manifest_images(path):
    from .scenario import manifest_dir
    from .texture import load_png
    root = manifest_dir(path)
    records = read_manifest(path)
    return records, [load_png(os.path.join(root, r.image)) for r in records]


