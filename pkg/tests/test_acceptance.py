"""Acceptance gate: one verdict line per criterion (see the terminal summary)."""

import filecmp
import json
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from camotex.attack import LossConfig, frame_loss, loss_class, loss_objectness, loss_smooth, plan_frame, total_loss
from camotex.camera import CameraPose
from camotex.cli import main
from camotex.composer import (EotConfig, MaskMapSpec, SeparationError, compose, composite_mask, make_mask_map,
                              measure_separation, render_dark)
from camotex.geometry import distortion_energy, relax_uv
from camotex.render_diff import render_face_ids
from camotex.render_ref import render_ref
from camotex.scene import DirectionalLight, SceneConfig
from camotex.scenario import build_scene_catalog
from camotex.texture import texture_for_mesh
from camotex.victim import Architecture, detector_forward, init_weights, load_weights, nms
from criteria import verdict
from small_run import run_pipeline
from test_attack import l1_oracle, l2_oracle, output_from
from test_composer import car_poses, textured_oracle
from test_victim import forward_oracle, nms_oracle

TARGET = (0.0, 0.06, 0.0)


# ---------------------------------------------------------------------------
# 1. gradient fidelity

def test_criterion_1_gradient_fidelity(hemi_mesh):
    start = time.perf_counter()
    size = 64
    rng = np.random.default_rng(21)
    tex = texture_for_mesh(hemi_mesh, rng.uniform(0.15, 0.85, (64, 64, 3)))
    scene = build_scene_catalog(1, 1, seed=4).train[0]
    pose = CameraPose(r=0.9, theta=30.0, phi=35.0, width=size, height=size, target=(0.0, 0.1, 0.0))
    ref = render_ref(hemi_mesh, tex, pose, scene)
    plan = plan_frame(hemi_mesh, make_mask_map(MaskMapSpec(), tex.mask), tex.mask, pose, ref.image, scene)
    weights = init_weights(Architecture(input_size=size), seed=5)
    loss_cfg, eot = LossConfig(), EotConfig(seed=2)
    _, grad, _ = frame_loss(plan, tex, weights, loss_cfg, eot)
    masked = np.argwhere(np.repeat(tex.mask[..., None], 3, axis=2))
    picks = masked[rng.choice(len(masked), 120, replace=False)]
    h = 1e-3
    worst, failures = 0.0, 0
    for idx in picks:
        idx = tuple(idx)
        up, dn = tex.image.copy(), tex.image.copy()
        up[idx] += h
        dn[idx] -= h
        f_up = frame_loss(plan, tex.with_image(up), weights, loss_cfg, eot, want_grad=False)[0].total
        f_dn = frame_loss(plan, tex.with_image(dn), weights, loss_cfg, eot, want_grad=False)[0].total
        fd = (f_up - f_dn) / (2 * h)
        err = abs(fd - grad[idx]) / max(abs(fd), 1e-12)
        worst = max(worst, err)
        failures += err >= 1e-2
    elapsed = time.perf_counter() - start
    verdict(1, failures == 0 and elapsed < 300,
            f"{len(picks)} masked texels, worst relative error {worst:.2e}, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 2. mask oracle

def test_criterion_2_mask_oracle(car_mesh):
    mask_map = make_mask_map(MaskMapSpec(), texture_for_mesh(car_mesh, np.zeros((256, 256, 3))).mask)
    mismatched = 0
    poses = car_poses(20)
    for pose in poses:
        ids = render_face_ids(car_mesh, pose)
        p, _ = composite_mask(car_mesh, mask_map, pose, ids)
        mismatched += int(np.sum(p.astype(bool) != textured_oracle(car_mesh, ids)))
    strong = SceneConfig(ambient=0.15, directional_lights=(DirectionalLight((0.4, 1.0, 0.3), 3.0),),
                         background=(0, 0, 0))
    violated = 0
    for pose in poses[:10]:
        img = render_dark(car_mesh, mask_map, pose, strong, allow_lit=True)
        try:
            measure_separation(img, render_face_ids(car_mesh, pose), car_mesh)
        except SeparationError as exc:
            violated += "separation violated" in str(exc)
    verdict(2, mismatched == 0 and violated >= 1,
            f"{len(poses)} poses, {mismatched} mismatched pixels; strong light violates {violated}/10 poses")


# ---------------------------------------------------------------------------
# 3. composition identities

def test_criterion_3_composition_identities():
    rng = np.random.default_rng(3)
    ok = True
    for shape in ((1, 1), (17, 23), (96, 96)):
        d, ref = rng.random(shape + (3,)), rng.random(shape + (3,))
        ok &= compose(d, ref, np.ones(shape, np.uint8))[0].tobytes() == d.tobytes()
        ok &= compose(d, ref, np.zeros(shape, np.uint8))[0].tobytes() == ref.tobytes()
    verdict(3, ok, "all-ones mask returns the render, all-zeros mask returns the reference, bit-exact")


# ---------------------------------------------------------------------------
# 4. loss unit values

def test_criterion_4_loss_values():
    l_s = loss_smooth(np.array([[0.0, 1.0], [0.0, 1.0]]), np.ones((2, 2), bool))[0]
    total = total_loss(0.8, 0.25, 2.0, LossConfig(beta=1.0, gamma=0.5)).total
    rng = np.random.default_rng(12)
    mismatches = 0
    for _ in range(1000):
        s = int(rng.integers(1, 7))
        obj = rng.random((s, s)) ** rng.uniform(0.5, 4)
        logits = rng.normal(size=(s, s, 4)) * 2
        cls = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        cfg = LossConfig(tau_attack=float(rng.uniform(0.2, 0.9)), fallback_k=int(rng.integers(1, 4)),
                         target_class=int(rng.integers(4)))
        out = output_from(obj, cls)
        mismatches += not np.isclose(loss_objectness(out, cfg)[0], l1_oracle(obj, cfg.tau_attack, cfg.fallback_k),
                                     rtol=1e-12, atol=0)
        mismatches += not np.isclose(loss_class(out, cfg)[0], l2_oracle(cls, cfg.target_class), rtol=1e-12, atol=0)
    verdict(4, l_s == 2.0 and abs(total - 2.05) < 1e-15 and mismatches == 0,
            f"smoothness fixture {l_s!r}, total {total!r}, {mismatches} oracle mismatches in 1000 outputs")


# ---------------------------------------------------------------------------
# 5. uv relaxation

def test_criterion_5_uv_relaxation(hemi_mesh):
    before = distortion_energy(hemi_mesh).energy
    trace = []
    after = distortion_energy(relax_uv(hemi_mesh, 0, 200, trace=trace)).energy
    monotone = all(b <= a for a, b in zip([before] + trace, trace))
    verdict(5, after <= 0.5 * before and monotone,
            f"energy {before:.4g} -> {after:.4g} ({after / before:.1%}), monotone trace of {len(trace)} steps")


# ---------------------------------------------------------------------------
# desk pipeline with default configuration (criteria 6, 7, 8)

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("desk"))
    d = {k: os.path.join(root, k) for k in ("uv", "data", "victim", "optimize", "evaluate")}
    times = {}

    def stage(name, *args):
        start = time.perf_counter()
        assert main([name, "--out", d[key_of[name]], *args]) == 0
        times[name] = time.perf_counter() - start

    key_of = {"prepare-uv": "uv", "render-dataset": "data", "train-victim": "victim", "optimize": "optimize",
              "evaluate": "evaluate"}
    stage("prepare-uv")
    mesh = os.path.join(d["uv"], "mesh.obj")
    stage("render-dataset", "--mesh", mesh)
    stage("train-victim", "--dataset", d["data"])
    weights = os.path.join(d["victim"], "weights.cfw")
    stage("optimize", "--mesh", mesh, "--dataset", d["data"], "--weights", weights)
    adv = os.path.join(d["optimize"], "texture_adv.npy")
    stage("evaluate", "--mesh", mesh, "--dataset", d["data"], "--weights", weights, "--texture", adv)
    d["times"] = times
    return d


def _json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


@pytest.mark.slow
def test_criterion_6_victim_quality(desk_run):
    rep = _json(os.path.join(desk_run["victim"], "train_report.json"))
    p = rep["held_out_p05"]
    verdict(6, p is not None and p >= 0.85,
            f"held-out P@0.5 {p:.3f} on {rep['held_out_frames']} clean frames (bar 0.85)")


@pytest.mark.slow
def test_criterion_7_attack_efficacy(desk_run):
    ev = _json(os.path.join(desk_run["evaluate"], "eval_report.json"))
    opt = _json(os.path.join(desk_run["optimize"], "optimize_report.json"))
    adv, rnd = ev["adversarial"], ev["random"]
    hours = sum(desk_run["times"].values()) / 3600
    margin = adv["asr"] - rnd["asr"]
    ok = (opt["steps"] >= 5 * 200 and adv["p_at_05"] <= 0.40 and adv["asr"] >= 0.60 and margin >= 0.20
          and hours <= 2)
    verdict(7, ok, f"adversarial P@0.5 {adv['p_at_05']:.3f} (bar 0.40), ASR {adv['asr']:.3f} (bar 0.60), "
                   f"random ASR {rnd['asr']:.3f}, margin {margin:.3f} (bar 0.20), "
                   f"{opt['steps']} steps, pipeline {hours * 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_turntable(desk_run):
    ev = _json(os.path.join(desk_run["evaluate"], "eval_report.json"))
    exact = all(Fraction(r["f_d"], r["f_o"]) == Fraction(r["a_physical"]).limit_denominator(r["f_o"])
                and r["a_physical"] == r["f_d"] / r["f_o"] and r["f_o"] == 90 for r in ev.values())
    adv, clean = ev["adversarial"]["a_physical"], ev["clean"]["a_physical"]
    verdict(8, exact and adv <= 0.5 * clean,
            f"a_physical adversarial {adv:.3f} vs clean {clean:.3f} (bar {0.5 * clean:.3f}), "
            f"f_d/f_o arithmetic exact: {exact}")


@pytest.mark.slow
def test_held_out_objectness_drop(desk_run):
    """Mean best car-cell objectness on held-out frames falls by half under the optimized texture."""
    from camotex.pipeline import clean_texture
    from camotex.geometry import load_mesh
    from camotex.scenario import SceneCatalog, desk_scenario, PoseSamplingConfig
    weights = load_weights(os.path.join(desk_run["victim"], "weights.cfw"))
    mesh = load_mesh(os.path.join(desk_run["uv"], "mesh.obj"))
    catalog = SceneCatalog.load(os.path.join(desk_run["data"], "catalog.json"))
    adv_img = np.load(os.path.join(desk_run["optimize"], "texture_adv.npy"))
    scen = desk_scenario(catalog.test, PoseSamplingConfig(), offset=len(catalog.train))[::4]

    def mean_car_objectness(tex):
        vals = []
        for pose, scene in scen:
            ref = render_ref(mesh, tex, pose, scene)
            out, _ = detector_forward(weights, ref.image)
            cx = (out.boxes[:, 0] + out.boxes[:, 2]) / 2
            cy = (out.boxes[:, 1] + out.boxes[:, 3]) / 2
            x0, y0, x1, y1 = ref.box
            inside = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
            obj = out.objectness.reshape(-1)
            vals.append(obj[inside].max() if inside.any() else obj.max())
        return float(np.mean(vals))

    base = mean_car_objectness(clean_texture(mesh, adv_img.shape[0]))
    adv = mean_car_objectness(texture_for_mesh(mesh, adv_img))
    print(f"held-out car objectness {base:.3f} -> {adv:.3f}")
    assert adv <= 0.5 * base


# ---------------------------------------------------------------------------
# 9. determinism

def _same_tree(a, b):
    diffs = []
    for root, _, files in os.walk(a):
        for name in files:
            if name == "resolved_config.yaml":   # records each run's own absolute paths
                continue
            pa = os.path.join(root, name)
            pb = os.path.join(b, os.path.relpath(pa, a))
            if not os.path.exists(pb) or not filecmp.cmp(pa, pb, shallow=False):
                diffs.append(os.path.relpath(pa, a))
    return diffs


def test_criterion_9_determinism(tmp_path):
    first = run_pipeline(str(tmp_path / "a"))
    second = run_pipeline(str(tmp_path / "b"))
    diffs, files = [], 0
    for stage in first:
        diffs += _same_tree(first[stage], second[stage])
        files += sum(len(f) for _, _, f in os.walk(first[stage]))
    key = ["export/texture.png", "victim/weights.cfw", "evaluate/summary.csv", "optimize/loss_log.csv"]
    present = all(os.path.exists(os.path.join(str(tmp_path / "a"), k)) for k in key)
    verdict(9, not diffs and present, f"six stages run twice, {files} artifacts compared, {len(diffs)} differ"
                                      + (f": {diffs[:5]}" if diffs else ""))


# ---------------------------------------------------------------------------
# 10. detector oracles

def test_criterion_10_detector_oracles():
    rng = np.random.default_rng(10)
    worst = 0.0
    for k, act in enumerate(("silu", "leaky_relu", "tanh") * 2):
        size = 16 if k % 2 else 32
        w = init_weights(Architecture(input_size=size, activation=act), k)
        img = rng.random((size, size, 3))
        out, _ = detector_forward(w, img)
        worst = max(worst, float(np.abs(out.raw - forward_oracle(w, img)).max()))
    mismatches = 0
    for _ in range(500):
        n = int(rng.integers(1, 9))
        xy = rng.uniform(0, 40, (n, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(5, 30, (n, 2))], axis=1)
        scores = rng.random(n)
        thr = float(rng.choice([0.3, 0.45, 0.5, 0.7]))
        mismatches += nms(boxes, scores, thr) != nms_oracle(boxes, scores, thr)
    verdict(10, worst <= 1e-5 and mismatches == 0,
            f"forward max deviation {worst:.2e} (bar 1e-5), NMS mismatches {mismatches}/500")
