"""Texture attack: detector losses, texture smoothness and the per-frame
optimization loop over a pre-rendered dataset."""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .composer import (EotConfig, MaskMapSpec, SeparationError, apply_eot, compose, compose_vjp,
                       composite_mask, dark_scene, eot_vjp, make_mask_map)
from .geometry import Mesh
from .render_diff import check_texture, rasterize_mesh, render_diff_vjp, render_face_ids, shade
from .scenario import manifest_dir
from .texture import TextureMap, load_png
from .victim import DetectorOutput, DetectorWeights, detector_forward, detector_input_vjp, score_cotangent


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0
    gamma: float = 0.5
    target_class: int = 0
    tau_attack: float = 0.5
    fallback_k: int = 1

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be >= 0")
        if not 0 < self.tau_attack < 1:
            raise ValueError("tau_attack must lie in (0, 1)")
        if self.fallback_k < 1:
            raise ValueError("fallback_k must be >= 1")


@dataclass(frozen=True)
class AttackConfig:
    lr: float = 0.015
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adam"        # or "sgd"
    eot_draws: int = 1
    seed: int = 0
    clamp: tuple = (0.0, 1.0)
    shuffle: bool = False
    dr_lighting: str = "scene"     # "scene": the frame's lights, "dark": ambient-only

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eot_draws < 1:
            raise ValueError("eot_draws must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dr_lighting not in ("scene", "dark"):
            raise ValueError(f"unknown dr_lighting {self.dr_lighting!r}")


@dataclass(frozen=True)
class LossReport:
    l1: float
    l2: float
    l_a: float
    l_s: float
    total: float


def loss_objectness(output: DetectorOutput, cfg: LossConfig):
    """Mean objectness of proposals at or above ``tau_attack`` (before NMS);
    the top ``fallback_k`` proposals when none qualifies. Returns (L1, d/d objectness)."""
    obj = output.objectness.reshape(-1)
    sel = np.flatnonzero(obj >= cfg.tau_attack)
    if len(sel) == 0:
        sel = np.argsort(-obj, kind="stable")[:cfg.fallback_k]
    grad = np.zeros_like(obj)
    grad[sel] = 1.0 / len(sel)
    return float(obj[sel].mean()), grad.reshape(output.objectness.shape)


def loss_class(output: DetectorOutput, cfg: LossConfig):
    """Mean target-class confidence over all proposals. Returns (L2, d/d class confidences)."""
    conf = output.class_conf
    grad = np.zeros_like(conf)
    grad[..., cfg.target_class] = 1.0 / output.n_c
    return float(conf[..., cfg.target_class].mean()), grad


def loss_smooth(image: np.ndarray, mask: np.ndarray):
    """Sum of squared right- and down-neighbour differences over channels,
    restricted to pairs of masked texels. Returns (L_s, gradient)."""
    img = np.asarray(image, float)
    flat = img.ndim == 2
    if flat:
        img = img[..., None]
    m = np.asarray(mask, bool)
    if m.shape != img.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match texture {img.shape[:2]}")
    grad = np.zeros_like(img)
    dh = (img[:, :-1] - img[:, 1:]) * (m[:, :-1] & m[:, 1:])[..., None]
    dv = (img[:-1] - img[1:]) * (m[:-1] & m[1:])[..., None]
    total = float((dh ** 2).sum() + (dv ** 2).sum())
    grad[:, :-1] += 2 * dh
    grad[:, 1:] -= 2 * dh
    grad[:-1] += 2 * dv
    grad[1:] -= 2 * dv
    return total, (grad[..., 0] if flat else grad)


def total_loss(l1: float, l2: float, l_s: float, cfg: LossConfig) -> LossReport:
    for name, v in (("l1", l1), ("l2", l2), ("l_s", l_s)):
        if not np.isfinite(v):
            raise ValueError(f"non-finite loss component {name}={v}")
    l_a = l1 + cfg.beta * l2
    return LossReport(float(l1), float(l2), float(l_a), float(l_s), float(l_a + cfg.gamma * l_s))


# ---------------------------------------------------------------------------
# Per-frame pipeline

@dataclass(frozen=True, eq=False)
class FramePlan:
    """Texture-independent state of one dataset frame."""

    index: int
    reference: np.ndarray   # I_p
    raster: object          # Rasterization under the differentiable-render lighting
    p: np.ndarray           # binary composition mask


def plan_frame(mesh: Mesh, mask_map: TextureMap, texture_mask, pose, reference, dr_scene, index=0):
    ids = render_face_ids(mesh, pose)
    try:
        p, _ = composite_mask(mesh, mask_map, pose, ids)
    except SeparationError as exc:
        raise AttackError(f"frame {index} pose {pose.to_dict()}: {exc}") from None
    return FramePlan(index, reference, rasterize_mesh(mesh, texture_mask, pose, dr_scene), p)


def frame_loss(plan: FramePlan, texture: TextureMap, weights: DetectorWeights, loss_cfg: LossConfig,
               eot: EotConfig | None, draw: int = 0, want_grad: bool = True):
    """Forward through render, transform, compose and detector; returns
    (LossReport, texture gradient of the detector part or None, composite)."""
    rendered, rtape = shade(plan.raster, texture)
    if eot is not None:
        transformed, etape = apply_eot(rendered, plan.p, eot, draw, plan.index)
    else:
        transformed, etape = rendered, None
    composite, ctape = compose(transformed, plan.reference, plan.p)
    out, dtape = detector_forward(weights, composite)
    l1, d_obj = loss_objectness(out, loss_cfg)
    l2, d_cls = loss_class(out, loss_cfg)
    l_s, g_s = loss_smooth(texture.image, texture.mask)
    report = total_loss(l1, l2, l_s, loss_cfg)
    if not want_grad:
        return report, None, composite
    d_raw = score_cotangent(out, d_obj, loss_cfg.beta * d_cls)
    d_img = detector_input_vjp(dtape, d_raw)
    d_img = compose_vjp(ctape, d_img)
    if etape is not None:
        d_img = eot_vjp(etape, d_img)
    grad = render_diff_vjp(rtape, d_img) + loss_cfg.gamma * g_s
    return report, grad, composite


def load_plans(mesh: Mesh, texture_mask, records, root, scenes, cfg: AttackConfig,
               spec: MaskMapSpec = MaskMapSpec()):
    mask_map = make_mask_map(spec, texture_mask)
    plans = []
    for rec in records:
        if cfg.dr_lighting == "dark":
            scene = dark_scene()
        else:
            if rec.scene_id not in scenes:
                raise AttackError(f"frame {rec.index}: unknown scene id {rec.scene_id!r}")
            scene = scenes[rec.scene_id]
        reference = load_png(os.path.join(root, rec.image))
        plans.append(plan_frame(mesh, mask_map, texture_mask, rec.pose, reference, scene, rec.index))
    return plans


@dataclass
class AttackResult:
    texture: TextureMap
    log: list            # (step, epoch, frame, LossReport)

    def epoch_means(self) -> list[float]:
        by_epoch = {}
        for _, epoch, _, rep in self.log:
            by_epoch.setdefault(epoch, []).append(rep.total)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def optimize_texture(mesh: Mesh, texture0: TextureMap, records, weights: DetectorWeights,
                     loss_cfg: LossConfig = LossConfig(), cfg: AttackConfig = AttackConfig(),
                     eot: EotConfig | None = EotConfig(), scenes=None, root=".", plans=None,
                     progress=None) -> AttackResult:
    """Visit frames in manifest order each epoch and take one optimizer step
    per frame on the masked texels. ``plans`` may carry precomputed
    :class:`FramePlan` objects for ``records``."""
    records = list(records)
    if not records and plans is None:
        raise AttackError("empty dataset")
    check_texture(mesh, texture0)
    if plans is None:
        plans = load_plans(mesh, texture0.mask, records, root, scenes or {}, cfg)
    if eot is not None and eot.seed != cfg.seed:
        eot = dataclasses.replace(eot, seed=cfg.seed)
    mask = texture0.mask
    lo, hi = cfg.clamp
    image = texture0.image.copy()
    m1 = np.zeros_like(image)
    m2 = np.zeros_like(image)
    rng = np.random.default_rng(cfg.seed)
    log, step = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(plans)) if cfg.shuffle else np.arange(len(plans))
        for k in order:
            plan = plans[k]
            tex = TextureMap(image, mask)
            grads, reps = [], []
            for d in range(cfg.eot_draws):
                rep, g, _ = frame_loss(plan, tex, weights, loss_cfg, eot, epoch * cfg.eot_draws + d)
                grads.append(g)
                reps.append(rep)
            grad = grads[0] if len(grads) == 1 else np.mean(grads, axis=0)
            if not np.all(np.isfinite(grad)):
                raise AttackError(f"non-finite gradient at step {step}")
            step += 1
            if cfg.optimizer == "adam":
                m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * grad
                m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * grad * grad
                update = (m1 / (1 - cfg.beta1 ** step)) / (np.sqrt(m2 / (1 - cfg.beta2 ** step)) + cfg.eps)
            else:
                update = grad
            new = np.clip(image - cfg.lr * update, lo, hi)
            image = np.where(mask[..., None], new, image)
            rep = reps[0] if len(reps) == 1 else LossReport(*np.mean([dataclasses.astuple(r) for r in reps], axis=0))
            log.append((step, epoch, plan.index, rep))
            if progress is not None:
                progress(step, epoch, rep)
    return AttackResult(TextureMap(image, mask, texture0.untextured), log)


def write_loss_log(log, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "frame", "l1", "l2", "l_s", "total"])
        for step, epoch, frame, r in log:
            w.writerow([step, epoch, frame, repr(r.l1), repr(r.l2), repr(r.l_s), repr(r.total)])


def records_root(manifest_path) -> str:
    return manifest_dir(manifest_path)
