"""Detection metrics: IoU, precision at IoU 0.5, attack success rate and the
detection-frame ratio over an azimuth sweep, plus CSV/PNG report output.

A frame counts as a valid vehicle detection when some detection labelled
with the target class has confidence strictly above the confidence
threshold and IoU >= the IoU threshold with the ground-truth box.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .victim import DetectorWeights, box_iou, detector_forward

CSV_FIELDS = ("texture_id", "detector_id", "p_at_05", "asr", "a_physical")


def iou(a, b) -> float:
    for box in (a, b):
        if box[2] < box[0] or box[3] < box[1]:
            raise ValueError(f"box {tuple(box)} has negative extent")
    return box_iou(a, b)


@dataclass(frozen=True)
class FrameRecord:
    """Per-frame outcome; ``detections`` are (box, confidence, label) triples."""

    detections: tuple
    gt_box: tuple | None
    detected: bool = False
    best_iou: float = 0.0
    best_conf: float = 0.0


def _is_positive(det, target, conf_tau):
    return det[2] == target and det[1] > conf_tau


def frame_record(detections, gt_box, target_class=0, conf_tau=0.5, iou_tau=0.5) -> FrameRecord:
    dets = tuple((tuple(float(v) for v in d[0]), float(d[1]), int(d[2])) for d in detections)
    best_iou = best_conf = 0.0
    detected = False
    for box, conf, label in dets:
        if not _is_positive((box, conf, label), target_class, conf_tau) or gt_box is None:
            continue
        o = iou(box, gt_box)
        if o > best_iou or (o == best_iou and conf > best_conf):
            best_iou, best_conf = o, conf
        detected |= o >= iou_tau
    return FrameRecord(dets, None if gt_box is None else tuple(gt_box), detected, best_iou, best_conf)


@dataclass(frozen=True)
class Precision:
    value: float
    true_positives: int
    predicted: int
    empty: bool   # no predicted positives; value is then 0 by definition

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.true_positives, self.predicted) if self.predicted else Fraction(0)


def precision_at_iou(frames, conf_tau: float = 0.5, iou_tau: float = 0.5, target_class: int = 0) -> Precision:
    """``frames``: iterable of (detections, gt_box) with detections as
    (box, confidence, label). Each ground truth absorbs at most one detection,
    assigned in descending confidence order."""
    if not (0 < conf_tau < 1 and 0 < iou_tau < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    tp = predicted = 0
    for detections, gt in frames:
        cars = sorted((d for d in detections if _is_positive(d, target_class, conf_tau)),
                      key=lambda d: -d[1])
        predicted += len(cars)
        if gt is None:
            continue
        for d in cars:
            if iou(d[0], gt) >= iou_tau:
                tp += 1
                break
    return Precision(tp / predicted if predicted else 0.0, tp, predicted, predicted == 0)


def attack_success_rate(records) -> float:
    records = list(records)
    if not records:
        raise ValueError("attack success rate of an empty frame list")
    return sum(not r.detected for r in records) / len(records)


@dataclass
class EvalReport:
    p_at_05: float
    asr: float
    records: list
    empty_predictions: bool = False
    texture_id: str = ""
    detector_id: str = ""
    a_physical: float | None = None
    extras: dict = field(default_factory=dict)


def evaluate_detections(frames, texture_id="", detector_id="", target_class=0) -> EvalReport:
    frames = list(frames)
    prec = precision_at_iou(frames, target_class=target_class)
    records = [frame_record(d, gt, target_class) for d, gt in frames]
    return EvalReport(prec.value, attack_success_rate(records), records, prec.empty, texture_id, detector_id)


def detect(weights: DetectorWeights, image: np.ndarray):
    out, _ = detector_forward(weights, image)
    return [(d.box, d.objectness, d.label) for d in out.detections]


def evaluate_frames(weights: DetectorWeights, images, gt_boxes, texture_id="", detector_id="") -> EvalReport:
    frames = [(detect(weights, img), gt) for img, gt in zip(images, gt_boxes)]
    return evaluate_detections(frames, texture_id, detector_id, weights.arch.target_class)


# ---------------------------------------------------------------------------
# Azimuth sweep

@dataclass(frozen=True)
class SequenceEvalReport:
    f_d: int
    f_o: int

    def __post_init__(self):
        if not 0 <= self.f_d <= self.f_o:
            raise ValueError(f"invalid counts f_d={self.f_d}, f_o={self.f_o}")

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.f_d, self.f_o)

    @property
    def a_physical(self) -> float:
        return self.f_d / self.f_o


@dataclass(frozen=True)
class SweepTemplate:
    r: float = 1.0
    theta: float = 20.0
    fov_y: float = 45.0
    width: int = 96
    height: int = 96
    target: tuple = (0.0, 0.06, 0.0)
    phi0: float = 0.0


def sweep_poses(frames: int, template: SweepTemplate = SweepTemplate()):
    from .camera import CameraPose
    return [CameraPose(r=template.r, theta=template.theta, phi=(template.phi0 + 360.0 * k / frames) % 360.0,
                       fov_y=template.fov_y, width=template.width, height=template.height,
                       target=template.target) for k in range(frames)]


def turntable_accuracy(mesh, texture, weights: DetectorWeights, scene, frames: int = 90,
                       template: SweepTemplate = SweepTemplate(), keep_frames: bool = False):
    """Reference-render ``frames`` equally spaced azimuths and count frames
    with a valid vehicle detection."""
    from .render_ref import render_ref
    if frames < 8:
        raise ValueError("a sweep needs at least 8 frames")
    f_d = 0
    kept = []
    for pose in sweep_poses(frames, template):
        ref = render_ref(mesh, texture, pose, scene)
        dets = detect(weights, ref.image)
        rec = frame_record(dets, ref.box, weights.arch.target_class)
        f_d += rec.detected
        if keep_frames:
            kept.append((ref.image, rec))
    report = SequenceEvalReport(int(f_d), frames)
    return (report, kept) if keep_frames else report


# ---------------------------------------------------------------------------
# Report files

def write_csv(reports, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in reports:
            w.writerow([r.texture_id, r.detector_id, f"{r.p_at_05:.6f}", f"{r.asr:.6f}",
                        "" if r.a_physical is None else f"{r.a_physical:.6f}"])


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def box_pixels(box, scale: int = 1):
    """Integer outline corners (inclusive) drawn for ``box``."""
    x0, y0, x1, y1 = (int(round(v * scale)) for v in box)
    return x0, y0, x1 - 1, y1 - 1


def annotate(image: np.ndarray, record: FrameRecord, scale: int = 3, target_class: int = 0):
    """Upscaled uint8 copy with the ground truth (green) and detections
    (red for the target class, yellow otherwise) with confidences."""
    from PIL import Image, ImageDraw
    from .texture import to_uint8
    im = Image.fromarray(to_uint8(image))
    if scale != 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    if record.gt_box is not None:
        draw.rectangle(box_pixels(record.gt_box, scale), outline=(0, 255, 0))
    for box, conf, label in record.detections:
        color = (255, 0, 0) if label == target_class else (255, 255, 0)
        corners = box_pixels(box, scale)
        draw.rectangle(corners, outline=color)
        if scale > 1:
            draw.text((corners[0] + 2, corners[1] + 1), f"{conf:.2f}", fill=color)
    return np.asarray(im)


def emit_report(reports, out_dir, frames=None, scale: int = 3) -> list[str]:
    """Write ``summary.csv`` and, for ``frames`` = [(name, image, record)],
    annotated PNGs. Returns the written paths."""
    from .texture import save_png
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    path = os.path.join(out_dir, "summary.csv")
    write_csv(reports, path)
    written = [path]
    for name, image, record in frames or ():
        p = os.path.join(out_dir, f"{name}.png")
        save_png(annotate(image, record, scale) / 255.0, p)
        written.append(p)
    return written
