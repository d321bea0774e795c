"""Small single-scale grid detector with an exact input-gradient path.

Four stride-2 3x3 convolutions, a 3x3 head convolution and a 1x1 output
layer give one proposal per ``stride x stride`` cell with an objectness
logit, class logits and box offsets. Everything runs in float64 numpy;
parameters are stored as float32 so that weight files round-trip exactly.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CFW1"
STRIDE = 16
BOX_LOG_CLIP = 4.0


class WeightFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"non-finite training loss {loss} in epoch {epoch}")


# ---------------------------------------------------------------------------
# Architecture and parameters

@dataclass(frozen=True)
class Architecture:
    input_size: int = 96
    channels: tuple = (16, 32, 48, 64)
    head_channels: int = 64
    class_names: tuple = ("car", "ground", "distractor", "background")
    activation: str = "silu"
    anchor: float = 32.0      # box size (pixels) at zero size offset
    target_class: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.input_size % STRIDE:
            raise ValueError(f"input size {self.input_size} is not a multiple of {STRIDE}")
        if len(self.channels) != 4:
            raise ValueError("exactly four stride-2 blocks are expected")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def grid(self) -> int:
        return self.input_size // STRIDE

    @property
    def outputs(self) -> int:
        return 5 + self.num_classes

    def layer_shapes(self) -> list[tuple[str, tuple]]:
        shapes, c_in = [], 3
        for k, c in enumerate(self.channels):
            shapes += [(f"conv{k}.w", (3, 3, c_in, c)), (f"conv{k}.b", (c,))]
            c_in = c
        shapes += [("head.w", (3, 3, c_in, self.head_channels)), ("head.b", (self.head_channels,)),
                   ("out.w", (1, 1, self.head_channels, self.outputs)), ("out.b", (self.outputs,))]
        return shapes

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "channels": list(self.channels),
                "head_channels": self.head_channels, "class_names": list(self.class_names),
                "activation": self.activation, "anchor": self.anchor, "target_class": self.target_class}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class DetectorWeights:
    arch: Architecture
    params: dict  # name -> float32 array, in ``arch.layer_shapes()`` order

    def __post_init__(self):
        expected = self.arch.layer_shapes()
        if list(self.params) != [n for n, _ in expected]:
            raise WeightFormatError(f"parameter names {list(self.params)} do not match the architecture")
        clean = {}
        for name, shape in expected:
            a = np.asarray(self.params[name])
            if a.shape != shape:
                raise WeightFormatError(f"{name}: shape {a.shape} != {shape}")
            a = a.astype(np.float32)
            a.setflags(write=False)
            clean[name] = a
        object.__setattr__(self, "params", clean)

    def as_float64(self) -> dict:
        return {k: v.astype(np.float64) for k, v in self.params.items()}


def init_weights(arch: Architecture, seed: int = 0) -> DetectorWeights:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.layer_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name == "out.w":
            params[name] = rng.normal(0.0, 0.01, shape)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    params["out.b"][0] = -2.0
    return DetectorWeights(arch, params)


def zero_weights(arch: Architecture) -> DetectorWeights:
    return DetectorWeights(arch, {n: np.zeros(s) for n, s in arch.layer_shapes()})


def save_weights(weights: DetectorWeights, path) -> None:
    desc = {"arch": weights.arch.to_dict(),
            "tensors": [[n, list(s)] for n, s in weights.arch.layer_shapes()]}
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(blob)) + blob
    body += b"".join(weights.params[n].astype("<f4").tobytes() for n, _ in weights.arch.layer_shapes())
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_weights(path) -> DetectorWeights:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise WeightFormatError(f"{path}: missing CFW1 header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise WeightFormatError(f"{path}: checksum mismatch")
    (n,) = struct.unpack("<I", body[4:8])
    try:
        desc = json.loads(body[8:8 + n].decode("utf-8"))
        arch = Architecture.from_dict(desc["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFormatError(f"{path}: bad descriptor: {exc}") from None
    declared = [(t[0], tuple(t[1])) for t in desc["tensors"]]
    if declared != arch.layer_shapes():
        raise WeightFormatError(f"{path}: tensor list does not match the architecture")
    offset, params = 8 + n, {}
    for name, shape in declared:
        size = int(np.prod(shape)) * 4
        if offset + size > len(body):
            raise WeightFormatError(f"{path}: truncated at tensor {name}")
        params[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=offset).reshape(shape)
        offset += size
    if offset != len(body):
        raise WeightFormatError(f"{path}: {len(body) - offset} trailing bytes")
    return DetectorWeights(arch, params)


# ---------------------------------------------------------------------------
# Layers (NHWC)

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    s = _sigmoid(x)
    return x * s, s * (1.0 + x * (1.0 - s))


def _leaky(x):
    return np.where(x > 0, x, 0.1 * x), np.where(x > 0, 1.0, 0.1)


def _tanh(x):
    y = np.tanh(x)
    return y, 1.0 - y * y


ACTIVATIONS = {"silu": _silu, "leaky_relu": _leaky, "tanh": _tanh}


def _im2col(x, k, stride):
    """(N, H, W, C) -> (N, Ho, Wo, k*k*C) patches with zero padding ``k // 2``."""
    pad = k // 2
    n, h, w, c = x.shape
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = [xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
            for i in range(k) for j in range(k)]
    return np.concatenate(cols, axis=3) if len(cols) > 1 else cols[0]


def _col2im(dcols, x_shape, k, stride):
    pad = k // 2
    n, h, w, c = x_shape
    ho, wo = dcols.shape[1:3]
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    q = 0
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                dcols[..., q * c:(q + 1) * c]
            q += 1
    return dxp[:, pad:pad + h, pad:pad + w, :]


def _layers(arch):
    specs = [(f"conv{k}", 2, True) for k in range(4)]
    return specs + [("head", 1, True), ("out", 1, False)]


def forward_batch(params: dict, arch: Architecture, x: np.ndarray):
    """Raw scores (N, S, S, 5 + C) for images (N, H, W, 3); returns (raw, cache)."""
    act = ACTIVATIONS[arch.activation]
    cache = []
    h = x
    for name, stride, nonlin in _layers(arch):
        w = params[name + ".w"]
        cols = _im2col(h, w.shape[0], stride)
        z = cols @ w.reshape(-1, w.shape[3]) + params[name + ".b"]
        cache.append((name, stride, cols, h.shape, None))
        if nonlin:
            h, dact = act(z)
            cache[-1] = cache[-1][:4] + (dact,)
        else:
            h = z
    return h, cache


def backward_batch(params: dict, arch: Architecture, cache, d_raw: np.ndarray, want_params=True):
    """Reverse pass; returns (d_input, d_params)."""
    grads = {}
    d = d_raw
    for name, stride, cols, in_shape, dact in reversed(cache):
        w = params[name + ".w"]
        if dact is not None:
            d = d * dact
        if want_params:
            flat = d.reshape(-1, d.shape[3])
            grads[name + ".w"] = (cols.reshape(-1, cols.shape[3]).T @ flat).reshape(w.shape)
            grads[name + ".b"] = flat.sum(axis=0)
        dcols = d @ w.reshape(-1, w.shape[3]).T
        d = _col2im(dcols, in_shape, w.shape[0], stride)
    return d, grads


# ---------------------------------------------------------------------------
# Single-image interface

@dataclass(frozen=True, eq=False)
class Detection:
    box: tuple           # (x0, y0, x1, y1) pixels
    objectness: float
    class_conf: np.ndarray
    label: int
    cell: int


@dataclass(frozen=True, eq=False)
class DetectorOutput:
    raw: np.ndarray          # (S, S, 5 + C) logits and offsets
    objectness: np.ndarray   # (S, S)
    class_conf: np.ndarray   # (S, S, C)
    boxes: np.ndarray        # (S*S, 4) x0, y0, x1, y1
    detections: tuple = ()

    @property
    def n_c(self) -> int:
        return self.objectness.size

    @property
    def n_o(self) -> int:
        return len(self.detections)


@dataclass(frozen=True, eq=False)
class RawScoreTape:
    arch: Architecture
    params: dict
    cache: list
    input_shape: tuple
    raw: np.ndarray


def softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def decode_boxes(raw: np.ndarray, arch: Architecture) -> np.ndarray:
    s = raw.shape[0]
    rows, cols = np.mgrid[0:s, 0:s]
    c = arch.num_classes
    cx = (cols + _sigmoid(raw[..., 1 + c])) * STRIDE
    cy = (rows + _sigmoid(raw[..., 2 + c])) * STRIDE
    bw = arch.anchor * np.exp(np.clip(raw[..., 3 + c], -BOX_LOG_CLIP, BOX_LOG_CLIP))
    bh = arch.anchor * np.exp(np.clip(raw[..., 4 + c], -BOX_LOG_CLIP, BOX_LOG_CLIP))
    return np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1).reshape(-1, 4)


def scores_from_raw(raw: np.ndarray, arch: Architecture):
    c = arch.num_classes
    return _sigmoid(raw[..., 0]), softmax(raw[..., 1:1 + c])


def detector_forward(weights: DetectorWeights, image: np.ndarray, tau_det: float = 0.5,
                     nms_iou: float = 0.45):
    arch = weights.arch
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (arch.input_size, arch.input_size, 3):
        raise ValueError(f"image shape {image.shape} != {(arch.input_size, arch.input_size, 3)}")
    params = weights.as_float64()
    raw, cache = forward_batch(params, arch, image[None])
    raw = raw[0]
    obj, cls = scores_from_raw(raw, arch)
    out = DetectorOutput(raw, obj, cls, decode_boxes(raw, arch))
    out = DetectorOutput(raw, obj, cls, out.boxes, tuple(decode_detections(out, tau_det, nms_iou)))
    return out, RawScoreTape(arch, params, cache, image[None].shape, raw)


def score_cotangent(output: DetectorOutput, d_objectness=None, d_class_conf=None) -> np.ndarray:
    """Map cotangents of objectness (S, S) and class confidences (S, S, C)
    onto the raw scores (S, S, 5 + C)."""
    d = np.zeros_like(output.raw)
    if d_objectness is not None:
        o = output.objectness
        d[..., 0] = d_objectness * o * (1.0 - o)
    if d_class_conf is not None:
        p = output.class_conf
        inner = (d_class_conf * p).sum(axis=-1, keepdims=True)
        d[..., 1:1 + p.shape[-1]] = p * (d_class_conf - inner)
    return d


def detector_input_vjp(tape: RawScoreTape, raw_cotangent: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(raw * raw_cotangent)`` with respect to the input image."""
    raw_cotangent = np.asarray(raw_cotangent, dtype=np.float64)
    if raw_cotangent.shape != tape.raw.shape:
        raise ValueError(f"cotangent shape {raw_cotangent.shape} != raw score shape {tape.raw.shape}")
    d, _ = backward_batch(tape.params, tape.arch, tape.cache, raw_cotangent[None], want_params=False)
    return d[0]


# ---------------------------------------------------------------------------
# Decoding

def box_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression; indices of kept boxes by descending score (ties by index)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(box_iou(boxes[i], boxes[j]) <= iou_threshold for j in keep):
            keep.append(i)
    return keep


def decode_detections(output: DetectorOutput, tau_det: float = 0.5, nms_iou: float = 0.45) -> list[Detection]:
    if not (0 < tau_det < 1 and 0 < nms_iou < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    obj = output.objectness.reshape(-1)
    cls = output.class_conf.reshape(len(obj), -1)
    cand = np.flatnonzero(obj >= tau_det)
    keep = nms(output.boxes[cand], obj[cand], nms_iou)
    return [Detection(tuple(float(v) for v in output.boxes[cand[k]]), float(obj[cand[k]]),
                      cls[cand[k]].copy(), int(np.argmax(cls[cand[k]])), int(cand[k])) for k in keep]


# ---------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    lr: float = 2e-3
    batch: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    positive_weight: float = 1.0
    class_weight: float = 0.5
    box_weight: float = 2.0
    grad_clip: float = 10.0
    flip: bool = True
    jitter: float = 0.1       # brightness offset and contrast half-range
    noise_std: float = 0.02

    def validate(self):
        if self.epochs < 1 or self.batch < 1 or self.lr <= 0:
            raise ValueError("epochs and batch must be >= 1 and lr > 0")


@dataclass
class TrainingSet:
    images: np.ndarray     # (N, H, W, 3) float32
    categories: np.ndarray  # (N, H, W) uint8
    boxes: list            # per frame: list of (x0, y0, x1, y1, class)


@dataclass
class TrainResult:
    weights: DetectorWeights
    history: list = field(default_factory=list)
    held_out_p05: float | None = None
    held_out_frames: int = 0


def load_training_set(manifests) -> TrainingSet:
    from .render_ref import CAR, DISTRACTOR, load_categories
    from .scenario import manifest_dir, read_manifest
    from .texture import load_png
    images, cats, boxes = [], [], []
    for path in ([manifests] if isinstance(manifests, (str, os.PathLike)) else manifests):
        root = manifest_dir(path)
        for rec in read_manifest(path):
            images.append(load_png(os.path.join(root, rec.image)).astype(np.float32))
            cats.append(load_categories(os.path.join(root, rec.categories)))
            b = [] if rec.box is None else [(*rec.box, CAR)]
            b += [(*d, DISTRACTOR) for d in rec.distractor_boxes]
            boxes.append(b)
    if not images:
        return TrainingSet(np.zeros((0, 0, 0, 3), np.float32), np.zeros((0, 0, 0), np.uint8), [])
    return TrainingSet(np.stack(images), np.stack(cats), boxes)


def build_targets(categories: np.ndarray, boxes, arch: Architecture):
    """Per-cell targets: objectness, class index, box offsets and a positive flag."""
    s = arch.grid
    centers = np.arange(s) * STRIDE + STRIDE // 2
    cls = categories[np.ix_(centers, centers)].astype(np.int64)
    obj = np.zeros((s, s))
    box = np.zeros((s, s, 4))
    # the vehicle is written last so it wins a shared cell
    for x0, y0, x1, y1, c in sorted(boxes, key=lambda b: b[4] == arch.target_class):
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        j, i = min(int(cx // STRIDE), s - 1), min(int(cy // STRIDE), s - 1)
        obj[i, j] = 1.0
        cls[i, j] = int(c)
        box[i, j] = (cx / STRIDE - j, cy / STRIDE - i,
                     np.log(max(x1 - x0, 1.0) / arch.anchor), np.log(max(y1 - y0, 1.0) / arch.anchor))
    return obj, cls, box


def _softplus(x):
    return np.logaddexp(0.0, x)


def detection_loss(raw: np.ndarray, obj_t, cls_t, box_t, arch: Architecture, cfg: TrainConfig):
    """Summed per-image loss averaged over the batch, and its gradient w.r.t. ``raw``."""
    n = raw.shape[0]
    c = arch.num_classes
    z = raw[..., 0]
    wpos = cfg.positive_weight
    l_obj = (wpos * obj_t * _softplus(-z) + (1 - obj_t) * _softplus(z)).sum()
    sig = _sigmoid(z)
    d = np.zeros_like(raw)
    d[..., 0] = wpos * obj_t * (sig - 1.0) + (1 - obj_t) * sig

    logits = raw[..., 1:1 + c]
    p = softmax(logits)
    onehot = np.eye(c)[cls_t]
    l_cls = -cfg.class_weight * (onehot * np.log(np.maximum(p, 1e-300))).sum()
    d[..., 1:1 + c] = cfg.class_weight * (p - onehot)

    pos = obj_t[..., None]
    sxy = _sigmoid(raw[..., 1 + c:3 + c])
    r_xy = sxy - box_t[..., :2]
    r_wh = raw[..., 3 + c:5 + c] - box_t[..., 2:]
    l_box = cfg.box_weight * (pos * (r_xy ** 2)).sum() + cfg.box_weight * (pos * (r_wh ** 2)).sum()
    d[..., 1 + c:3 + c] = cfg.box_weight * pos * 2 * r_xy * sxy * (1 - sxy)
    d[..., 3 + c:5 + c] = cfg.box_weight * pos * 2 * r_wh
    total = (l_obj + l_cls + l_box) / n
    return total, d / n, {"obj": l_obj / n, "cls": l_cls / n, "box": l_box / n}


def _augment(x, cats, boxes, rng, cfg, size):
    x = x.astype(np.float64)
    if cfg.flip and rng.random() < 0.5:
        x = x[:, ::-1]
        cats = cats[:, ::-1]
        boxes = [(size - b[2], b[1], size - b[0], b[3], b[4]) for b in boxes]
    if cfg.jitter > 0:
        c = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
        b = rng.uniform(-cfg.jitter, cfg.jitter)
        x = c * x + b
    if cfg.noise_std > 0:
        x = x + rng.normal(0.0, cfg.noise_std, x.shape)
    return np.clip(x, 0.0, 1.0), cats, boxes


def train_victim(data: TrainingSet, cfg: TrainConfig = TrainConfig(), arch: Architecture = Architecture(),
                 held_out: TrainingSet | None = None, progress=None) -> TrainResult:
    """Adam on objectness BCE + class CE + box L2 at positive cells."""
    cfg.validate()
    n = len(data.images)
    if n == 0:
        raise ValueError("empty training set")
    if data.images.shape[1:3] != (arch.input_size, arch.input_size):
        raise ValueError(f"frames are {data.images.shape[1:3]}, architecture expects {arch.input_size}")
    rng = np.random.default_rng(cfg.seed)
    params = init_weights(arch, cfg.seed).as_float64()
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            xs, targets = [], []
            for i in idx:
                x, cats, boxes = _augment(data.images[i], data.categories[i], data.boxes[i], rng, cfg,
                                          arch.input_size)
                xs.append(x)
                targets.append(build_targets(cats, boxes, arch))
            x = np.stack(xs)
            obj_t = np.stack([t[0] for t in targets])
            cls_t = np.stack([t[1] for t in targets])
            box_t = np.stack([t[2] for t in targets])
            raw, cache = forward_batch(params, arch, x)
            loss, d_raw, _ = detection_loss(raw, obj_t, cls_t, box_t, arch, cfg)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            _, grads = backward_batch(params, arch, cache, d_raw)
            norm = np.sqrt(sum((g ** 2).sum() for g in grads.values()))
            scale = min(1.0, cfg.grad_clip / max(norm, 1e-12))
            step += 1
            for k in params:
                g = grads[k] * scale
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v2[k] = cfg.beta2 * v2[k] + (1 - cfg.beta2) * g * g
                mh = m[k] / (1 - cfg.beta1 ** step)
                vh = v2[k] / (1 - cfg.beta2 ** step)
                params[k] = params[k] - cfg.lr * mh / (np.sqrt(vh) + 1e-8)
            total += loss
            batches += 1
        mean = total / batches
        if not np.isfinite(mean):
            raise TrainingDiverged(epoch, mean)
        history.append(mean)
        if progress is not None:
            progress(epoch, mean)
    weights = DetectorWeights(arch, params)
    result = TrainResult(weights, history)
    if held_out is not None and len(held_out.images):
        from .evaluation import evaluate_frames
        report = evaluate_frames(weights, held_out.images, [
            next((b[:4] for b in bx if b[4] == arch.target_class), None) for bx in held_out.boxes])
        result.held_out_p05 = report.p_at_05
        result.held_out_frames = len(held_out.images)
    return result
