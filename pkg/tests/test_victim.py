import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camotex.victim import (Architecture, DetectorOutput, TrainConfig, TrainingDiverged, TrainingSet,
                            WeightFormatError, build_targets, decode_boxes, decode_detections,
                            detector_forward, detector_input_vjp, init_weights, load_weights, nms,
                            save_weights, score_cotangent, scores_from_raw, train_victim, zero_weights)

SMALL = Architecture(input_size=32)


# ---------------------------------------------------------------------------
# oracles

def naive_conv(x, w, b, stride):
    """Direct 3x3 convolution with zero padding 1: x (H, W, Cin), w (3, 3, Cin, Cout)."""
    h, wd, _ = x.shape
    k = w.shape[0]
    pad = k // 2
    xp = np.zeros((h + 2 * pad, wd + 2 * pad, x.shape[2]))
    xp[pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, w.shape[3]))
    for i in range(ho):
        for j in range(wo):
            acc = b.astype(float).copy()
            for di in range(k):
                for dj in range(k):
                    acc = acc + xp[i * stride + di, j * stride + dj] @ w[di, dj]
            out[i, j] = acc
    return out


def act_oracle(name, z):
    if name == "silu":
        return z / (1 + np.exp(-z))
    if name == "tanh":
        return np.tanh(z)
    return np.where(z > 0, z, 0.1 * z)


def forward_oracle(weights, image):
    p = {k: v.astype(np.float64) for k, v in weights.params.items()}
    a = weights.arch.activation
    h = image
    for k in range(4):
        h = act_oracle(a, naive_conv(h, p[f"conv{k}.w"], p[f"conv{k}.b"], 2))
    h = act_oracle(a, naive_conv(h, p["head.w"], p["head.b"], 1))
    return naive_conv(h, p["out.w"], p["out.b"], 1)


def nms_oracle(boxes, scores, thr):
    """Exhaustive search for the subset satisfying the greedy suppression conditions."""
    n = len(scores)
    rank = sorted(range(n), key=lambda i: (-scores[i], i))
    pos = {i: r for r, i in enumerate(rank)}

    def iou(a, b):
        iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = iw * ih
        union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / union if union > 0 else 0.0

    m = [[iou(boxes[i], boxes[j]) for j in range(n)] for i in range(n)]
    found = []
    for bits in itertools.product([False, True], repeat=n):
        keep = [i for i in range(n) if bits[i]]
        if any(m[i][j] > thr for i in keep for j in keep if i != j):
            continue
        dropped = [i for i in range(n) if not bits[i]]
        if all(any(pos[j] < pos[i] and m[i][j] > thr for j in keep) for i in dropped):
            found.append(sorted(keep, key=lambda i: pos[i]))
    assert len(found) == 1
    return found[0]


def _obj_loss(weights, img):
    out, _ = detector_forward(weights, img)
    return out.objectness.mean()


# ---------------------------------------------------------------------------
# forward

def test_zero_weights_give_neutral_scores():
    arch = Architecture()
    out, _ = detector_forward(zero_weights(arch), np.random.default_rng(0).random((96, 96, 3)))
    assert (out.objectness == 0.5).all()
    np.testing.assert_allclose(out.class_conf, 1 / arch.num_classes, atol=1e-15)
    assert out.n_c == 36


@pytest.mark.parametrize("activation", ["silu", "leaky_relu", "tanh"])
def test_forward_matches_naive_convolution(activation):
    arch = Architecture(input_size=32, activation=activation)
    rng = np.random.default_rng(1)
    for seed in range(3):
        w = init_weights(arch, seed)
        img = rng.random((32, 32, 3))
        out, _ = detector_forward(w, img)
        np.testing.assert_allclose(out.raw, forward_oracle(w, img), atol=1e-5, rtol=0)


def test_size_mismatch():
    with pytest.raises(ValueError):
        detector_forward(init_weights(SMALL, 0), np.zeros((48, 48, 3)))


def test_shift_by_one_cell_shifts_predictions():
    arch = Architecture(input_size=128)
    w = init_weights(arch, 3)
    img = np.random.default_rng(2).random((128, 128, 3))
    img[:, :24] = 0.0
    shifted = np.zeros_like(img)
    shifted[:, 16:] = img[:, :-16]
    a, _ = detector_forward(w, img)
    b, _ = detector_forward(w, shifted)
    # cells whose receptive field stays inside the image in both positions
    for i in range(2, 6):
        for j in range(2, 5):
            np.testing.assert_allclose(b.raw[i, j + 1], a.raw[i, j], atol=1e-10)


def test_score_ranges():
    rng = np.random.default_rng(3)
    w = init_weights(Architecture(), 5)
    out, _ = detector_forward(w, rng.random((96, 96, 3)))
    assert ((out.objectness > 0) & (out.objectness < 1)).all()
    np.testing.assert_allclose(out.class_conf.sum(axis=-1), 1.0, atol=1e-6)


@given(st.integers(0, 2 ** 31))
def test_softmax_and_sigmoid_properties(seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(scale=20.0, size=(3, 3, 5 + 4))
    obj, cls = scores_from_raw(raw, Architecture(input_size=48))
    assert ((obj >= 0) & (obj <= 1)).all()
    np.testing.assert_allclose(cls.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# input VJP

@pytest.mark.parametrize("activation", ["silu", "leaky_relu", "tanh"])
def test_mean_objectness_gradient_finite_differences(activation):
    arch = Architecture(activation=activation)
    w = init_weights(arch, 11)
    rng = np.random.default_rng(4)
    img = rng.random((96, 96, 3))
    out, tape = detector_forward(w, img)
    d_obj = np.full(out.objectness.shape, 1.0 / out.objectness.size)
    g = detector_input_vjp(tape, score_cotangent(out, d_objectness=d_obj))
    h = 1e-3
    checked = 0
    for _ in range(50):
        idx = tuple(rng.integers(s) for s in img.shape)
        up, dn = img.copy(), img.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (_obj_loss(w, up) - _obj_loss(w, dn)) / (2 * h)
        if abs(fd) < 1e-9:
            continue
        assert abs(fd - g[idx]) <= 1e-2 * abs(fd)
        checked += 1
    assert checked >= 40


def test_full_raw_cotangent_finite_differences():
    w = init_weights(SMALL, 2)
    rng = np.random.default_rng(5)
    img = rng.random((32, 32, 3))
    out, tape = detector_forward(w, img)
    cot = rng.normal(size=out.raw.shape)
    g = detector_input_vjp(tape, cot)
    d = rng.normal(size=img.shape)
    h = 1e-4
    fd = (np.sum(cot * detector_forward(w, img + h * d)[0].raw)
          - np.sum(cot * detector_forward(w, img - h * d)[0].raw)) / (2 * h)
    assert abs(fd - np.sum(g * d)) <= 1e-6 * abs(fd)


def test_vjp_zero_and_linear():
    w = init_weights(SMALL, 2)
    rng = np.random.default_rng(6)
    out, tape = detector_forward(w, rng.random((32, 32, 3)))
    assert not detector_input_vjp(tape, np.zeros_like(out.raw)).any()
    a, b = rng.normal(size=out.raw.shape), rng.normal(size=out.raw.shape)
    np.testing.assert_allclose(detector_input_vjp(tape, a + b),
                               detector_input_vjp(tape, a) + detector_input_vjp(tape, b), atol=1e-12)
    with pytest.raises(ValueError):
        detector_input_vjp(tape, np.zeros((1, 1, 9)))


def test_score_cotangent_chain_rule():
    rng = np.random.default_rng(7)
    arch = Architecture(input_size=48)
    raw = rng.normal(size=(3, 3, 9))
    obj, cls = scores_from_raw(raw, arch)
    out = DetectorOutput(raw, obj, cls, decode_boxes(raw, arch))
    d_obj, d_cls = rng.normal(size=obj.shape), rng.normal(size=cls.shape)
    d_raw = score_cotangent(out, d_obj, d_cls)
    delta = rng.normal(size=raw.shape)
    h = 1e-6
    o1, c1 = scores_from_raw(raw + h * delta, arch)
    o0, c0 = scores_from_raw(raw - h * delta, arch)
    fd = (np.sum(d_obj * (o1 - o0)) + np.sum(d_cls * (c1 - c0))) / (2 * h)
    assert abs(fd - np.sum(d_raw * delta)) <= 1e-6 * max(1.0, abs(fd))


# ---------------------------------------------------------------------------
# decoding

def _output_from(boxes, scores, n_classes=4):
    n = len(scores)
    s = int(np.ceil(np.sqrt(max(n, 1))))
    obj = np.zeros(s * s)
    obj[:n] = scores
    bx = np.zeros((s * s, 4))
    bx[:n] = boxes
    cls = np.full((s, s, n_classes), 1.0 / n_classes)
    return DetectorOutput(np.zeros((s, s, 5 + n_classes)), obj.reshape(s, s), cls, bx)


def test_nothing_above_threshold():
    out = _output_from(np.array([[0, 0, 10, 10]] * 3), np.array([0.1, 0.3, 0.49]))
    assert decode_detections(out, 0.5, 0.45) == []


def test_duplicate_suppressed():
    box = [5.0, 5.0, 20.0, 20.0]
    out = _output_from(np.array([box, box]), np.array([0.8, 0.9]))
    dets = decode_detections(out, 0.5, 0.5)
    assert len(dets) == 1 and dets[0].objectness == 0.9


def test_nms_matches_exhaustive_oracle():
    rng = np.random.default_rng(8)
    for _ in range(500):
        n = int(rng.integers(1, 9))
        xy = rng.uniform(0, 40, (n, 2))
        wh = rng.uniform(5, 30, (n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        scores = rng.choice([0.55, 0.6, 0.7, 0.8, 0.9], size=n) if rng.random() < 0.3 else rng.random(n)
        thr = float(rng.choice([0.3, 0.45, 0.5, 0.7]))
        assert nms(boxes, scores, thr) == nms_oracle(boxes, scores, thr)


def test_decoded_detections_sorted_and_separated():
    rng = np.random.default_rng(9)
    w = init_weights(Architecture(), 1)
    out, _ = detector_forward(w, rng.random((96, 96, 3)), tau_det=0.1, nms_iou=0.3)
    scores = [d.objectness for d in out.detections]
    assert scores == sorted(scores, reverse=True)
    for a, b in itertools.combinations(out.detections, 2):
        from camotex.victim import box_iou
        assert box_iou(a.box, b.box) <= 0.3
    assert out.n_o <= out.n_c


# ---------------------------------------------------------------------------
# weights

def test_weight_round_trip(tmp_path):
    w = init_weights(Architecture(activation="tanh"), 3)
    save_weights(w, tmp_path / "a.cfw")
    back = load_weights(tmp_path / "a.cfw")
    assert back.arch == w.arch
    for k in w.params:
        assert back.params[k].tobytes() == w.params[k].tobytes()
    save_weights(back, tmp_path / "b.cfw")
    assert (tmp_path / "a.cfw").read_bytes() == (tmp_path / "b.cfw").read_bytes()
    assert (tmp_path / "a.cfw").read_bytes()[:4] == b"CFW1"


def test_corrupted_weights_rejected(tmp_path):
    w = init_weights(SMALL, 0)
    save_weights(w, tmp_path / "a.cfw")
    data = bytearray((tmp_path / "a.cfw").read_bytes())
    data[len(data) // 2] ^= 0xFF
    (tmp_path / "b.cfw").write_bytes(bytes(data))
    with pytest.raises(WeightFormatError):
        load_weights(tmp_path / "b.cfw")
    (tmp_path / "c.cfw").write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(WeightFormatError):
        load_weights(tmp_path / "c.cfw")


# ---------------------------------------------------------------------------
# training

def _toy_set(n, seed=0):
    rng = np.random.default_rng(seed)
    imgs = np.zeros((n, 32, 32, 3), np.float32)
    cats = np.full((n, 32, 32), 3, np.uint8)
    boxes = []
    for k in range(n):
        imgs[k] = rng.uniform(0.3, 0.5, (32, 32, 3))
        x0, y0 = rng.integers(2, 14, 2)
        imgs[k, y0:y0 + 14, x0:x0 + 14] = (0.8, 0.1, 0.1)
        cats[k, y0:y0 + 14, x0:x0 + 14] = 0
        boxes.append([(float(x0), float(y0), float(x0 + 14), float(y0 + 14), 0)])
    return TrainingSet(imgs, cats, boxes)


def test_memorizes_single_frame():
    cfg = TrainConfig(epochs=150, lr=5e-3, batch=1, flip=False, jitter=0.0, noise_std=0.0)
    res = train_victim(_toy_set(1), cfg, SMALL)
    assert res.history[-1] < 0.02 * res.history[0]
    assert res.history[-1] < 0.05


def test_training_is_deterministic(tmp_path):
    data = _toy_set(6)
    cfg = TrainConfig(epochs=2, batch=3, seed=4)
    a = train_victim(data, cfg, SMALL).weights
    b = train_victim(data, cfg, SMALL).weights
    save_weights(a, tmp_path / "a.cfw")
    save_weights(b, tmp_path / "b.cfw")
    assert (tmp_path / "a.cfw").read_bytes() == (tmp_path / "b.cfw").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    data = _toy_set(2)
    data.images[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train_victim(data, TrainConfig(epochs=2, batch=2, jitter=0.0, noise_std=0.0, flip=False), SMALL)
    assert err.value.epoch == 0


def test_targets_mark_center_cell():
    cats = np.full((32, 32), 3, np.uint8)
    obj, cls, box = build_targets(cats, [(18.0, 2.0, 30.0, 10.0, 0)], SMALL)
    assert obj[0, 1] == 1 and obj.sum() == 1 and cls[0, 1] == 0
    np.testing.assert_allclose(box[0, 1, :2], (24 / 16 - 1, 6 / 16))
