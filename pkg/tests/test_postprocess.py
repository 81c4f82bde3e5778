import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fndetect.model import HeadOutputs
from fndetect.postprocess import (
    Detection,
    box_iou,
    decode_nms_free,
    decode_with_nms,
    iou,
    nms,
    read_detections_csv,
    write_detections_csv,
    write_detections_yolo,
)

from oracles import box_iou_scalar, nms_bruteforce


def random_dets(rng, n, n_cls=1, size=50.0, tie_scores=False):
    xy = rng.uniform(0, size, size=(n, 2))
    wh = rng.uniform(1, size / 2, size=(n, 2))
    if tie_scores:
        scores = rng.integers(0, 5, size=n) / 5.0
    else:
        scores = rng.uniform(0, 1, size=n)
    cls = rng.integers(0, n_cls, size=n)
    return [Detection(tuple(np.concatenate([xy[i], xy[i] + wh[i]]).tolist()), float(scores[i]), int(cls[i]))
            for i in range(n)]


def test_iou_examples():
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou((0, 0, 4, 4), (2, 0, 6, 2)) == pytest.approx(4 / 20)
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0  # touching edges


@given(st.lists(st.floats(0, 100), min_size=8, max_size=8))
def test_iou_symmetric_bounded(v):
    a = (min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1, max(v[2], v[3]) + 1)
    b = (min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1, max(v[6], v[7]) + 1)
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, b) == pytest.approx(box_iou_scalar(a, b), rel=1e-12)
    assert box_iou(a, b)[0, 0] == pytest.approx(iou(a, b), rel=1e-12)


def test_nms_examples():
    a = Detection((0, 0, 10, 10), 0.9)
    b = Detection((1, 1, 10, 10), 0.8)  # IoU 0.81 with a
    c = Detection((20, 20, 30, 30), 0.7)
    assert nms([a, b, c], 0.5) == [a, c]
    assert nms([], 0.5) == []
    assert nms([b], 0.5) == [b]
    other = Detection((1, 1, 10, 10), 0.8, class_id=1)
    assert nms([a, other], 0.5) == [a, other]
    assert nms([a, other], 0.5, class_aware=False) == [a]


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms([Detection((0, 0, 1, 1), 0.5)], 1.0)


@pytest.mark.parametrize("class_aware", [True, False])
def test_nms_matches_literal_procedure(class_aware):
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n = int(rng.integers(0, 51))
        dets = random_dets(rng, n, n_cls=3, tie_scores=trial % 3 == 0)
        thresh = float(rng.uniform(0.05, 0.95))
        got = nms(dets, thresh, class_aware)
        ref = nms_bruteforce([d.box for d in dets], [d.score for d in dets], [d.class_id for d in dets],
                             thresh, class_aware)
        assert got == [dets[i] for i in ref]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 40), st.floats(0.05, 0.95))
def test_nms_properties(seed, n, thresh):
    dets = random_dets(np.random.default_rng(seed), n, n_cls=2)
    out = nms(dets, thresh)
    assert nms(out, thresh) == out
    assert all(d in dets for d in out)
    assert [d.score for d in out] == sorted((d.score for d in out), reverse=True)
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            if out[i].class_id == out[j].class_id:
                assert iou(out[i].box, out[j].box) <= thresh


def _heads(cls_maps, box_maps, strides=(8,)):
    pairs = [(c, b) for c, b in zip(cls_maps, box_maps)]
    return HeadOutputs(tuple(strides), pairs, pairs)


def test_nms_free_negative_logits_give_nothing():
    heads = _heads([np.full((1, 1, 4, 4), -np.inf)], [np.zeros((1, 4, 4, 4))])
    assert decode_nms_free(heads, 0.25) == []
    assert decode_with_nms(heads, 0.25) == []


def test_nms_free_single_dominant_anchor():
    cls = np.full((1, 1, 4, 4), -50.0)
    cls[0, 0, 2, 1] = 10.0
    raw = np.zeros((1, 4, 4, 4))
    dets = decode_nms_free(_heads([cls], [raw]), 0.25)
    assert len(dets) == 1
    d = dets[0]
    assert d.score == pytest.approx(1 / (1 + np.exp(-10.0)))
    # anchor centre (1.5*8, 2.5*8), each side 8*softplus(0) = 8 ln 2
    off = 8 * np.log(2.0)
    np.testing.assert_allclose(d.box, [12 - off, 20 - off, 12 + off, 20 + off])


def test_nms_free_keeps_overlaps_and_caps_count():
    cls = np.full((1, 2, 4, 4), 5.0)
    dets = decode_nms_free(_heads([cls], [np.zeros((1, 4, 4, 4))]), 0.25, max_dets=7)
    assert len(dets) == 7
    full = decode_nms_free(_heads([cls], [np.zeros((1, 4, 4, 4))]), 0.25)
    assert len(full) == 32
    big = np.full((1, 4, 4, 4), 2.0)  # ~34 px boxes on an 8 px grid overlap heavily
    assert len(decode_nms_free(_heads([cls], [big]), 0.25)) == 32
    assert len(decode_with_nms(_heads([cls], [big]), 0.25, 0.45)) < 32


def test_csv_roundtrip(tmp_path):
    dets = random_dets(np.random.default_rng(1), 20, n_cls=3)
    path = tmp_path / "d.csv"
    write_detections_csv(path, dets)
    back = read_detections_csv(path)
    assert [(d.box, d.score, d.class_id) for d in back] == [(d.box, d.score, d.class_id) for d in dets]
    write_detections_csv(path, [])
    assert read_detections_csv(path) == []


def test_yolo_export(tmp_path):
    path = tmp_path / "d.txt"
    write_detections_yolo(path, [Detection((10, 20, 30, 60), 0.5, 2)], (100, 200))
    cls, cx, cy, w, h, s = path.read_text().split()
    assert cls == "2"
    assert (float(cx), float(cy), float(w), float(h), float(s)) == pytest.approx((0.1, 0.4, 0.1, 0.4, 0.5))
