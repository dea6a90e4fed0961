import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdoor.core import (AnnotatedImage, CenterBox, CornerBox, center_to_corner, corner_to_center,
                           iou, iou_matrix, overlaps)

from .helpers import random_box
from .oracles import raster_iou


def test_center_to_corner_examples():
    assert center_to_corner(CenterBox(0, 5, 5, 10, 10)) == CornerBox(0, 0, 0, 10, 10)
    assert center_to_corner(CenterBox(2, 1.5, 1, 1, 2)) == CornerBox(2, 1, 0, 2, 2)


def test_center_corner_round_trip(rng):
    for _ in range(1000):
        b = CenterBox(int(rng.integers(5)), *rng.uniform(-50, 50, 2), *rng.uniform(0.01, 40, 2))
        r = corner_to_center(center_to_corner(b))
        assert r.class_id == b.class_id
        assert np.allclose([r.cx, r.cy, r.w, r.h], [b.cx, b.cy, b.w, b.h], atol=1e-9, rtol=0)


def test_box_invariants():
    with pytest.raises(ValueError):
        CenterBox(0, 0, 0, 0, 1)
    with pytest.raises(ValueError):
        CenterBox(-1, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        CornerBox(0, 2, 0, 1, 1)


def test_iou_examples():
    a = CornerBox(0, 0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(CornerBox(0, 0, 0, 1, 1), CornerBox(0, 5, 5, 6, 6)) == 0.0
    assert iou(a, CornerBox(1, 1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)


def test_overlaps_examples():
    a = CornerBox(0, 0, 0, 1, 1)
    assert overlaps(a, a)
    assert not overlaps(a, CornerBox(0, 1, 0, 2, 1))
    assert overlaps(CornerBox(0, 0, 0, 10, 10), CornerBox(0, 8, 8, 18, 18))


def test_overlaps_iou_threshold():
    a, b = CornerBox(0, 0, 0, 10, 10), CornerBox(0, 8, 8, 18, 18)
    assert overlaps(a, b, iou_threshold=0.0)
    assert not overlaps(a, b, iou_threshold=0.1)


def test_iou_symmetric_and_consistent(rng):
    for _ in range(10_000):
        a, b = random_box(rng), random_box(rng)
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert (v == 0.0) == (not overlaps(a, b))


def test_iou_one_only_for_equal_geometry(rng):
    for _ in range(200):
        a = random_box(rng)
        assert iou(a, a.with_class(2)) == 1.0
        b = CornerBox(0, a.x_min, a.y_min, a.x_max + 0.5, a.y_max)
        assert iou(a, b) < 1.0


def test_iou_matches_raster_oracle(rng):
    for _ in range(2000):
        a, b = random_box(rng, integer=True), random_box(rng, integer=True)
        area = min(a.area, b.area)
        assert abs(iou(a, b) - raster_iou(a.coords(), b.coords())) <= 2 / area


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(1, 20), st.integers(1, 20)),
                min_size=1, max_size=6))
def test_iou_matrix_matches_pairwise(spec):
    boxes = [CornerBox(0, x, y, x + w, y + h) for x, y, w, h in spec]
    m = iou_matrix(boxes, boxes)
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


def test_annotated_image_clamps_and_validates():
    img = np.zeros((10, 20, 3), np.float32)
    s = AnnotatedImage(img, [CornerBox(0, -5, -5, 5, 5), CornerBox(1, 15, 2, 30, 12), CornerBox(2, 40, 0, 50, 5)])
    assert [b.coords() for b in s.boxes] == [(0, 0, 5, 5), (15, 2, 20, 10)]
    with pytest.raises(ValueError):
        AnnotatedImage(np.full((4, 4, 3), 1.5, np.float32))
    with pytest.raises(ValueError):
        AnnotatedImage(np.zeros((4, 4), np.float32))
