import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from islandseg.shoreline import (ShorelinePolyline, enclosed_area, extract_shorelines, pixel_to_map,
                                 polyline_length, signed_area, write_shorelines)

# marching squares at level 0.5 around a 2x2 block at rows/cols 2..3: edge midpoints, corners cut
TWO_BY_TWO = {(3.0, 3.5), (2.0, 3.5), (1.5, 3.0), (1.5, 2.0), (2.0, 1.5), (3.0, 1.5), (3.5, 2.0), (3.5, 3.0)}


def block_mask():
    m = np.zeros((6, 6), np.uint8)
    m[2:4, 2:4] = 1
    return m


def random_blob(rng, size):
    """Union of a few random discs, padded with water so every contour closes."""
    rr, cc = np.mgrid[:size, :size]
    m = np.zeros((size, size), bool)
    for _ in range(rng.integers(1, 5)):
        r, c = rng.uniform(0, size, 2)
        m |= np.hypot(rr - r, cc - c) < rng.uniform(1, size / 3)
    return np.pad(m.astype(np.uint8), 1)


def vertex_set(polys):
    return {tuple(map(float, v)) for p in polys for v in p.vertices}


class TestExtract:
    def test_two_by_two_exact(self):
        polys = extract_shorelines(block_mask())
        assert len(polys) == 1 and polys[0].closed
        v = polys[0].vertices
        assert len(v) == 8
        assert {tuple(x) for x in v.tolist()} == TWO_BY_TWO
        assert signed_area(v) == 3.5  # 4 pixels minus four 1/8 corners
        assert polyline_length(polys[0]) == pytest.approx(4 + 4 * math.sqrt(0.5))

    def test_island_counter_clockwise(self):
        assert enclosed_area(extract_shorelines(block_mask())) > 0

    def test_lake_negative(self):
        m = np.ones((7, 7), np.uint8)
        m[3, 3] = 0
        m = np.pad(m, 1)
        polys = extract_shorelines(m)
        areas = sorted(signed_area(p.vertices) for p in polys)
        assert areas[0] == -0.5 and areas[1] > 0

    @pytest.mark.parametrize("value", [0, 1])
    def test_uniform_mask_empty(self, value):
        assert extract_shorelines(np.full((8, 8), value)) == []

    def test_border_touching_is_open(self):
        m = np.zeros((8, 8), np.uint8)
        m[:, :3] = 1
        polys = extract_shorelines(m)
        assert len(polys) == 1 and not polys[0].closed

    def test_diagonal_saddle_separates_land(self):
        m = np.zeros((6, 6), np.uint8)
        m[2, 2] = m[3, 3] = 1
        polys = extract_shorelines(m)
        assert len(polys) == 2 and all(p.closed for p in polys)
        assert enclosed_area(polys) == 1.0

    def test_complement_same_vertices(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = random_blob(rng, 20)
            assert vertex_set(extract_shorelines(m)) == vertex_set(extract_shorelines(1 - m))

    def test_decimation_keeps_closure_and_reduces(self):
        m = random_blob(np.random.default_rng(2), 40)
        full = extract_shorelines(m)
        coarse = extract_shorelines(m, tolerance=1.0)
        assert sum(len(p.vertices) for p in coarse) < sum(len(p.vertices) for p in full)
        assert all(p.closed for p in coarse)


@settings(max_examples=30, deadline=None)
@given(dr=st.integers(0, 5), dc=st.integers(0, 5), seed=st.integers(0, 10**6))
def test_translation_equivariance(dr, dc, seed):
    blob = random_blob(np.random.default_rng(seed), 12)
    a = np.zeros((24, 24), np.uint8)
    b = np.zeros((24, 24), np.uint8)
    a[:14, :14] = blob
    b[dr:dr + 14, dc:dc + 14] = blob
    shifted = {(r + dr, c + dc) for r, c in vertex_set(extract_shorelines(a))}
    assert shifted == vertex_set(extract_shorelines(b))


def test_area_within_discretization_bound():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = random_blob(rng, int(rng.integers(8, 40)))
        polys = extract_shorelines(m)
        assert all(p.closed for p in polys)
        length = sum(polyline_length(p) for p in polys)
        assert abs(enclosed_area(polys) - m.sum()) <= 0.5 * length


class TestLength:
    def test_unit_square(self):
        sq = ShorelinePolyline(np.array([[0, 0], [0, 1], [1, 1], [1, 0]], float), closed=True)
        assert polyline_length(sq, 10.0) == 40.0

    def test_open_segment(self):
        seg = ShorelinePolyline(np.array([[0, 0], [0, 3]], float), closed=False)
        assert polyline_length(seg, 10.0) == 30.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        v = rng.uniform(0, 50, (30, 2))
        for closed in (False, True):
            total = 0.0
            pts = list(v) + ([v[0]] if closed else [])
            for a, b in zip(pts, pts[1:]):
                total += math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2)
            assert polyline_length(ShorelinePolyline(v, closed), 2.5) == pytest.approx(2.5 * total, rel=1e-12)


def test_pixel_to_map():
    geo = {"pixel_scale": [10.0, 10.0, 0.0], "tiepoint": [0, 0, 0, 500000.0, 4000000.0, 0]}
    xy = pixel_to_map(np.array([[0.0, 0.0], [2.0, 1.0]]), geo)
    np.testing.assert_allclose(xy, [[500005.0, 3999995.0], [500015.0, 3999975.0]])
    assert pixel_to_map(np.zeros((1, 2)), None) is None


def test_write_roundtrip(tmp_path):
    polys = extract_shorelines(block_mask())
    path = write_shorelines(polys, tmp_path / "s.json", "scene_a", 10.0)
    doc = json.loads(path.read_text())
    assert doc["scene_id"] == "scene_a"
    assert doc["polylines"][0]["closed"] is True
    assert doc["polylines"][0]["length_m"] == pytest.approx(10 * (4 + 4 * math.sqrt(0.5)))
