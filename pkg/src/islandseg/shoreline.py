"""Vector shorelines from land/water masks via marching squares at the 0.5 level."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure


@dataclass
class ShorelinePolyline:
    vertices: np.ndarray  # (K, 2) float (row, col)
    closed: bool

    def to_dict(self) -> dict:
        return {"closed": self.closed, "vertices": self.vertices.tolist()}


def signed_area(vertices) -> float:
    """Shoelace area with x = col, y = -row: positive when counter-clockwise on a north-up display."""
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 1], -v[:, 0]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _dedupe(v: np.ndarray) -> np.ndarray:
    keep = np.ones(len(v), dtype=bool)
    keep[1:] = np.any(v[1:] != v[:-1], axis=1)
    return v[keep]


def extract_shorelines(mask, tolerance: float = 0.0) -> list[ShorelinePolyline]:
    """Land/water interface contours.

    Saddle cells resolve with water connected across the cell centre. Closed
    contours keep land on their left (counter-clockwise around an island,
    clockwise around a lake) and carry no repeated end vertex; contours cut
    by the image border come back open. ``tolerance`` > 0
    applies Douglas-Peucker vertex decimation.
    """
    land = np.asarray(getattr(mask, "classes", mask)).astype(np.float64)
    if land.min() == land.max():
        return []
    out = []
    for c in measure.find_contours(land, 0.5, fully_connected="low", positive_orientation="high"):
        closed = len(c) > 3 and np.array_equal(c[0], c[-1])
        if tolerance > 0:
            c = measure.approximate_polygon(c, tolerance)
        v = _dedupe(c)
        if closed:
            if len(v) > 1 and np.array_equal(v[0], v[-1]):
                v = v[:-1]
            if len(v) < 3:
                continue
        out.append(ShorelinePolyline(v, closed))
    return out


def polyline_length(poly: ShorelinePolyline, resolution_m: float = 1.0) -> float:
    v = np.asarray(poly.vertices, dtype=np.float64)
    if poly.closed:
        v = np.vstack([v, v[:1]])
    return float(np.hypot(*np.diff(v, axis=0).T).sum()) * resolution_m


def enclosed_area(polylines) -> float:
    """Net land area of the closed contours; lakes count negative."""
    return sum(signed_area(p.vertices) for p in polylines if p.closed)


def pixel_to_map(vertices, geo: dict | None):
    """Map (row, col) pixel-centre coordinates to (x, y) with GeoTIFF scale + tiepoint, if present."""
    if not geo or "pixel_scale" not in geo or "tiepoint" not in geo:
        return None
    sx, sy = geo["pixel_scale"][:2]
    i, j, _, x0, y0, _ = geo["tiepoint"][:6]
    v = np.asarray(vertices, dtype=np.float64)
    # tiepoint refers to the raster corner (i, j); pixel centres sit at +0.5
    xs = x0 + (v[:, 1] + 0.5 - i) * sx
    ys = y0 - (v[:, 0] + 0.5 - j) * sy
    return np.column_stack([xs, ys])


def write_shorelines(polylines, path, scene_id: str = "", resolution_m: float = 10.0,
                     geo: dict | None = None) -> Path:
    items = []
    for p in polylines:
        d = p.to_dict()
        d["length_m"] = polyline_length(p, resolution_m)
        mapped = pixel_to_map(p.vertices, geo)
        if mapped is not None:
            d["map_vertices"] = mapped.tolist()
        items.append(d)
    doc = {"scene_id": scene_id, "resolution_m": resolution_m, "geo": geo, "polylines": items}
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1))
    return path
