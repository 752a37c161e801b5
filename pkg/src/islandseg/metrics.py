"""Confusion counts and IoU/F1 under named aggregation schemes (land = positive)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

SCHEMES = ("micro-land", "macro-image-land", "macro-class")
DEFAULT_SCHEME = "macro-image-land"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"negative confusion count in {self}")

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def water(self) -> ConfusionCounts:
        """The same counts with water as the positive class."""
        return ConfusionCounts(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def confusion(pred, gt) -> ConfusionCounts:
    p = np.asarray(getattr(pred, "classes", pred)).astype(bool)
    g = np.asarray(getattr(gt, "classes", gt)).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


@dataclass
class MetricsReport:
    scheme: str
    iou: float
    f1: float
    per_image: list[tuple[str, float, float]] | None = field(default=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["per_image"] is not None:
            d["per_image"] = [list(x) for x in d["per_image"]]  # JSON-stable
        return d


def aggregate(per_image, scheme: str = DEFAULT_SCHEME, ids=None) -> MetricsReport:
    """Score a list of per-image ConfusionCounts.

    micro-land pools counts then scores land; macro-image-land averages
    per-image land scores; macro-class pools counts and averages the land
    and water scores.
    """
    counts = list(per_image)
    if not counts:
        raise ValueError("cannot aggregate zero images")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(counts))]
    per = [(sid, iou(c), f1(c)) for sid, c in zip(ids, counts)]

    if scheme == "micro-land":
        pooled = sum(counts, ConfusionCounts())
        score_iou, score_f1 = iou(pooled), f1(pooled)
    elif scheme == "macro-image-land":
        score_iou = float(np.mean([p[1] for p in per]))
        score_f1 = float(np.mean([p[2] for p in per]))
    else:
        pooled = sum(counts, ConfusionCounts())
        score_iou = (iou(pooled) + iou(pooled.water())) / 2
        score_f1 = (f1(pooled) + f1(pooled.water())) / 2
    return MetricsReport(scheme, float(score_iou), float(score_f1), per)


def all_schemes(per_image, ids=None) -> dict[str, MetricsReport]:
    counts = list(per_image)
    return {s: aggregate(counts, s, ids) for s in SCHEMES}
