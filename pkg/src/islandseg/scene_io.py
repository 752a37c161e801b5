"""Scene and label-mask ingestion: manifests, raster readers, resizing, normalization."""

from __future__ import annotations

import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

BAND_NAMES = ("red", "green", "blue", "nir", "swir1", "swir2")
NUM_BANDS = len(BAND_NAMES)
WATER, LAND = 0, 1
SPLITS = ("train", "val", "test")
MIN_SIZE = 16
STD_FLOOR = 1e-6

MSR_MAGIC = b"MSR1"
_MSR_HEADER = struct.Struct("<4sIII")


class DataError(ValueError):
    """Raised for malformed manifests, rasters or masks."""


@dataclass
class MultispectralScene:
    scene_id: str
    bands: np.ndarray  # (6, H, W) float32, order = BAND_NAMES
    resolution_m: float = 10.0
    acquisition_date: str | None = None
    geo: dict | None = None

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float32)
        if self.bands.ndim != 3 or self.bands.shape[0] != NUM_BANDS:
            got = self.bands.shape[0] if self.bands.ndim == 3 else self.bands.ndim
            raise DataError(f"expected {NUM_BANDS} bands, got {got}")
        h, w = self.bands.shape[1:]
        if h < MIN_SIZE or w < MIN_SIZE:
            raise DataError(f"scene {self.scene_id!r} is {h}x{w}, minimum is {MIN_SIZE}x{MIN_SIZE}")
        check_finite(self.bands, self.scene_id)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands.shape[1], self.bands.shape[2]


@dataclass
class LabelMask:
    scene_id: str
    classes: np.ndarray  # (H, W) uint8 in {0 water, 1 land}

    def __post_init__(self):
        classes = np.asarray(self.classes)
        if classes.ndim != 2:
            raise DataError(f"mask {self.scene_id!r} must be 2-D, got shape {classes.shape}")
        bad = ~np.isin(classes, (WATER, LAND))
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DataError(f"mask {self.scene_id!r} has non-binary value {classes[r, c]!r} at ({r}, {c})")
        self.classes = classes.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape


@dataclass(frozen=True)
class ManifestEntry:
    scene_id: str
    scene_path: Path
    mask_path: Path
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    path: Path | None = None

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def ids(self, tag: str) -> list[str]:
        return [e.scene_id for e in self.split(tag)]

    def counts(self) -> dict[str, int]:
        c = Counter(e.split for e in self.entries)
        return {s: c.get(s, 0) for s in SPLITS}

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.scene_id: e for e in self.entries}

    def require_splits(self, tags=SPLITS) -> None:
        counts = self.counts()
        missing = [t for t in tags if counts[t] == 0]
        if missing:
            raise DataError(f"manifest has no entries for split(s): {', '.join(missing)}")


@dataclass
class NormalizationStats:
    per_band_mean: list[float]
    per_band_std: list[float]

    def __post_init__(self):
        if len(self.per_band_mean) != NUM_BANDS or len(self.per_band_std) != NUM_BANDS:
            raise DataError("normalization stats need one mean and one std per band")
        self.per_band_std = [max(float(s), STD_FLOOR) for s in self.per_band_std]
        self.per_band_mean = [float(m) for m in self.per_band_mean]

    def apply(self, bands: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.per_band_mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.per_band_std, dtype=np.float32)[:, None, None]
        return ((bands - mean) / std).astype(np.float32)

    def to_dict(self) -> dict:
        return {"per_band_mean": self.per_band_mean, "per_band_std": self.per_band_std}

    @classmethod
    def from_dict(cls, d: dict) -> NormalizationStats:
        return cls(list(d["per_band_mean"]), list(d["per_band_std"]))


def check_finite(bands: np.ndarray, scene_id: str = "?") -> None:
    bad = ~np.isfinite(bands)
    if bad.any():
        b, r, c = np.argwhere(bad)[0]
        raise DataError(
            f"scene {scene_id!r}: non-finite value in band {b} ({BAND_NAMES[b]}) at pixel ({r}, {c}); "
            f"{int(bad.sum())} bad value(s) total"
        )


# ---------------------------------------------------------------------------
# manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    if isinstance(raw, dict) and "entries" in raw:
        raw = raw["entries"]
    if not isinstance(raw, list):
        raise DataError(f"manifest {path} must be a list of entries")
    if not raw:
        raise DataError("empty manifest")

    root = path.parent
    seen: set[str] = set()
    entries = []
    for i, item in enumerate(raw):
        try:
            sid = str(item["scene_id"])
            scene_path, mask_path = item["scene_path"], item["mask_path"]
            split = item.get("split", item.get("split_tag"))
        except (KeyError, TypeError) as exc:
            raise DataError(f"manifest entry {i} is missing field {exc}") from exc
        if sid in seen:
            raise DataError(f"duplicate scene_id {sid!r} in manifest")
        seen.add(sid)
        if split not in SPLITS:
            raise DataError(f"entry {sid!r} has unknown split {split!r} (expected one of {SPLITS})")
        sp, mp = _resolve(root, scene_path), _resolve(root, mask_path)
        for p in (sp, mp):
            if not p.is_file():
                raise DataError(f"entry {sid!r} points to missing file {p}")
        entries.append(ManifestEntry(sid, sp, mp, split))

    manifest = DatasetManifest(tuple(entries), path)
    log.info("loaded manifest %s: %s", path, manifest.counts())
    return manifest


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> Path:
    """Write entries as JSON with paths relative to the manifest's directory where possible."""
    path = Path(path)
    root = path.parent.resolve()
    out = []
    for e in entries:
        out.append({
            "scene_id": e.scene_id,
            "scene_path": _relative(e.scene_path, root),
            "mask_path": _relative(e.mask_path, root),
            "split": e.split,
        })
    path.write_text(json.dumps(out, indent=1))
    return path


def _resolve(root: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else root / p


def _relative(p: Path, root: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(root))
    except ValueError:
        return str(Path(p).resolve())


# ---------------------------------------------------------------------------
# raster formats


def write_msr(path: str | Path, array: np.ndarray) -> None:
    """Write the portable raster format: magic, u32 (C, H, W), float32 band-major data."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        a = a[None]
    c, h, w = a.shape
    with open(path, "wb") as f:
        f.write(_MSR_HEADER.pack(MSR_MAGIC, c, h, w))
        f.write(np.ascontiguousarray(a).tobytes())


def read_msr(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _MSR_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, c, h, w = _MSR_HEADER.unpack_from(data)
    if magic != MSR_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {MSR_MAGIC!r}")
    n = c * h * w
    if len(data) - _MSR_HEADER.size != 4 * n:
        raise DataError(f"{path}: payload has {len(data) - _MSR_HEADER.size} bytes, header implies {4 * n}")
    return np.frombuffer(data, dtype="<f4", offset=_MSR_HEADER.size).reshape(c, h, w).astype(np.float32)


def _read_tiff(path: Path) -> tuple[np.ndarray, dict | None]:
    import tifffile

    with tifffile.TiffFile(path) as tif:
        series = tif.series[0]
        arr = series.asarray()
        axes = series.axes
        geo = _geo_tags(tif.pages[0])
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3:
        band_axis = next((i for i, a in enumerate(axes) if a not in "YX"), 0)
        arr = np.moveaxis(arr, band_axis, 0)
    else:
        raise DataError(f"{path}: unsupported TIFF layout {axes} {arr.shape}")
    return arr.astype(np.float32), geo


def _geo_tags(page) -> dict | None:
    geo = {}
    for code, key in ((33550, "pixel_scale"), (33922, "tiepoint"), (34264, "transformation")):
        tag = page.tags.get(code)
        if tag is not None:
            geo[key] = [float(v) for v in tag.value]
    epsg = None
    keys = page.tags.get(34735)
    if keys is not None:
        vals = list(keys.value)
        for i in range(4, len(vals) - 3, 4):
            if vals[i] in (3072, 2048):  # ProjectedCSTypeGeoKey, GeographicTypeGeoKey
                epsg = int(vals[i + 3])
    if epsg is not None:
        geo["epsg"] = epsg
    return geo or None


def read_raster(path: str | Path) -> tuple[np.ndarray, dict | None]:
    """Read a (C, H, W) float32 raster from the portable format or GeoTIFF."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"raster not found: {path}")
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MSR_MAGIC:
        return read_msr(path), None
    if head[:2] in (b"II", b"MM"):
        try:
            return _read_tiff(path)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"{path}: unreadable TIFF ({exc})") from exc
    raise DataError(f"{path}: unrecognized raster format")


def load_scene(path: str | Path, scene_id: str | None = None, *, resolution_m: float = 10.0,
               band_indices: list[int] | None = None) -> MultispectralScene:
    """Load a 6-band scene.

    ``band_indices`` selects/reorders file bands into red, green, blue, nir,
    swir1, swir2 order for sources that store more bands or a different order.
    """
    path = Path(path)
    bands, geo = read_raster(path)
    if band_indices is not None:
        bands = bands[list(band_indices)]
    if bands.shape[0] != NUM_BANDS:
        raise DataError(f"expected {NUM_BANDS} bands, got {bands.shape[0]} in {path}")
    return MultispectralScene(scene_id or path.stem, bands, resolution_m=resolution_m, geo=geo)


def load_mask(path: str | Path, scene_id: str | None = None) -> LabelMask:
    path = Path(path)
    arr, _ = read_raster(path)
    if arr.shape[0] != 1:
        raise DataError(f"{path}: mask must have a single band, got {arr.shape[0]}")
    return LabelMask(scene_id or path.stem, arr[0])


def load_pair(entry: ManifestEntry, **kw) -> tuple[MultispectralScene, LabelMask]:
    scene = load_scene(entry.scene_path, entry.scene_id, **kw)
    mask = load_mask(entry.mask_path, entry.scene_id)
    if mask.shape != scene.shape:
        raise DataError(f"{entry.scene_id!r}: mask shape {mask.shape} != scene shape {scene.shape}")
    return scene, mask


# ---------------------------------------------------------------------------
# preprocessing


def resize_pair(scene: MultispectralScene, mask: LabelMask,
                target: tuple[int, int]) -> tuple[MultispectralScene, LabelMask]:
    """Bilinear resize of the scene, nearest-neighbour resize of the mask."""
    th, tw = (int(t) for t in target)
    if th < MIN_SIZE or tw < MIN_SIZE:
        raise DataError(f"resize target {th}x{tw} below minimum {MIN_SIZE}")
    if mask.shape != scene.shape:
        raise DataError(f"mask shape {mask.shape} != scene shape {scene.shape}")
    if (th, tw) == scene.shape:
        return (MultispectralScene(scene.scene_id, scene.bands.copy(), scene.resolution_m,
                                   scene.acquisition_date, scene.geo),
                LabelMask(mask.scene_id, mask.classes.copy()))

    x = torch.from_numpy(scene.bands)[None]
    bands = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)[0].numpy()
    m = torch.from_numpy(mask.classes.astype(np.float32))[None, None]
    classes = F.interpolate(m, size=(th, tw), mode="nearest-exact")[0, 0].numpy().astype(np.uint8)
    h, _ = scene.shape
    res = scene.resolution_m * h / th
    return (MultispectralScene(scene.scene_id, bands, res, scene.acquisition_date, scene.geo),
            LabelMask(mask.scene_id, classes))


def compute_normalization(train_scenes) -> NormalizationStats:
    """Per-band population mean/std pooled over every pixel of the training scenes."""
    scenes = list(train_scenes)
    if not scenes:
        raise DataError("cannot compute normalization from zero training scenes")
    total = np.zeros(NUM_BANDS)
    total_sq = np.zeros(NUM_BANDS)
    count = 0
    for s in scenes:
        b = (s.bands if isinstance(s, MultispectralScene) else np.asarray(s)).astype(np.float64)
        total += b.sum(axis=(1, 2))
        count += b.shape[1] * b.shape[2]
    mean = total / count
    for s in scenes:
        b = (s.bands if isinstance(s, MultispectralScene) else np.asarray(s)).astype(np.float64)
        total_sq += ((b - mean[:, None, None]) ** 2).sum(axis=(1, 2))
    std = np.sqrt(total_sq / count)
    return NormalizationStats(mean.tolist(), std.tolist())


def sample_training_subset(train_ids, k: int, seed: int) -> list[str]:
    """Take the first ``k`` ids of one seeded shuffle, so subsets nest as ``k`` grows."""
    ids = sorted(train_ids)
    if not 1 <= k <= len(ids):
        raise DataError(f"subset size {k} out of range 1..{len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order[:k]]


@dataclass
class SceneStack:
    """Preprocessed scenes ready for batching: normalized images plus masks."""

    ids: list[str]
    images: np.ndarray  # (N, 6, H, W) float32, normalized
    masks: np.ndarray  # (N, H, W) uint8
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def subset(self, ids) -> SceneStack:
        index = {sid: i for i, sid in enumerate(self.ids)}
        sel = [index[s] for s in ids]
        return SceneStack([self.ids[i] for i in sel], self.images[sel], self.masks[sel], dict(self.meta))


def load_split(manifest: DatasetManifest, tag: str, image_size: int) -> tuple[list, list]:
    scenes, masks = [], []
    for entry in manifest.split(tag):
        s, m = load_pair(entry)
        s, m = resize_pair(s, m, (image_size, image_size))
        scenes.append(s)
        masks.append(m)
    return scenes, masks


def stack(scenes, masks, stats: NormalizationStats) -> SceneStack:
    if not scenes:
        return SceneStack([], np.zeros((0, NUM_BANDS, 1, 1), np.float32), np.zeros((0, 1, 1), np.uint8))
    images = np.stack([stats.apply(s.bands) for s in scenes])
    labels = np.stack([m.classes for m in masks])
    return SceneStack([s.scene_id for s in scenes], images, labels)


def prepare_dataset(manifest: DatasetManifest, image_size: int,
                    stats: NormalizationStats | None = None) -> tuple[dict[str, SceneStack], NormalizationStats]:
    """Load, resize and normalize every split; stats come from the train split unless given."""
    loaded = {tag: load_split(manifest, tag, image_size) for tag in SPLITS}
    if stats is None:
        stats = compute_normalization(loaded["train"][0])
    return {tag: stack(*loaded[tag], stats) for tag in SPLITS}, stats
