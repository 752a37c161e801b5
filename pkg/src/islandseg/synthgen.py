"""Synthetic 6-band island scenes with exact land/water masks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .scene_io import (NUM_BANDS, DataError, LabelMask, ManifestEntry, MultispectralScene,
                       load_manifest, write_manifest, write_msr)

log = logging.getLogger(__name__)

# red, green, blue, nir, swir1, swir2 surface reflectance
LAND_SIGNATURE = (0.30, 0.28, 0.24, 0.38, 0.32, 0.24)
WATER_SIGNATURE = (0.05, 0.08, 0.11, 0.03, 0.015, 0.01)
VISIBLE = slice(0, 3)
MAX_HARMONICS = 8
LAND_FRACTION_RANGE = (0.01, 0.70)


@dataclass
class AtollRing:
    radius: float  # fraction of image size
    intensity: float
    width: float = 0.04


@dataclass
class IslandParams:
    seed: int
    image_size: int = 64
    center: tuple[float, float] = (0.5, 0.5)
    base_radius: float = 0.25
    harmonic_amplitudes: list[float] = field(default_factory=list)
    land_signature: tuple[float, ...] = LAND_SIGNATURE
    water_signature: tuple[float, ...] = WATER_SIGNATURE
    noise_std: float = 0.02
    atoll_ring: AtollRing | None = None

    def validate(self) -> None:
        if not 0.05 < self.base_radius < 0.45:
            raise DataError(f"base_radius {self.base_radius} outside (0.05, 0.45)")
        if len(self.harmonic_amplitudes) > MAX_HARMONICS:
            raise DataError(f"at most {MAX_HARMONICS} harmonics, got {len(self.harmonic_amplitudes)}")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        for sig in (self.land_signature, self.water_signature):
            if len(sig) != NUM_BANDS or not np.all(np.isfinite(sig)):
                raise DataError(f"band signature must be {NUM_BANDS} finite numbers, got {sig}")


def boundary_radius(params: IslandParams, theta: np.ndarray) -> np.ndarray:
    """r(theta) = base_radius * (1 + sum_k a_k cos(k theta + phi_k)), phases drawn from the seed."""
    rng = np.random.default_rng([params.seed, 0x15])
    phases = rng.uniform(0, 2 * np.pi, size=MAX_HARMONICS)
    r = np.ones_like(theta)
    for k, a in enumerate(params.harmonic_amplitudes, start=1):
        r = r + a * np.cos(k * theta + phases[k - 1])
    return params.base_radius * r


def generate_scene(params: IslandParams, scene_id: str | None = None) -> tuple[MultispectralScene, LabelMask]:
    params.validate()
    n = params.image_size
    if n < 16:
        raise DataError(f"image_size {n} below minimum 16")

    # pixel centres in image-size units
    coords = (np.arange(n) + 0.5) / n
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    dr, dc = rows - params.center[0], cols - params.center[1]
    rho = np.hypot(dr, dc)
    theta = np.arctan2(-dr, dc)

    dense = np.linspace(0, 2 * np.pi, 2048, endpoint=False)
    if boundary_radius(params, dense).min() <= 0:
        raise DataError("harmonic amplitudes drive the boundary radius nonpositive")
    land = rho <= boundary_radius(params, theta)

    frac = land.mean()
    lo, hi = LAND_FRACTION_RANGE
    if not lo < frac < hi:
        raise DataError(f"degenerate island: land fraction {frac:.3f} outside ({lo}, {hi})")

    land_sig = np.asarray(params.land_signature, dtype=np.float64)[:, None, None]
    water_sig = np.asarray(params.water_signature, dtype=np.float64)[:, None, None]
    bands = np.where(land[None], land_sig, water_sig)

    if params.atoll_ring is not None:
        ring = params.atoll_ring
        annulus = np.abs(rho - ring.radius) <= ring.width / 2
        bands[VISIBLE] += ring.intensity * annulus

    rng = np.random.default_rng([params.seed, 0x2A])
    if params.noise_std > 0:
        bands = bands + rng.normal(0.0, params.noise_std, size=bands.shape)

    sid = scene_id or f"synth_{params.seed}"
    return (MultispectralScene(sid, bands.astype(np.float32), resolution_m=10.0),
            LabelMask(sid, land.astype(np.uint8)))


def random_params(seed: int, image_size: int, noise_std: float = 0.02) -> IslandParams:
    """Draw island geometry and signature jitter for one scene of a generated dataset."""
    rng = np.random.default_rng([seed, 0x7])
    n_harm = int(rng.integers(2, 6))
    amps = rng.uniform(-1, 1, size=n_harm) / np.arange(2, n_harm + 2) * rng.uniform(0.1, 0.35)
    jitter = rng.normal(1.0, 0.08, size=NUM_BANDS)
    atoll = None
    base = float(rng.uniform(0.12, 0.3))
    if rng.random() < 0.5:
        atoll = AtollRing(radius=float(base * rng.uniform(1.25, 1.6)), intensity=float(rng.uniform(0.04, 0.12)))
    return IslandParams(
        seed=seed,
        image_size=image_size,
        center=tuple(float(v) for v in rng.uniform(0.38, 0.62, size=2)),
        base_radius=base,
        harmonic_amplitudes=[float(a) for a in amps],
        land_signature=tuple(float(v) for v in np.asarray(LAND_SIGNATURE) * jitter),
        water_signature=tuple(float(v) for v in np.asarray(WATER_SIGNATURE) * rng.normal(1.0, 0.08, NUM_BANDS)),
        noise_std=noise_std,
        atoll_ring=atoll,
    )


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes: 10% each for val/test, at least one apiece."""
    if n < 3:
        raise DataError(f"need at least 3 scenes, got {n}")
    test = max(1, round(0.1 * n))
    val = max(1, round(0.1 * n))
    return n - val - test, val, test


def generate_scenes(n: int, size: int, seed: int, noise_std: float = 0.02):
    """Yield ``n`` (scene, mask) pairs with per-scene seeds derived from ``seed``."""
    children = np.random.SeedSequence(seed).generate_state(n)
    for i, child in enumerate(children):
        scene_seed = int(child)
        params = random_params(scene_seed, size, noise_std)
        for attempt in range(10):
            try:
                yield generate_scene(params, f"island_{i:04d}")
                break
            except DataError:
                params = replace(params, base_radius=params.base_radius * 0.9,
                                 harmonic_amplitudes=[a * 0.5 for a in params.harmonic_amplitudes])
        else:  # pragma: no cover
            raise DataError(f"could not draw a valid island for scene {i}")


def generate_dataset(n_scenes: int, size: int, seed: int, out_dir: str | Path,
                     noise_std: float = 0.02):
    """Write ``n_scenes`` scenes and masks in the portable format plus ``manifest.json``."""
    n_train, n_val, n_test = split_counts(n_scenes)
    out_dir = Path(out_dir)
    try:
        (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from exc

    order = np.random.default_rng(seed).permutation(n_scenes)
    tags = np.empty(n_scenes, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_val]] = "val"
    tags[order[n_train + n_val:]] = "test"

    entries = []
    for i, (scene, mask) in enumerate(generate_scenes(n_scenes, size, seed, noise_std)):
        sp = out_dir / "scenes" / f"{scene.scene_id}.msr"
        mp = out_dir / "masks" / f"{scene.scene_id}.msr"
        write_msr(sp, scene.bands)
        write_msr(mp, mask.classes.astype(np.float32))
        entries.append(ManifestEntry(scene.scene_id, sp, mp, str(tags[i])))

    path = write_manifest(entries, out_dir / "manifest.json")
    log.info("wrote %d synthetic scenes (%d/%d/%d) to %s", n_scenes, n_train, n_val, n_test, out_dir)
    return load_manifest(path)
