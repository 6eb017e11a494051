"""On-disk tile bundles, SAR normalization, patch extraction and synthetic scenes.

A bundle directory holds ``meta.json`` plus one little-endian float32,
row-major plane file per raster channel (``sar_0.f32``, ``prior_0.f32``, ...).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SAR_DB_RANGE = (-25.0, 0.0)
_PLANE_DTYPE = np.dtype("<f4")


class BundleError(ValueError):
    """Raised when a bundle violates the format or its invariants."""


@dataclass(frozen=True)
class TileBundle:
    sar: np.ndarray
    optical: np.ndarray
    mask: np.ndarray
    prior: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.sar.shape[1]), int(self.sar.shape[2])

    @property
    def has_prior(self) -> bool:
        return self.prior is not None

    def header(self) -> dict:
        h, w = self.shape
        return {
            "id": str(self.meta.get("id", "tile")),
            "H": h,
            "W": w,
            "C_p": 0 if self.prior is None else int(self.prior.shape[0]),
            "has_prior": self.prior is not None,
            "source": str(self.meta.get("source", "unknown")),
            "nodata": bool(self.meta.get("nodata", False)),
            "version": FORMAT_VERSION,
        }


def validate_bundle(bundle: TileBundle) -> None:
    """Check every bundle invariant; raise BundleError on the first violation."""
    rasters = {"sar": bundle.sar, "optical": bundle.optical, "mask": bundle.mask}
    if bundle.prior is not None:
        rasters["prior"] = bundle.prior
    for name, arr in rasters.items():
        if not isinstance(arr, np.ndarray) or arr.ndim != 3:
            raise BundleError(f"{name} must be a 3-D array [C, H, W]")
    if bundle.sar.shape[0] != 2:
        raise BundleError("sar must have 2 channels (VV, VH)")
    if bundle.optical.shape[0] != 3:
        raise BundleError("optical must have 3 channels")
    if bundle.mask.shape[0] != 1:
        raise BundleError("mask must have 1 channel")
    if bundle.prior is not None and bundle.prior.shape[0] not in (3, 4):
        raise BundleError("prior must have 3 (RGB) or 4 (RGB+NDVI) channels")
    hw = bundle.sar.shape[1:]
    for name, arr in rasters.items():
        if arr.shape[1:] != hw:
            raise BundleError(f"{name} spatial shape {arr.shape[1:]} != {hw}")
        if not np.all(np.isfinite(arr)):
            raise BundleError(f"{name} contains non-finite values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise BundleError(f"{name} values outside [0, 1]")
    if not np.all((bundle.mask == 0.0) | (bundle.mask == 1.0)):
        raise BundleError("mask not binary")


def _planes(bundle: TileBundle):
    groups = [("sar", bundle.sar), ("prior", bundle.prior), ("optical", bundle.optical), ("mask", bundle.mask)]
    for prefix, arr in groups:
        if arr is None:
            continue
        for c in range(arr.shape[0]):
            yield f"{prefix}_{c}.f32", arr[c]


def write_bundle(bundle: TileBundle, path: str | os.PathLike) -> dict[str, int]:
    """Write ``bundle`` to directory ``path``; returns ``{filename: byte length}``."""
    validate_bundle(bundle)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, plane in _planes(bundle):
        data = np.ascontiguousarray(plane, dtype=_PLANE_DTYPE).tobytes(order="C")
        (out / name).write_bytes(data)
        manifest[name] = len(data)
    meta_text = json.dumps(bundle.header(), indent=2, sort_keys=True)
    (out / "meta.json").write_text(meta_text)
    manifest["meta.json"] = len(meta_text.encode())
    return manifest


def _read_group(root: Path, prefix: str, channels: int, h: int, w: int) -> np.ndarray:
    planes = []
    for c in range(channels):
        f = root / f"{prefix}_{c}.f32"
        if not f.exists():
            raise BundleError(f"missing plane file {f.name}")
        raw = f.read_bytes()
        if len(raw) != 4 * h * w:
            raise BundleError(f"{f.name}: byte length {len(raw)} != 4*H*W = {4 * h * w}")
        planes.append(np.frombuffer(raw, dtype=_PLANE_DTYPE).reshape(h, w))
    arr = np.stack(planes).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise BundleError(f"{prefix} contains non-finite values")
    return arr


def read_bundle(path: str | os.PathLike) -> TileBundle:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise BundleError(f"missing meta.json in {root}")
    meta = json.loads(meta_path.read_text())
    h, w = int(meta["H"]), int(meta["W"])
    prior = None
    n_prior = len(list(root.glob("prior_*.f32")))
    if n_prior:
        prior = _read_group(root, "prior", n_prior, h, w)
    bundle = TileBundle(
        sar=_read_group(root, "sar", 2, h, w),
        optical=_read_group(root, "optical", 3, h, w),
        mask=_read_group(root, "mask", 1, h, w),
        prior=prior,
        meta=meta,
    )
    validate_bundle(bundle)
    return bundle


def read_inputs(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray | None, dict]:
    """Read only the model inputs (SAR and optional prior) from a bundle-style directory.

    Targets may be absent, which is the SAR-only inference case.
    """
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise BundleError(f"missing meta.json in {root}")
    meta = json.loads(meta_path.read_text())
    h, w = int(meta["H"]), int(meta["W"])
    sar = _read_group(root, "sar", 2, h, w)
    n_prior = len(list(root.glob("prior_*.f32")))
    prior = _read_group(root, "prior", n_prior, h, w) if n_prior else None
    for name, arr in (("sar", sar), ("prior", prior)):
        if arr is not None and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise BundleError(f"{name} values outside [0, 1]")
    if prior is not None and prior.shape[0] not in (3, 4):
        raise BundleError("prior must have 3 (RGB) or 4 (RGB+NDVI) channels")
    return sar, prior, meta


def list_bundles(root: str | os.PathLike) -> list[Path]:
    """Bundle directories directly under ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    if (root / "meta.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "meta.json").exists())


def normalize_sar(raw: np.ndarray, db_range: tuple[float, float] = SAR_DB_RANGE) -> np.ndarray:
    """Map dB backscatter affinely from ``db_range`` to [0, 1], clipping outside values."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.isnan(raw).any():
        raise ValueError("SAR input contains NaN")
    lo, hi = db_range
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)


def _offsets(size: int, patch: int, stride: int) -> list[int]:
    offs = list(range(0, size - patch + 1, stride))
    if offs[-1] + patch < size:
        offs.append(size - patch)
    return offs


def patch_offsets(h: int, w: int, patch: int, stride: int) -> list[tuple[int, int]]:
    """Row-major window origins; the last window in each axis is shifted to end at the border."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than raster {h}x{w}")
    return [(y, x) for y in _offsets(h, patch, stride) for x in _offsets(w, patch, stride)]


def patchify(bundle: TileBundle, patch: int, stride: int) -> list[TileBundle]:
    h, w = bundle.shape
    out = []
    for y, x in patch_offsets(h, w, patch, stride):
        sl = (slice(None), slice(y, y + patch), slice(x, x + patch))
        meta = dict(bundle.meta)
        meta["id"] = f"{bundle.meta.get('id', 'tile')}_y{y}_x{x}"
        out.append(
            TileBundle(
                sar=bundle.sar[sl].copy(),
                optical=bundle.optical[sl].copy(),
                mask=bundle.mask[sl].copy(),
                prior=None if bundle.prior is None else bundle.prior[sl].copy(),
                meta=meta,
            )
        )
    return out


def drop_prior(bundle: TileBundle) -> TileBundle:
    return replace(bundle, prior=None)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: tuple[int, int] = (64, 64)
    water_fraction: float = 0.3
    speckle_strength: float = 0.5
    cloud_fraction: float = 0.1
    terrain_octaves: int = 4
    with_ndvi: bool = True

    def validate(self) -> None:
        h, w = self.size
        if h < 1 or w < 1:
            raise ValueError("size must be positive")
        if not 0.0 <= self.water_fraction <= 1.0:
            raise ValueError("water_fraction must lie in [0, 1]")
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise ValueError("cloud_fraction must lie in [0, 1]")
        if self.speckle_strength < 0:
            raise ValueError("speckle_strength must be >= 0")
        if self.terrain_octaves < 1:
            raise ValueError("terrain_octaves must be >= 1")


def value_noise(rng: np.random.Generator, h: int, w: int, octaves: int, base_cells: int = 2) -> np.ndarray:
    """Multi-octave value noise in [0, 1] with smoothstep-interpolated lattices."""
    total = np.zeros((h, w))
    amp, norm = 1.0, 0.0
    ys = np.linspace(0.0, 1.0, h, endpoint=False)
    xs = np.linspace(0.0, 1.0, w, endpoint=False)
    for k in range(octaves):
        cells = base_cells * 2**k
        lattice = rng.random((cells + 1, cells + 1))
        gy, gx = ys * cells, xs * cells
        iy, ix = gy.astype(int), gx.astype(int)
        ty, tx = gy - iy, gx - ix
        ty = ty * ty * (3 - 2 * ty)
        tx = tx * tx * (3 - 2 * tx)
        a = lattice[iy][:, ix]
        b = lattice[iy][:, ix + 1]
        c = lattice[iy + 1][:, ix]
        d = lattice[iy + 1][:, ix + 1]
        top = a + (b - a) * tx[None, :]
        bot = c + (d - c) * tx[None, :]
        total += amp * (top + (bot - top) * ty[:, None])
        norm += amp
        amp *= 0.5
    total /= norm
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def _lowest_fraction(field_: np.ndarray, fraction: float) -> np.ndarray:
    n = int(round(fraction * field_.size))
    order = np.argsort(field_, axis=None, kind="stable")
    sel = np.zeros(field_.size, dtype=bool)
    sel[order[:n]] = True
    return sel.reshape(field_.shape)


def synth_scene(spec: SceneSpec) -> TileBundle:
    """Procedural co-registered SAR / optical / mask sample, deterministic in ``spec``."""
    spec.validate()
    h, w = spec.size
    rng = np.random.default_rng(spec.seed)
    terrain = value_noise(rng, h, w, spec.terrain_octaves)
    water = _lowest_fraction(terrain, spec.water_fraction)
    veg = value_noise(rng, h, w, 2, base_cells=3)

    # land colour ramps from green lowland to brown/grey highland
    low = np.array([0.22, 0.45, 0.18])
    high = np.array([0.62, 0.55, 0.42])
    t = terrain[..., None]
    land_rgb = low + (high - low) * t + 0.08 * (veg[..., None] - 0.5)
    water_rgb = np.array([0.04, 0.16, 0.18]) + 0.04 * terrain[..., None]
    optical = np.where(water[..., None], water_rgb, land_rgb)
    optical = np.clip(optical, 0.0, 1.0).transpose(2, 0, 1)

    ndvi = np.where(water, -0.3 + 0.1 * terrain, 0.2 + 0.6 * veg * (1.0 - 0.5 * terrain))
    clouds = _lowest_fraction(value_noise(rng, h, w, 3, base_cells=3), spec.cloud_fraction)
    prior_rgb = np.where(clouds[None], 1.0, optical)
    prior_ndvi = np.where(clouds, 0.0, ndvi)
    prior_planes = [prior_rgb]
    if spec.with_ndvi:
        prior_planes.append(((prior_ndvi + 1.0) / 2.0)[None])
    prior = np.clip(np.concatenate(prior_planes), 0.0, 1.0)

    # backscatter in dB: calm water is dark, land brightens with slope and height
    slope = np.hypot(*np.gradient(terrain)) * max(h, w)
    vv_db = np.where(water, -23.5 + 2.0 * terrain, -13.0 + 6.0 * terrain + 1.5 * np.tanh(slope))
    vh_db = vv_db - np.where(water, 1.0, 6.0)
    sar_db = np.stack([vv_db, vh_db])
    if spec.speckle_strength > 0:
        looks = 1.0 / spec.speckle_strength**2
        speckle = rng.gamma(shape=looks, scale=1.0 / looks, size=sar_db.shape)
        sar_db = sar_db + 10.0 * np.log10(np.maximum(speckle, 1e-12))
    sar = normalize_sar(sar_db)

    return TileBundle(
        sar=sar.astype(np.float32),
        optical=optical.astype(np.float32),
        mask=water[None].astype(np.float32),
        prior=prior.astype(np.float32),
        meta={"id": f"synth_{spec.seed}", "source": "synthetic"},
    )
