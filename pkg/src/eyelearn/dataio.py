"""Synthetic RNFLT-style data, artifact masks, augmentations and the on-disk container.

Arrays are indexed ``[row, col]`` so a ``W x H`` map has numpy shape ``(H, W)``.
Masks are ``uint8`` arrays with 1 for a valid pixel and 0 for an artifact.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

MAX_THICKNESS = 350.0
MAX_MASK_FRACTION = 0.6
MIN_SIZE = 16

MAGIC = b"RNFL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")


class DatasetFormatError(ValueError):
    """Raised when an RNFL container cannot be parsed."""


class TruncatedFileError(DatasetFormatError):
    pass


class ShapeMismatchError(DatasetFormatError):
    pass


class MaskGenerationError(RuntimeError):
    pass


@dataclass
class ThicknessMap:
    pixels: np.ndarray  # (H, W) float32, micrometres
    image_id: int
    eye: str = "right"
    flipped: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class ManifestEntry:
    image_id: int
    offset: int
    md_label: float
    glaucoma_label: int
    latent_health: float


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> np.ndarray:
        return np.array([e.image_id for e in self.entries], dtype=np.int64)

    @property
    def md(self) -> np.ndarray:
        return np.array([e.md_label for e in self.entries], dtype=np.float64)

    @property
    def glaucoma(self) -> np.ndarray:
        return np.array([e.glaucoma_label for e in self.entries], dtype=np.int64)

    @property
    def health(self) -> np.ndarray:
        return np.array([e.latent_health for e in self.entries], dtype=np.float64)

    def validate(self) -> None:
        ids = self.ids
        if len(set(ids.tolist())) != len(ids):
            raise ValueError("manifest image ids are not unique")
        for e in self.entries:
            if not math.isfinite(e.md_label):
                raise ValueError(f"non-finite md_label for image {e.image_id}")
            if e.glaucoma_label not in (0, 1):
                raise ValueError(f"glaucoma_label must be 0/1 for image {e.image_id}")


@dataclass
class SyntheticParams:
    n_maps: int = 512
    width: int = 64
    height: int = 64
    bundle_amplitude: tuple[float, float] = (120.0, 170.0)
    bundle_width: tuple[float, float] = (0.12, 0.2)
    background: float = 50.0
    noise_sigma: float = 2.0
    md_slope: float = 20.0
    md_intercept: float = -18.0
    md_noise_sigma: float = 1.0
    glaucoma_threshold: float = 0.4
    first_id: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.width < MIN_SIZE or self.height < MIN_SIZE:
            raise ValueError(f"maps must be at least {MIN_SIZE}x{MIN_SIZE}, got {self.width}x{self.height}")
        if self.n_maps < 1:
            raise ValueError("n_maps must be positive")
        for name in ("bundle_amplitude", "bundle_width"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} range is degenerate: {(lo, hi)}")
        if self.noise_sigma < 0 or self.md_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 < self.glaucoma_threshold < 1.0:
            raise ValueError("glaucoma_threshold must lie in (0, 1)")


# ---------------------------------------------------------------------------
# synthetic anatomy


def _polar_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    # y axis points up so angles read like a fundus photograph
    dy, dx = (cy - yy) / (height / 2.0), (xx - cx) / (width / 2.0)
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def _angle_diff(a: np.ndarray, b: float) -> np.ndarray:
    return np.angle(np.exp(1j * (a - b)))


def render_map(
    height: int,
    width: int,
    health: float,
    amplitude: float,
    bundle_width: float,
    angle_jitter: tuple[float, float] = (0.0, 0.0),
    background: float = 50.0,
) -> np.ndarray:
    """Noise-free thickness map: background, two arcuate bundles and a thin disc."""
    rho, phi = _polar_grid(height, width)
    img = background * (1.0 + 0.2 * np.clip(1.0 - rho, 0.0, 1.0))
    gain = amplitude * (0.2 + 0.8 * health)
    # superotemporal and inferotemporal arcs (temporal side on the left for a right eye)
    for centre, jitter in zip((np.deg2rad(125.0), np.deg2rad(-125.0)), angle_jitter):
        radial = np.exp(-((rho - 0.55) ** 2) / (2.0 * bundle_width**2))
        angular = np.exp(-(_angle_diff(phi, centre + jitter) ** 2) / (2.0 * 0.45**2))
        img = img + gain * radial * angular
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.mgrid[0:height, 0:width]
    disc = ((yy - cy) / (0.16 * height / 2.0)) ** 2 + ((xx - cx) / (0.12 * width / 2.0)) ** 2 <= 1.0
    img[disc] = 0.2 * background
    return img


def generate_synthetic_dataset(params: SyntheticParams) -> tuple[list[ThicknessMap], DatasetManifest]:
    params.validate()
    rng = np.random.default_rng(params.seed)
    n, h, w = params.n_maps, params.height, params.width
    # latent health is drawn first so callers can reproduce it from the seed alone
    health = rng.uniform(0.0, 1.0, size=n)
    amplitude = rng.uniform(*params.bundle_amplitude, size=n)
    widths = rng.uniform(*params.bundle_width, size=n)
    jitter = rng.uniform(-0.15, 0.15, size=(n, 2))
    md_noise = rng.normal(0.0, 1.0, size=n) * params.md_noise_sigma

    maps: list[ThicknessMap] = []
    manifest = DatasetManifest()
    record = record_size(w, h)
    for i in range(n):
        img = render_map(h, w, health[i], amplitude[i], widths[i], tuple(jitter[i]), params.background)
        if params.noise_sigma > 0:
            img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
        img = np.clip(img, 0.0, MAX_THICKNESS).astype(np.float32)
        image_id = params.first_id + i
        maps.append(ThicknessMap(img, image_id))
        manifest.entries.append(
            ManifestEntry(
                image_id=image_id,
                offset=_HEADER.size + i * record,
                md_label=float(params.md_slope * health[i] + params.md_intercept + md_noise[i]),
                glaucoma_label=int(health[i] < params.glaucoma_threshold),
                latent_health=float(health[i]),
            )
        )
    return maps, manifest


def to_right_eye(tmap: ThicknessMap) -> ThicknessMap:
    """Mirror a left-eye map into right-eye orientation."""
    if tmap.eye == "right":
        return tmap
    return ThicknessMap(np.ascontiguousarray(tmap.pixels[:, ::-1]), tmap.image_id, "left", True)


# ---------------------------------------------------------------------------
# artifact masks

SHAPES = ("rectangle", "ellipse", "wedge")


def invalid_fraction(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask == 0)) / mask.size


def _shape_region(kind: str, height: int, width: int, area: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    if kind == "wedge":
        rho, phi = _polar_grid(height, width)
        inner = rng.uniform(0.0, 0.35)
        direction = rng.uniform(-np.pi, np.pi)
        # a full-radius sector of half-angle a covers about a/pi of the image
        half_angle = min(np.pi, np.pi * area / (height * width) * (1.0 + inner))
        return (np.abs(_angle_diff(phi, direction)) <= half_angle) & (rho >= inner)
    cy, cx = rng.uniform(0, height - 1), rng.uniform(0, width - 1)
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    if kind == "rectangle":
        half_w = math.sqrt(area * aspect) / 2.0
        half_h = area / (4.0 * half_w)
        return (np.abs(xx - cx) <= half_w) & (np.abs(yy - cy) <= half_h)
    if kind == "ellipse":
        a = math.sqrt(area * aspect / math.pi)
        b = area / (math.pi * a)
        return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    raise ValueError(f"unknown mask shape {kind!r}")


def generate_artifact_mask(
    width: int,
    height: int,
    target_fraction: float,
    shape_mix: dict[str, float] | None = None,
    seed: int | np.random.Generator = 0,
    tolerance: float = 0.05,
    max_attempts: int = 100,
) -> np.ndarray:
    """Random artifact mask whose invalid fraction lands within ``tolerance`` of the target.

    Shapes are placed one at a time; a placement that would overshoot the upper
    tolerance is rejected and counts as a failed attempt.
    """
    if not 0.0 <= target_fraction <= MAX_MASK_FRACTION:
        raise ValueError(f"target_fraction must lie in [0, {MAX_MASK_FRACTION}], got {target_fraction}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mix = shape_mix or {s: 1.0 for s in SHAPES}
    kinds = [k for k in mix if mix[k] > 0]
    probs = np.array([mix[k] for k in kinds], dtype=np.float64)
    probs /= probs.sum()

    mask = np.ones((height, width), dtype=np.uint8)
    total = height * width
    if target_fraction == 0:
        return mask
    # aim slightly below the target so the accepted fraction is roughly centred
    goal = target_fraction - 0.01
    for _ in range(max_attempts):
        frac = invalid_fraction(mask)
        if frac >= goal:
            break
        kind = kinds[rng.choice(len(kinds), p=probs)]
        area = (target_fraction - frac) * total * rng.uniform(0.4, 1.0)
        region = _shape_region(kind, height, width, max(area, 1.0), rng)
        candidate = mask.copy()
        candidate[region] = 0
        new_frac = invalid_fraction(candidate)
        if new_frac <= target_fraction + tolerance and new_frac < 1.0:
            mask = candidate
    frac = invalid_fraction(mask)
    if abs(frac - target_fraction) > tolerance:
        raise MaskGenerationError(
            f"could not reach invalid fraction {target_fraction:.3f} in {max_attempts} attempts (got {frac:.3f})"
        )
    return mask


def generate_mask_pool(
    n: int,
    width: int,
    height: int,
    fraction_range: tuple[float, float] = (0.1, 0.5),
    shape_mix: dict[str, float] | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Stack of ``n`` masks with target fractions drawn uniformly from ``fraction_range``."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, height, width), dtype=np.uint8)
    for i in range(n):
        out[i] = generate_artifact_mask(width, height, rng.uniform(*fraction_range), shape_mix, rng)
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.8, 1.0)
    rotation_deg: float = 15.0
    zoom: tuple[float, float] = (0.9, 1.1)
    width_shift: float = 0.1
    height_shift: float = 0.1
    families: tuple[str, ...] = ("crop", "rotate", "zoom", "width_shift", "height_shift")


@dataclass
class AffineParams:
    scale: float = 1.0
    angle_deg: float = 0.0
    shift_x: float = 0.0  # pixels, positive moves content right
    shift_y: float = 0.0  # pixels, positive moves content down

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.angle_deg == 0.0 and self.shift_x == 0.0 and self.shift_y == 0.0


def sample_affine(cfg: AugmentConfig, height: int, width: int, rng: np.random.Generator) -> AffineParams:
    p = AffineParams()
    fams = set(cfg.families)
    if "crop" in fams:
        # keep the central s-fraction then resize back: magnification 1/s
        p.scale /= rng.uniform(*cfg.crop_scale)
    if "rotate" in fams:
        p.angle_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    if "zoom" in fams:
        p.scale *= rng.uniform(*cfg.zoom)
    if "width_shift" in fams:
        p.shift_x = rng.uniform(-cfg.width_shift, cfg.width_shift) * width
    if "height_shift" in fams:
        p.shift_y = rng.uniform(-cfg.height_shift, cfg.height_shift) * height
    return p


def apply_affine(pixels: np.ndarray, mask: np.ndarray, params: AffineParams) -> tuple[np.ndarray, np.ndarray]:
    """Warp a map and its mask jointly.

    Output pixels whose source falls outside the image or on an invalid pixel are
    filled with 0 and marked invalid. Valid values are interpolated bilinearly from
    valid neighbours only, so invalid input values never leak into the output.
    """
    if params.is_identity:
        return pixels.copy(), mask.copy()
    h, w = pixels.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ty = (yy - cy - params.shift_y) / params.scale
    tx = (xx - cx - params.shift_x) / params.scale
    theta = np.deg2rad(params.angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    src_y = cy + c * ty - s * tx
    src_x = cx + s * ty + c * tx

    eps = 1e-9
    inside = (src_y >= -eps) & (src_y <= h - 1 + eps) & (src_x >= -eps) & (src_x <= w - 1 + eps)
    coords = np.stack([np.clip(src_y, 0, h - 1), np.clip(src_x, 0, w - 1)])
    m = mask.astype(np.float64)
    near = ndimage.map_coordinates(m, coords, order=0, mode="nearest")
    num = ndimage.map_coordinates(pixels.astype(np.float64) * m, coords, order=1, mode="nearest")
    den = ndimage.map_coordinates(m, coords, order=1, mode="nearest")
    valid = inside & (near > 0.5) & (den > 1e-12)
    out = np.zeros_like(pixels, dtype=np.float64)
    out[valid] = num[valid] / den[valid]
    return out.astype(pixels.dtype), valid.astype(np.uint8)


def augment(
    tmap: ThicknessMap, mask: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[ThicknessMap, np.ndarray]:
    params = sample_affine(cfg, *tmap.pixels.shape, rng)
    pixels, out_mask = apply_affine(tmap.pixels, mask, params)
    return ThicknessMap(pixels, tmap.image_id, tmap.eye, tmap.flipped), out_mask


# ---------------------------------------------------------------------------
# container format


def record_size(width: int, height: int) -> int:
    return 4 + 4 * width * height + (width * height + 7) // 8


def manifest_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".csv")


def write_dataset(
    path: str | Path,
    maps: Sequence[ThicknessMap],
    masks: Sequence[np.ndarray] | np.ndarray | None = None,
    manifest: DatasetManifest | None = None,
) -> None:
    """Write maps and masks to an RNFL container, plus the manifest CSV sidecar if given."""
    path = Path(path)
    if not maps:
        raise ValueError("cannot write an empty dataset")
    h, w = maps[0].pixels.shape
    if masks is None:
        masks = [np.ones((h, w), dtype=np.uint8)] * len(maps)
    if len(masks) != len(maps):
        raise ValueError("maps and masks differ in length")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(maps), w, h))
        for tmap, mask in zip(maps, masks):
            if tmap.pixels.shape != (h, w) or np.shape(mask) != (h, w):
                raise ShapeMismatchError(f"record {tmap.image_id} is not {w}x{h}")
            fh.write(struct.pack("<I", tmap.image_id))
            fh.write(np.ascontiguousarray(tmap.pixels, dtype="<f4").tobytes())
            fh.write(np.packbits(np.asarray(mask, dtype=np.uint8).ravel() != 0).tobytes())
    if manifest is not None:
        write_manifest(manifest_path(path), manifest)


def read_dataset(
    path: str | Path, left_eye_ids: Iterable[int] = ()
) -> tuple[list[ThicknessMap], np.ndarray, DatasetManifest | None]:
    """Read an RNFL container. Maps whose id is in ``left_eye_ids`` are flipped to right-eye format."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than header")
    magic, version, count, w, h = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    rec = record_size(w, h)
    body = len(data) - _HEADER.size
    if body % rec:
        raise ShapeMismatchError(f"{path}: body of {body} bytes is not a whole number of {w}x{h} records")
    if body // rec < count:
        raise TruncatedFileError(f"{path}: header declares {count} records, found {body // rec}")
    if body // rec > count:
        raise DatasetFormatError(f"{path}: trailing records beyond declared count {count}")

    left = set(left_eye_ids)
    n_pix = w * h
    maps: list[ThicknessMap] = []
    masks = np.empty((count, h, w), dtype=np.uint8)
    off = _HEADER.size
    for i in range(count):
        (image_id,) = struct.unpack_from("<I", data, off)
        pixels = np.frombuffer(data, dtype="<f4", count=n_pix, offset=off + 4).reshape(h, w).astype(np.float32)
        packed = np.frombuffer(data, dtype=np.uint8, count=(n_pix + 7) // 8, offset=off + 4 + 4 * n_pix)
        masks[i] = np.unpackbits(packed, count=n_pix).reshape(h, w)
        tmap = ThicknessMap(pixels, int(image_id))
        if image_id in left:
            tmap = to_right_eye(ThicknessMap(pixels, int(image_id), "left"))
            masks[i] = masks[i][:, ::-1]
        maps.append(tmap)
        off += rec

    mpath = manifest_path(path)
    manifest = read_manifest(mpath, w, h) if mpath.exists() else None
    return maps, masks, manifest


MANIFEST_COLUMNS = ("image_id", "md_label", "glaucoma_label", "latent_health")


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([e.image_id, repr(e.md_label), e.glaucoma_label, repr(e.latent_health)])


def read_manifest(path: str | Path, width: int | None = None, height: int | None = None) -> DatasetManifest:
    manifest = DatasetManifest()
    rec = record_size(width, height) if width and height else 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise DatasetFormatError(f"{path}: expected columns {MANIFEST_COLUMNS}, got {reader.fieldnames}")
        for i, row in enumerate(reader):
            manifest.entries.append(
                ManifestEntry(
                    image_id=int(row["image_id"]),
                    offset=_HEADER.size + i * rec,
                    md_label=float(row["md_label"]),
                    glaucoma_label=int(row["glaucoma_label"]),
                    latent_health=float(row["latent_health"]),
                )
            )
    manifest.validate()
    return manifest
