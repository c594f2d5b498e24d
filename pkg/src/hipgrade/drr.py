"""ROI extraction and the normalized 150x150 AP projection, plus augmentation.

A 150 mm cube centered on the femoral head center is resampled to 1 mm
isotropic (150^3 trilinear samples) in a canonical frame: rows run
superior to inferior, columns run right to left (patient), depth runs
anterior to posterior.  The projection is the mean along the AP axis,
min-max normalized to [0, 1].  Left hips are mirrored so every image has
right-hip orientation.

Augmentation mirrors the training-time pipeline: rotation, box blur,
brightness/contrast jitter, rectangular zero masks, replication to three
channels and per-channel standardization.  All randomness comes from an
explicitly passed numpy Generator, so a seed reproduces the tensor
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .labels import GradeLabel, separated_to_combined
from .volume import CTVolume

__all__ = [
    "ROI_MM",
    "DRR_SIZE",
    "DRRImage",
    "AugmentationParams",
    "extract_roi",
    "mean_projection",
    "normalize",
    "project_ap",
    "render_drr",
    "augment",
    "save_drr",
    "load_drr",
]

ROI_MM = 150       # physical side length of the cropped cube, mm
DRR_SIZE = 150     # output pixels per side (1 mm sampling)

# Canonical ROI axis directions in LPS: rows superior->inferior,
# columns right->left, depth anterior->posterior.
_ROW_DIR = np.array([0.0, 0.0, -1.0])
_COL_DIR = np.array([1.0, 0.0, 0.0])
_DEPTH_DIR = np.array([0.0, 1.0, 0.0])


@dataclass
class DRRImage:
    """A normalized hip projection with provenance."""

    pixels: np.ndarray
    patient_id: str = ""
    side: str = "right"
    source: str = ""
    padded: bool = False

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.shape != (DRR_SIZE, DRR_SIZE):
            raise ValueError(f"DRR pixels must be {DRR_SIZE}x{DRR_SIZE}, got {self.pixels.shape}")
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be left/right, got {self.side!r}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("DRR pixels must be finite")
        if self.pixels.min() < -1e-9 or self.pixels.max() > 1 + 1e-9:
            raise ValueError("DRR pixels must lie in [0, 1]")


def extract_roi(volume: CTVolume, fhc, side: str = "right",
                clip: tuple[float, float] | None = None):
    """Crop the 150 mm cube centered on an FHC landmark.

    Returns ``(subgrid, padded)`` where subgrid is a 150^3 array sampled
    at 1 mm by trilinear interpolation in the canonical frame, and padded
    flags whether any sample fell outside the volume (such samples read
    as zero).  The landmark itself must lie inside the volume.

    ``clip`` optionally windows source intensities to (lo, hi) before
    resampling, for clinical volumes whose HU range needs bounding; no
    clipping is applied by default.
    """
    if side not in ("left", "right"):
        raise ValueError(f"side must be left/right, got {side!r}")
    fhc = np.asarray(fhc, dtype=float)
    if fhc.shape != (3,):
        raise ValueError("fhc must be a 3-vector in mm")
    if not volume.contains(fhc):
        raise ValueError(f"FHC {tuple(fhc)} lies outside the volume extent")
    if clip is not None:
        lo, hi = clip
        if not lo < hi:
            raise ValueError(f"clip bounds must satisfy lo < hi, got {clip}")

    offsets = np.arange(DRR_SIZE, dtype=float) - (DRR_SIZE - 1) / 2.0
    step = volume.direction_matrix() * np.asarray(volume.spacing)
    to_index = np.linalg.inv(step)
    base = to_index @ (fhc - np.asarray(volume.origin))
    row_step = to_index @ _ROW_DIR
    col_step = to_index @ _COL_DIR
    depth_step = to_index @ _DEPTH_DIR

    ii = offsets[:, None, None]
    jj = offsets[None, :, None]
    kk = offsets[None, None, :]
    coords = np.empty((3, DRR_SIZE, DRR_SIZE, DRR_SIZE))
    for d in range(3):
        coords[d] = base[d] + row_step[d] * ii + col_step[d] * jj + depth_step[d] * kk

    limits = np.asarray(volume.shape, dtype=float) - 1.0
    eps = 1e-9
    padded = bool(
        any(
            coords[d].min() < -eps or coords[d].max() > limits[d] + eps
            for d in range(3)
        )
    )
    voxels = volume.voxels if clip is None else np.clip(volume.voxels, *clip)
    subgrid = ndimage.map_coordinates(voxels, coords, order=1,
                                      mode="grid-constant", cval=0.0)
    return subgrid, padded


def mean_projection(subgrid) -> np.ndarray:
    """Raw mean-intensity projection along the AP (depth) axis."""
    subgrid = np.asarray(subgrid)
    if subgrid.shape != (DRR_SIZE, DRR_SIZE, DRR_SIZE):
        raise ValueError(f"subgrid must be {DRR_SIZE}^3, got {subgrid.shape}")
    return subgrid.mean(axis=2)


def normalize(image) -> np.ndarray:
    """Min-max rescale a 2D image to [0, 1]; a constant image maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains NaN or Inf")
    lo = image.min()
    span = image.max() - lo
    if span == 0:
        return np.zeros_like(image, dtype=np.float32)
    return ((image - lo) / span).astype(np.float32)


def project_ap(subgrid, side: str = "right", patient_id: str = "",
               source: str = "", padded: bool = False) -> DRRImage:
    """Project a canonical ROI cube to a normalized DRR.

    Mean projection along the AP axis, mirrored for left hips so all
    outputs share right-hip orientation, then min-max normalized.
    """
    raw = mean_projection(subgrid)
    if side == "left":
        raw = raw[:, ::-1]
    return DRRImage(pixels=normalize(raw), patient_id=patient_id, side=side,
                    source=source, padded=padded)


def render_drr(volume: CTVolume, fhc, side: str = "right", patient_id: str = "",
               source: str = "", clip: tuple[float, float] | None = None) -> DRRImage:
    """Full ROI-crop + AP-projection pipeline for one hip."""
    subgrid, padded = extract_roi(volume, fhc, side, clip=clip)
    return project_ap(subgrid, side=side, patient_id=patient_id,
                      source=source, padded=padded)


@dataclass
class AugmentationParams:
    """Training-time augmentation settings (disable for inference)."""

    rotation_limit_deg: float = 15.0
    blur_limit: tuple[int, int] = (1, 9)
    brightness_limit: tuple[float, float] = (-0.2, 0.4)
    contrast_limit: tuple[float, float] = (-0.2, 0.4)
    holes: tuple[int, int] = (5, 10)
    hole_size: int = 8
    normalization_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    normalization_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    enabled: bool = True

    def __post_init__(self):
        if self.rotation_limit_deg < 0:
            raise ValueError("rotation_limit_deg must be >= 0")
        for name in ("blur_limit", "brightness_limit", "contrast_limit", "holes"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range {lo}..{hi} is not well-ordered")
        if self.blur_limit[0] < 1:
            raise ValueError("blur kernel sizes start at 1")
        if self.holes[0] < 0:
            raise ValueError("hole counts must be >= 0")
        if self.hole_size < 1:
            raise ValueError("hole_size must be >= 1")


def augment(image, params: AugmentationParams, rng: np.random.Generator) -> np.ndarray:
    """Produce the model-input tensor for one DRR.

    With augmentation enabled: random rotation, box blur, brightness and
    contrast jitter, rectangular zero masks; always followed by 3-channel
    replication and per-channel standardization.  Returns a float32
    (3, 150, 150) array.  Deterministic given the generator state.
    """
    pixels = image.pixels if isinstance(image, DRRImage) else np.asarray(image)
    if pixels.shape != (DRR_SIZE, DRR_SIZE):
        raise ValueError(f"expected a {DRR_SIZE}x{DRR_SIZE} image, got {pixels.shape}")
    img = pixels.astype(np.float64)

    if params.enabled:
        angle = float(rng.uniform(-params.rotation_limit_deg, params.rotation_limit_deg))
        if angle != 0.0:
            img = ndimage.rotate(img, angle, reshape=False, order=1,
                                 mode="constant", cval=0.0)
        lo, hi = params.blur_limit
        kernels = [k for k in range(lo, hi + 1) if k % 2 == 1]
        kernel = int(rng.choice(kernels)) if kernels else 1
        if kernel > 1:
            img = ndimage.uniform_filter(img, size=kernel, mode="reflect")
        brightness = float(rng.uniform(*params.brightness_limit))
        contrast = float(rng.uniform(*params.contrast_limit))
        img = np.clip(img * (1.0 + contrast) + brightness, 0.0, 1.0)
        n_holes = int(rng.integers(params.holes[0], params.holes[1] + 1))
        h = min(params.hole_size, DRR_SIZE)
        for _ in range(n_holes):
            y = int(rng.integers(0, DRR_SIZE - h + 1))
            x = int(rng.integers(0, DRR_SIZE - h + 1))
            img[y:y + h, x:x + h] = 0.0

    mean = np.asarray(params.normalization_mean, dtype=np.float64)[:, None, None]
    std = np.asarray(params.normalization_std, dtype=np.float64)[:, None, None]
    tensor = (np.repeat(img[None, :, :], 3, axis=0) - mean) / std
    return tensor.astype(np.float32)


def save_drr(image: DRRImage, path, label: GradeLabel | None = None) -> None:
    """Write a DRR as 16-bit grayscale PNG plus a JSON sidecar."""
    path = Path(path)
    arr = np.round(np.clip(image.pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)
    sidecar = {
        "patient_id": image.patient_id,
        "side": image.side,
        "class": label.combined if label else None,
        "crowe": label.crowe if label else None,
        "kl": label.kl if label else None,
        "padding_flag": bool(image.padded),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_drr(path):
    """Read a DRR PNG (+sidecar if present). Returns (DRRImage, label-or-None)."""
    path = Path(path)
    arr = np.asarray(Image.open(path), dtype=np.float32) / 65535.0
    meta_path = path.with_suffix(".json")
    patient_id, side, padded, label = "", "right", False, None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        patient_id = meta.get("patient_id") or ""
        side = meta.get("side") or "right"
        padded = bool(meta.get("padding_flag", False))
        if meta.get("crowe") is not None and meta.get("kl") is not None:
            label = GradeLabel(int(meta["crowe"]), int(meta["kl"]),
                               separated_to_combined(int(meta["crowe"]), int(meta["kl"])))
    image = DRRImage(pixels=arr, patient_id=patient_id, side=side,
                     source=str(path), padded=padded)
    return image, label
