"""CT volumes, synthetic hip phantoms, and femoral-head-center landmarks.

Volumes live in an LPS anatomical frame (x toward patient Left, y toward
Posterior, z toward Superior).  Each grid axis carries an orientation code
(one of R/L/A/P/S/I) naming the anatomical direction of increasing index,
so arbitrarily permuted/flipped grids can be resampled consistently.

Two on-disk formats are supported: MetaImage (.mha/.mhd, uncompressed
local data) for interchange with standard tools, and a plain format
(single-line JSON header followed by a little-endian binary grid) used
for phantom datasets, which round-trips bit-exactly.

The phantom generator stands in for clinical CT: a bright sphere (femoral
head) under a hemispherical shell (acetabular cup) whose head-cup gap and
superior head displacement encode the 7 severity classes.  Landmarks for
clinical volumes are an input (JSON file); only the phantom detector is
implemented here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .labels import GradeLabel

__all__ = [
    "CTVolume",
    "LandmarkPair",
    "PhantomSpec",
    "VolumeFormatError",
    "DetectionError",
    "CLASS_GEOMETRY",
    "spec_for_class",
    "generate_phantom",
    "detect_fhc_phantom",
    "load_volume",
    "save_volume",
    "load_landmarks",
    "save_landmarks",
]

# Anatomical direction vectors in the LPS frame, per orientation code.
_CODE_VECTORS = {
    "L": (1.0, 0.0, 0.0),
    "R": (-1.0, 0.0, 0.0),
    "P": (0.0, 1.0, 0.0),
    "A": (0.0, -1.0, 0.0),
    "S": (0.0, 0.0, 1.0),
    "I": (0.0, 0.0, -1.0),
}
_AXIS_PAIRS = ({"L", "R"}, {"A", "P"}, {"S", "I"})


class VolumeFormatError(ValueError):
    """Raised for unreadable or inconsistent volume files."""


class DetectionError(RuntimeError):
    """Raised when no femoral-head component can be found."""


def _check_orientation(orientation):
    codes = tuple(str(c).upper() for c in orientation)
    if len(codes) != 3 or any(c not in _CODE_VECTORS for c in codes):
        raise ValueError(f"orientation must be three of R/L/A/P/S/I, got {orientation!r}")
    pairs = {frozenset(p) for c in codes for p in _AXIS_PAIRS if c in p}
    if len(pairs) != 3:
        raise ValueError(f"orientation must cover LR, AP and SI exactly once, got {orientation!r}")
    return codes


@dataclass
class CTVolume:
    """A 3D scalar grid with physical spacing, origin and orientation.

    ``origin`` is the LPS position (mm) of the center of voxel (0, 0, 0);
    the physical position of index (i, j, k) is
    ``origin + i*spacing[0]*dir0 + j*spacing[1]*dir1 + k*spacing[2]*dir2``
    where each direction vector comes from the orientation code of that
    axis.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: tuple[str, str, str] = ("L", "P", "S")

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or self.voxels.size == 0:
            raise ValueError("voxels must be a non-empty 3D grid")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        self.origin = tuple(float(v) for v in self.origin)
        self.orientation = _check_orientation(self.orientation)

    @property
    def shape(self):
        return self.voxels.shape

    def direction_matrix(self) -> np.ndarray:
        """Columns are the LPS direction vectors of the three grid axes."""
        return np.array([_CODE_VECTORS[c] for c in self.orientation]).T

    def index_to_physical(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=float)
        step = self.direction_matrix() * np.asarray(self.spacing)
        return np.asarray(self.origin) + index @ step.T

    def physical_to_index(self, point) -> np.ndarray:
        """Continuous grid index of an LPS point (inverse of index_to_physical)."""
        point = np.asarray(point, dtype=float)
        step = self.direction_matrix() * np.asarray(self.spacing)
        return (point - np.asarray(self.origin)) @ np.linalg.inv(step).T

    def contains(self, point, margin_mm: float = 0.0) -> bool:
        """Whether an LPS point lies within the voxel-center extent.

        A positive margin requires the point to sit at least that many
        millimetres inside every face (useful for ROI-fit checks).
        """
        idx = self.physical_to_index(point)
        hi = np.asarray(self.shape) - 1
        lo_idx = margin_mm / np.asarray(self.spacing)
        hi_idx = hi - margin_mm / np.asarray(self.spacing)
        return bool(np.all(idx >= lo_idx) and np.all(idx <= hi_idx))


@dataclass(frozen=True)
class LandmarkPair:
    """Right and left femoral head centers in LPS mm."""

    right_fhc: tuple[float, float, float]
    left_fhc: tuple[float, float, float]


# ---------------------------------------------------------------------------
# Phantom geometry
#
# Classes 1-4: concentric head and cup, joint space narrowing from ~4.5 mm
# down to near contact.  Classes 5-7: zero joint space with the head center
# displaced superiorly by a growing fraction of the head diameter.  Bands
# are disjoint so any two classes differ in at least one geometric band.
# ---------------------------------------------------------------------------

# target_class -> (joint-space band mm, dislocation band as fraction of head diameter)
CLASS_GEOMETRY = {
    1: ((4.0, 5.0), (0.0, 0.0)),
    2: ((2.5, 3.5), (0.0, 0.0)),
    3: ((1.0, 2.0), (0.0, 0.0)),
    4: ((0.0, 0.5), (0.0, 0.0)),
    5: ((0.0, 0.0), (0.25, 0.5)),
    6: ((0.0, 0.0), (0.5, 0.75)),
    7: ((0.0, 0.0), (0.75, 0.9)),
}

HEAD_INTENSITY = 1000.0
CUP_INTENSITY = 500.0
CUP_THICKNESS_MM = 4.0
DEFAULT_GRID = (200, 200, 200)
DEFAULT_HEAD_RADIUS_MM = 25.0


@dataclass(frozen=True)
class PhantomSpec:
    """Declarative description of one synthetic hip phantom.

    ``joint_space_mm`` is the gap between head and cup surfaces;
    ``dislocation_mm`` is the superior displacement of the head center
    relative to the cup center.  Both must lie in the band of
    ``target_class`` (see CLASS_GEOMETRY).  ``bilateral`` adds a mirrored
    second hip so the landmark detector can be exercised on two heads.
    """

    target_class: int
    joint_space_mm: float
    dislocation_mm: float
    head_radius_mm: float = DEFAULT_HEAD_RADIUS_MM
    noise_sd: float = 0.0
    seed: int = 0
    bilateral: bool = False
    grid_shape: tuple[int, int, int] = DEFAULT_GRID

    def __post_init__(self):
        if self.target_class not in CLASS_GEOMETRY:
            raise ValueError(f"target_class must be 1..7, got {self.target_class}")
        if self.joint_space_mm < 0 or self.dislocation_mm < 0:
            raise ValueError("joint_space_mm and dislocation_mm must be >= 0")
        if self.head_radius_mm <= 0:
            raise ValueError("head_radius_mm must be > 0")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        (js_lo, js_hi), (fr_lo, fr_hi) = CLASS_GEOMETRY[self.target_class]
        diam = 2.0 * self.head_radius_mm
        d_lo, d_hi = fr_lo * diam, fr_hi * diam
        tol = 1e-9
        if not (js_lo - tol <= self.joint_space_mm <= js_hi + tol):
            raise ValueError(
                f"joint_space_mm {self.joint_space_mm} outside class {self.target_class} "
                f"band [{js_lo}, {js_hi}]"
            )
        if not (d_lo - tol <= self.dislocation_mm <= d_hi + tol):
            raise ValueError(
                f"dislocation_mm {self.dislocation_mm} outside class {self.target_class} "
                f"band [{d_lo}, {d_hi}] mm"
            )

    def label(self) -> GradeLabel:
        crowe, kl = _CLASS_TO_PAIR[self.target_class]
        return GradeLabel(crowe, kl, self.target_class)


_CLASS_TO_PAIR = {c: GradeLabel.from_combined(c) for c in range(1, 8)}
_CLASS_TO_PAIR = {c: (lab.crowe, lab.kl) for c, lab in _CLASS_TO_PAIR.items()}


def spec_for_class(target_class: int, seed: int = 0, *, head_radius_mm=DEFAULT_HEAD_RADIUS_MM,
                   noise_sd: float = 0.0, bilateral: bool = False,
                   grid_shape=DEFAULT_GRID) -> PhantomSpec:
    """Sample a PhantomSpec uniformly within the class's geometry bands."""
    if target_class not in CLASS_GEOMETRY:
        raise ValueError(f"target_class must be 1..7, got {target_class}")
    rng = np.random.default_rng(seed)
    (js_lo, js_hi), (fr_lo, fr_hi) = CLASS_GEOMETRY[target_class]
    joint_space = float(rng.uniform(js_lo, js_hi)) if js_hi > js_lo else js_lo
    frac = float(rng.uniform(fr_lo, fr_hi)) if fr_hi > fr_lo else fr_lo
    return PhantomSpec(
        target_class=target_class,
        joint_space_mm=joint_space,
        dislocation_mm=frac * 2.0 * head_radius_mm,
        head_radius_mm=head_radius_mm,
        noise_sd=noise_sd,
        seed=seed,
        bilateral=bilateral,
        grid_shape=tuple(grid_shape),
    )


def _paint_hip(voxels, cup_center, spec):
    """Rasterize one head+cup assembly into an LPS 1 mm grid, in place."""
    r_head = spec.head_radius_mm
    r_inner = r_head + spec.joint_space_mm
    r_outer = r_inner + CUP_THICKNESS_MM
    head_center = np.asarray(cup_center, dtype=float) + np.array([0.0, 0.0, spec.dislocation_mm])

    shape = np.asarray(voxels.shape)
    for center, radius, value, hemisphere in (
        (cup_center, r_outer, CUP_INTENSITY, True),
        (head_center, r_head, HEAD_INTENSITY, False),
    ):
        center = np.asarray(center, dtype=float)
        lo = np.maximum(np.floor(center - radius - 1).astype(int), 0)
        hi = np.minimum(np.ceil(center + radius + 2).astype(int), shape)
        if np.any(lo >= hi) or np.any(center - radius < -0.5) or np.any(center + radius > shape - 0.5):
            raise ValueError(
                f"phantom geometry (center {tuple(center)}, radius {radius} mm) "
                f"exceeds the {tuple(shape)} grid"
            )
        ii = np.arange(lo[0], hi[0])[:, None, None] - center[0]
        jj = np.arange(lo[1], hi[1])[None, :, None] - center[1]
        kk = np.arange(lo[2], hi[2])[None, None, :] - center[2]
        dist2 = ii * ii + jj * jj + kk * kk
        if hemisphere:
            # Shell covering the superior half only, open toward inferior.
            mask = (dist2 <= r_outer**2) & (dist2 >= r_inner**2) & (kk >= 0)
        else:
            mask = dist2 <= radius**2
        block = voxels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        np.maximum(block, np.where(mask, np.float32(value), np.float32(0.0)), out=block)
    return tuple(float(v) for v in head_center)


def generate_phantom(spec: PhantomSpec):
    """Build a labeled hip phantom volume.

    Returns (CTVolume, GradeLabel, LandmarkPair).  The volume is a 1 mm
    isotropic LPS grid; the landmark pair marks the exact head center(s).
    A pure function of the spec: the same spec (seed included) yields a
    bit-identical volume.
    """
    shape = tuple(int(n) for n in spec.grid_shape)
    rng = np.random.default_rng(spec.seed)
    voxels = np.zeros(shape, dtype=np.float32)
    center = (np.asarray(shape, dtype=float) - 1.0) / 2.0

    # Small seeded placement jitter so a dataset is not perfectly co-registered.
    jitter = rng.uniform(-5.0, 5.0, size=3)
    # The head (the ROI center) sits near the grid center; the cup drops
    # inferior by the dislocation so a 150 mm head-centered crop always fits.
    drop = np.array([0.0, 0.0, spec.dislocation_mm])

    if spec.bilateral:
        offset = min(45.0, shape[0] / 2.0 - spec.head_radius_mm - CUP_THICKNESS_MM - 8.0)
        right_cup = center + jitter + np.array([-offset, 0.0, 0.0]) - drop
        left_cup = center + jitter + np.array([offset, 0.0, 0.0]) - drop
        right_fhc = _paint_hip(voxels, right_cup, spec)
        left_fhc = _paint_hip(voxels, left_cup, spec)
    else:
        cup = center + jitter - drop
        right_fhc = left_fhc = _paint_hip(voxels, cup, spec)

    if spec.noise_sd > 0:
        voxels += rng.normal(0.0, spec.noise_sd, size=shape).astype(np.float32)

    vol = CTVolume(voxels=voxels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                   orientation=("L", "P", "S"))
    return vol, spec.label(), LandmarkPair(right_fhc=right_fhc, left_fhc=left_fhc)


def detect_fhc_phantom(volume: CTVolume, min_component_voxels: int = 1000) -> LandmarkPair:
    """Locate femoral-head centers in a phantom volume.

    Thresholds halfway between the cup and head intensities, labels
    connected components, and returns the intensity-weighted centroid of
    the one or two largest head-sized components.  With one head both
    landmark fields carry the same point; with two, sides are assigned by
    the left-right coordinate.
    """
    threshold = 0.5 * (HEAD_INTENSITY + CUP_INTENSITY)
    mask = volume.voxels > threshold
    labeled, n = ndimage.label(mask)
    if n == 0:
        raise DetectionError("no spherical component above the head-intensity threshold")
    sizes = ndimage.sum_labels(np.ones_like(labeled, dtype=np.int64), labeled, range(1, n + 1))
    candidates = [i + 1 for i in np.argsort(sizes)[::-1] if sizes[i] >= min_component_voxels]
    if not candidates:
        raise DetectionError("no component large enough to be a femoral head")
    candidates = candidates[:2]

    centers = []
    for lab in candidates:
        sel = labeled == lab
        weights = volume.voxels * sel
        total = float(weights.sum())
        idx = np.array(ndimage.center_of_mass(weights))
        if total <= 0:
            raise DetectionError("degenerate head component")
        centers.append(volume.index_to_physical(idx))

    if len(centers) == 1:
        point = tuple(float(v) for v in centers[0])
        return LandmarkPair(right_fhc=point, left_fhc=point)
    # Larger L coordinate = patient left.
    centers.sort(key=lambda p: p[0])
    return LandmarkPair(
        right_fhc=tuple(float(v) for v in centers[0]),
        left_fhc=tuple(float(v) for v in centers[1]),
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_MET_TYPES = {
    "MET_UCHAR": np.uint8,
    "MET_CHAR": np.int8,
    "MET_USHORT": np.uint16,
    "MET_SHORT": np.int16,
    "MET_UINT": np.uint32,
    "MET_INT": np.int32,
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
}
_MET_NAMES = {np.dtype(v): k for k, v in _MET_TYPES.items()}


def save_volume(volume: CTVolume, path) -> None:
    """Write a volume; format chosen by extension (.vol plain, .mha MetaImage)."""
    path = Path(path)
    if path.suffix == ".vol":
        _save_plain(volume, path)
    elif path.suffix in (".mha", ".mhd"):
        _save_metaimage(volume, path)
    else:
        raise VolumeFormatError(f"unsupported volume extension {path.suffix!r}")


def load_volume(path) -> CTVolume:
    """Read a volume written by save_volume (or a compatible MetaImage file)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    if path.suffix == ".vol":
        return _load_plain(path)
    if path.suffix in (".mha", ".mhd"):
        return _load_metaimage(path)
    raise VolumeFormatError(f"unsupported volume extension {path.suffix!r}")


def _save_plain(volume, path):
    header = {
        "shape": list(volume.shape),
        "spacing": list(volume.spacing),
        "origin": list(volume.origin),
        "orientation": list(volume.orientation),
        "dtype": volume.voxels.dtype.newbyteorder("<").str,
    }
    data = np.ascontiguousarray(volume.voxels).astype(volume.voxels.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(data.tobytes())


def _load_plain(path):
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: bad volume header: {exc}") from exc
    for key in ("shape", "spacing", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"{path}: volume header missing {key!r}")
    shape = tuple(int(n) for n in header["shape"])
    dtype = np.dtype(header["dtype"])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: truncated or oversized payload ({len(payload)} bytes, expected {expected})"
        )
    voxels = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return CTVolume(
        voxels=voxels.copy(),
        spacing=tuple(header["spacing"]),
        origin=tuple(header.get("origin", (0.0, 0.0, 0.0))),
        orientation=tuple(header.get("orientation", ("L", "P", "S"))),
    )


def _orientation_from_direction(matrix):
    """Nearest orientation codes for a direction-cosine matrix (columns = axes)."""
    codes = []
    for col in np.asarray(matrix, dtype=float).T:
        axis = int(np.argmax(np.abs(col)))
        sign = 1.0 if col[axis] >= 0 else -1.0
        codes.append({0: ("L", "R"), 1: ("P", "A"), 2: ("S", "I")}[axis][0 if sign > 0 else 1])
    return tuple(codes)


def _save_metaimage(volume, path):
    if path.suffix != ".mha":
        raise VolumeFormatError("only single-file MetaImage (.mha) writing is supported")
    dtype = np.dtype(volume.voxels.dtype)
    if dtype not in _MET_NAMES:
        raise VolumeFormatError(f"dtype {dtype} has no MetaImage element type")
    direction = volume.direction_matrix()
    # MetaImage stores data with x fastest; our arrays are C-ordered (i, j, k),
    # so DimSize is reported in reversed axis order.
    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = " + " ".join(f"{v:.10g}" for v in direction.T.flatten()),
        "Offset = " + " ".join(f"{v:.10g}" for v in volume.origin),
        "ElementSpacing = " + " ".join(f"{v:.10g}" for v in volume.spacing),
        "DimSize = " + " ".join(str(n) for n in volume.shape),
        f"ElementType = {_MET_NAMES[dtype]}",
        "ElementDataFile = LOCAL",
    ]
    data = np.ascontiguousarray(volume.voxels, dtype=dtype.newbyteorder("<"))
    # LOCAL data follows the header with x varying fastest: transpose to (k, j, i).
    raw = np.transpose(data, (2, 1, 0)).tobytes()
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(raw)


def _load_metaimage(path):
    raw = path.read_bytes()
    fields = {}
    offset = 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise VolumeFormatError(f"{path}: header never terminated")
        line = raw[offset:end].decode("ascii", errors="replace").strip()
        offset = end + 1
        if "=" not in line:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            break

    if fields.get("CompressedData", "False").lower() == "true":
        raise VolumeFormatError(f"{path}: compressed MetaImage data is not supported")
    if "ElementSpacing" not in fields:
        raise VolumeFormatError(f"{path}: header missing ElementSpacing")
    if fields.get("ElementDataFile") != "LOCAL":
        data_path = path.parent / fields["ElementDataFile"]
        if not data_path.exists():
            raise VolumeFormatError(f"{path}: element data file {data_path} not found")
        payload = data_path.read_bytes()
    else:
        payload = raw[offset:]

    shape = tuple(int(n) for n in fields["DimSize"].split())
    spacing = tuple(float(v) for v in fields["ElementSpacing"].split())
    origin = tuple(float(v) for v in fields.get("Offset", "0 0 0").split())
    el_type = fields.get("ElementType", "MET_FLOAT")
    if el_type not in _MET_TYPES:
        raise VolumeFormatError(f"{path}: unsupported ElementType {el_type}")
    dtype = np.dtype(_MET_TYPES[el_type])
    if fields.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        dtype = dtype.newbyteorder(">")
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) < expected:
        raise VolumeFormatError(f"{path}: truncated payload ({len(payload)} < {expected} bytes)")
    if "TransformMatrix" in fields:
        matrix = np.array([float(v) for v in fields["TransformMatrix"].split()]).reshape(3, 3).T
        orientation = _orientation_from_direction(matrix)
    else:
        orientation = ("L", "P", "S")
    # Stored x-fastest: read as (k, j, i) then transpose back.
    grid = np.frombuffer(payload[:expected], dtype=dtype).reshape(shape[::-1])
    voxels = np.ascontiguousarray(np.transpose(grid, (2, 1, 0)))
    return CTVolume(voxels=voxels, spacing=spacing, origin=origin, orientation=orientation)


def save_landmarks(pair: LandmarkPair, patient_id: str, path) -> None:
    payload = {
        "patient_id": patient_id,
        "right_fhc": list(pair.right_fhc),
        "left_fhc": list(pair.left_fhc),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_landmarks(path) -> tuple[str, LandmarkPair]:
    payload = json.loads(Path(path).read_text())
    for key in ("patient_id", "right_fhc", "left_fhc"):
        if key not in payload:
            raise VolumeFormatError(f"{path}: landmarks file missing {key!r}")
    return payload["patient_id"], LandmarkPair(
        right_fhc=tuple(float(v) for v in payload["right_fhc"]),
        left_fhc=tuple(float(v) for v in payload["left_fhc"]),
    )
