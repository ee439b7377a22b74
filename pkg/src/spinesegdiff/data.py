"""Volume ingestion and the slice preprocessing pipeline.

Raw studies arrive as aligned image/label volume pairs plus a patient
metadata table.  The pipeline turns each pair into a single 2D training
sample: normalize intensities, reorient to RAS+, resample to 1mm,
take the central sagittal slice, resize to a square grid, and encode
the raw label codes as a one-hot mask.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from importlib import resources as importlib_resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nifti import NiftiError, read_nifti, write_nifti

NUM_CLASSES = 4
CLASS_NAMES = ("background", "sc", "vb", "ivd")
STRUCTURES = ("sc", "vb", "ivd")
SLICE_SIZE = 320
NORMALIZE_PERCENTILE = 98.0
IMAGE_MAX = 255.0

PATHOLOGY_COLUMNS = (
    "spondylolisthesis",
    "disc_herniation",
    "modic_changes",
    "upper_endplate_changes",
    "lower_endplate_changes",
    "disc_narrowing",
    "disc_bulging",
)
DISC_DEGENERATION = "disc_degeneration"
PFIRRMANN_CUTOFF = 4

_TRUE_TOKENS = {"1", "true", "yes", "y", "t"}
_FALSE_TOKENS = {"0", "false", "no", "n", "f", ""}


class DataError(ValueError):
    """Raised when a volume, label map, or metadata table is malformed."""


@dataclass
class Volume:
    """A 3D scalar grid with a voxel-to-world affine.

    ``is_label`` selects nearest-neighbour resampling and forbids
    intensity operations.
    """

    voxels: np.ndarray
    affine: np.ndarray
    is_label: bool = False

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise DataError(f"expected a 3D volume, got shape {self.voxels.shape}")
        if self.affine.shape != (4, 4):
            raise DataError(f"affine must be 4x4, got {self.affine.shape}")
        if not np.all(np.isfinite(self.affine)):
            raise DataError("affine contains non-finite entries")
        if np.any(self.spacing() <= 0):
            raise DataError("voxel spacing must be positive")
        if self.is_label:
            rounded = np.round(self.voxels)
            if not np.allclose(self.voxels, rounded):
                raise DataError("label volume contains non-integer values")
            if rounded.min() < 0:
                raise DataError("label volume contains negative codes")
            self.voxels = rounded.astype(np.int32)

    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def axis_codes(self) -> tuple[str, str, str]:
        return axis_codes(self.affine)


def load_volume(path: str | Path, is_label: bool = False) -> Volume:
    data, affine = read_nifti(path)
    if data.ndim == 2:
        data = data[:, :, None]
    if not np.all(np.isfinite(affine)):
        raise DataError(f"{path}: orientation is unresolvable (no usable affine)")
    return Volume(voxels=data, affine=affine, is_label=is_label)


# ---------------------------------------------------------------------------
# orientation


def axis_codes(affine: np.ndarray) -> tuple[str, str, str]:
    """Nearest anatomical code per voxel axis, e.g. ``('R', 'A', 'S')``.

    Codes name the world direction a voxel axis points towards with
    increasing index: R/L, A/P, S/I.
    """

    mat = np.asarray(affine, dtype=np.float64)[:3, :3]
    if np.linalg.matrix_rank(mat) < 3:
        raise DataError("orientation is unresolvable (singular affine)")
    pos = "RAS"
    neg = "LPI"
    codes: list[str | None] = [None, None, None]
    taken: set[int] = set()
    # Assign the most decisive voxel axis first so near-oblique volumes
    # still get a bijective labelling.
    order = np.argsort(-np.max(np.abs(mat), axis=0))
    for j in order:
        column = mat[:, j].copy()
        column[list(taken)] = 0.0
        world = int(np.argmax(np.abs(column)))
        taken.add(world)
        codes[j] = pos[world] if column[world] > 0 else neg[world]
    return tuple(codes)  # type: ignore[return-value]


def reorient_ras(volume: Volume) -> Volume:
    """Permute and flip voxel axes so the volume is RAS+.

    World coordinates are preserved exactly; an already-RAS+ volume is
    returned unchanged (same array, same affine).
    """

    codes = volume.axis_codes()
    if codes == ("R", "A", "S"):
        return volume

    pos = "RAS"
    neg = "LPI"
    # source voxel axis and flip flag for each target world axis
    perm = [0, 0, 0]
    flip = [False, False, False]
    for j, code in enumerate(codes):
        if code in pos:
            perm[pos.index(code)] = j
        else:
            perm[neg.index(code)] = j
            flip[neg.index(code)] = True

    data = np.transpose(volume.voxels, perm)
    shape = data.shape
    transform = np.zeros((4, 4), dtype=np.float64)
    transform[3, 3] = 1.0
    for i in range(3):
        j = perm[i]
        if flip[i]:
            data = np.flip(data, axis=i)
            transform[j, i] = -1.0
            transform[j, 3] = shape[i] - 1
        else:
            transform[j, i] = 1.0
    new_affine = volume.affine @ transform
    return replace(volume, voxels=np.ascontiguousarray(data), affine=new_affine)


# ---------------------------------------------------------------------------
# intensity and geometry


def normalize_intensity(volume: Volume) -> Volume:
    """Scale intensities into [0, 255] by the 98th percentile, clipping above."""

    if volume.is_label:
        raise DataError("normalize_intensity is an image operation")
    vox = volume.voxels.astype(np.float64)
    if not np.all(np.isfinite(vox)):
        raise DataError("image volume contains non-finite intensities")
    p98 = float(np.percentile(vox, NORMALIZE_PERCENTILE))
    if p98 <= 0:
        raise DataError("98th percentile is not positive, cannot normalize")
    out = np.clip(vox / p98, 0.0, 1.0) * IMAGE_MAX
    return replace(volume, voxels=out.astype(np.float32))


def resample_isotropic(volume: Volume, target: float = 1.0) -> Volume:
    """Resample so every voxel axis has ``target`` mm spacing.

    Images interpolate linearly, labels by nearest neighbour so no new
    codes appear.
    """

    if target <= 0:
        raise DataError("target spacing must be positive")
    spacing = volume.spacing()
    factors = spacing / target
    if np.allclose(factors, 1.0):
        return volume
    order = 0 if volume.is_label else 1
    data = ndimage.zoom(
        volume.voxels.astype(np.float64),
        zoom=factors,
        order=order,
        mode="nearest",
        grid_mode=True,
        prefilter=False,
    )
    new_affine = volume.affine.copy()
    new_affine[:3, :3] = volume.affine[:3, :3] / factors[None, :]
    # grid_mode=True keeps the field of view; re-centre voxel (0,0,0).
    shift = 0.5 / factors - 0.5
    new_affine[:3, 3] = volume.affine[:3, :3] @ shift + volume.affine[:3, 3]
    if volume.is_label:
        data = np.round(data).astype(np.int32)
    else:
        data = data.astype(np.float32)
    return replace(volume, voxels=data, affine=new_affine)


def extract_central_slice(volume: Volume) -> np.ndarray:
    """Central sagittal slice of an RAS+ volume (index ``size // 2`` on R)."""

    if volume.axis_codes() != ("R", "A", "S"):
        raise DataError("central slice extraction requires an RAS+ volume")
    index = volume.voxels.shape[0] // 2
    return np.asarray(volume.voxels[index])


def resize_slice(slice2d: np.ndarray, size: int = SLICE_SIZE, is_label: bool = False) -> np.ndarray:
    """Zero-pad to square (centred) then scale to ``size`` x ``size``.

    Padding before scaling preserves the aspect ratio.  Labels use
    nearest-neighbour sampling.
    """

    arr = np.asarray(slice2d)
    if arr.ndim != 2:
        raise DataError(f"expected a 2D slice, got shape {arr.shape}")
    if size <= 0:
        raise DataError("target size must be positive")
    h, w = arr.shape
    side = max(h, w)
    pad_h = side - h
    pad_w = side - w
    pads = (
        (pad_h // 2, pad_h - pad_h // 2),
        (pad_w // 2, pad_w - pad_w // 2),
    )
    arr = np.pad(arr, pads, mode="constant", constant_values=0)
    if side == size:
        out = arr.astype(np.float64)
    else:
        # Sample output pixel centres back in input pixel coordinates.
        scale = side / size
        centres = (np.arange(size) + 0.5) * scale - 0.5
        rows, cols = np.meshgrid(centres, centres, indexing="ij")
        out = ndimage.map_coordinates(
            arr.astype(np.float64),
            [rows, cols],
            order=0 if is_label else 1,
            mode="nearest",
        )
    if is_label:
        return np.round(out).astype(np.int32)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# label encoding


def load_label_scheme(path: str | Path | None = None) -> dict[str, list[tuple[int, int]]]:
    """Load raw-code ranges per structure; ``None`` loads the bundled default."""

    if path is None:
        text = (
            importlib_resources.files("spinesegdiff.resources")
            .joinpath("label_scheme_default.json")
            .read_text()
        )
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    scheme: dict[str, list[tuple[int, int]]] = {}
    for name in STRUCTURES:
        if name not in raw:
            raise DataError(f"label scheme is missing the '{name}' entry")
        ranges = []
        for pair in raw[name]:
            lo, hi = int(pair[0]), int(pair[1])
            if lo > hi or lo < 1:
                raise DataError(f"bad range [{lo}, {hi}] for '{name}'")
            ranges.append((lo, hi))
        scheme[name] = ranges
    # Overlapping ranges would make the encoding ambiguous.
    seen: dict[int, str] = {}
    for name, ranges in scheme.items():
        for lo, hi in ranges:
            for code in range(lo, hi + 1):
                if code in seen and seen[code] != name:
                    raise DataError(
                        f"label code {code} claimed by both '{seen[code]}' and '{name}'"
                    )
                seen[code] = name
    return scheme


CANONICAL_SCHEME: dict[str, list[tuple[int, int]]] = {
    "sc": [(1, 1)],
    "vb": [(2, 2)],
    "ivd": [(3, 3)],
}


def encode_mask(
    labels: np.ndarray, scheme: dict[str, list[tuple[int, int]]] | None = None
) -> np.ndarray:
    """Map raw label codes to a one-hot mask [4, H, W] (uint8).

    Channel order is background, spinal canal, vertebral body,
    intervertebral disc.  All vertebra instance codes collapse into the
    single vertebral-body channel.  Codes outside the scheme raise.
    """

    if scheme is None:
        scheme = load_label_scheme()
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DataError(f"expected a 2D label slice, got shape {arr.shape}")
    codes = np.round(arr).astype(np.int64)
    class_map = np.full(arr.shape, -1, dtype=np.int64)
    class_map[codes == 0] = 0
    for channel, name in enumerate(STRUCTURES, start=1):
        for lo, hi in scheme[name]:
            class_map[(codes >= lo) & (codes <= hi)] = channel
    if np.any(class_map < 0):
        unknown = sorted(np.unique(codes[class_map < 0]).tolist())
        raise DataError(f"unknown label codes: {unknown}")
    onehot = np.zeros((NUM_CLASSES,) + arr.shape, dtype=np.uint8)
    for channel in range(NUM_CLASSES):
        onehot[channel] = class_map == channel
    return onehot


def mask_to_classes(onehot: np.ndarray) -> np.ndarray:
    """Collapse a one-hot mask [C, H, W] back to a class-index map."""

    arr = np.asarray(onehot)
    if arr.ndim != 3:
        raise DataError(f"expected [C, H, W], got shape {arr.shape}")
    sums = arr.sum(axis=0)
    if not np.all(sums == 1):
        raise DataError("mask channels are not one-hot")
    return np.argmax(arr, axis=0).astype(np.int32)


# ---------------------------------------------------------------------------
# samples


@dataclass
class SliceSample:
    """One preprocessed 2D training sample."""

    image: np.ndarray  # float32 [1, S, S] in [0, 255]
    mask: np.ndarray  # uint8 one-hot [4, S, S]
    patient_id: str
    modality: str
    oblique: bool = False

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        self.validate()

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DataError(f"image must be [1, S, S], got {self.image.shape}")
        if self.mask.shape != (NUM_CLASSES,) + self.image.shape[1:]:
            raise DataError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape}"
            )
        if self.image.min() < 0 or self.image.max() > IMAGE_MAX:
            raise DataError("image intensities must lie in [0, 255]")
        if not np.all(self.mask.sum(axis=0) == 1):
            raise DataError("mask channels must be one-hot at every pixel")

    @property
    def size(self) -> int:
        return int(self.image.shape[1])

    def key(self) -> str:
        return f"{self.patient_id}_{self.modality}"


def save_sample(directory: str | Path, sample: SliceSample) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{sample.key()}.npz"
    np.savez_compressed(path, image=sample.image, mask=sample.mask)
    meta = {
        "patient_id": sample.patient_id,
        "modality": sample.modality,
        "oblique": sample.oblique,
        "size": sample.size,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_sample(path: str | Path) -> SliceSample:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with np.load(path) as arrays:
        image = arrays["image"]
        mask = arrays["mask"]
    return SliceSample(
        image=image,
        mask=mask,
        patient_id=str(meta["patient_id"]),
        modality=str(meta["modality"]),
        oblique=bool(meta["oblique"]),
    )


def list_samples(directory: str | Path) -> list[SliceSample]:
    directory = Path(directory)
    return [load_sample(p) for p in sorted(directory.glob("*.npz"))]


# ---------------------------------------------------------------------------
# patient metadata


@dataclass
class PatientRecord:
    """Per-patient demographics and pathology flags from the metadata table."""

    patient_id: str
    oblique: bool = False
    pathologies: dict[str, bool] = field(default_factory=dict)
    pfirrmann: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in self.pathologies:
            if name not in PATHOLOGY_COLUMNS:
                raise DataError(f"unknown pathology column '{name}'")
        for level, grade in self.pfirrmann.items():
            if not 1 <= int(grade) <= 5:
                raise DataError(f"Pfirrmann grade {grade} at {level} is out of range")

    def has_pathology(self, name: str, cutoff: int = PFIRRMANN_CUTOFF) -> bool:
        if name == DISC_DEGENERATION:
            return any(int(g) >= cutoff for g in self.pfirrmann.values())
        if name not in PATHOLOGY_COLUMNS:
            raise DataError(f"unknown pathology '{name}'")
        return bool(self.pathologies.get(name, False))


def _parse_bool(token: str, column: str) -> bool:
    low = token.strip().lower()
    if low in _TRUE_TOKENS:
        return True
    if low in _FALSE_TOKENS:
        return False
    raise DataError(f"cannot parse boolean '{token}' in column '{column}'")


def load_patient_records(path: str | Path) -> list[PatientRecord]:
    """Read the metadata CSV: patient_id, oblique, pathology flags, pfirrmann_* grades."""

    path = Path(path)
    records: list[PatientRecord] = []
    seen: set[str] = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "patient_id" not in reader.fieldnames:
            raise DataError(f"{path}: metadata table needs a 'patient_id' column")
        for row in reader:
            pid = (row.get("patient_id") or "").strip()
            if not pid:
                raise DataError(f"{path}: empty patient_id")
            if pid in seen:
                raise DataError(f"{path}: duplicate patient_id '{pid}'")
            seen.add(pid)
            pathologies = {
                name: _parse_bool(row[name], name)
                for name in PATHOLOGY_COLUMNS
                if row.get(name) is not None
            }
            pfirrmann = {}
            for column, value in row.items():
                if column.startswith("pfirrmann_") and value not in (None, ""):
                    pfirrmann[column[len("pfirrmann_"):]] = int(value)
            oblique = _parse_bool(row.get("oblique", "0") or "0", "oblique")
            records.append(
                PatientRecord(
                    patient_id=pid,
                    oblique=oblique,
                    pathologies=pathologies,
                    pfirrmann=pfirrmann,
                )
            )
    return records


# ---------------------------------------------------------------------------
# end-to-end pipeline


def preprocess_pair(
    image: Volume,
    labels: Volume,
    patient_id: str,
    modality: str,
    oblique: bool = False,
    size: int = SLICE_SIZE,
    scheme: dict[str, list[tuple[int, int]]] | None = None,
) -> SliceSample:
    """Run the full preprocessing pipeline on one aligned image/label pair."""

    if image.is_label or not labels.is_label:
        raise DataError("preprocess_pair expects (image, labels) in that order")
    if image.voxels.shape != labels.voxels.shape:
        raise DataError(
            f"image/label grids differ: {image.voxels.shape} vs {labels.voxels.shape}"
        )
    if not np.allclose(image.affine, labels.affine, atol=1e-4):
        raise DataError("image and label volumes are not spatially aligned")

    image = normalize_intensity(image)
    image = reorient_ras(image)
    labels = reorient_ras(labels)
    image = resample_isotropic(image)
    labels = resample_isotropic(labels)
    img_slice = extract_central_slice(image)
    lab_slice = extract_central_slice(labels)
    img_resized = resize_slice(img_slice, size=size, is_label=False)
    lab_resized = resize_slice(lab_slice, size=size, is_label=True)
    mask = encode_mask(lab_resized, scheme=scheme)
    # Interpolation can nudge values a hair past the clip bound.
    img_resized = np.clip(img_resized, 0.0, IMAGE_MAX)
    return SliceSample(
        image=img_resized[None],
        mask=mask,
        patient_id=patient_id,
        modality=modality,
        oblique=oblique,
    )


def discover_pairs(image_dir: str | Path, label_dir: str | Path) -> list[tuple[Path, Path, str, str]]:
    """Match ``<patient>_<modality>.nii[.gz]`` images with same-named labels."""

    image_dir = Path(image_dir)
    label_dir = Path(label_dir)
    pairs = []
    paths = sorted(set(image_dir.glob("*.nii")) | set(image_dir.glob("*.nii.gz")))
    if not paths:
        raise DataError(f"no NIfTI volumes found in {image_dir}")
    for img_path in paths:
        stem = img_path.name
        for suffix in (".nii.gz", ".nii"):
            if stem.endswith(suffix):
                stem = stem[: -len(suffix)]
                break
        if "_" not in stem:
            raise DataError(f"{img_path.name}: expected '<patient>_<modality>' naming")
        pid, modality = stem.rsplit("_", 1)
        lab_path = label_dir / img_path.name
        if not lab_path.exists():
            alt = label_dir / (stem + (".nii" if img_path.name.endswith(".nii.gz") else ".nii.gz"))
            if alt.exists():
                lab_path = alt
            else:
                raise DataError(f"no label volume for {img_path.name} in {label_dir}")
        pairs.append((img_path, lab_path, pid, modality))
    return pairs


def build_dataset(
    image_dir: str | Path,
    label_dir: str | Path,
    metadata_csv: str | Path,
    out_dir: str | Path | None = None,
    size: int = SLICE_SIZE,
    scheme_path: str | Path | None = None,
    error_log: list[tuple[str, str]] | None = None,
    jobs: int = 1,
) -> tuple[list[SliceSample], list[PatientRecord]]:
    """Preprocess every image/label pair and link it to its patient record.

    With ``error_log`` given, per-volume failures are appended to it as
    (filename, reason) and processing continues; otherwise the first
    failure raises. ``jobs`` bounds per-volume parallelism; outputs do
    not depend on it.
    """

    records = load_patient_records(metadata_csv)
    by_id = {r.patient_id: r for r in records}
    scheme = load_label_scheme(scheme_path)

    def process(pair) -> SliceSample:
        img_path, lab_path, pid, modality = pair
        record = by_id.get(pid)
        if record is None:
            raise DataError(f"{img_path.name}: patient '{pid}' is not in the metadata table")
        image = load_volume(img_path, is_label=False)
        labels = load_volume(lab_path, is_label=True)
        return preprocess_pair(
            image,
            labels,
            patient_id=pid,
            modality=modality,
            oblique=record.oblique,
            size=size,
            scheme=scheme,
        )

    pairs = discover_pairs(image_dir, label_dir)
    outcomes: list[SliceSample | Exception]
    if jobs > 1 and len(pairs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        def safe(pair):
            try:
                return process(pair)
            except (DataError, NiftiError, OSError) as exc:
                return exc

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(safe, pairs))
    else:
        outcomes = []
        for pair in pairs:
            try:
                outcomes.append(process(pair))
            except (DataError, NiftiError, OSError) as exc:
                outcomes.append(exc)

    samples: list[SliceSample] = []
    for pair, outcome in zip(pairs, outcomes):
        if isinstance(outcome, Exception):
            if error_log is None:
                raise outcome
            error_log.append((pair[0].name, str(outcome)))
            continue
        samples.append(outcome)
        if out_dir is not None:
            save_sample(out_dir, outcome)
    return samples, records


def export_label_slice(path: str | Path, label_map: np.ndarray) -> None:
    """Write a 2D class-index map as a single-slice NIfTI volume."""

    arr = np.asarray(label_map)
    if arr.ndim != 2:
        raise DataError(f"expected a 2D label map, got shape {arr.shape}")
    write_nifti(path, arr.astype(np.int16)[:, :, None])
