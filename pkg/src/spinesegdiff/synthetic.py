"""Synthetic lumbar-slice toy data for tests and demos.

The toy anatomy is intensity-coded: each structure is drawn with a
distinct brightness band, so a small network can learn the mapping from
image to mask in a couple of thousand optimizer steps on a CPU.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import (
    NUM_CLASSES,
    PATHOLOGY_COLUMNS,
    PatientRecord,
    SliceSample,
    Volume,
)
from .nifti import write_nifti

TOY_SIZE = 64
PFIRRMANN_LEVELS = ("l1_l2", "l2_l3", "l3_l4", "l4_l5", "l5_s1")

# mean intensity per class index, per modality
_INTENSITY = {
    "t1": {0: 25.0, 1: 235.0, 2: 150.0, 3: 85.0},
    "t2": {0: 25.0, 1: 120.0, 2: 200.0, 3: 60.0},
}
_NOISE_SIGMA = 4.0


def _draw_class_map(rng: np.random.Generator, size: int) -> np.ndarray:
    """Class-index map [size, size]: canal band, vertebra blocks, disc gaps."""

    classes = np.zeros((size, size), dtype=np.int32)

    # vertebral column: stacked blocks separated by disc gaps
    col_lo = int(size * 0.40) + int(rng.integers(-2, 3))
    col_hi = int(size * 0.68) + int(rng.integers(-2, 3))
    block = max(4, int(size * 0.16))
    gap = max(2, int(size * 0.05))
    row = int(rng.integers(0, gap + 1))
    while row < size:
        top = row
        bottom = min(size, row + block)
        classes[top:bottom, col_lo:col_hi] = 2
        if bottom < size:
            classes[bottom : min(size, bottom + gap), col_lo:col_hi] = 3
        row = bottom + gap

    # spinal canal: narrow vertical band posterior to the column
    canal_lo = int(size * 0.74) + int(rng.integers(-1, 2))
    canal_hi = canal_lo + max(3, int(size * 0.08))
    classes[:, canal_lo : min(size, canal_hi)] = 1
    return classes


def _render_image(
    rng: np.random.Generator, classes: np.ndarray, modality: str
) -> np.ndarray:
    table = _INTENSITY[modality]
    image = np.zeros(classes.shape, dtype=np.float64)
    for cls, mean in table.items():
        image[classes == cls] = mean
    image += rng.normal(0.0, _NOISE_SIGMA, size=classes.shape)
    return np.clip(image, 0.0, 255.0).astype(np.float32)


def _class_onehot(classes: np.ndarray) -> np.ndarray:
    onehot = np.zeros((NUM_CLASSES,) + classes.shape, dtype=np.uint8)
    for cls in range(NUM_CLASSES):
        onehot[cls] = classes == cls
    return onehot


def make_toy_sample(
    patient_id: str,
    modality: str = "t1",
    size: int = TOY_SIZE,
    seed: int = 0,
    oblique: bool = False,
) -> SliceSample:
    rng = np.random.default_rng(seed)
    classes = _draw_class_map(rng, size)
    image = _render_image(rng, classes, modality)
    return SliceSample(
        image=image[None],
        mask=_class_onehot(classes),
        patient_id=patient_id,
        modality=modality,
        oblique=oblique,
    )


def _toy_record(rng: np.random.Generator, patient_id: str, oblique: bool) -> PatientRecord:
    pathologies = {name: bool(rng.random() < 0.4) for name in PATHOLOGY_COLUMNS}
    pfirrmann = {level: int(rng.integers(1, 6)) for level in PFIRRMANN_LEVELS}
    return PatientRecord(
        patient_id=patient_id,
        oblique=oblique,
        pathologies=pathologies,
        pfirrmann=pfirrmann,
    )


def make_toy_dataset(
    n_patients: int = 6,
    modalities: tuple[str, ...] = ("t1",),
    size: int = TOY_SIZE,
    seed: int = 0,
    oblique_every: int = 0,
) -> tuple[list[SliceSample], list[PatientRecord]]:
    """In-memory toy cohort: one sample per patient and modality.

    ``oblique_every`` marks every n-th patient oblique (0 disables).
    """

    rng = np.random.default_rng(seed)
    samples: list[SliceSample] = []
    records: list[PatientRecord] = []
    for idx in range(n_patients):
        pid = f"p{idx:02d}"
        oblique = oblique_every > 0 and idx % oblique_every == oblique_every - 1
        records.append(_toy_record(rng, pid, oblique))
        for modality in modalities:
            samples.append(
                make_toy_sample(
                    pid,
                    modality=modality,
                    size=size,
                    seed=int(rng.integers(0, 2**31)),
                    oblique=oblique,
                )
            )
    return samples, records


# ---------------------------------------------------------------------------
# volume fixtures on disk

# raw label codes written into fixture volumes (see the default scheme)
_RAW_CODES = {0: 0, 1: 100, 3: 201}
_VB_BASE = 10  # vertebra instances count up from here


def _classes_to_raw(classes: np.ndarray) -> np.ndarray:
    """Expand class indices into raw codes with per-block vertebra instances."""

    raw = np.zeros(classes.shape, dtype=np.int16)
    for cls, code in _RAW_CODES.items():
        raw[classes == cls] = code
    vb = classes == 2
    # label connected runs of vertebra rows with distinct instance codes
    rows = np.where(vb.any(axis=1))[0]
    if rows.size:
        breaks = np.where(np.diff(rows) > 1)[0]
        starts = np.concatenate(([0], breaks + 1))
        ends = np.concatenate((breaks, [rows.size - 1]))
        for instance, (a, b) in enumerate(zip(starts, ends)):
            band = slice(rows[a], rows[b] + 1)
            raw[band][vb[band]] = _VB_BASE + instance
    return raw


def _oblique_affine(spacing: tuple[float, float, float], angle_deg: float) -> np.ndarray:
    """RAS-ish affine with the A/S axes rotated about R by ``angle_deg``."""

    theta = np.deg2rad(angle_deg)
    rot = np.array(
        [
            [1.0, 0.0, 0.0],
            [0.0, np.cos(theta), -np.sin(theta)],
            [0.0, np.sin(theta), np.cos(theta)],
        ]
    )
    affine = np.eye(4)
    affine[:3, :3] = rot @ np.diag(spacing)
    return affine


def scramble_volume(volume: Volume, perm: tuple[int, int, int], flips: tuple[bool, bool, bool]) -> Volume:
    """Store a volume under a different axis order/direction.

    The world geometry is unchanged, so reorienting the result to RAS+
    recovers the original sampling grid.
    """

    data = np.transpose(volume.voxels, perm)
    transform = np.zeros((4, 4))
    transform[3, 3] = 1.0
    for i in range(3):
        if flips[i]:
            data = np.flip(data, axis=i)
            transform[perm[i], i] = -1.0
            transform[perm[i], 3] = data.shape[i] - 1
        else:
            transform[perm[i], i] = 1.0
    return Volume(
        voxels=np.ascontiguousarray(data),
        affine=volume.affine @ transform,
        is_label=volume.is_label,
    )


def make_toy_volume_pair(
    modality: str = "t1",
    seed: int = 0,
    oblique: bool = False,
    shape: tuple[int, int, int] = (7, 40, 44),
    spacing: tuple[float, float, float] = (2.0, 1.25, 1.25),
) -> tuple[Volume, Volume]:
    """A 3D image/label pair whose central sagittal slice holds the anatomy."""

    rng = np.random.default_rng(seed)
    classes2d = _draw_class_map(rng, max(shape[1], shape[2]))[: shape[1], : shape[2]]
    raw2d = _classes_to_raw(classes2d)
    labels = np.repeat(raw2d[None], shape[0], axis=0)
    image = np.stack(
        [_render_image(rng, classes2d, modality) for _ in range(shape[0])]
    )
    affine = _oblique_affine(spacing, 12.0) if oblique else np.diag(list(spacing) + [1.0])
    return (
        Volume(voxels=image, affine=affine, is_label=False),
        Volume(voxels=labels, affine=affine, is_label=True),
    )


def write_toy_fixture(
    root: str | Path,
    n_patients: int = 2,
    modalities: tuple[str, ...] = ("t1", "t2"),
    seed: int = 0,
    oblique_ids: tuple[int, ...] = (1,),
) -> Path:
    """Write a small on-disk cohort: images/, labels/, metadata.csv.

    One volume is stored axis-scrambled to exercise reorientation.
    """

    root = Path(root)
    images = root / "images"
    labels = root / "labels"
    images.mkdir(parents=True, exist_ok=True)
    labels.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    rows = []
    for idx in range(n_patients):
        pid = f"p{idx:02d}"
        oblique = idx in oblique_ids
        record = _toy_record(rng, pid, oblique)
        row = {"patient_id": pid, "oblique": int(oblique)}
        row.update({name: int(record.pathologies[name]) for name in PATHOLOGY_COLUMNS})
        row.update(
            {f"pfirrmann_{level}": record.pfirrmann[level] for level in PFIRRMANN_LEVELS}
        )
        rows.append(row)
        for m_idx, modality in enumerate(modalities):
            image, label = make_toy_volume_pair(
                modality=modality,
                seed=int(rng.integers(0, 2**31)),
                oblique=oblique,
            )
            if idx == 0 and m_idx == len(modalities) - 1:
                image = scramble_volume(image, (2, 0, 1), (False, True, False))
                label = scramble_volume(label, (2, 0, 1), (False, True, False))
            write_nifti(images / f"{pid}_{modality}.nii.gz", image.voxels, image.affine)
            write_nifti(labels / f"{pid}_{modality}.nii.gz", label.voxels, label.affine)

    fieldnames = list(rows[0].keys())
    with (root / "metadata.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return root


def corrupt_mask(mask: np.ndarray, fraction: float = 0.1, seed: int = 0) -> np.ndarray:
    """Flip a fraction of pixels to a different random class (one-hot in/out)."""

    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    classes = np.argmax(np.asarray(mask), axis=0)
    rng = np.random.default_rng(seed)
    n_pixels = classes.size
    n_flip = int(round(fraction * n_pixels))
    flat = classes.reshape(-1).copy()
    if n_flip:
        idx = rng.choice(n_pixels, size=n_flip, replace=False)
        offsets = rng.integers(1, NUM_CLASSES, size=n_flip)
        flat[idx] = (flat[idx] + offsets) % NUM_CLASSES
    corrupted = flat.reshape(classes.shape)
    return _class_onehot(corrupted)
