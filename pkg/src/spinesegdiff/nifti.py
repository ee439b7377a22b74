"""Minimal single-file NIfTI-1 reader/writer.

Covers what the pipeline needs: .nii / .nii.gz volumes up to 3D, the
common scalar dtypes, qform/sform affines, and optional scl scaling on
read. Written files carry an sform affine (code 2) and no extensions.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


def _open_maybe_gz(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _quaternion_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = -1.0 if hdr["pixdim"][0] == -1.0 else 1.0
    scales = np.array([hdr["pixdim"][1], hdr["pixdim"][2], qfac * hdr["pixdim"][3]])
    aff = np.eye(4)
    aff[:3, :3] = rot * scales[None, :]
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def read_nifti(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a single-file NIfTI-1 volume.

    Returns (data, affine). Data keeps its on-disk dtype unless the
    header requests scl scaling, in which case it is float32. The
    affine prefers sform, falls back to qform; if neither is coded the
    affine is NaN-filled to signal missing orientation.
    """
    path = Path(path)
    try:
        with _open_maybe_gz(path) as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise NiftiError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes)")

    end = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        end = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}")
    if magic != MAGIC_SINGLE:
        raise NiftiError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")

    dim = struct.unpack_from(end + "8h", raw, 40)
    datatype, _bitpix = struct.unpack_from(end + "2h", raw, 70)
    pixdim = struct.unpack_from(end + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(end + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(end + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(end + "2h", raw, 252)
    quatern = struct.unpack_from(end + "3f", raw, 256)
    qoffset = struct.unpack_from(end + "3f", raw, 268)
    srow = np.array(struct.unpack_from(end + "12f", raw, 280), dtype=np.float64).reshape(3, 4)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: bad ndim {ndim}")
    shape = tuple(max(int(s), 1) for s in dim[1 : ndim + 1])
    # collapse trailing singleton dims beyond 3
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if len(shape) > 3:
        raise NiftiError(f"{path}: >3 non-singleton dimensions unsupported ({shape})")
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(end)

    offset = int(vox_offset) if vox_offset else VOX_OFFSET
    count = int(np.prod(shape))
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiError(f"{path}: truncated data ({len(raw)} < {need} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").copy()
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = (data.astype(np.float32) * slope + scl_inter).astype(np.float32)
    else:
        data = data.astype(data.dtype.newbyteorder("="))

    if sform_code > 0:
        affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
    elif qform_code > 0:
        hdr = {
            "pixdim": pixdim,
            "quatern_b": quatern[0], "quatern_c": quatern[1], "quatern_d": quatern[2],
            "qoffset_x": qoffset[0], "qoffset_y": qoffset[1], "qoffset_z": qoffset[2],
        }
        affine = _quaternion_affine(hdr)
    else:
        affine = np.full((4, 4), np.nan)
    return data, affine


def write_nifti(path, data: np.ndarray, affine: np.ndarray | None = None):
    """Write a <=3D array as a single-file NIfTI-1 volume (sform only).

    Gzip compression is chosen by the .gz suffix. Integer arrays are
    stored as-is; float arrays as float32/float64.
    """
    path = Path(path)
    data = np.asarray(data)
    if data.ndim > 3:
        raise NiftiError(f"cannot write {data.ndim}-D volume")
    if affine is None:
        affine = np.eye(4)
    affine = np.asarray(affine, dtype=np.float64)

    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    if np.dtype(data.dtype) not in _CODES:
        if data.dtype.kind == "f":
            data = data.astype(np.float32)
        elif data.dtype.kind in "iu":
            data = data.astype(np.int32)
        else:
            raise NiftiError(f"unsupported dtype {data.dtype}")
    code = _CODES[np.dtype(data.dtype)]
    bitpix = data.dtype.itemsize * 8

    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    spacing = np.where(spacing > 0, spacing, 1.0)
    pixdim = ([1.0] + list(spacing[: min(data.ndim, 3)]) + [1.0] * 7)[:8]

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl slope/inter
    struct.pack_into("<2h", hdr, 252, 0, 2)  # qform off, sform "aligned"
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].reshape(-1))
    hdr[344:348] = MAGIC_SINGLE

    payload = bytes(hdr) + b"\x00\x00\x00\x00" + np.asfortranarray(data).tobytes(order="F")
    if path.suffix == ".gz":
        # fixed mtime and no filename field keep the bytes reproducible
        with open(path, "wb") as raw:
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
                fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


def read_label_slice(path) -> np.ndarray:
    """Read a 2D integer label map, squeezing singleton axes."""
    data, _ = read_nifti(path)
    data = np.squeeze(data)
    if data.ndim != 2:
        raise NiftiError(f"{path}: expected a 2D label map, got shape {data.shape}")
    return np.rint(data).astype(np.int32)


def write_label_slice(path, labels: np.ndarray):
    """Write a 2D label map as a (H, W, 1) uint8/int16 volume."""
    labels = np.asarray(labels)
    dtype = np.uint8 if labels.max(initial=0) < 256 and labels.min(initial=0) >= 0 else np.int16
    write_nifti(path, labels.astype(dtype)[:, :, None], np.eye(4))


def write_map_slice(path, values: np.ndarray):
    """Write a float map as float32; [C, H, W] stacks become (H, W, C)."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    elif arr.ndim == 2:
        arr = arr[:, :, None]
    write_nifti(path, arr, np.eye(4))
