"""Single-file NIfTI-1 reader/writer round-trips and malformed input handling."""

import struct

import numpy as np
import pytest

from spinesegdiff.nifti import (
    HEADER_SIZE,
    NiftiError,
    read_label_slice,
    read_nifti,
    write_label_slice,
    write_map_slice,
    write_nifti,
)

AFFINE = np.array([
    [0.0, 0.0, 2.0, -10.0],
    [1.25, 0.0, 0.0, 4.5],
    [0.0, -1.25, 0.0, 31.0],
    [0.0, 0.0, 0.0, 1.0],
])


class TestRoundTrip:
    @pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
    def test_float_volume(self, tmp_path, suffix):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((5, 6, 7)).astype(np.float32)
        path = tmp_path / f"vol{suffix}"
        write_nifti(path, data, AFFINE)
        back, affine = read_nifti(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, data)
        assert np.array_equal(affine, AFFINE)

    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
    def test_dtypes_preserved(self, tmp_path, dtype):
        data = np.arange(24).reshape(2, 3, 4).astype(dtype)
        path = tmp_path / "vol.nii"
        write_nifti(path, data)
        back, _ = read_nifti(path)
        assert back.dtype == np.dtype(dtype)
        assert np.array_equal(back, data)

    def test_int64_narrowed(self, tmp_path):
        data = np.arange(8, dtype=np.int64).reshape(2, 2, 2)
        path = tmp_path / "vol.nii"
        write_nifti(path, data)
        back, _ = read_nifti(path)
        assert back.dtype == np.int32
        assert np.array_equal(back, data)

    def test_bool_becomes_uint8(self, tmp_path):
        data = np.zeros((3, 3), dtype=bool)
        data[1, 1] = True
        path = tmp_path / "m.nii"
        write_nifti(path, data)
        back, _ = read_nifti(path)
        assert back.dtype == np.uint8
        assert back[1, 1] == 1

    def test_2d_round_trip(self, tmp_path):
        data = np.arange(12, dtype=np.float32).reshape(3, 4)
        path = tmp_path / "s.nii.gz"
        write_nifti(path, data)
        back, _ = read_nifti(path)
        assert back.shape == (3, 4)
        assert np.array_equal(back, data)

    def test_write_is_byte_deterministic(self, tmp_path):
        data = np.random.default_rng(1).random((4, 4, 4)).astype(np.float32)
        p1, p2 = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
        write_nifti(p1, data, AFFINE)
        write_nifti(p2, data, AFFINE)
        assert p1.read_bytes() == p2.read_bytes()

    def test_4d_write_rejected(self, tmp_path):
        with pytest.raises(NiftiError):
            write_nifti(tmp_path / "v.nii", np.zeros((2, 2, 2, 2)))


def patch(path, offset, fmt, *values):
    raw = bytearray(path.read_bytes())
    struct.pack_into(fmt, raw, offset, *values)
    path.write_bytes(bytes(raw))


class TestHeaderHandling:
    def write_base(self, tmp_path):
        path = tmp_path / "v.nii"
        write_nifti(path, np.arange(24, dtype=np.uint8).reshape(2, 3, 4))
        return path

    def test_scl_scaling_applied(self, tmp_path):
        path = self.write_base(tmp_path)
        patch(path, 112, "<2f", 2.0, 10.0)
        data, _ = read_nifti(path)
        assert data.dtype == np.float32
        expected = np.arange(24, dtype=np.float32).reshape(2, 3, 4) * 2.0 + 10.0
        assert np.array_equal(data, expected)

    def test_qform_fallback(self, tmp_path):
        path = self.write_base(tmp_path)
        patch(path, 252, "<2h", 1, 0)  # qform on, sform off
        patch(path, 76, "<4f", 1.0, 2.0, 3.0, 4.0)  # pixdim[0..3]
        patch(path, 268, "<3f", 7.0, 8.0, 9.0)  # qoffset
        _, affine = read_nifti(path)
        expected = np.diag([2.0, 3.0, 4.0, 1.0])
        expected[:3, 3] = [7.0, 8.0, 9.0]
        assert np.allclose(affine, expected, atol=1e-6)

    def test_qfac_flips_third_column(self, tmp_path):
        path = self.write_base(tmp_path)
        patch(path, 252, "<2h", 1, 0)
        patch(path, 76, "<4f", -1.0, 1.0, 1.0, 2.0)
        _, affine = read_nifti(path)
        assert affine[2, 2] == pytest.approx(-2.0)

    def test_no_orientation_gives_nan(self, tmp_path):
        path = self.write_base(tmp_path)
        patch(path, 252, "<2h", 0, 0)
        _, affine = read_nifti(path)
        assert np.all(np.isnan(affine))

    def test_big_endian_file(self, tmp_path):
        hdr = bytearray(HEADER_SIZE)
        struct.pack_into(">i", hdr, 0, HEADER_SIZE)
        struct.pack_into(">8h", hdr, 40, 3, 2, 3, 4, 1, 1, 1, 1)
        struct.pack_into(">2h", hdr, 70, 4, 16)  # int16
        struct.pack_into(">8f", hdr, 76, 1, 1, 1, 1, 1, 1, 1, 1)
        struct.pack_into(">f", hdr, 108, 352.0)
        struct.pack_into(">2h", hdr, 252, 0, 1)
        struct.pack_into(">12f", hdr, 280, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0)
        hdr[344:348] = b"n+1\x00"
        data = np.arange(24, dtype=">i2")
        path = tmp_path / "be.nii"
        path.write_bytes(bytes(hdr) + b"\x00" * 4 + data.tobytes())
        back, affine = read_nifti(path)
        assert back.dtype == np.int16
        assert back.dtype.byteorder in ("=", "<")  # native after read
        assert np.array_equal(back, np.arange(24, dtype=np.int16).reshape((2, 3, 4), order="F"))
        assert np.array_equal(affine, np.eye(4))


class TestMalformed:
    def test_truncated_header(self, tmp_path):
        path = tmp_path / "t.nii"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(NiftiError, match="truncated header"):
            read_nifti(path)

    def test_truncated_data(self, tmp_path):
        path = tmp_path / "t.nii"
        write_nifti(path, np.zeros((4, 4, 4), dtype=np.float32))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(NiftiError, match="truncated data"):
            read_nifti(path)

    def test_bad_sizeof_hdr(self, tmp_path):
        path = tmp_path / "t.nii"
        path.write_bytes(b"\x07" * 400)
        with pytest.raises(NiftiError, match="sizeof_hdr"):
            read_nifti(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.nii"
        write_nifti(path, np.zeros((2, 2), dtype=np.uint8))
        patch(path, 344, "4s", b"abcd")
        with pytest.raises(NiftiError, match="magic"):
            read_nifti(path)

    def test_two_file_magic_rejected(self, tmp_path):
        path = tmp_path / "t.nii"
        write_nifti(path, np.zeros((2, 2), dtype=np.uint8))
        patch(path, 344, "4s", b"ni1\x00")
        with pytest.raises(NiftiError, match="two-file"):
            read_nifti(path)

    def test_unsupported_datatype(self, tmp_path):
        path = tmp_path / "t.nii"
        write_nifti(path, np.zeros((2, 2), dtype=np.uint8))
        patch(path, 70, "<h", 1536)  # float128 code
        with pytest.raises(NiftiError, match="datatype"):
            read_nifti(path)

    def test_corrupt_gzip(self, tmp_path):
        path = tmp_path / "t.nii.gz"
        write_nifti(path, np.zeros((4, 4), dtype=np.uint8))
        raw = path.read_bytes()
        path.write_bytes(raw[:20])
        with pytest.raises(NiftiError):
            read_nifti(path)


class TestSliceHelpers:
    def test_label_round_trip_uint8(self, tmp_path):
        labels = np.random.default_rng(2).integers(0, 4, size=(16, 16)).astype(np.int32)
        path = tmp_path / "lab.nii.gz"
        write_label_slice(path, labels)
        back = read_label_slice(path)
        assert back.dtype == np.int32
        assert np.array_equal(back, labels)

    def test_label_round_trip_wide_codes(self, tmp_path):
        labels = np.array([[100, 201], [299, 0]], dtype=np.int32)
        path = tmp_path / "lab.nii"
        write_label_slice(path, labels)
        assert np.array_equal(read_label_slice(path), labels)

    def test_label_slice_requires_2d(self, tmp_path):
        path = tmp_path / "v.nii"
        write_nifti(path, np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(NiftiError, match="2D"):
            read_label_slice(path)

    def test_map_slice_channel_layout(self, tmp_path):
        maps = np.random.default_rng(3).random((4, 8, 8)).astype(np.float32)
        path = tmp_path / "m.nii.gz"
        write_map_slice(path, maps)
        back, _ = read_nifti(path)
        assert back.shape == (8, 8, 4)
        assert np.allclose(back, maps.transpose(1, 2, 0))
