"""Preprocessing pipeline: orientation, geometry, encoding, cohort I/O."""

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinesegdiff.data import (
    CANONICAL_SCHEME,
    IMAGE_MAX,
    NUM_CLASSES,
    DataError,
    PatientRecord,
    SliceSample,
    Volume,
    axis_codes,
    build_dataset,
    discover_pairs,
    encode_mask,
    export_label_slice,
    extract_central_slice,
    list_samples,
    load_label_scheme,
    load_patient_records,
    load_sample,
    load_volume,
    mask_to_classes,
    normalize_intensity,
    preprocess_pair,
    reorient_ras,
    resample_isotropic,
    resize_slice,
    save_sample,
)
from spinesegdiff.nifti import read_label_slice, write_nifti
from spinesegdiff.synthetic import (
    make_toy_sample,
    make_toy_volume_pair,
    scramble_volume,
    write_toy_fixture,
)

ALL_PERMS = list(itertools.permutations(range(3)))
ALL_FLIPS = list(itertools.product([False, True], repeat=3))


class TestAxisCodes:
    def test_identity_is_ras(self):
        assert axis_codes(np.eye(4)) == ("R", "A", "S")

    def test_flip_first_axis(self):
        assert axis_codes(np.diag([-1.0, 1.0, 1.0, 1.0])) == ("L", "A", "S")

    def test_permuted_axes(self):
        aff = np.eye(4)
        aff[:3, :3] = np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], dtype=float)
        assert axis_codes(aff) == ("A", "S", "R")

    def test_oblique_still_bijective(self):
        image, _ = make_toy_volume_pair(oblique=True)
        codes = image.axis_codes()
        groups = [{"R", "L"}, {"A", "P"}, {"S", "I"}]
        hit = [any(c in g for c in codes) for g in groups]
        assert all(hit) and len(set(codes)) == 3

    def test_singular_affine(self):
        aff = np.eye(4)
        aff[0, 0] = 0.0
        aff[0, 1] = 1.0  # two voxel axes point the same way
        aff[1, 1] = 0.0
        aff[1, 0] = 0.0
        with pytest.raises(DataError, match="unresolvable"):
            axis_codes(aff)


class TestReorient:
    def test_ras_input_is_returned_unchanged(self):
        image, _ = make_toy_volume_pair()
        assert image.axis_codes() == ("R", "A", "S")
        assert reorient_ras(image) is image

    @pytest.mark.parametrize("perm", ALL_PERMS)
    @pytest.mark.parametrize("flips", ALL_FLIPS)
    def test_scramble_round_trip(self, perm, flips):
        image, _ = make_toy_volume_pair(shape=(5, 9, 11))
        scrambled = scramble_volume(image, perm, flips)
        restored = reorient_ras(scrambled)
        assert np.array_equal(restored.voxels, image.voxels)
        assert np.allclose(restored.affine, image.affine, atol=1e-12)

    def test_world_positions_preserved(self):
        image, _ = make_toy_volume_pair(shape=(4, 6, 8))
        scrambled = scramble_volume(image, (1, 2, 0), (True, False, True))
        restored = reorient_ras(scrambled)
        idx = np.array([2, 3, 5, 1.0])
        assert np.allclose(restored.affine @ idx, image.affine @ idx)

    def test_label_dtype_survives(self):
        _, labels = make_toy_volume_pair()
        out = reorient_ras(scramble_volume(labels, (2, 1, 0), (False, False, True)))
        assert out.voxels.dtype == np.int32
        assert out.is_label


class TestNormalize:
    def test_p98_scaling(self):
        rng = np.random.default_rng(0)
        vox = rng.uniform(10.0, 400.0, size=(6, 6, 6))
        vol = Volume(voxels=vox, affine=np.eye(4))
        out = normalize_intensity(vol)
        p98 = np.percentile(vox, 98.0)
        below = vox <= p98
        assert np.allclose(out.voxels[below], vox[below] / p98 * IMAGE_MAX, atol=1e-3)
        assert np.all(out.voxels[~below] == IMAGE_MAX)
        assert out.voxels.max() <= IMAGE_MAX
        assert out.voxels.dtype == np.float32

    def test_all_zero_volume_rejected(self):
        vol = Volume(voxels=np.zeros((4, 4, 4)), affine=np.eye(4))
        with pytest.raises(DataError, match="percentile"):
            normalize_intensity(vol)

    def test_label_volume_rejected(self):
        vol = Volume(voxels=np.ones((2, 2, 2)), affine=np.eye(4), is_label=True)
        with pytest.raises(DataError, match="image operation"):
            normalize_intensity(vol)

    def test_nan_rejected(self):
        vox = np.ones((3, 3, 3))
        vox[0, 0, 0] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            normalize_intensity(Volume(voxels=vox, affine=np.eye(4)))


class TestResample:
    def test_isotropic_input_is_noop(self):
        vol = Volume(voxels=np.random.default_rng(1).random((4, 5, 6)), affine=np.eye(4))
        assert resample_isotropic(vol) is vol

    def test_shape_and_spacing(self):
        aff = np.diag([2.0, 1.0, 0.5, 1.0])
        vol = Volume(voxels=np.random.default_rng(2).random((5, 8, 8)), affine=aff)
        out = resample_isotropic(vol)
        assert out.voxels.shape == (10, 8, 4)
        assert np.allclose(out.spacing(), 1.0)

    def test_linear_field_reproduced(self):
        """Linear interpolation is exact on an affine intensity field."""
        aff = np.diag([2.0, 1.0, 1.0, 1.0])
        idx = np.indices((6, 8, 8)).astype(np.float64)
        vox = 3.0 * (2.0 * idx[0]) + 0.5  # linear in world x
        out = resample_isotropic(Volume(voxels=vox, affine=aff))
        world_x = out.affine[0, 0] * np.arange(out.voxels.shape[0]) + out.affine[0, 3]
        expected = 3.0 * world_x + 0.5
        got = out.voxels[:, 4, 4]
        assert np.allclose(got[1:-1], expected[1:-1], atol=1e-6)

    def test_labels_keep_codes(self):
        _, labels = make_toy_volume_pair(spacing=(2.0, 1.25, 1.25))
        out = resample_isotropic(labels)
        assert out.voxels.dtype == np.int32
        assert set(np.unique(out.voxels)) <= set(np.unique(labels.voxels))

    def test_idempotent(self):
        image, _ = make_toy_volume_pair(spacing=(2.0, 1.25, 1.25))
        once = resample_isotropic(image)
        assert resample_isotropic(once) is once

    def test_bad_target(self):
        vol = Volume(voxels=np.ones((2, 2, 2)), affine=np.eye(4))
        with pytest.raises(DataError):
            resample_isotropic(vol, target=0.0)


class TestSliceOps:
    def test_central_slice_requires_ras(self):
        image, _ = make_toy_volume_pair()
        flipped = scramble_volume(image, (0, 1, 2), (True, False, False))
        with pytest.raises(DataError, match="RAS"):
            extract_central_slice(flipped)
        mid = extract_central_slice(image)
        assert np.array_equal(mid, image.voxels[image.voxels.shape[0] // 2])

    def test_resize_noop_when_square_at_size(self):
        arr = np.random.default_rng(3).random((32, 32)).astype(np.float32) * 100
        out = resize_slice(arr, size=32)
        assert out.dtype == np.float32
        assert np.array_equal(out, arr)

    def test_pure_padding_centres_content(self):
        arr = np.ones((2, 6), dtype=np.float32)
        out = resize_slice(arr, size=6)
        assert out.shape == (6, 6)
        assert np.all(out[2:4, :] == 1.0)
        assert np.all(out[:2, :] == 0.0) and np.all(out[4:, :] == 0.0)

    def test_label_downscale_keeps_codes(self):
        labels = np.random.default_rng(4).integers(0, 4, size=(64, 64))
        out = resize_slice(labels, size=16, is_label=True)
        assert out.dtype == np.int32
        assert set(np.unique(out)) <= set(np.unique(labels))

    def test_upscale_and_downscale_shapes(self):
        arr = np.random.default_rng(5).random((20, 30))
        assert resize_slice(arr, size=64).shape == (64, 64)
        assert resize_slice(arr, size=8).shape == (8, 8)

    def test_validation(self):
        with pytest.raises(DataError):
            resize_slice(np.zeros((2, 2, 2)))
        with pytest.raises(DataError):
            resize_slice(np.zeros((2, 2)), size=0)


class TestLabelScheme:
    def test_default_scheme(self):
        scheme = load_label_scheme()
        assert scheme["sc"] == [(100, 100)]
        assert scheme["vb"] == [(1, 99)]
        assert scheme["ivd"] == [(201, 299)]

    def test_missing_entry(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"sc": [[1, 1]], "vb": [[2, 2]]}))
        with pytest.raises(DataError, match="missing"):
            load_label_scheme(path)

    def test_overlap_rejected(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(
            json.dumps({"sc": [[1, 5]], "vb": [[5, 9]], "ivd": [[20, 29]]})
        )
        with pytest.raises(DataError, match="claimed by both"):
            load_label_scheme(path)

    def test_bad_range(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"sc": [[9, 1]], "vb": [[10, 11]], "ivd": [[20, 29]]}))
        with pytest.raises(DataError, match="bad range"):
            load_label_scheme(path)


class TestEncodeMask:
    def test_default_scheme_codes(self):
        raw = np.array([[0, 100, 10], [42, 201, 299]])
        onehot = encode_mask(raw)
        assert onehot.shape == (4, 2, 3)
        assert onehot.dtype == np.uint8
        classes = mask_to_classes(onehot)
        assert classes.tolist() == [[0, 1, 2], [2, 3, 3]]

    def test_unknown_code(self):
        with pytest.raises(DataError, match="unknown label codes"):
            encode_mask(np.array([[0, 500]]))

    def test_canonical_scheme(self):
        raw = np.array([[0, 1], [2, 3]])
        classes = mask_to_classes(encode_mask(raw, scheme=CANONICAL_SCHEME))
        assert np.array_equal(classes, raw)

    def test_one_hot_exactness(self):
        raw = np.random.default_rng(6).choice([0, 5, 100, 250], size=(10, 10))
        onehot = encode_mask(raw)
        assert np.all(onehot.sum(axis=0) == 1)

    def test_mask_to_classes_validation(self):
        bad = np.zeros((4, 2, 2), dtype=np.uint8)
        with pytest.raises(DataError, match="one-hot"):
            mask_to_classes(bad)
        with pytest.raises(DataError):
            mask_to_classes(np.zeros((2, 2), dtype=np.uint8))


class TestSliceSample:
    def test_validation(self):
        sample = make_toy_sample("p0", seed=0)
        sample.validate()
        with pytest.raises(DataError, match="one-hot"):
            SliceSample(
                image=sample.image,
                mask=np.zeros_like(sample.mask),
                patient_id="p",
                modality="t1",
            )
        with pytest.raises(DataError, match=r"\[0, 255\]"):
            SliceSample(
                image=sample.image + 300.0,
                mask=sample.mask,
                patient_id="p",
                modality="t1",
            )
        with pytest.raises(DataError, match="does not match"):
            SliceSample(
                image=sample.image[:, :32],
                mask=sample.mask,
                patient_id="p",
                modality="t1",
            )

    def test_save_load_round_trip(self, tmp_path):
        sample = make_toy_sample("p1", seed=1, modality="t2")
        path = save_sample(tmp_path, sample)
        assert path.name == f"{sample.patient_id}_t2.npz"
        back = load_sample(path)
        assert np.array_equal(back.image, sample.image)
        assert np.array_equal(back.mask, sample.mask)
        assert back.key() == sample.key()
        assert back.oblique == sample.oblique

    def test_list_samples_sorted(self, tmp_path):
        for seed, pid in ((0, "zz"), (1, "aa")):
            save_sample(tmp_path, make_toy_sample(pid, seed=seed))
        names = [s.patient_id for s in list_samples(tmp_path)]
        assert names == ["aa", "zz"]


class TestPatientRecords:
    def write_csv(self, tmp_path, rows, header=None):
        header = header or rows[0].split(",")
        path = tmp_path / "meta.csv"
        path.write_text("\n".join(rows) + "\n")
        return path

    def test_parse_tokens_and_grades(self, tmp_path):
        path = self.write_csv(
            tmp_path,
            [
                "patient_id,oblique,spondylolisthesis,disc_herniation,pfirrmann_l4_l5",
                "p1,0,true,No,5",
                "p2,1,FALSE,y,2",
            ],
        )
        records = load_patient_records(path)
        assert [r.patient_id for r in records] == ["p1", "p2"]
        assert records[0].has_pathology("spondylolisthesis")
        assert not records[0].has_pathology("disc_herniation")
        assert records[0].has_pathology("disc_degeneration")  # grade 5 >= 4
        assert records[1].oblique
        assert not records[1].has_pathology("disc_degeneration")

    def test_duplicate_patient(self, tmp_path):
        path = self.write_csv(
            tmp_path, ["patient_id,oblique", "p1,0", "p1,0"]
        )
        with pytest.raises(DataError, match="duplicate"):
            load_patient_records(path)

    def test_bad_boolean(self, tmp_path):
        path = self.write_csv(tmp_path, ["patient_id,oblique", "p1,maybe"])
        with pytest.raises(DataError, match="boolean"):
            load_patient_records(path)

    def test_bad_grade(self, tmp_path):
        path = self.write_csv(
            tmp_path, ["patient_id,pfirrmann_l1_l2", "p1,7"]
        )
        with pytest.raises(DataError):
            load_patient_records(path)

    def test_unknown_pathology_query(self):
        with pytest.raises(DataError):
            PatientRecord(patient_id="p").has_pathology("scoliosis")


class TestPreprocessPair:
    def test_shapes_and_ranges(self):
        image, labels = make_toy_volume_pair(seed=3)
        sample = preprocess_pair(image, labels, "p0", "t1", size=64)
        assert sample.image.shape == (1, 64, 64)
        assert sample.mask.shape == (4, 64, 64)
        assert 0.0 <= sample.image.min() and sample.image.max() <= IMAGE_MAX

    def test_orientation_invariance_is_exact(self):
        """A scrambled copy of the same scan preprocesses identically."""
        image, labels = make_toy_volume_pair(seed=4)
        ref = preprocess_pair(image, labels, "p0", "t1", size=64)
        for perm, flips in (((2, 0, 1), (False, True, False)), ((1, 2, 0), (True, True, True))):
            alt = preprocess_pair(
                scramble_volume(image, perm, flips),
                scramble_volume(labels, perm, flips),
                "p0",
                "t1",
                size=64,
            )
            assert np.array_equal(alt.image, ref.image)
            assert np.array_equal(alt.mask, ref.mask)

    def test_alignment_checks(self):
        image, labels = make_toy_volume_pair(seed=5)
        with pytest.raises(DataError, match="that order"):
            preprocess_pair(labels, image, "p", "t1")
        shifted = Volume(voxels=labels.voxels, affine=labels.affine + np.diag([0, 0, 0, 1e-2]), is_label=True)
        with pytest.raises(DataError, match="aligned"):
            preprocess_pair(image, shifted, "p", "t1")
        cropped = Volume(voxels=labels.voxels[:-1], affine=labels.affine, is_label=True)
        with pytest.raises(DataError, match="differ"):
            preprocess_pair(image, cropped, "p", "t1")

    @given(
        seed=st.integers(0, 100_000),
        modality=st.sampled_from(["t1", "t2"]),
        oblique=st.booleans(),
        size=st.sampled_from([32, 48, 64]),
        slices=st.integers(3, 9),
    )
    @settings(max_examples=100, deadline=None)
    def test_pipeline_invariants_property(self, seed, modality, oblique, size, slices):
        image, labels = make_toy_volume_pair(
            modality=modality, seed=seed, oblique=oblique, shape=(slices, 40, 44)
        )
        sample = preprocess_pair(image, labels, f"p{seed}", modality, size=size)
        assert sample.image.dtype == np.float32
        assert sample.mask.dtype == np.uint8
        assert sample.image.shape == (1, size, size)
        assert sample.mask.shape == (NUM_CLASSES, size, size)
        assert sample.image.min() >= 0.0 and sample.image.max() <= IMAGE_MAX
        assert np.all(sample.mask.sum(axis=0) == 1)


class TestCohortIO:
    def test_discover_and_build(self, tmp_path):
        root = write_toy_fixture(tmp_path, n_patients=3, modalities=("t1", "t2"))
        pairs = discover_pairs(root / "images", root / "labels")
        assert len(pairs) == 6
        assert pairs[0][2] == "p00" and pairs[0][3] == "t1"
        samples, records = build_dataset(
            root / "images", root / "labels", root / "metadata.csv",
            out_dir=tmp_path / "cache", size=64,
        )
        assert len(samples) == 6
        assert len(records) == 3
        assert len(list((tmp_path / "cache").glob("*.npz"))) == 6
        oblique_flags = {s.key(): s.oblique for s in samples}
        assert oblique_flags["p01_t1"] is True
        assert oblique_flags["p00_t1"] is False

    def test_jobs_do_not_change_output(self, tmp_path):
        root = write_toy_fixture(tmp_path, n_patients=2, modalities=("t1",))
        serial, _ = build_dataset(
            root / "images", root / "labels", root / "metadata.csv", size=48
        )
        parallel, _ = build_dataset(
            root / "images", root / "labels", root / "metadata.csv", size=48, jobs=4
        )
        assert len(serial) == len(parallel) == 2
        for a, b in zip(serial, parallel):
            assert a.key() == b.key()
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.mask, b.mask)

    def test_error_log_collects_failures(self, tmp_path):
        root = write_toy_fixture(tmp_path, n_patients=2, modalities=("t1",))
        bad = root / "images" / "p00_t1.nii.gz"
        bad.write_bytes(bad.read_bytes()[:60])
        log: list[tuple[str, str]] = []
        samples, _ = build_dataset(
            root / "images", root / "labels", root / "metadata.csv",
            size=48, error_log=log,
        )
        assert len(samples) == 1
        assert len(log) == 1
        assert log[0][0] == "p00_t1.nii.gz"

    def test_failure_raises_without_log(self, tmp_path):
        root = write_toy_fixture(tmp_path, n_patients=1, modalities=("t1",), oblique_ids=())
        (root / "metadata.csv").write_text("patient_id,oblique\nother,0\n")
        with pytest.raises(DataError, match="not in the metadata"):
            build_dataset(root / "images", root / "labels", root / "metadata.csv", size=48)

    def test_discover_errors(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        with pytest.raises(DataError, match="no NIfTI"):
            discover_pairs(tmp_path / "images", tmp_path / "labels")
        write_nifti(tmp_path / "images" / "noseparator.nii", np.zeros((2, 2, 2)))
        with pytest.raises(DataError, match="naming"):
            discover_pairs(tmp_path / "images", tmp_path / "labels")

    def test_missing_label_volume(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        write_nifti(tmp_path / "images" / "p1_t1.nii", np.zeros((2, 2, 2)))
        with pytest.raises(DataError, match="no label volume"):
            discover_pairs(tmp_path / "images", tmp_path / "labels")

    def test_export_label_slice_round_trip(self, tmp_path):
        labels = np.random.default_rng(7).integers(0, 4, size=(16, 16))
        path = tmp_path / "pred_label.nii.gz"
        export_label_slice(path, labels)
        assert np.array_equal(read_label_slice(path), labels)

    def test_load_volume_requires_affine(self, tmp_path):
        path = tmp_path / "v.nii"
        write_nifti(path, np.zeros((2, 2, 2), dtype=np.uint8))
        raw = bytearray(path.read_bytes())
        import struct

        struct.pack_into("<2h", raw, 252, 0, 0)
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="orientation"):
            load_volume(path)
