"""Dataset tests: manifest validation, distortion ladder, synthesis."""
import numpy as np
import pytest

from omniqa import imgproc
from omniqa.datasets import (
    DataError,
    ManifestRecord,
    generate_reference,
    generate_synthetic_dataset,
    load_manifest,
    make_pretrain_patches,
    synth_distort,
    write_manifest,
)


@pytest.fixture(scope="module")
def ref_image():
    return generate_reference(64, 128, seed=5)


class TestManifest:
    def write(self, tmp_path, rows, header="image_path,ref_id,distortion_type,level,mos"):
        lines = [header]
        for i, row in enumerate(rows):
            if "IMG" in row:
                img = tmp_path / f"img{i}.png"
                imgproc.write_png(img, np.zeros((4, 8, 3), dtype=np.uint8))
                row = row.replace("IMG", img.name)
            lines.append(row)
        path = tmp_path / "m.csv"
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_well_formed(self, tmp_path):
        path = self.write(tmp_path, [
            "IMG,r0,blur,1,5.5",
            "IMG,r1,noise,3,2.25",
            "IMG,r2,jpeg-like,5,1.0",
        ])
        records = load_manifest(path)
        assert len(records) == 3
        assert records[0].distortion_type == "blur"
        assert records[1].level == 3
        assert records[2].mos == 1.0

    def test_missing_column_named(self, tmp_path):
        path = self.write(tmp_path, ["IMG,r0,blur,1"],
                          header="image_path,ref_id,distortion_type,level")
        with pytest.raises(DataError, match="mos"):
            load_manifest(path)

    def test_non_numeric_mos_with_line_number(self, tmp_path):
        path = self.write(tmp_path, ["IMG,r0,blur,1,5.5", "IMG,r0,blur,2,oops"])
        with pytest.raises(DataError, match=":3"):
            load_manifest(path)

    def test_missing_image_path(self, tmp_path):
        path = self.write(tmp_path, ["nowhere.png,r0,blur,1,5.0"])
        with pytest.raises(DataError, match="not found"):
            load_manifest(path)

    def test_unknown_distortion_type(self, tmp_path):
        path = self.write(tmp_path, ["IMG,r0,sepia,1,5.0"])
        with pytest.raises(DataError, match="sepia"):
            load_manifest(path)

    def test_level_out_of_range(self, tmp_path):
        path = self.write(tmp_path, ["IMG,r0,blur,9,5.0"])
        with pytest.raises(DataError, match="level"):
            load_manifest(path)

    def test_duplicates_warned_and_kept(self, tmp_path):
        img = tmp_path / "dup.png"
        imgproc.write_png(img, np.zeros((4, 8, 3), dtype=np.uint8))
        path = self.write(tmp_path, [f"{img.name},r0,blur,1,5.0",
                                     f"{img.name},r0,blur,1,5.0"])
        with pytest.warns(UserWarning, match="duplicate"):
            records = load_manifest(path)
        assert len(records) == 2

    def test_write_load_round_trip(self, tmp_path):
        img1, img2 = tmp_path / "x.png", tmp_path / "y.png"
        imgproc.write_png(img1, np.zeros((4, 8, 3), dtype=np.uint8))
        imgproc.write_png(img2, np.zeros((4, 8, 3), dtype=np.uint8))
        records = [
            ManifestRecord(str(img1), "r0", "blur", 2, 4.25),
            ManifestRecord(str(img2), "r1", "none", 1, 9.875),
        ]
        path = tmp_path / "mm.csv"
        write_manifest(path, records)
        back = load_manifest(path)
        assert [(r.ref_id, r.distortion_type, r.level, r.mos) for r in back] == \
               [(r.ref_id, r.distortion_type, r.level, r.mos) for r in records]


class TestSynthDistort:
    def test_psnr_strictly_decreases_with_level(self, ref_image):
        for dist in ("blur", "noise", "jpeg-like"):
            psnrs = []
            for level in range(1, 6):
                img, _ = synth_distort(ref_image, dist, level, seed=7)
                psnrs.append(imgproc.psnr(ref_image, img))
            assert all(a > b for a, b in zip(psnrs, psnrs[1:])), (dist, psnrs)

    def test_blur_of_constant_is_constant(self):
        flat = np.full((32, 64, 3), 120, dtype=np.uint8)
        img, _ = synth_distort(flat, "blur", 5, seed=0)
        assert np.all(img == 120)

    def test_same_seed_bit_identical(self, ref_image):
        a, mos_a = synth_distort(ref_image, "noise", 3, seed=11)
        b, mos_b = synth_distort(ref_image, "noise", 3, seed=11)
        assert np.array_equal(a, b) and mos_a == mos_b

    def test_unknown_type_rejected(self, ref_image):
        with pytest.raises(DataError):
            synth_distort(ref_image, "vignette", 1, seed=0)

    def test_level_bounds(self, ref_image):
        with pytest.raises(DataError):
            synth_distort(ref_image, "blur", 0, seed=0)
        with pytest.raises(DataError):
            synth_distort(ref_image, "blur", 6, seed=0)

    def test_pseudo_mos_formula(self, ref_image):
        for level in range(1, 6):
            _, mos = synth_distort(ref_image, "noise", level, seed=3)
            assert abs(mos - (10.0 - 1.8 * level)) <= 0.2 + 1e-12

    def test_none_type_is_identity(self, ref_image):
        img, mos = synth_distort(ref_image, "none", 1, seed=0)
        assert np.array_equal(img, ref_image)
        assert mos >= 9.8

    def test_jpeg_like_handles_non_multiple_of_eight(self):
        img = generate_reference(64, 128, seed=1)[:60, :100]
        out, _ = synth_distort(img, "jpeg-like", 4, seed=0)
        assert out.shape == img.shape


class TestGeneration:
    def test_reference_is_deterministic_uint8(self):
        a = generate_reference(64, 128, seed=4)
        b = generate_reference(64, 128, seed=4)
        assert np.array_equal(a, b)
        assert a.dtype == np.uint8 and a.shape == (64, 128, 3)

    def test_references_have_detectable_structure(self):
        img = generate_reference(128, 256, seed=9)
        pts = imgproc.det_hessian_keypoints(imgproc.to_gray(img))
        assert len(pts) >= 20

    def test_synthetic_dataset_layout(self, tmp_path):
        records = generate_synthetic_dataset(tmp_path / "ds", n_refs=4, seed=2,
                                             height=32, width=64)
        assert len(records) == 4 * 3 * 5
        back = load_manifest(tmp_path / "ds" / "manifest.csv")
        assert len(back) == 60
        assert {r.distortion_type for r in back} == {"jpeg-like", "blur", "noise"}
        assert {r.ref_id for r in back} == {f"ref{i:02d}" for i in range(4)}

    def test_dataset_determinism(self, tmp_path):
        r1 = generate_synthetic_dataset(tmp_path / "a", n_refs=4, seed=3,
                                        height=32, width=64)
        r2 = generate_synthetic_dataset(tmp_path / "b", n_refs=4, seed=3,
                                        height=32, width=64)
        assert [r.mos for r in r1] == [r.mos for r in r2]
        img1 = imgproc.read_png(r1[7].image_path)
        img2 = imgproc.read_png(r2[7].image_path)
        assert np.array_equal(img1, img2)

    def test_too_few_refs(self, tmp_path):
        with pytest.raises(DataError):
            generate_synthetic_dataset(tmp_path / "x", n_refs=3, seed=0)

    def test_pretrain_patches(self):
        patches, labels = make_pretrain_patches(24, size=32, seed=6,
                                                erp_size=(32, 64))
        assert patches.shape == (24, 32, 32, 3)
        assert labels.shape == (24,)
        assert labels.max() <= 10.2 and labels.min() >= 0.8
        p2, l2 = make_pretrain_patches(24, size=32, seed=6, erp_size=(32, 64))
        assert np.array_equal(patches, p2) and np.array_equal(labels, l2)
