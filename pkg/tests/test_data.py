"""Image I/O, synthetic corpus generation, paired layout, patch sampling."""
from __future__ import annotations

import numpy as np
import pytest

import restolab.data as D
from restolab.degrade import SamplerConfig, DegradationRecipe, apply_recipe, read_manifest


def quantize(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255) / 255.0


class TestImageIO:
    def test_png_roundtrip_is_exact_after_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((3, 9, 13)).astype(np.float32)
        path = tmp_path / "x.png"
        D.save_image(img, path)
        back = D.load_image(path)
        assert back.shape == (3, 9, 13)
        assert back.dtype == np.float32
        assert np.abs(back - quantize(img)).max() < 1e-7

    def test_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.random((3, 6, 6)).astype(np.float32)
        path = tmp_path / "x.ppm"
        D.save_image(img, path)
        back = D.load_image(path)
        assert np.abs(back - quantize(img)).max() < 1e-7

    def test_save_rejects_bad_shape_and_suffix(self, tmp_path):
        with pytest.raises(ValueError, match="3, H, W"):
            D.save_image(np.zeros((6, 6)), tmp_path / "x.png")
        with pytest.raises(ValueError, match="suffix"):
            D.save_image(np.zeros((3, 6, 6)), tmp_path / "x.jpg")

    def test_load_preserves_saved_extremes(self, tmp_path):
        img = np.zeros((3, 4, 4), dtype=np.float32)
        img[0] = 1.0
        D.save_image(img, tmp_path / "x.png")
        back = D.load_image(tmp_path / "x.png")
        assert back[0].min() == 1.0 and back[1].max() == 0.0


class TestSynthCorpus:
    def test_image_in_range_and_shaped(self):
        img = D.synth_clean_image(np.random.default_rng(0), size=32)
        assert img.shape == (3, 32, 32)
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_images_have_structure(self):
        # needs edges/gradients, not a constant field
        img = D.synth_clean_image(np.random.default_rng(3), size=32)
        assert img.std() > 0.02

    def test_seed_index_keying(self):
        a = D.synth_clean_image(D.image_rng(7, 0), 16)
        b = D.synth_clean_image(D.image_rng(7, 0), 16)
        c = D.synth_clean_image(D.image_rng(7, 1), 16)
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    def test_corpus_files_and_thread_equivalence(self, tmp_path):
        seq = D.make_clean_corpus(tmp_path / "seq", 6, size=16, seed=3, threads=1)
        par = D.make_clean_corpus(tmp_path / "par", 6, size=16, seed=3, threads=4)
        assert len(seq) == len(par) == 6
        for a, b in zip(seq, par):
            assert a.read_bytes() == b.read_bytes()

    def test_bad_count(self, tmp_path):
        with pytest.raises(ValueError):
            D.make_clean_corpus(tmp_path / "x", 0)


class TestDegradeCorpus:
    def test_manifest_allows_byte_exact_replay(self, tmp_path):
        D.make_clean_corpus(tmp_path / "clean", 4, size=24, seed=0)
        cfg = SamplerConfig(max_depth=2, kinds=("noise", "jpeg"))
        records = D.degrade_corpus(tmp_path / "clean", tmp_path / "deg", cfg, seed=5)
        assert len(records) == 4
        on_disk = read_manifest(tmp_path / "deg" / "manifest.jsonl")
        assert len(on_disk) == 4
        for rec in on_disk:
            recipe = DegradationRecipe.from_dict(rec["recipe"])
            clean = D.load_image(rec["source"])
            replay = apply_recipe(clean, recipe)
            stored = D.load_image(tmp_path / "deg" / rec["file"])
            assert np.abs(quantize(replay) - stored).max() < 1e-7

    def test_count_limits_and_thread_equivalence(self, tmp_path):
        D.make_clean_corpus(tmp_path / "clean", 5, size=24, seed=0)
        cfg = SamplerConfig(max_depth=1, kinds=("noise",))
        D.degrade_corpus(tmp_path / "clean", tmp_path / "a", cfg, seed=1, count=3)
        D.degrade_corpus(tmp_path / "clean", tmp_path / "b", cfg, seed=1, count=3, threads=3)
        a_files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len([f for f in a_files if f.endswith(".png")]) == 3
        for name in a_files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_empty_input_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ValueError, match="no images"):
            D.degrade_corpus(tmp_path / "empty", tmp_path / "out",
                             SamplerConfig(max_depth=1))


class TestPairs:
    def test_task_layout_and_loading(self, tmp_path):
        cfg = SamplerConfig(max_depth=1, kinds=("noise",))
        D.make_task_pairs(tmp_path / "task", 3, cfg, size=16, seed=2)
        pairs = D.load_pairs(tmp_path / "task")
        assert len(pairs) == 3
        for degraded, clean in pairs:
            assert degraded.shape == clean.shape == (3, 16, 16)
            assert not np.array_equal(degraded, clean)

    def test_oversized_kernel_band_rejected_before_writing(self, tmp_path):
        # default motion kernels reach 31; a size-16 task cannot hold them
        cfg = SamplerConfig(max_depth=1, kinds=("motion",))
        with pytest.raises(ValueError, match="cannot fit sampled kernels"):
            D.make_task_pairs(tmp_path / "task", 3, cfg, size=16, seed=2)
        assert not (tmp_path / "task").exists()

    def test_missing_twin_rejected(self, tmp_path):
        cfg = SamplerConfig(max_depth=1, kinds=("noise",))
        D.make_task_pairs(tmp_path / "task", 2, cfg, size=16, seed=2)
        extra = tmp_path / "task" / "degraded" / "orphan.png"
        D.save_image(np.zeros((3, 8, 8), np.float32), extra)
        with pytest.raises(ValueError, match="no clean twin"):
            D.list_pairs(tmp_path / "task")

    def test_empty_rejected(self, tmp_path):
        (tmp_path / "task" / "clean").mkdir(parents=True)
        (tmp_path / "task" / "degraded").mkdir()
        with pytest.raises(ValueError, match="no image pairs"):
            D.list_pairs(tmp_path / "task")


class TestPatches:
    def test_coords_in_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            top, left = D.random_patch_coords(rng, (3, 17, 23), 8)
            assert 0 <= top <= 9 and 0 <= left <= 15

    def test_patch_too_large(self):
        with pytest.raises(ValueError, match="exceeds"):
            D.random_patch_coords(np.random.default_rng(0), (3, 8, 8), 9)

    def test_crop_shape(self):
        img = np.arange(3 * 10 * 10, dtype=np.float32).reshape(3, 10, 10)
        out = D.crop(img, 2, 3, 4)
        assert out.shape == (3, 4, 4)
        assert out[0, 0, 0] == img[0, 2, 3]

    def test_flip_involution_and_rot_cycle(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 6, 6)).astype(np.float32)
        assert np.array_equal(D.augment(D.augment(img, True, 0), True, 0), img)
        once = D.augment(img, False, 1)
        assert np.array_equal(D.augment(once, False, 3), img)

    def test_augment_contiguous(self):
        img = np.random.default_rng(0).random((3, 6, 6)).astype(np.float32)
        out = D.augment(img, True, 3)
        assert out.flags["C_CONTIGUOUS"]

    def test_sample_augmentation_coverage(self):
        rng = np.random.default_rng(0)
        seen = {D.sample_augmentation(rng) for _ in range(200)}
        assert seen == {(f, k) for f in (False, True) for k in range(4)}
