import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pidnet.data import (FULL_RECIPES, SHAPE_KINDS, ManifestDataset,
                         SceneDataset, SceneSpec, TrainConfig, augment,
                         class_palette, export_dataset, gen_scene, poly_lr,
                         recipe_config)
from pidnet.losses import IGNORE_ID


def identity_cfg(h=64, w=64):
    return TrainConfig(scale_range=(1.0, 1.0), flip_prob=0.0, crop=(h, w))


class TestSceneSpec:
    def test_defaults_valid(self):
        spec = SceneSpec()
        assert spec.num_classes == 3
        assert spec.kinds == SHAPE_KINDS

    @pytest.mark.parametrize("kw", [{"num_classes": 1}, {"height": 4},
                                    {"shapes_min": 3, "shapes_max": 2},
                                    {"kinds": ("blob",)}, {"kinds": ()},
                                    {"noise": -0.1}])
    def test_bad_fields_rejected(self, kw):
        with pytest.raises(ValueError):
            SceneSpec(**kw)

    def test_palette_rows_distinct(self):
        pal = class_palette(6)
        assert pal.shape == (6, 3)
        for a in range(6):
            for b in range(a + 1, 6):
                assert np.abs(pal[a] - pal[b]).max() > 0.1


class TestGenScene:
    def test_same_pair_is_bitwise_identical(self):
        spec = SceneSpec(seed=3)
        a_img, a_lbl = gen_scene(spec, 11)
        b_img, b_lbl = gen_scene(spec, 11)
        assert np.array_equal(a_img, b_img)
        assert np.array_equal(a_lbl, b_lbl)

    def test_different_indices_differ(self):
        spec = SceneSpec(seed=3)
        a_img, _ = gen_scene(spec, 0)
        b_img, _ = gen_scene(spec, 1)
        assert not np.array_equal(a_img, b_img)

    def test_shapes_and_ranges(self):
        img, lbl = gen_scene(SceneSpec(seed=0, height=48, width=40), 0)
        assert img.shape == (3, 48, 40)
        assert img.dtype == np.float32
        assert lbl.shape == (48, 40)
        assert 0.0 <= img.min() and img.max() <= 1.0
        assert lbl.min() >= 0 and lbl.max() < 3

    def test_zero_shapes_is_all_background(self):
        spec = SceneSpec(seed=0, shapes_min=0, shapes_max=0)
        _, lbl = gen_scene(spec, 5)
        assert np.all(lbl == 0)

    def test_every_class_covered_over_many_scenes(self):
        spec = SceneSpec(seed=1, num_classes=4)
        counts = np.zeros(4)
        for i in range(300):
            _, lbl = gen_scene(spec, i)
            counts += np.bincount(lbl.ravel(), minlength=4)
        freq = counts / counts.sum()
        assert np.all(freq >= 0.01)

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError, match="index"):
            gen_scene(SceneSpec(), -1)


class TestAugment:
    def test_identity_configuration(self, rng):
        img, lbl = gen_scene(SceneSpec(seed=2), 0)
        out_img, out_lbl = augment(img, lbl, identity_cfg(),
                                   np.random.default_rng(0))
        assert np.array_equal(out_img, img)
        assert np.array_equal(out_lbl, lbl)

    def test_forced_double_flip_is_identity(self):
        img, lbl = gen_scene(SceneSpec(seed=2), 1)
        cfg = TrainConfig(scale_range=(1.0, 1.0), flip_prob=1.0, crop=(64, 64))
        once_i, once_l = augment(img, lbl, cfg, np.random.default_rng(0))
        twice_i, twice_l = augment(once_i, once_l, cfg, np.random.default_rng(0))
        assert np.array_equal(twice_i, img)
        assert np.array_equal(twice_l, lbl)

    def test_flip_reverses_columns(self):
        img, lbl = gen_scene(SceneSpec(seed=2), 1)
        cfg = TrainConfig(scale_range=(1.0, 1.0), flip_prob=1.0, crop=(64, 64))
        out_img, out_lbl = augment(img, lbl, cfg, np.random.default_rng(0))
        assert np.array_equal(out_lbl, lbl[:, ::-1])
        assert np.array_equal(out_img, img[:, :, ::-1])

    def test_output_extent_is_the_crop(self, rng):
        img, lbl = gen_scene(SceneSpec(seed=2), 3)
        cfg = TrainConfig(crop=(32, 48))
        out_img, out_lbl = augment(img, lbl, cfg, rng)
        assert out_img.shape == (3, 32, 48)
        assert out_lbl.shape == (32, 48)

    @given(seed=st.integers(0, 500))
    @settings(max_examples=20, deadline=None)
    def test_labels_stay_in_original_set_plus_ignore(self, seed):
        img, lbl = gen_scene(SceneSpec(seed=4), 0)
        cfg = TrainConfig()
        _, out_lbl = augment(img, lbl, cfg, np.random.default_rng(seed))
        allowed = set(np.unique(lbl)) | {IGNORE_ID}
        assert set(np.unique(out_lbl)) <= allowed

    def test_downscale_pads_with_ignore_only_in_labels(self):
        img, lbl = gen_scene(SceneSpec(seed=5), 0)
        cfg = TrainConfig(scale_range=(0.5, 0.5), flip_prob=0.0, crop=(64, 64))
        out_img, out_lbl = augment(img, lbl, cfg, np.random.default_rng(1))
        assert (out_lbl == IGNORE_ID).sum() == 64 * 64 - 32 * 32
        assert np.isfinite(out_img).all()

    def test_same_rng_seed_replays_exactly(self):
        img, lbl = gen_scene(SceneSpec(seed=6), 2)
        cfg = TrainConfig()
        a = augment(img, lbl, cfg, np.random.default_rng(9))
        b = augment(img, lbl, cfg, np.random.default_rng(9))
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])

    def test_extent_mismatch_rejected(self):
        with pytest.raises(ValueError, match="extent"):
            augment(np.zeros((3, 8, 8), dtype=np.float32),
                    np.zeros((8, 9), dtype=np.int64),
                    TrainConfig(), np.random.default_rng(0))


class TestPolyLr:
    def test_endpoints(self):
        assert poly_lr(0.05, 0, 100) == 0.05
        assert poly_lr(0.05, 100, 100) == 0.0

    def test_midpoint_value(self):
        assert poly_lr(1.0, 50, 100, power=0.9) == pytest.approx(0.5 ** 0.9)

    def test_strictly_decreasing(self):
        vals = [poly_lr(1.0, i, 50) for i in range(51)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_zero_max_iter_rejected(self):
        with pytest.raises(ValueError, match="max_iter"):
            poly_lr(0.1, 0, 0)

    def test_iteration_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            poly_lr(0.1, 11, 10)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"iters": 0}, {"base_lr": 0.0},
                                    {"batch_size": 0},
                                    {"scale_range": (0.0, 1.0)},
                                    {"scale_range": (2.0, 1.0)},
                                    {"flip_prob": 1.5},
                                    {"eval_every": 0},
                                    {"stop_lr": 0.0},
                                    {"stop_lr": 0.05}])
    def test_bad_fields_rejected(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_stop_lr_defaults_off(self):
        assert TrainConfig().stop_lr is None
        assert TrainConfig(stop_lr=0.01).stop_lr == 0.01


class TestFullRecipes:
    def test_published_schedules_are_encoded(self):
        city = FULL_RECIPES["cityscapes"]
        assert (city.epochs, city.base_lr, city.weight_decay,
                city.crop, city.batch_size) == (484, 1e-2, 5e-4,
                                                (1024, 1024), 12)
        cam = FULL_RECIPES["camvid"]
        assert (cam.epochs, cam.base_lr, cam.weight_decay,
                cam.crop, cam.batch_size) == (200, 1e-3, 5e-4, (720, 960), 12)
        assert cam.stop_lr == 5e-4
        pascal = FULL_RECIPES["pascal-context"]
        assert (pascal.epochs, pascal.base_lr, pascal.weight_decay,
                pascal.crop, pascal.batch_size) == (200, 1e-3, 1e-4,
                                                    (520, 520), 16)
        assert city.stop_lr is None and pascal.stop_lr is None

    def test_recipe_config_expands_epochs_to_iterations(self):
        cfg = recipe_config("cityscapes", dataset_len=2975, seed=5)
        assert cfg.iters == 484 * 248
        assert cfg.base_lr == 1e-2
        assert cfg.crop == (1024, 1024)
        assert cfg.batch_size == 12
        assert cfg.seed == 5
        assert cfg.stop_lr is None

    def test_recipe_config_carries_early_stop_floor(self):
        cfg = recipe_config("camvid", dataset_len=367)
        assert cfg.stop_lr == 5e-4
        assert cfg.iters == 200 * 31

    def test_unknown_recipe_rejected(self):
        with pytest.raises(ValueError, match="unknown recipe"):
            recipe_config("ade20k", dataset_len=100)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="dataset_len"):
            recipe_config("camvid", dataset_len=0)


class TestDataset:
    def test_indexing_matches_gen_scene(self):
        spec = SceneSpec(seed=8)
        ds = SceneDataset(spec, 4, offset=10)
        img, lbl = ds[2]
        ref_img, ref_lbl = gen_scene(spec, 12)
        assert np.array_equal(img, ref_img)
        assert np.array_equal(lbl, ref_lbl)
        assert len(ds) == 4

    def test_out_of_range_rejected(self):
        ds = SceneDataset(SceneSpec(), 2)
        with pytest.raises(IndexError):
            ds[2]

    def test_batch_preserves_order(self):
        ds = SceneDataset(SceneSpec(seed=8), 6)
        got = ds.batch([3, 0, 5])
        for item, idx in zip(got, [3, 0, 5]):
            assert np.array_equal(item[1], ds[idx][1])

    def test_worker_count_does_not_change_content(self, monkeypatch):
        ds = SceneDataset(SceneSpec(seed=8), 6)
        monkeypatch.setenv("PIDNET_THREADS", "1")
        serial = ds.batch(range(6))
        monkeypatch.setenv("PIDNET_THREADS", "4")
        threaded = ds.batch(range(6))
        for (ai, al), (bi, bl) in zip(serial, threaded):
            assert np.array_equal(ai, bi)
            assert np.array_equal(al, bl)

    def test_bad_thread_env_rejected(self, monkeypatch):
        ds = SceneDataset(SceneSpec(seed=8), 3)
        monkeypatch.setenv("PIDNET_THREADS", "many")
        with pytest.raises(ValueError, match="PIDNET_THREADS"):
            ds.batch([0, 1])


class TestExport:
    def test_roundtrip_through_manifest(self, tmp_path):
        spec = SceneSpec(seed=9)
        manifest = export_dataset(spec, 3, tmp_path)
        ds = ManifestDataset(manifest)
        assert len(ds) == 3
        for i in range(3):
            ref_img, ref_lbl = gen_scene(spec, i)
            img, lbl = ds[i]
            assert np.array_equal(lbl, ref_lbl)
            assert np.abs(img - ref_img).max() <= 0.5 / 255.0 + 1e-7

    def test_manifest_format(self, tmp_path):
        manifest = export_dataset(SceneSpec(seed=9), 2, tmp_path)
        lines = open(manifest).read().strip().splitlines()
        assert lines == ["0,scene_00000.ppm,scene_00000.pgm",
                        "1,scene_00001.ppm,scene_00001.pgm"]
        for _, img, lbl in (ln.split(",") for ln in lines):
            assert os.path.exists(tmp_path / img)
            assert os.path.exists(tmp_path / lbl)
