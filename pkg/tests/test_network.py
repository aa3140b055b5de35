"""Assembly, accounting, and checkpoint tests for the full network."""

import numpy as np
import pytest

from pidnet import nn, ops
from pidnet.blocks import BagFusion, LightBag, PagFusion, Pappm
from pidnet.checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_into,
    save_checkpoint,
    serialize,
)
from pidnet.network import (
    ModelConfig,
    build_pidnet,
    config_from_values,
    config_to_values,
    preset,
    summary,
)
from pidnet.tensor import ShapeError, Tensor


def tiny_input(rng, n=1, h=64, w=64):
    return Tensor(rng.normal(size=(n, 3, h, w)).astype(np.float32))


def reference_eval(model):
    model.eval()
    for m in model.modules():
        if isinstance(m, Pappm):
            m.batched_eval = False
    return model


class TestConfig:
    def test_presets_validate(self):
        for name in ("tiny", "s", "m", "l"):
            preset(name).validate()

    def test_published_variant_choices(self):
        assert preset("s").context == "pappm" and preset("s").bag_kind == "light"
        assert preset("m").context == "pappm" and preset("m").bag_kind == "light"
        assert preset("l").context == "dappm" and preset("l").bag_kind == "full"

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            preset("xl")

    def test_depth_ordering_enforced(self):
        bad = ModelConfig(depth_i3=1, depth_i4=1, depth_i5=1, depth_p3=1,
                          depth_p4=1, depth_d3=1, depth_d4=1)
        with pytest.raises(ValueError):
            bad.validate()

    @pytest.mark.parametrize("field,value", [
        ("fusion", "concat"),
        ("context", "aspp"),
        ("bag_kind", "heavy"),
        ("base_width", 7),
        ("num_classes", 1),
        ("min_divisor", 12),
    ])
    def test_bad_field_rejected(self, field, value):
        with pytest.raises(ValueError):
            ModelConfig(**{field: value}).validate()

    def test_value_list_roundtrip(self):
        for name in ("tiny", "s", "m", "l"):
            cfg = preset(name)
            assert config_from_values(config_to_values(cfg)) == cfg

    def test_custom_values_do_not_collide_with_presets(self):
        values = config_to_values(preset("tiny"))
        values[1] = 5  # different class count
        cfg = config_from_values(values)
        assert cfg.name == "custom" and cfg.num_classes == 5


class TestForward:
    def test_tiny_output_resolutions(self, rng):
        model = build_pidnet("tiny", seed=0)
        out = model(tiny_input(rng))
        assert out.main_logits.shape == (1, 3, 8, 8)
        assert out.boundary_logits.shape == (1, 1, 8, 8)
        assert out.aux_logits.shape == (1, 3, 8, 8)

    def test_eval_omits_aux_and_records_no_gradient_state(self, rng):
        model = build_pidnet("tiny", seed=0).eval()
        out = model(tiny_input(rng))
        assert out.aux_logits is None
        assert out.main_logits._tape is None
        assert out.main_logits.grad is None

    def test_branch_resolutions_follow_the_three_stream_layout(self, rng):
        model = reference_eval(build_pidnet("tiny", seed=0))
        taps = {}
        model(tiny_input(rng), taps=taps)
        assert taps["p3"].shape[2:] == taps["p4"].shape[2:] == (8, 8)
        assert taps["d3"].shape[2:] == taps["d4"].shape[2:] == (8, 8)
        assert taps["i3"].shape[2:] == (4, 4)
        assert taps["i4"].shape[2:] == (2, 2)
        assert taps["i5"].shape[2:] == (1, 1)
        assert taps["context"].shape[2:] == (1, 1)
        assert taps["d3"].shape[1] == 16 and taps["d4"].shape[1] == 32
        assert taps["pag1.sigma"].shape == (1, 1, 8, 8)
        assert taps["fusion.sigma"].shape == (1, 32, 8, 8)

    def test_caller_side_upsample_restores_input_extent(self, rng):
        model = build_pidnet("tiny", seed=0).eval()
        out = model(tiny_input(rng))
        up = ops.bilinear_resize(out.main_logits, 64, 64)
        assert up.shape == (1, 3, 64, 64)

    def test_eval_outputs_bitwise_reproducible(self, rng):
        x = tiny_input(rng)
        a = reference_eval(build_pidnet("tiny", seed=11))(x)
        b = reference_eval(build_pidnet("tiny", seed=11))(x)
        np.testing.assert_array_equal(a.main_logits.numpy(), b.main_logits.numpy())
        np.testing.assert_array_equal(a.boundary_logits.numpy(),
                                      b.boundary_logits.numpy())

    def test_train_eval_agree_with_frozen_normalization(self, rng):
        model = reference_eval(build_pidnet("tiny", seed=1))
        x = tiny_input(rng)
        eval_out = model(x).main_logits.numpy()
        # train-mode forward, but every BN pinned to its running statistics
        model.train()
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.eval()
        train_out = model(x).main_logits.numpy()
        np.testing.assert_array_equal(train_out, eval_out)

    def test_aux_head_reads_the_first_gated_lateral(self, rng):
        model = build_pidnet("tiny", seed=2)
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.eval()
        taps = {}
        out = model(tiny_input(rng), taps=taps)
        again = model.aux_head(taps["pag1"])
        np.testing.assert_array_equal(out.aux_logits.numpy(), again.numpy())

    @pytest.mark.parametrize("h,w", [(60, 64), (64, 61)])
    def test_indivisible_input_rejected(self, rng, h, w):
        model = build_pidnet("tiny", seed=0)
        with pytest.raises(ShapeError):
            model(tiny_input(rng, h=h, w=w))

    def test_full_config_requires_divisibility_by_64(self, rng):
        model = build_pidnet(ModelConfig(name="custom"), seed=0)
        with pytest.raises(ShapeError):
            model(tiny_input(rng, h=72, w=64))

    def test_wrong_channel_count_rejected(self, rng):
        model = build_pidnet("tiny", seed=0)
        with pytest.raises(ShapeError):
            model(Tensor(rng.normal(size=(1, 4, 64, 64)).astype(np.float32)))

    def test_stage_stats_cover_the_eval_pipeline(self, rng):
        model = reference_eval(build_pidnet("tiny", seed=0))
        stats = []
        with ops.metered_flops():
            model(tiny_input(rng), stage_stats=stats)
        names = [row[0] for row in stats]
        assert names == model.tap_names()
        assert all(row[2] > 0 for row in stats)


class TestAblationVariants:
    def test_add_fusion_has_no_gate_units(self):
        cfg = preset("tiny")
        from dataclasses import replace
        model = build_pidnet(replace(cfg, fusion="add"), seed=0)
        gated = [m for m in model.modules()
                 if isinstance(m, (PagFusion, BagFusion, LightBag))]
        assert gated == []

    def test_add_fusion_still_runs(self, rng):
        from dataclasses import replace
        model = build_pidnet(replace(preset("tiny"), fusion="add"), seed=0).eval()
        out = model(tiny_input(rng))
        assert out.main_logits.shape == (1, 3, 8, 8)
        taps = {}
        model(tiny_input(rng), taps=taps)
        assert "add1" in taps and "add2" in taps
        assert "fusion.sigma" not in taps

    def test_non_fusion_parameters_identical_across_variants(self):
        from dataclasses import replace
        a = build_pidnet(preset("tiny"), seed=9)
        b = build_pidnet(replace(preset("tiny"), fusion="add"), seed=9)
        pa = dict(a.named_parameters())
        pb = dict(b.named_parameters())
        fusion_prefixes = ("p_fuse3.", "p_fuse4.", "fuse.")
        shared = [n for n in pa
                  if n in pb and not n.startswith(fusion_prefixes)]
        assert len(shared) > 50
        for n in shared:
            np.testing.assert_array_equal(pa[n].numpy(), pb[n].numpy())


class TestAccounting:
    def test_param_rule_matches_hand_count(self):
        conv = nn.Conv2d(3, 8, 1, bias=True)
        assert sum(p.size for _, p in conv.named_parameters()) == 32

    def test_conv_flop_rule_matches_hand_count(self):
        conv = nn.Conv2d(3, 8, 3, stride=1, padding=1)
        flops, out_hw = conv.flop_count(64, 64)
        assert flops == 1_769_472 and out_hw == (64, 64)

    def test_conv_flops_quarter_when_extent_halves(self):
        conv = nn.Conv2d(3, 8, 3, stride=1, padding=1)
        full, _ = conv.flop_count(64, 64)
        half, _ = conv.flop_count(32, 32)
        assert full == 4 * half

    def test_model_flops_scale_nearly_quadratically(self):
        model = build_pidnet("tiny")
        ratio = model.count_flops(128, 128) / model.count_flops(64, 64)
        assert abs(ratio - 4.0) < 0.08

    def test_analytic_count_equals_runtime_meter(self, rng):
        model = reference_eval(build_pidnet("tiny", seed=0))
        x = tiny_input(rng)
        with ops.metered_flops() as meter:
            model(x)
        assert meter.total == model.count_flops(64, 64)

    def test_analytic_count_equals_runtime_meter_for_add_variant(self, rng):
        from dataclasses import replace
        model = reference_eval(
            build_pidnet(replace(preset("tiny"), fusion="add", context="dappm",
                                 bag_kind="full"), seed=0))
        x = tiny_input(rng)
        with ops.metered_flops() as meter:
            model(x)
        assert meter.total == model.count_flops(64, 64)

    def test_small_variant_lands_on_published_scale(self):
        model = build_pidnet("s")
        params = model.count_params()
        assert 6_840_000 <= params <= 8_360_000
        flops = model.count_flops(2048, 1024)
        assert 40.46e9 <= flops <= 54.74e9

    def test_variant_ordering(self):
        sizes = {name: build_pidnet(name) for name in ("s", "m", "l")}
        params = {n: m.count_params() for n, m in sizes.items()}
        flops = {n: m.count_flops(256, 128) for n, m in sizes.items()}
        assert params["l"] > params["m"] > params["s"]
        assert flops["l"] > flops["m"] > flops["s"]

    def test_summary_table_lists_stages_and_totals(self, rng):
        model = build_pidnet("tiny", seed=0)
        text = summary(model, 64, 64)
        lines = text.strip().splitlines()
        assert lines[0].split()[:2] == ["layer", "output"]
        assert any(line.startswith("seg_head") for line in lines)
        total = lines[-1].split()
        assert int(total[-2]) == model.count_params()
        assert int(total[-1]) == model.count_flops(64, 64)
        # the summary run must not leave the model reconfigured
        assert model.training
        assert all(m.batched_eval for m in model.modules() if isinstance(m, Pappm))


class TestCheckpoint:
    def test_forward_never_grows_the_state_table(self, rng):
        # gate maps kept for inspection must not register as buffers
        model = build_pidnet("tiny", seed=4)
        before = [n for n, _ in model.named_state()]
        model(tiny_input(rng))
        model.eval()
        model(tiny_input(rng))
        assert [n for n, _ in model.named_state()] == before

    def test_save_load_save_is_byte_identical(self, rng, tmp_path):
        model = build_pidnet("tiny", seed=4)
        # run one training-mode forward so BN statistics are non-trivial
        model(tiny_input(rng))
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(model, first)
        save_checkpoint(load_checkpoint(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_reloaded_model_reproduces_outputs(self, rng, tmp_path):
        model = build_pidnet("tiny", seed=5)
        model(tiny_input(rng))
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        clone = load_checkpoint(path)
        assert clone.config == preset("tiny")
        x = tiny_input(rng)
        a = reference_eval(model)(x).main_logits.numpy()
        b = reference_eval(clone)(x).main_logits.numpy()
        np.testing.assert_array_equal(a, b)

    def test_running_statistics_travel_with_the_file(self, rng, tmp_path):
        model = build_pidnet("tiny", seed=6)
        model(tiny_input(rng))
        stats = {n: t.data.copy() for n, t in model.named_state()
                 if n.endswith(("running_mean", "running_var"))}
        assert any(np.abs(v).max() > 0 for v in stats.values())
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        clone = load_checkpoint(path)
        for n, t in clone.named_state():
            if n in stats:
                np.testing.assert_array_equal(t.data, stats[n].astype(np.float32))

    def test_single_byte_corruption_detected(self, tmp_path):
        model = build_pidnet("tiny", seed=7)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="crc"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"PIDN")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_version_rejected(self, tmp_path):
        model = build_pidnet("tiny", seed=7)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        import zlib
        import struct
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_cross_config_load_names_first_offender(self, tmp_path):
        tiny = build_pidnet("tiny", seed=8)
        path = tmp_path / "tiny.ckpt"
        save_checkpoint(tiny, path)
        target = build_pidnet("s", seed=8)
        with pytest.raises(CheckpointError, match="stem.0.conv.weight"):
            load_into(target, path)

    def test_unknown_tensor_rejected(self, tmp_path):
        model = build_pidnet("tiny", seed=8)
        entries = [("not.a.real.tensor", np.zeros(3, dtype=np.float32))]
        entries += [(n, t.data) for n, t in model.named_state()]
        path = tmp_path / "m.ckpt"
        path.write_bytes(serialize(entries))
        with pytest.raises(CheckpointError, match="not.a.real.tensor"):
            load_into(model, path)

    def test_missing_tensor_rejected(self, tmp_path):
        model = build_pidnet("tiny", seed=8)
        entries = [(n, t.data) for n, t in model.named_state()][:-1]
        path = tmp_path / "m.ckpt"
        path.write_bytes(serialize(entries))
        with pytest.raises(CheckpointError, match="missing"):
            load_into(model, path)
