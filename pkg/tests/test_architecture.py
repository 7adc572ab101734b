"""Architecture tests: receptive fields, building, forward, parameter counts."""

import numpy as np
import pytest

from voxbag import ConfigError, ShapeError, Tensor
from voxbag.architecture import (
    BagNetConfig,
    build_bagnet3d,
    compute_receptive_field,
    count_params,
    forward,
    kernel3_pattern_for,
    local_logit_input_gradient,
    rf_cube,
    total_stride,
    variant_config,
)


class TestReceptiveField:
    @pytest.mark.parametrize("variant,expected", [
        ("rf9", 9), ("rf17", 17), ("rf33", 33), ("rf177", 177),
    ])
    def test_paper_preset_values(self, variant, expected):
        _, rf = compute_receptive_field(variant_config(variant, "paper"))
        assert rf == expected

    @pytest.mark.parametrize("variant,expected", [
        ("rf9", 9), ("rf17", 17), ("rf33", 33), ("rf177", 33),
    ])
    def test_desk_preset_values(self, variant, expected):
        # with one block per stage the all-3x3 pattern tops out at 33
        _, rf = compute_receptive_field(variant_config(variant, "desk"))
        assert rf == expected

    def test_single_conv_rf_is_3(self):
        # bare recurrence check: one 3x3x3 at stride 1 adds 2
        rows, _ = compute_receptive_field(variant_config("rf9", "desk"))
        stem = [r for r in rows if r["layer"] == "stem.conv2"][0]
        assert stem["rf"] == 3 and stem["jump"] == 1

    def test_jump_tracks_strides(self):
        rows, _ = compute_receptive_field(variant_config("rf17", "paper"))
        assert rows[-1]["jump"] == 8
        assert total_stride(variant_config("rf17", "paper")) == 8

    def test_pattern_shapes_validated(self):
        cfg = variant_config("rf9", "desk")
        cfg.kernel3_pattern = [[True], [True]]  # wrong number of stages
        with pytest.raises(ConfigError):
            compute_receptive_field(cfg)


class TestBuild:
    def test_deterministic_given_seed(self):
        cfg = variant_config("rf9", "desk")
        m1 = build_bagnet3d(cfg, 1, seed=7)
        m2 = build_bagnet3d(cfg, 1, seed=7)
        for (n1, t1, _), (n2, t2, _) in zip(m1.parameters(), m2.parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_different_seed_differs(self):
        cfg = variant_config("rf9", "desk")
        m1 = build_bagnet3d(cfg, 1, seed=7)
        m2 = build_bagnet3d(cfg, 1, seed=8)
        assert not np.array_equal(m1.head_weight.data, m2.head_weight.data)

    def test_head_shape_follows_output_dim(self):
        m = build_bagnet3d(variant_config("rf9", "desk"), 2, seed=0)
        assert m.head_weight.shape == (2, m.feature_dim)
        assert m.feature_dim == 64 * 4

    def test_count_matches_built_model(self):
        for variant in ("rf9", "rf177"):
            cfg = variant_config(variant, "desk")
            m = build_bagnet3d(cfg, 2, seed=1)
            actual = sum(t.size for _, t, _ in m.parameters())
            assert actual == count_params(cfg, output_dim=2)

    def test_count_matches_paper_preset(self):
        cfg = variant_config("rf33", "paper")
        m = build_bagnet3d(cfg, 1, seed=0)
        assert sum(t.size for _, t, _ in m.parameters()) == count_params(cfg, 1)

    def test_stem_only_hand_count(self):
        # stem: (1*1*1*1*w + w) + (w*27*w + w) + two norms of 2w each
        cfg = BagNetConfig(stage_depths=[1], stage_widths=[4], stage_strides=[1],
                           kernel3_pattern=[[False]], stem_width=4)
        w = 4
        stem_expected = (w + w) + (w * 27 * w + w) + 2 * (2 * w)
        block = (4 * 4 + 4 + 8) + (4 * 4 + 4 + 8) + (16 * 4 + 16 + 32) + (16 * 4 + 16 + 32)
        head = 1 * 16 + 1
        assert count_params(cfg, 1) == stem_expected + block + head

    def test_halved_widths_quarter_conv_params(self):
        big = variant_config("rf9", "paper")
        small = variant_config("rf9", "paper")
        small.stage_widths = [w // 2 for w in big.stage_widths]
        small.stem_width = big.stem_width // 2
        ratio = count_params(big, 1) / count_params(small, 1)
        assert 3.4 < ratio <= 4.05

    def test_inconsistent_pattern_rejected(self):
        cfg = variant_config("rf9", "desk")
        cfg.kernel3_pattern[0] = [True, True]
        with pytest.raises(ConfigError):
            build_bagnet3d(cfg, 1, seed=0)


class TestForward:
    def test_zero_input_yields_head_bias(self):
        m = build_bagnet3d(variant_config("rf9", "desk"), 2, seed=3)
        m.head_bias = Tensor(np.array([0.25, -1.5], dtype=np.float32), requires_grad=True)
        logits = forward(m, Tensor(np.zeros((1, 1, 16, 16, 16), dtype=np.float32)))
        np.testing.assert_array_equal(logits.data, [[0.25, -1.5]])

    def test_train_eval_identical(self):
        m = build_bagnet3d(variant_config("rf17", "desk"), 1, seed=4)
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 16, 16, 16)).astype(np.float32))
        a = forward(m, x, mode="train").data
        b = forward(m, x, mode="eval").data
        np.testing.assert_array_equal(a, b)

    def test_feature_map_dims_are_input_over_total_stride(self):
        m = build_bagnet3d(variant_config("rf9", "desk"), 1, seed=5)
        x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 32, 32, 32)).astype(np.float32))
        logits, feats = forward(m, x, keep_features=True)
        assert np.all(np.isfinite(logits.data))
        assert feats.shape == (1, m.feature_dim, 4, 4, 4)

    def test_too_small_input_names_stage(self):
        m = build_bagnet3d(variant_config("rf9", "desk"), 1, seed=6)
        with pytest.raises(ShapeError, match="stage"):
            forward(m, Tensor(np.zeros((1, 1, 2, 2, 2), dtype=np.float32)))

    def test_bag_permutation_invariance(self):
        # permuting input locations permutes the pre-pool map; with exact
        # pooling the logits of a pooled bag over the same multiset match.
        m = build_bagnet3d(variant_config("rf9", "desk"), 1, seed=7)
        x = np.random.default_rng(2).standard_normal((1, 1, 16, 16, 16)).astype(np.float32)
        _, feats = forward(m, Tensor(x), keep_features=True)
        from voxbag.ops import global_avg_pool, linear
        perm = np.random.default_rng(3).permutation(feats.data.reshape(feats.shape[1], -1).shape[-1])
        f = feats.data.reshape(1, feats.shape[1], -1)[:, :, perm].reshape(feats.shape)
        p1 = linear(global_avg_pool(feats), m.head_weight, m.head_bias).data
        p2 = linear(global_avg_pool(Tensor(f)), m.head_weight, m.head_bias).data
        assert np.array_equal(p1, p2)

    def test_translation_covariance_at_stride_granularity(self):
        # content must stay >= rf/2 away from the volume faces in both
        # positions, otherwise boundary effects leak into the comparison
        m = build_bagnet3d(variant_config("rf9", "desk"), 1, seed=8)
        rng = np.random.default_rng(4)
        x = np.zeros((1, 1, 32, 32, 32), dtype=np.float32)
        x[0, 0, 8:12, 8:12, 8:12] = rng.standard_normal((4, 4, 4)).astype(np.float32)
        xs = np.zeros_like(x)
        xs[0, 0, 16:20, 16:20, 16:20] = x[0, 0, 8:12, 8:12, 8:12]
        _, f0 = forward(m, Tensor(x), keep_features=True)
        _, f1 = forward(m, Tensor(xs), keep_features=True)
        # shifting by the total stride (8) shifts the 4^3 map by one location;
        # compare locations whose rf window stays interior in both runs
        a = f0.data[0, :, 1:3, 1:3, 1:3]
        b = f1.data[0, :, 2:4, 2:4, 2:4]
        assert np.abs(a).max() > 0.1  # the blob actually reaches these locations
        assert np.abs(a - b).max() <= 1e-5 * max(1.0, float(np.abs(a).max()))


class TestRfGradientSupport:
    @pytest.mark.parametrize("variant", ["rf9", "rf17"])
    def test_gradient_zero_outside_cube_and_union_covers(self, variant):
        cfg = variant_config(variant, "desk")
        m = build_bagnet3d(cfg, 1, seed=11).astype(np.float64)
        shape = (32, 32, 32)
        loc = (2, 2, 2)
        bounds, rf = rf_cube(cfg, loc, shape)
        union = np.zeros(shape, dtype=bool)
        for seed in range(3):
            x = np.random.default_rng(seed).standard_normal((1, 1) + shape)
            g = local_logit_input_gradient(m, Tensor(x), loc)
            outside = g.copy()
            sl = tuple(slice(lo, hi + 1) for lo, hi in bounds)
            outside[sl] = 0.0
            assert np.all(outside == 0.0), f"{variant}: gradient leaked outside rf cube"
            union |= g != 0.0
        expected = np.zeros(shape, dtype=bool)
        expected[sl] = True
        assert np.array_equal(union, expected)

    def test_cube_size_matches_rf(self):
        cfg = variant_config("rf17", "desk")
        bounds, rf = rf_cube(cfg, (2, 2, 2), (32, 32, 32))
        assert rf == 17
        for lo, hi in bounds:
            assert hi - lo + 1 == 17

    def test_detached_stats_change_gradients_not_values(self):
        m = build_bagnet3d(variant_config("rf9", "desk"), 1, seed=12)
        x = Tensor(np.random.default_rng(5).standard_normal((1, 1, 16, 16, 16)).astype(np.float32))
        plain = forward(m, x).data
        detached = forward(m, x, detach_norm_stats=True).data
        np.testing.assert_array_equal(plain, detached)


class TestConfigJson:
    def test_roundtrip(self):
        cfg = variant_config("rf33", "desk")
        again = BagNetConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()

    def test_pattern_helper_matches_variants(self):
        assert kernel3_pattern_for("rf9", [3, 4, 6, 3]) == [
            [True, False, False], [True, False, False, False],
            [False] * 6, [False] * 3]
        assert kernel3_pattern_for("rf177", [1, 1, 1, 1]) == [[True]] * 4
