"""Tests for RoI pooling, erasing, attention and the short-term relation stage"""

import numpy as np
import pytest

from errors import DimensionError
from numerics import ParameterSet, conv2d_same, finite_diff_check, sigmoid
from short_term_relation import (
    POOL_SIZE, AdaptiveKernel, AttentionMap, HumanRepresentation, ShortTermRelation,
    adaptive_kernel, attention_map, attention_pool_3d, erase_mask, erase_tubelet, fuse_features,
    roi_pool_3d, roi_pool_3d_backward, roi_pool_3d_with_indices,
)
from tpn import ClipFeature
from tubelet_geometry import Tubelet


def whole_image_tubelet(T, size):
    return Tubelet(np.tile([0.0, 0.0, float(size), float(size)], (T, 1)))


@pytest.fixture
def feature(rng):
    return ClipFeature(rng.normal(size=(2, 8, 8, 3)), 4)


@pytest.fixture
def tubelet():
    return Tubelet(np.array([[4.0, 4.0, 20.0, 24.0], [6.0, 5.0, 22.0, 25.0]]))


class TestRoiPool:
    def test_shape(self, feature, tubelet):
        assert roi_pool_3d(feature, tubelet).values.shape == (2, POOL_SIZE, POOL_SIZE, 3)

    def test_values_are_maxima_of_their_cells(self, feature, tubelet):
        human, arg = roi_pool_3d_with_indices(feature, tubelet)
        T, H, W, C = feature.shape
        flat = feature.values.reshape(T, H * W, C)
        for t in range(T):
            for c in range(C):
                np.testing.assert_array_equal(human.values[t, :, :, c], flat[t, arg[t, :, :, c], c])

    def test_whole_map_bins_match_brute_force(self, rng):
        # 14x14 lattice over a whole-image box: every bin is an exact 2x2 block
        feature = ClipFeature(rng.normal(size=(1, 14, 14, 2)), 1)
        human = roi_pool_3d(feature, whole_image_tubelet(1, 14)).values
        expected = feature.values[0].reshape(7, 2, 7, 2, 2).max(axis=(1, 3))
        np.testing.assert_allclose(human[0], expected)

    def test_tiny_box_reads_its_covering_cell(self, feature):
        tiny = Tubelet(np.array([[9.0, 9.0, 10.0, 10.0], [9.0, 9.0, 10.0, 10.0]]))
        human = roi_pool_3d(feature, tiny).values
        np.testing.assert_allclose(human[0, 3, 3], feature.values[0, 2, 2])

    def test_frame_count_mismatch(self, feature):
        with pytest.raises(DimensionError):
            roi_pool_3d(feature, Tubelet(np.array([[0.0, 0.0, 8.0, 8.0]])))

    def test_backward_routes_to_argmax(self, feature, tubelet):
        human, arg = roi_pool_3d_with_indices(feature, tubelet)
        dF = roi_pool_3d_backward(np.ones_like(human.values), arg, feature.shape)
        assert dF.sum() == pytest.approx(human.values.size)
        assert np.all(dF >= 0)

    def test_bad_shape_is_rejected(self):
        with pytest.raises(DimensionError):
            HumanRepresentation(np.zeros((2, 5, 5, 3)))


class TestErasing:
    def test_mask_uses_cell_centres(self, feature):
        box = Tubelet(np.array([[0.0, 0.0, 6.0, 10.0], [0.0, 0.0, 6.0, 10.0]]))
        mask = erase_mask(feature, box)
        # centres at 2, 6, 10, ...; x <= 6 covers columns 0-1, y <= 10 covers rows 0-2
        assert mask[0].sum() == 6
        assert mask[0, :3, :2].all()

    def test_erased_cells_are_zero(self, feature, tubelet):
        erased = erase_tubelet(feature, tubelet)
        mask = erase_mask(feature, tubelet)
        assert not np.any(erased.values[mask])
        np.testing.assert_array_equal(erased.values[~mask], feature.values[~mask])

    def test_whole_image_box_erases_everything(self, feature):
        erased = erase_tubelet(feature, whole_image_tubelet(2, 32))
        assert not np.any(erased.values)


class TestAttention:
    def test_attention_range_and_shape(self, feature, rng):
        attn = attention_map(feature, AdaptiveKernel(rng.normal(size=(2, 3, 3))))
        assert attn.values.shape == (2, 8, 8)
        assert np.all((attn.values > 0) & (attn.values < 1))

    def test_zero_feature_gives_half(self):
        zero = ClipFeature(np.zeros((2, 4, 4, 3)), 4)
        attn = attention_map(zero, AdaptiveKernel(np.ones((2, 3, 3))))
        np.testing.assert_allclose(attn.values, 0.5)

    def test_kernel_frame_mismatch(self, feature):
        with pytest.raises(DimensionError):
            attention_map(feature, AdaptiveKernel(np.zeros((3, 3, 3))))

    def test_attention_pool_matches_loop(self, feature, rng):
        attn = AttentionMap(rng.random(feature.shape[:3]))
        expected = np.zeros(3)
        for t, i, j in np.ndindex(feature.shape[:3]):
            expected += attn.values[t, i, j] * feature.values[t, i, j]
        np.testing.assert_allclose(attention_pool_3d(feature, attn), expected)

    def test_fuse_layout(self, rng):
        human = HumanRepresentation(rng.normal(size=(1, 7, 7, 2)))
        weight, bias = rng.normal(size=(98, 5)), rng.normal(size=5)
        fused = fuse_features(human, np.arange(2.0), weight, bias)
        assert fused.values.shape == (7,)
        np.testing.assert_allclose(fused.human, human.values.reshape(-1) @ weight + bias)
        np.testing.assert_allclose(fused.context, [0.0, 1.0])

    def test_adaptive_kernel_shape(self, rng):
        human = HumanRepresentation(rng.normal(size=(2, 7, 7, 1)))
        kernel = adaptive_kernel(human, rng.normal(size=(98, 18)), np.zeros(18))
        assert kernel.values.shape == (2, 3, 3)


class TestShortTermRelation:
    @pytest.fixture
    def stage(self, rng):
        params = ParameterSet()
        return ShortTermRelation(2, 3, params, rng, embed_dim=4), params

    def test_output_dim(self, stage, feature, tubelet):
        relation, _ = stage
        fused, _ = relation.forward(feature, tubelet)
        assert relation.output_dim == 7
        assert fused.values.shape == (7,)

    def test_context_reads_erased_feature(self, stage, feature, tubelet):
        relation, params = stage
        fused, cache = relation.forward(feature, tubelet)
        erased = erase_tubelet(feature, tubelet)
        reduced = erased.values @ params["short_term.proj.weight"].value + params["short_term.proj.bias"].value[0]
        kernel = relation.kernel(roi_pool_3d(feature, tubelet))
        attn = attention_map(erased, kernel, params["short_term.proj.weight"].value,
                             params["short_term.proj.bias"].value[0])
        np.testing.assert_allclose(cache["reduced"], reduced)
        np.testing.assert_allclose(fused.context, attention_pool_3d(erased, attn))

    def test_without_context(self, rng, feature, tubelet):
        relation = ShortTermRelation(2, 3, ParameterSet(), rng, embed_dim=4, use_context=False)
        fused, _ = relation.forward(feature, tubelet)
        assert not np.any(fused.context)

    def test_without_erasing_attends_the_raw_feature(self, rng, feature, tubelet):
        relation = ShortTermRelation(2, 3, ParameterSet(), rng, embed_dim=4, use_erasing=False)
        _, cache = relation.forward(feature, tubelet)
        np.testing.assert_array_equal(cache["source"], feature.values)
        assert relation.attention(feature, tubelet).values.shape == (2, 8, 8)

    @pytest.mark.parametrize("use_erasing", [True, False])
    def test_gradient_check(self, rng, feature, tubelet, use_erasing):
        params = ParameterSet()
        relation = ShortTermRelation(2, 3, params, rng, embed_dim=4, use_erasing=use_erasing)
        feature_param = params.add("input.feature", feature.values)
        direction = rng.normal(size=relation.output_dim)

        def objective(with_grad):
            current = ClipFeature(feature_param.value, feature.stride)
            fused, cache = relation.forward(current, tubelet)
            if with_grad:
                params.zero_grad()
                feature_param.accumulate(relation.backward(direction, cache))
            return float(fused.values @ direction)

        assert finite_diff_check(objective, params, eps=1e-6, max_coords_per_param=12) < 1e-5

    def test_attention_is_sigmoid_of_framewise_convolution(self, stage, feature, tubelet):
        relation, _ = stage
        _, cache = relation.forward(feature, tubelet)
        for t in range(2):
            expected = sigmoid(conv2d_same(cache["reduced"][t], cache["kernel"][t]))
            np.testing.assert_allclose(cache["attn"][t], expected)


class TestErasure:
    def test_cells_inside_the_box_do_not_reach_attention_or_context(self, rng, tubelet):
        kernel = AdaptiveKernel(rng.normal(size=(2, 3, 3)))
        weight = rng.normal(size=3)
        for _ in range(100):
            feature = ClipFeature(rng.normal(size=(2, 8, 8, 3)), 4)
            mask = erase_mask(feature, tubelet)
            perturbed = feature.values.copy()
            perturbed[mask] += rng.normal(scale=10.0, size=perturbed[mask].shape)
            a = erase_tubelet(feature, tubelet)
            b = erase_tubelet(ClipFeature(perturbed, 4), tubelet)
            attn_a = attention_map(a, kernel, weight, 0.1)
            attn_b = attention_map(b, kernel, weight, 0.1)
            np.testing.assert_array_equal(attn_a.values, attn_b.values)
            np.testing.assert_array_equal(attention_pool_3d(a, attn_a), attention_pool_3d(b, attn_b))
