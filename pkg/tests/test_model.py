"""Network graph and cost-counter tests."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtrack.model import (
    ConfigError,
    FeatureMap,
    ModelConfig,
    ShapeError,
    bn_cost,
    build_model,
    conv_cost,
    count_cost,
    pixel_wise_correlation,
    reduce_template,
)

from util_grad import central_diff_check

MINI = ModelConfig(
    backbone_channels=(4, 8, 8, 8),
    adjusted_channels=16,
    template_size=32,
    search_size=64,
    template_corr_cells=4,
)


def rand_image(rng, side):
    return rng.integers(0, 256, (side, side, 3), dtype=np.uint8)


class TestModelConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.search_grid == 16
        assert cfg.template_grid == 8
        assert cfg.corr_side == 4

    @pytest.mark.parametrize("kwargs", [
        {"final_stride": 12},
        {"search_size": 192},
        {"template_size": 100, "search_size": 200},
        {"template_corr_cells": 15},
        {"template_corr_cells": 81},
        {"backbone_channels": (8, 16)},
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_stride8_keeps_last_stage_resolution(self):
        assert ModelConfig(final_stride=8).stage_strides() == (2, 2, 2, 1)
        assert ModelConfig(final_stride=16).stage_strides() == (2, 2, 2, 2)


@pytest.fixture(scope="module")
def default_net():
    return build_model(ModelConfig(), seed=0)


class TestExtractFeatures:
    @pytest.fixture
    def net(self, default_net):
        return default_net

    def test_template_shape(self, net):
        rng = np.random.default_rng(0)
        fm = net.extract_features(rand_image(rng, 128))
        assert tuple(fm.data.shape) == (128, 8, 8)
        assert fm.stride == 16
        assert fm.crop_size == 128

    def test_search_shape(self, net):
        rng = np.random.default_rng(1)
        fm = net.extract_features(rand_image(rng, 256))
        assert tuple(fm.data.shape) == (128, 16, 16)

    def test_stride8_shape(self):
        net8 = build_model(ModelConfig(final_stride=8), seed=0)
        fm = net8.extract_features(rand_image(np.random.default_rng(2), 256))
        assert tuple(fm.data.shape) == (128, 32, 32)
        assert fm.stride == 8

    def test_indivisible_side_rejected(self, net):
        with pytest.raises(ShapeError):
            net.extract_features(rand_image(np.random.default_rng(3), 130))

    def test_out_of_range_values_rejected(self, net):
        bad = np.full((128, 128, 3), 2.0)
        with pytest.raises(ValueError):
            net.extract_features(bad)


class TestPixelWiseCorrelation:
    def test_scalar_identity(self):
        out = pixel_wise_correlation(np.array([[1.0]]), np.array([[2.0, 3.0]]))
        assert np.allclose(out, [[2.0, 3.0]])

    def test_orthogonal_cells_give_zero(self):
        t = np.array([[1.0, 0.0], [0.0, 0.0]])  # C=2, wh=2
        s = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])  # C=2, WH=3
        assert np.all(pixel_wise_correlation(t, s) == 0.0)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(7)
        t = rng.normal(size=(4, 4))
        s = rng.normal(size=(4, 9))
        naive = np.zeros((4, 9))
        for i in range(4):
            for j in range(9):
                naive[i, j] = float(np.dot(t[:, i], s[:, j]))
        assert np.max(np.abs(pixel_wise_correlation(t, s) - naive)) <= 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            pixel_wise_correlation(np.zeros((3, 4)), np.zeros((2, 4)))

    @given(c=st.integers(1, 16), wh=st.integers(1, 16), seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_property_matches_oracle(self, c, wh, seed):
        rng = np.random.default_rng(seed)
        t = rng.normal(size=(c, wh))
        s = rng.normal(size=(c, wh + 3))
        out = pixel_wise_correlation(t, s)
        naive = np.array([[np.dot(t[:, i], s[:, j]) for j in range(wh + 3)]
                          for i in range(wh)])
        assert np.max(np.abs(out - naive)) <= 1e-5


class TestReduceTemplate:
    def _fm(self, data):
        return FeatureMap(torch.as_tensor(data, dtype=torch.float64), 16)

    def test_mean_pool_oracle(self):
        rng = np.random.default_rng(11)
        data = rng.normal(size=(3, 8, 8))
        reduced = reduce_template(self._fm(data), 16)
        assert tuple(reduced.data.shape) == (3, 4, 4)
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    block = data[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                    assert float(reduced.data[c, i, j]) == pytest.approx(block.mean(), abs=1e-12)

    def test_identity_when_cells_match(self):
        data = np.random.default_rng(1).normal(size=(2, 8, 8))
        reduced = reduce_template(self._fm(data), 64)
        assert np.allclose(reduced.data.numpy(), data)

    def test_single_cell_is_global_mean(self):
        data = np.random.default_rng(2).normal(size=(2, 8, 8))
        reduced = reduce_template(self._fm(data), 1)
        assert reduced.data.shape == (2, 1, 1)
        assert np.allclose(reduced.data.numpy()[:, 0, 0], data.mean(axis=(1, 2)))

    def test_non_square_cells_rejected(self):
        with pytest.raises(ShapeError):
            reduce_template(self._fm(np.zeros((2, 8, 8))), 15)


class TestFusionAndHeads:
    @pytest.fixture
    def net(self):
        return build_model(ModelConfig(), seed=3)

    def _feats(self, net, rng, side):
        return net.extract_features(rand_image(rng, side))

    def test_shapes_at_defaults(self, net):
        rng = np.random.default_rng(5)
        search = self._feats(net, rng, 256)
        template = reduce_template(self._feats(net, rng, 128), 16)
        # intermediate concat carries adjusted + corr channels
        assert net.fusion.post[0].in_channels == 128 + 16
        fused = net.fusion_block(search, template)
        assert tuple(fused.data.shape) == (128, 16, 16)
        heads = net.run_heads(fused)
        assert tuple(heads.cls_map.shape) == (1, 16, 16)
        assert tuple(heads.reg_map.shape) == (4, 16, 16)

    def test_wider_correlation_grid(self):
        net = build_model(ModelConfig(template_corr_cells=64), seed=0)
        assert net.fusion.post[0].in_channels == 128 + 64
        rng = np.random.default_rng(6)
        search = net.extract_features(rand_image(rng, 256))
        template = reduce_template(net.extract_features(rand_image(rng, 128)), 64)
        fused = net.fusion_block(search, template)
        assert tuple(fused.data.shape) == (128, 16, 16)

    def test_zero_template_leaves_only_search_branch(self, net):
        rng = np.random.default_rng(8)
        search = self._feats(net, rng, 256)
        zero_t = FeatureMap(torch.zeros(128, 4, 4, dtype=torch.float64), 32)
        with torch.no_grad():
            fused = net.fusion_block(search, zero_t)
            s = net.fusion.pre(search.data[None])
            corr = torch.zeros(1, 16, 16, 16, dtype=torch.float64)
            expected = net.fusion.post(torch.cat([corr, s], dim=1))[0]
        assert torch.equal(fused.data, expected)

    def test_head_block_count_is_configurable(self):
        net = build_model(ModelConfig(head_blocks=4), seed=0)
        assert len(net.heads.cls_tower) == 4
        assert len(net.heads.reg_tower) == 4

    def test_zero_input_heads_emit_bias(self, net):
        zero = FeatureMap(torch.zeros(128, 16, 16, dtype=torch.float64), 16)
        with torch.no_grad():
            out = net.run_heads(zero)
        # towers kill the signal; final convs see a constant zero map
        assert torch.allclose(out.cls_map, out.cls_map[:, :1, :1].expand_as(out.cls_map))
        assert torch.allclose(out.reg_map, out.reg_map[:, :1, :1].expand_as(out.reg_map))

    def test_deterministic_reruns(self, net):
        rng = np.random.default_rng(9)
        img_s, img_t = rand_image(rng, 256), rand_image(rng, 128)
        with torch.no_grad():
            def run():
                search = net.extract_features(img_s)
                template = reduce_template(net.extract_features(img_t), 16)
                heads = net.run_heads(net.fusion_block(search, template))
                return heads.cls_map.clone(), heads.reg_map.clone()
            c1, r1 = run()
            c2, r2 = run()
        assert torch.equal(c1, c2) and torch.equal(r1, r2)

    def test_fused_channel_check(self, net):
        bad = FeatureMap(torch.zeros(64, 16, 16, dtype=torch.float64), 16)
        with pytest.raises(ShapeError):
            net.run_heads(bad)

    def test_stride8_pipeline_doubles_map_side(self):
        net = build_model(ModelConfig(final_stride=8), seed=0)
        rng = np.random.default_rng(10)
        search = net.extract_features(rand_image(rng, 256))
        template = reduce_template(net.extract_features(rand_image(rng, 128)), 16)
        heads = net.run_heads(net.fusion_block(search, template))
        # map side always equals search_size / final_stride
        assert tuple(heads.cls_map.shape) == (1, 32, 32)
        assert tuple(heads.reg_map.shape) == (4, 32, 32)


class TestModelGradients:
    def test_full_miniature_gradcheck(self):
        torch.manual_seed(4)
        net = build_model(MINI, seed=0)
        search = torch.rand(1, 3, 64, 64, dtype=torch.float64)
        t_static = torch.rand(1, 3, 32, 32, dtype=torch.float64)
        t_dyn = torch.rand(1, 3, 32, 32, dtype=torch.float64)
        weights_cls = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        weights_reg = torch.randn(1, 4, 4, 4, dtype=torch.float64)

        def f():
            cls, reg = net(search, t_static, t_dyn)
            return (cls * weights_cls).sum() + (reg * weights_reg).sum()

        params = [p for p in net.parameters()]
        result = central_diff_check(f, params, n_coords=3, min_grad=1e-4)
        assert result.worst_rel <= 1e-4
        # the kink filter must not hollow out the check
        assert result.checked >= 2 * result.skipped and result.checked > 40


class TestCostReport:
    def test_conv_formula_3x3(self):
        params, flops = conv_cost(3, 128, 128, 16, 16, bias=True)
        assert params == 3 * 3 * 128 * 128 + 128 == 147_584
        assert flops == 2 * 9 * 128 * 128 * 16 * 16 == 75_497_472

    def test_conv_formula_1x1(self):
        params, flops = conv_cost(1, 144, 128, 16, 16, bias=True)
        assert params == 144 * 128 + 128 == 18_560
        assert flops == 2 * 144 * 128 * 256 == 9_437_184

    def test_totals_are_sums(self):
        rep = count_cost(ModelConfig())
        assert rep.params == sum(l.params for l in rep.per_layer)
        assert rep.flops == sum(l.flops for l in rep.per_layer)

    def test_params_match_torch_exactly(self):
        for cfg in (ModelConfig(), MINI, ModelConfig(final_stride=8, head_blocks=3)):
            net = build_model(cfg, seed=0)
            assert count_cost(cfg).params == sum(p.numel() for p in net.parameters())

    def test_stride16_heads_exactly_4x_cheaper(self):
        rep16 = count_cost(ModelConfig(final_stride=16))
        rep8 = count_cost(ModelConfig(final_stride=8))
        assert rep8.flops_matching("heads.") == 4 * rep16.flops_matching("heads.")
        assert rep16.flops < rep8.flops

    def test_dual_template_costs_one_parameter(self):
        with_mix = count_cost(ModelConfig(dual_template=True))
        without = count_cost(ModelConfig(dual_template=False))
        assert with_mix.params - without.params == 1

    def test_bn_cost(self):
        assert bn_cost(128, 16, 16) == (256, 128 * 256)
