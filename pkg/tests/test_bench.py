import json
import numpy as np
import pytest
from cmscan.numerics.tensor import ConfigurationError, DimensionError
from cmscan.numerics.rng import Rng
from cmscan.numerics.layers import Conv2d
from cmscan.fusion.modelconfig import ModelConfig
from cmscan.fusion.model import SegmentationModel
from cmscan.bench.flops import FlopsReport, linear_cost, conv_cost, count_block, count_flops, params_count
from cmscan.bench.attention import MAX_ATTENTION_PIXELS, AttentionSizeError, naive_cross_attention, CrossAttention
from cmscan.bench.scaling import ScalingReport, build_workload, time_workload, measure_runtime_scaling
from cmscan.bench.report import flops_table, write_json, plot_scaling

def small_config(**overrides):
    settings = {'stage_channels': [4, 4, 4, 4], 'num_classes': 3, 'decoder_hidden': 8,\
        'ssm': {'state_dim': 2, 'd_rank': 1, 'expand_factor': 1}}
    settings.update(overrides)
    return ModelConfig.from_dict(settings)

class TestFlops:

    def test_block_hand_count(self):
        report = count_block(4, 2, 2, small_config())
        assert report.get_total_flops() == 10048
        assert report.get_total_params() == 728

    def test_cost_rules(self):
        assert linear_cost(10, 3, 5) == (300, 20)
        assert linear_cost(10, 3, 5, bias=False) == (300, 15)
        assert conv_cost(2, 4, 3, 8, 8) == (2 * 8 * 8 * 4 * 2 * 9, 4 * 2 * 9 + 4)
        assert conv_cost(4, 4, 3, 2, 2, groups=4) == (288, 40)

    def test_params_count(self):
        assert params_count(Conv2d('conv', 2, 4, 3, Rng(0))) == 76
        assert params_count(None) == 0

    def test_analytic_params_match_the_model(self):
        config = small_config()
        assert count_flops(config, 64, 64).get_total_params() == params_count(SegmentationModel(config, Rng(0)))

    def test_addition_has_no_blocks(self):
        with_blocks = count_flops(small_config(), 64, 64)
        without = count_flops(small_config(fusion='addition'), 64, 64)
        assert without.get_total_flops() < with_blocks.get_total_flops()
        assert not any(entry.name.startswith('block') for entry in without.entries)

    def test_scan_cost_grows_linearly(self):
        small = count_block(4, 8, 8, small_config()).get_total_flops()
        large = count_block(4, 16, 16, small_config()).get_total_flops()
        assert large == 4 * small

    def test_report_merge_and_table(self):
        report = FlopsReport().add('a.x', 10, 2).add('a.y', 5).add('b', 1, 1)
        merged = FlopsReport().extend(report, 'm.')
        assert [entry.name for entry in merged.entries] == ['m.a.x', 'm.a.y', 'm.b']
        assert merged.to_dict()['total_flops'] == 16
        assert flops_table(report).row_count == 3

class TestAttention:

    @pytest.fixture
    def features(self):
        generator = np.random.default_rng(0)
        return generator.normal(size=(2, 3, 2, 3)), generator.normal(size=(2, 3, 2, 3))

    def test_zero_keys_average_values(self, features):
        feature_rgb, feature_thermal = features
        eye = np.eye(3)
        attended = naive_cross_attention(feature_rgb, feature_thermal, eye, np.zeros((3, 3)), eye)
        expected = np.broadcast_to(feature_thermal.mean(axis=(2, 3), keepdims=True), feature_rgb.shape)
        np.testing.assert_allclose(attended, expected, atol=1e-12)

    def test_single_pixel_returns_value(self):
        generator = np.random.default_rng(1)
        feature_rgb, feature_thermal = generator.normal(size=(4, 1, 1)), generator.normal(size=(4, 1, 1))
        w_query, w_key, w_value = (generator.normal(size=(4, 4)) for _ in range(3))
        attended = naive_cross_attention(feature_rgb, feature_thermal, w_query, w_key, w_value)
        np.testing.assert_allclose(attended[:, 0, 0], w_value @ feature_thermal[:, 0, 0], atol=1e-12)

    def test_matches_loop(self, features):
        feature_rgb, feature_thermal = features
        generator = np.random.default_rng(2)
        w_query, w_key, w_value = (generator.normal(size=(3, 3)) for _ in range(3))
        attended = naive_cross_attention(feature_rgb, feature_thermal, w_query, w_key, w_value)
        for b in range(2):
            tokens_rgb = feature_rgb[b].reshape(3, -1).T
            tokens_thermal = feature_thermal[b].reshape(3, -1).T
            for q in range(6):
                scores = np.array([(w_query @ tokens_rgb[q]) @ (w_key @ tokens_thermal[k]) for k in range(6)]) / np.sqrt(3)
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                expected = sum(weights[k] * (w_value @ tokens_thermal[k]) for k in range(6))
                np.testing.assert_allclose(attended[b].reshape(3, -1)[:, q], expected, rtol=1e-10)

    def test_size_guard(self):
        side = int(np.sqrt(MAX_ATTENTION_PIXELS)) + 1
        feature = np.zeros((1, side, side), dtype=np.float32)
        with pytest.raises(AttentionSizeError):
            naive_cross_attention(feature, feature, np.eye(1), np.eye(1), np.eye(1))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            naive_cross_attention(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), np.eye(2), np.eye(2), np.eye(2))

    def test_module_keeps_shape(self):
        feature = np.ones((1, 4, 3, 3), dtype=np.float32)
        assert CrossAttention('attn', 4, Rng(0)).forward(feature, feature).shape == (1, 4, 3, 3)

class TestScaling:

    @pytest.mark.parametrize('sides, reps', [([8, 16, 32], 5), ([8, 16, 16, 32], 5), ([8, 16, 32, 64], 4)])
    def test_rejects_grids(self, sides, reps):
        with pytest.raises(ConfigurationError):
            measure_runtime_scaling('linear', sides, reps=reps)

    def test_unknown_op(self):
        with pytest.raises(ConfigurationError):
            build_workload('fft', 8, Rng(0))

    def test_time_workload_counts_calls(self):
        calls = list()
        seconds = time_workload(lambda: calls.append(1), reps=5, warmup=2)
        assert len(calls) == 7
        assert seconds >= 0.0

    def test_cm_ss2d_workload_runs(self):
        build_workload('cm_ss2d', 4, Rng(0), channels=4, state_dim=2)()

    def test_report_fields(self):
        report = measure_runtime_scaling('linear', [32, 64, 128, 256], reps=5, warmup=0)
        assert report.sizes == sorted(report.sizes)
        assert len(report.sizes) + len(report.dropped) == 4
        assert len(report.medians) == len(report.sizes) >= 2
        assert np.isfinite(report.get_slope())

    @pytest.mark.slow
    @pytest.mark.parametrize('op, sides, low, high', [('linear', [64, 128, 256, 512], 0.7, 1.3), ('quadratic', [24, 32, 48, 64], 1.6, 2.4)])
    def test_calibration_slopes(self, op, sides, low, high):
        assert low <= measure_runtime_scaling(op, sides, reps=5).get_slope() <= high

    @pytest.mark.slow
    def test_cm_ss2d_is_near_linear(self):
        assert 0.8 <= measure_runtime_scaling('cm_ss2d', [32, 64, 128, 256], reps=5).get_slope() <= 1.3

    @pytest.mark.slow
    def test_attention_is_quadratic(self):
        scan = measure_runtime_scaling('cm_ss2d', [32, 64, 128, 256], reps=5)
        attention = measure_runtime_scaling('attention', [24, 32, 48, 64], reps=5)
        assert attention.get_slope() >= 1.7
        assert attention.get_slope() - scan.get_slope() >= 0.5

class TestReport:

    def reports(self):
        return [ScalingReport(op='linear', sizes=[16, 64, 256, 1024], medians=[1e-4, 4e-4, 1.6e-3, 6.4e-3], slope=1.0, intercept=float(np.log(1e-4 / 16)))]

    def test_write_json(self, tmp_path):
        path = write_json({'scaling': self.reports(), 'values': np.arange(3)}, str(tmp_path / 'out' / 'bench.json'))
        with open(path) as f: data = json.load(f)
        assert data['scaling'][0]['slope'] == 1.0
        assert data['values'] == [0, 1, 2]

    def test_plot_scaling(self, tmp_path):
        path = plot_scaling(self.reports(), str(tmp_path / 'scaling.png'))
        assert (tmp_path / 'scaling.png').stat().st_size > 0
        assert path.endswith('scaling.png')
