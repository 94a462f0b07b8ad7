import numpy as np
import pytest
from cmscan.numerics.tensor import Variable, Parameter, Tape, DimensionError, ConfigurationError, NumericError,\
    GradCheckError, as_tensor, check_shape, check_finite, tracked
from cmscan.numerics import primitives
from cmscan.numerics.primitives import DegenerateBatchError, interpolation_matrix
from cmscan.numerics.gradcheck import grad_check
from cmscan.numerics.layers import Linear, Conv2d, BatchNorm2d, ConvBnRelu, LayerNorm
from cmscan.numerics.rng import Rng

TOLERANCE = 1e-5
ATOL = 1e-8

class TestTensor:

    def test_as_tensor_defaults_to_f32(self):
        tensor = as_tensor([[1, 2], [3, 4]])
        assert tensor.dtype == np.float32
        assert tensor.flags['C_CONTIGUOUS']

    def test_as_tensor_rejects_integer_dtype(self):
        with pytest.raises(ConfigurationError):
            as_tensor([1, 2], dtype=np.int64)

    def test_as_tensor_rejects_empty_axis(self):
        with pytest.raises(DimensionError):
            as_tensor(np.zeros((2, 0)))

    def test_check_shape_wildcards(self):
        check_shape('x', np.zeros((2, 3, 4)), (None, 3, None))
        with pytest.raises(DimensionError):
            check_shape('x', np.zeros((2, 3, 4)), (2, 4, 4))

    def test_check_finite_carries_step(self):
        with pytest.raises(NumericError) as info:
            check_finite('loss', np.array([1.0, np.nan]), step=12)
        assert info.value.step == 12
        assert 'step 12' in str(info.value)

    def test_parameter_grad_starts_at_zero(self):
        param = Parameter(np.ones((2, 3)), 'w')
        assert param.grad.shape == (2, 3)
        assert not param.grad.any()
        assert param.size() == 6

    def test_parameter_requires_name(self):
        with pytest.raises(ValueError):
            Parameter(np.ones(2), '')

    def test_accumulate_rejects_mismatched_adjoint(self):
        variable = Variable(np.ones(3), requires_grad=True)
        with pytest.raises(DimensionError):
            variable.accumulate(np.ones(4))

    def test_inference_records_nothing(self):
        x = Variable(np.ones((2, 3)), requires_grad=True)
        weight = Variable(np.ones((4, 3)), requires_grad=True)
        out = primitives.linear(None, x, weight)
        assert not out.requires_grad
        assert not tracked(None, x)

    def test_tape_is_cleared_after_backward(self, draw):
        tape = Tape()
        x = draw(3)
        out = primitives.activation(tape, x, 'relu')
        tape.backward(out)
        assert tape.records == []

class TestPrimitiveValues:

    def test_linear(self):
        x = Variable(np.array([1.0, 2.0]))
        weight = Variable(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        bias = Variable(np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(primitives.linear(None, x, weight, bias).value, [1.0, 2.0, 4.0])

    def test_linear_shape_mismatch(self):
        with pytest.raises(DimensionError):
            primitives.linear(None, Variable(np.ones((2, 3))), Variable(np.ones((4, 2))))

    def test_conv_ones_kernel_counts_neighbours(self):
        x = Variable(np.ones((1, 1, 3, 3)))
        kernel = Variable(np.ones((1, 1, 3, 3)))
        y = primitives.conv2d(None, x, kernel).value[0, 0]
        np.testing.assert_allclose(y, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_conv_stride_two_output_size(self):
        x = Variable(np.ones((2, 3, 8, 6)))
        kernel = Variable(np.ones((5, 3, 3, 3)))
        assert primitives.conv2d(None, x, kernel, stride=2).value.shape == (2, 5, 4, 3)

    def test_conv_unbatched_input(self):
        x = Variable(np.arange(12.0).reshape(3, 2, 2))
        kernel = Variable(np.eye(3).reshape(3, 3, 1, 1))
        np.testing.assert_allclose(primitives.conv2d(None, x, kernel).value, x.value)

    def test_depthwise_conv(self):
        x = Variable(np.stack([np.ones((4, 4)), 2 * np.ones((4, 4))])[None])
        kernel = Variable(np.ones((2, 1, 1, 1)) * np.array([3.0, 5.0])[:, None, None, None])
        y = primitives.conv2d(None, x, kernel, groups=2).value
        np.testing.assert_allclose(y[0, 0], 3.0)
        np.testing.assert_allclose(y[0, 1], 10.0)

    @pytest.mark.parametrize('size, stride', [(5, 1), (3, 3)])
    def test_conv_rejects_unsupported_geometry(self, size, stride):
        with pytest.raises(ConfigurationError):
            primitives.conv2d(None, Variable(np.ones((1, 1, 6, 6))), Variable(np.ones((1, 1, size, size))), stride=stride)

    def test_conv_rejects_indivisible_groups(self):
        with pytest.raises(ConfigurationError):
            primitives.conv2d(None, Variable(np.ones((1, 3, 4, 4))), Variable(np.ones((4, 1, 1, 1))), groups=2)

    def test_batchnorm_train_normalizes_and_updates_running_stats(self, draw):
        x = draw(4, 2, 3, 3, scale=3.0)
        gamma, beta = Variable(np.ones(2)), Variable(np.zeros(2))
        running_mean, running_var = np.zeros(2), np.ones(2)
        y = primitives.batchnorm2d(None, x, gamma, beta, running_mean, running_var, train=True).value
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)
        count = 4 * 3 * 3
        expected_var = 0.9 + 0.1 * x.value.var(axis=(0, 2, 3)) * count / (count - 1)
        np.testing.assert_allclose(running_mean, 0.1 * x.value.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(running_var, expected_var)

    def test_batchnorm_eval_uses_running_stats(self):
        x = Variable(np.full((1, 1, 2, 2), 3.0))
        y = primitives.batchnorm2d(None, x, Variable(np.ones(1)), Variable(np.zeros(1)), np.array([1.0]), np.array([4.0]), train=False, eps=1e-12)
        np.testing.assert_allclose(y.value, 1.0)

    def test_batchnorm_single_value_per_channel(self):
        x = Variable(np.ones((1, 2, 1, 1)))
        with pytest.raises(DegenerateBatchError):
            primitives.batchnorm2d(None, x, Variable(np.ones(2)), Variable(np.zeros(2)), np.zeros(2), np.ones(2), train=True)

    def test_layernorm(self, draw):
        x = draw(3, 5, scale=2.0)
        y = primitives.layernorm(None, x, Variable(np.ones(5)), Variable(np.zeros(5))).value
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, rtol=1e-3)

    def test_activations(self):
        x = Variable(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_allclose(primitives.activation(None, x, 'relu').value, [0.0, 0.0, 2.0])
        np.testing.assert_allclose(primitives.activation(None, x, 'silu').value, x.value / (1 + np.exp(-x.value)))
        np.testing.assert_allclose(primitives.activation(None, x, 'softplus').value, np.log1p(np.exp(x.value)))
        with pytest.raises(ConfigurationError):
            primitives.activation(None, x, 'tanh')

    def test_softplus_large_inputs_stay_finite(self):
        y = primitives.activation(None, Variable(np.array([800.0, -800.0])), 'softplus').value
        np.testing.assert_allclose(y, [800.0, 0.0])

    @pytest.mark.parametrize('factor', [2, 4, 32])
    def test_interpolation_rows_are_convex(self, factor):
        matrix = interpolation_matrix(3, factor, np.float64)
        assert matrix.shape == (3 * factor, 3)
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0)
        assert (matrix >= 0).all()

    def test_upsample_keeps_constants(self):
        x = Variable(np.full((2, 3, 2, 2), 1.5))
        y = primitives.bilinear_upsample(None, x, 4).value
        assert y.shape == (2, 3, 8, 8)
        np.testing.assert_allclose(y, 1.5)

    def test_upsample_rejects_factor(self):
        with pytest.raises(ConfigurationError):
            primitives.bilinear_upsample(None, Variable(np.ones((2, 2))), 3)

    def test_add_mul_need_same_shape(self):
        with pytest.raises(DimensionError):
            primitives.add(None, Variable(np.ones(3)), Variable(np.ones(4)))
        with pytest.raises(DimensionError):
            primitives.mul(None, Variable(np.ones((2, 1))), Variable(np.ones((2, 2))))

    def test_softmax_sums_to_one(self, draw):
        probs = primitives.softmax(None, draw(2, 4, 3), axis=1).value
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

class TestPrimitiveGradients:

    def test_linear(self, draw):
        x, weight, bias = draw(2, 3, 4), draw(5, 4), draw(5)
        assert grad_check(lambda tape: primitives.linear(tape, x, weight, bias), [x, weight, bias], atol=ATOL) < TOLERANCE

    @pytest.mark.parametrize('size, stride, groups', [(3, 1, 1), (3, 2, 1), (1, 1, 1), (3, 1, 2)])
    def test_conv2d(self, draw, size, stride, groups):
        x, kernel, bias = draw(2, 4, 5, 5), draw(6, 4 // groups, size, size), draw(6)
        fn = lambda tape: primitives.conv2d(tape, x, kernel, bias, stride=stride, groups=groups)
        assert grad_check(fn, [x, kernel, bias], atol=ATOL) < TOLERANCE

    @pytest.mark.parametrize('train', [True, False])
    def test_batchnorm2d(self, draw, train):
        x, gamma, beta = draw(3, 2, 3, 3), draw(2), draw(2)
        running_mean, running_var = np.zeros(2), np.ones(2)
        fn = lambda tape: primitives.batchnorm2d(tape, x, gamma, beta, running_mean, running_var, train=train)
        assert grad_check(fn, [x, gamma, beta], atol=ATOL) < TOLERANCE

    def test_layernorm(self, draw):
        x, gamma, beta = draw(2, 3, 6), draw(6), draw(6)
        assert grad_check(lambda tape: primitives.layernorm(tape, x, gamma, beta), [x, gamma, beta], atol=ATOL) < TOLERANCE

    @pytest.mark.parametrize('kind', ['silu', 'relu', 'softplus'])
    def test_activation(self, draw, kind):
        x = draw(4, 5)
        assert grad_check(lambda tape: primitives.activation(tape, x, kind), [x], atol=ATOL) < TOLERANCE

    def test_bilinear_upsample(self, draw):
        x = draw(2, 2, 3, 2)
        assert grad_check(lambda tape: primitives.bilinear_upsample(tape, x, 2), [x], atol=ATOL) < TOLERANCE

    def test_add_mul_chain(self, draw):
        a, b = draw(3, 4), draw(3, 4)
        fn = lambda tape: primitives.mul(tape, primitives.add(tape, a, b), a)
        assert grad_check(fn, [a, b], atol=ATOL) < TOLERANCE

    def test_concat_permute_softmax(self, draw):
        a, b = draw(2, 2, 3), draw(2, 1, 3)
        fn = lambda tape: primitives.softmax(tape, primitives.permute(tape, primitives.concat(tape, [a, b], axis=1), (0, 2, 1)), axis=2)
        assert grad_check(fn, [a, b], atol=ATOL) < TOLERANCE

    def test_grad_check_detects_wrong_adjoint(self, draw):
        x = draw(4)

        def doubled(tape):
            out = Variable(2 * x.value, requires_grad=tracked(tape, x))
            if out.requires_grad: tape.record(lambda: x.accumulate(out.grad))
            return out

        with pytest.raises(GradCheckError):
            grad_check(doubled, [x], tolerance=1e-3)

    def test_grad_check_error_is_relative_to_numeric(self, draw):
        x = draw(4)

        def overstated(tape):
            out = Variable(x.value.copy(), requires_grad=tracked(tape, x))
            if out.requires_grad: tape.record(lambda: x.accumulate(2 * out.grad))
            return out

        assert grad_check(overstated, [x]) == pytest.approx(1.0, abs=1e-6)

    def test_grad_check_requires_f64(self):
        x = Variable(np.ones(3, dtype=np.float32), name='x')
        with pytest.raises(GradCheckError):
            grad_check(lambda tape: primitives.activation(tape, x, 'silu'), [x])

class TestLayers:

    def test_parameter_order_and_names(self, rng):
        block = ConvBnRelu('stem', 3, 4, 3, rng, stride=2)
        assert [param.name for param in block.parameters()] == ['stem.conv.kernel', 'stem.bn.gamma', 'stem.bn.beta']
        assert set(block.buffers()) == {'stem.bn.running_mean', 'stem.bn.running_var'}

    def test_conv_bn_relu_output(self, rng):
        block = ConvBnRelu('stem', 3, 4, 3, rng, stride=2)
        x = Variable(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
        y = block.forward(None, x, train=True).value
        assert y.shape == (2, 4, 4, 4)
        assert y.dtype == np.float32
        assert (y >= 0).all()

    def test_linear_forward_map(self, rng):
        layer = Linear('proj', 3, 5, rng)
        x = Variable(rng.normal(size=(2, 3, 4, 4)))
        y = layer.forward_map(None, x).value
        expected = np.einsum('oc,bchw->bohw', layer.weight.value, x.value)
        assert y.shape == (2, 5, 4, 4)
        np.testing.assert_allclose(y, expected, rtol=1e-5, atol=1e-6)

    def test_kaiming_bounds(self, rng):
        conv = Conv2d('conv', 8, 4, 3, rng)
        bound = np.sqrt(2.0) * np.sqrt(3.0 / (8 * 9))
        assert np.abs(conv.kernel.value).max() <= bound * (1 + 1e-6)

    def test_set_buffer_and_astype(self, rng):
        norm = BatchNorm2d('bn', 3)
        norm.set_buffer('bn.running_var', np.full(3, 2.0))
        np.testing.assert_allclose(norm.running_var, 2.0)
        with pytest.raises(KeyError):
            norm.set_buffer('bn.unknown', np.zeros(3))
        norm.astype(np.float64)
        assert norm.gamma.value.dtype == np.float64
        assert norm.running_mean.dtype == np.float64

    def test_layer_norm_parameters(self):
        assert [param.name for param in LayerNorm('ln', 4).parameters()] == ['ln.gamma', 'ln.beta']

class TestRng:

    def test_split_is_reproducible(self):
        np.testing.assert_array_equal(Rng(3).split(1, 4).uniform(size=5), Rng(3).split(1, 4).uniform(size=5))

    def test_parent_draws_do_not_shift_children(self):
        parent = Rng(3)
        parent.normal(size=100)
        np.testing.assert_array_equal(parent.split(2).integers(0, 1000, size=8), Rng(3).split(2).integers(0, 1000, size=8))

    def test_siblings_differ(self):
        assert not np.array_equal(Rng(3).split(0).uniform(size=8), Rng(3).split(1).uniform(size=8))
        assert not np.array_equal(Rng(3).uniform(size=8), Rng(4).uniform(size=8))

    def test_counter_advances(self):
        stream = Rng(0)
        start = stream.get_counter()
        stream.uniform(size=64)
        assert stream.get_counter() > start

    def test_permutation(self):
        assert sorted(Rng(1).permutation(6).tolist()) == list(range(6))
