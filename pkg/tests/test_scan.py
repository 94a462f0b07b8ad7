import numpy as np
import pytest
from cmscan.numerics.tensor import Variable, DimensionError, ConfigurationError, ContractError, NumericError, tracked
from cmscan.numerics.gradcheck import grad_check
from cmscan.numerics.primitives import concat
from cmscan.numerics.rng import Rng
from cmscan.scan.layout import DIRECTIONS, DirectionalLayout, build_layouts, build_directional_sequences, merge_scans, scatter_tokens
from cmscan.scan.recurrence import MODES, STRAIGHT, SWAPPED, RecurrenceInputs, AffinePairElement, discretize, checkpoint_stride,\
    recurrence_sequential, recurrence_parallel, recurrence_backward
from cmscan.scan.ssmparams import SsmParams, SsmDirectionParams
from cmscan.scan.cmss2d import cm_ss2d, cm_ss2d_forward, cm_ss2d_backward, cross_modal_recurrence_seq, cross_modal_recurrence_par,\
    project_parameters

def random_inputs(seed : int, batch : int = 2, pixels : int = 7, channels : int = 3, state_dim : int = 2):
    generator = np.random.default_rng(seed)
    shape = (batch, 4, pixels, 2)
    return RecurrenceInputs(x=generator.standard_normal(shape + (channels,)),\
        delta=generator.uniform(0.2, 0.8, shape + (channels,)),\
        B=generator.standard_normal(shape + (state_dim,)),\
        C=generator.standard_normal(shape + (state_dim,)),\
        A=-generator.uniform(0.5, 1.5, (4, channels, state_dim)),\
        D=generator.standard_normal((4, channels)))

def hand_inputs():
    """Two pixels, one channel, one state: Abar = 0.5, Bbar = 1, C = 1, D = 0"""
    x = np.zeros((1, 4, 2, 2, 1))
    x[..., 0, :, 0] = [1.0, 3.0]
    x[..., 1, :, 0] = [2.0, 4.0]
    return RecurrenceInputs(x=x, delta=np.ones_like(x), B=np.ones_like(x), C=np.ones_like(x),\
        A=np.full((4, 1, 1), -np.log(2.0)), D=np.zeros((4, 1)))

def recurrence_op(variables : list, mode : str, stride : int = None):
    """Wrap the recurrence and its adjoint as a tape operation over (x, delta, B, C, A, D)"""
    def fn(tape):
        values = dict(zip(('x', 'delta', 'B', 'C', 'A', 'D'), (variable.value for variable in variables)))
        inputs = RecurrenceInputs(**values)
        outputs, checkpoints = recurrence_sequential(inputs, mode=mode, stride=stride)
        out = Variable(outputs, requires_grad=tracked(tape, *variables))
        if out.requires_grad:
            def adjoint():
                grads = recurrence_backward(inputs, checkpoints, out.grad, mode=mode, stride=stride)
                for variable, grad in zip(variables, (grads.x, grads.delta, grads.B, grads.C, grads.A, grads.D)):
                    variable.accumulate(grad)
            tape.record(adjoint)
        return out
    return fn

def small_params(channels : int = 2, state_dim : int = 2, rank : int = 1, seed : int = 3):
    return SsmParams('scan', channels, state_dim, rank, rng=Rng(seed), dtype=np.float64)

class TestLayout:

    def test_orders_on_a_2x3_grid(self):
        orders = {direction: DirectionalLayout(direction, 2, 3).get_pixel_order().tolist() for direction in DIRECTIONS}
        assert orders['RowFwd'] == [0, 1, 2, 3, 4, 5]
        assert orders['ColFwd'] == [0, 3, 1, 4, 2, 5]
        assert orders['RowRev'] == [5, 4, 3, 2, 1, 0]
        assert orders['ColRev'] == [5, 2, 4, 1, 3, 0]

    @pytest.mark.parametrize('height, width', [(1, 1), (1, 5), (4, 3)])
    def test_inverse_order(self, height, width):
        for layout in build_layouts(height, width):
            np.testing.assert_array_equal(layout.get_inverse_order()[layout.get_pixel_order()], np.arange(height * width))

    def test_unknown_direction(self):
        with pytest.raises(ConfigurationError):
            DirectionalLayout('Diagonal', 2, 2)

    def test_interleaving_puts_rgb_first(self):
        rgb = np.arange(12.0).reshape(2, 2, 3)
        thermal = -rgb
        sequence = build_directional_sequences(rgb, thermal)
        tokens = sequence.get_tokens()
        assert tokens.shape == (1, 4, 12, 2)
        np.testing.assert_array_equal(tokens[0, 0, 0], rgb[:, 0, 0])
        np.testing.assert_array_equal(tokens[0, 0, 1], thermal[:, 0, 0])
        np.testing.assert_array_equal(tokens[0, 1, 2], rgb[:, 1, 0])
        np.testing.assert_array_equal(tokens[0, 2, 0], rgb[:, 1, 2])
        np.testing.assert_array_equal(sequence.get_pairs()[0, 3, 0, 1], thermal[:, 1, 2])
        np.testing.assert_array_equal(sequence.get_rgb()[0, 0], rgb.reshape(2, 6).T)

    def test_mismatched_modalities(self):
        with pytest.raises(DimensionError):
            build_directional_sequences(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))

    def test_merge_sums_the_four_directions(self):
        features = np.random.default_rng(0).standard_normal((2, 3, 2, 4))
        sequence = build_directional_sequences(features, 2 * features)
        merged_rgb, merged_thermal = merge_scans(sequence.get_rgb(), sequence.get_thermal(), sequence.get_layouts(), 2, 4)
        np.testing.assert_allclose(merged_rgb, 4 * features)
        np.testing.assert_allclose(merged_thermal, 8 * features)

    def test_scatter_is_the_adjoint_of_interleaving(self):
        generator = np.random.default_rng(1)
        rgb, thermal = generator.standard_normal((2, 3, 3, 2)), generator.standard_normal((2, 3, 3, 2))
        grad_tokens = generator.standard_normal((2, 4, 12, 3))
        tokens = build_directional_sequences(rgb, thermal).get_tokens()
        grad_rgb, grad_thermal = scatter_tokens(grad_tokens, build_layouts(3, 2), 3, 2)
        np.testing.assert_allclose((tokens * grad_tokens).sum(), (rgb * grad_rgb).sum() + (thermal * grad_thermal).sum())

class TestRecurrence:

    def test_discretize(self):
        A_bar, B_bar = discretize(np.array([[-np.log(2.0)]]), np.array([3.0]), np.array([2.0]))
        np.testing.assert_allclose(A_bar, [[0.25]])
        np.testing.assert_allclose(B_bar, [[6.0]])

    def test_discretize_overflow(self):
        with pytest.raises(NumericError):
            discretize(np.array([[1e3]]), np.array([1.0]), np.array([1e3]))

    @pytest.mark.parametrize('step', [0.0, -0.5])
    def test_discretize_rejects_non_positive_steps(self, step):
        with pytest.raises(NumericError):
            discretize(np.array([[-1.0]]), np.array([1.0]), np.array([step]))

    @pytest.mark.parametrize('mode', MODES)
    def test_states_stay_bounded(self, mode):
        generator = np.random.default_rng(9)
        shape = (1, 4, 400, 2)
        inputs = RecurrenceInputs(x=generator.uniform(-1, 1, shape + (2,)), delta=generator.uniform(0.2, 0.8, shape + (2,)),\
            B=generator.uniform(-1, 1, shape + (3,)), C=generator.uniform(-1, 1, shape + (3,)),\
            A=-generator.uniform(0.5, 1.5, (4, 2, 3)), D=generator.uniform(-1, 1, (4, 2)))
        transition, drive = discretize(inputs.A[None, :, None, None], inputs.B, inputs.delta)
        assert (transition > 0).all() and (transition < 1).all()
        bound = np.abs(drive * inputs.x[..., None]).max() / (1 - transition.max())
        outputs, checkpoints = recurrence_sequential(inputs, mode=mode, stride=1)
        assert len(checkpoints) == 400
        assert max(np.abs(state).max() for state in checkpoints) <= bound
        assert np.isfinite(outputs).all()

    def test_skip_only_backward(self):
        base = random_inputs(13, batch=2, pixels=5, channels=3, state_dim=2)
        inputs = RecurrenceInputs(x=base.x, delta=base.delta, B=np.zeros_like(base.B), C=np.zeros_like(base.C), A=base.A, D=base.D)
        outputs, checkpoints = recurrence_sequential(inputs)
        np.testing.assert_allclose(outputs, base.D[None, :, None, None, :] * base.x)
        upstream = np.random.default_rng(14).standard_normal(outputs.shape)
        grads = recurrence_backward(inputs, checkpoints, upstream)
        np.testing.assert_allclose(grads.D, (upstream * base.x).sum(axis=(0, 2, 3)))
        np.testing.assert_allclose(grads.x, base.D[None, :, None, None, :] * upstream)
        np.testing.assert_array_equal(grads.C, 0.0)

    def test_checkpoint_stride(self):
        assert checkpoint_stride(1) == 1
        assert checkpoint_stride(16) == 4
        assert checkpoint_stride(17) == 5

    @pytest.mark.parametrize('mode, expected', [
        ('swapped', [[1.0, 3.0], [3.5, 4.5]]),
        ('intra', [[1.0, 3.0], [2.5, 5.5]]),
        ('strict', [[1.0, 3.5], [3.75, 5.875]]),
    ])
    def test_hand_computed_states(self, mode, expected):
        for recurrence in (recurrence_sequential, recurrence_parallel):
            outputs, _ = recurrence(hand_inputs(), mode=mode)
            for direction in range(4):
                np.testing.assert_allclose(outputs[0, direction, :, :, 0], expected)

    @pytest.mark.parametrize('mode', MODES)
    @pytest.mark.parametrize('pixels', [1, 2, 7, 16])
    def test_parallel_matches_sequential(self, mode, pixels):
        inputs = random_inputs(pixels, pixels=pixels)
        sequential, seq_checkpoints = recurrence_sequential(inputs, mode=mode)
        parallel, par_checkpoints = recurrence_parallel(inputs, mode=mode)
        np.testing.assert_allclose(parallel, sequential, rtol=1e-9, atol=1e-10)
        assert len(par_checkpoints) == len(seq_checkpoints)
        for seq_state, par_state in zip(seq_checkpoints, par_checkpoints):
            np.testing.assert_allclose(par_state, seq_state, rtol=1e-9, atol=1e-10)

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            recurrence_sequential(hand_inputs(), mode='diagonal')

    def test_rejects_unpaired_tokens(self):
        with pytest.raises(DimensionError):
            RecurrenceInputs(x=np.zeros((1, 4, 2, 3, 1)), delta=np.zeros((1, 4, 2, 3, 1)), B=np.zeros((1, 4, 2, 3, 1)),\
                C=np.zeros((1, 4, 2, 3, 1)), A=np.zeros((4, 1, 1)), D=np.zeros((4, 1)))

    @pytest.mark.parametrize('mode', MODES)
    @pytest.mark.parametrize('stride', [None, 1, 3])
    def test_backward(self, mode, stride):
        inputs = random_inputs(11, batch=1, pixels=5, channels=2, state_dim=2)
        variables = [Variable(getattr(inputs, name).copy(), name=name, requires_grad=True) for name in ('x', 'delta', 'B', 'C', 'A', 'D')]
        assert grad_check(recurrence_op(variables, mode, stride), variables, atol=1e-8) < 1e-5

    def test_backward_needs_checkpoints(self):
        inputs = hand_inputs()
        outputs, _ = recurrence_sequential(inputs)
        with pytest.raises(ContractError):
            recurrence_backward(inputs, [], np.ones_like(outputs))

class TestAffinePairElement:

    def element(self, seed : int = 0):
        generator = np.random.default_rng(seed)
        parity = np.array([SWAPPED, STRAIGHT, SWAPPED], dtype=np.int8)
        return AffinePairElement(parity, generator.uniform(0.1, 0.9, (3, 2, 4)), generator.standard_normal((3, 2, 4)))

    def test_identity_is_neutral_on_both_sides(self):
        element = self.element()
        identity = AffinePairElement.identity((2, 4))
        for composed in (AffinePairElement.compose(element, identity), AffinePairElement.compose(identity, element)):
            np.testing.assert_array_equal(composed.parity, element.parity)
            np.testing.assert_array_equal(composed.scale, element.scale)
            np.testing.assert_array_equal(composed.offset, element.offset)

    def test_compose_applies_first_then_second(self):
        first, second = self.element(1), self.element(2)
        state = np.random.default_rng(3).standard_normal((3, 2, 4))
        np.testing.assert_allclose(AffinePairElement.compose(first, second).apply(state), second.apply(first.apply(state)))

    def test_swapped_parity_exchanges_lanes(self):
        element = AffinePairElement(np.array([SWAPPED], dtype=np.int8), np.ones((1, 2, 1)), np.zeros((1, 2, 1)))
        np.testing.assert_array_equal(element.apply(np.array([[[1.0], [2.0]]])), [[[2.0], [1.0]]])

class TestSsmParams:

    def test_shapes_and_negative_A(self):
        params = SsmParams('scan', 4, 3, 2, rng=Rng(0))
        assert params.A_log.value.shape == (4, 4, 3)
        assert params.W_down.value.shape == (4, 2, 4)
        assert params.W_up.value.shape == (4, 4, 2)
        assert (params.get_A() < 0).all()
        assert sum(param.size() for param in params.parameters()) == 4 * (3 * 4 * 3 + 2 * 4 + 2 * 2 * 4)

    def test_direction_round_trip(self):
        params = small_params()
        rebuilt = SsmParams.from_directions('copy', [params.get_direction(index) for index in range(4)])
        for field, param in params.get_param_dict().items():
            np.testing.assert_array_equal(getattr(rebuilt, field).value, param.value)

    def test_direction_shape_check(self):
        direction = small_params().get_direction(0)
        fields = {field: getattr(direction, field) for field in SsmDirectionParams.FIELDS}
        fields['W_up'] = np.zeros((3, 1))
        with pytest.raises(DimensionError):
            SsmDirectionParams(**fields)

class TestCmSs2d:

    def features(self, seed : int = 0, shape : tuple = (2, 2, 3, 3)):
        generator = np.random.default_rng(seed)
        return generator.standard_normal(shape), generator.standard_normal(shape)

    def test_output_shapes(self):
        rgb, thermal = self.features(shape=(2, 3, 2))
        merged_rgb, merged_thermal, _ = cm_ss2d_forward(rgb, thermal, small_params())
        assert merged_rgb.shape == merged_thermal.shape == (2, 3, 2)

    @pytest.mark.parametrize('mode', MODES)
    def test_parallel_scan_matches(self, mode):
        rgb, thermal = self.features()
        params = small_params()
        sequence = build_directional_sequences(rgb, thermal)
        seq_rgb, seq_thermal = cross_modal_recurrence_seq(sequence, params, mode=mode)
        par_rgb, par_thermal = cross_modal_recurrence_par(sequence, params, mode=mode)
        np.testing.assert_allclose(par_rgb, seq_rgb, rtol=1e-9, atol=1e-10)
        np.testing.assert_allclose(par_thermal, seq_thermal, rtol=1e-9, atol=1e-10)

    def test_zero_tokens_projection(self):
        params = small_params(channels=3)
        params.delta_bias.value[:] = 0.0
        sequence = build_directional_sequences(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)))
        projection = project_parameters(sequence, params)
        np.testing.assert_array_equal(projection.B, 0.0)
        np.testing.assert_array_equal(projection.C, 0.0)
        np.testing.assert_allclose(projection.delta, np.log(2.0), rtol=1e-15)

    def transcript_params(self):
        """C = N = R = 1, Abar = 0.5, delta = 1, B = C = token, D = 0"""
        direction = SsmDirectionParams(A_log=[[np.log(np.log(2.0))]], D=[0.0], W_B=[[1.0]], W_C=[[1.0]],\
            W_down=[[0.0]], W_up=[[0.0]], delta_bias=[1.0])
        return SsmParams.from_directions('transcript', [direction] * 4)

    @pytest.mark.parametrize('parallel', [False, True])
    def test_hand_set_2x2_transcript(self, parallel):
        # per direction: h_r = 0.5 h_t + r^2, h_t = 0.5 h_r + t^2, y_r = r h_r, y_t = t h_t, summed over the four orders
        rgb = np.array([[[1.0, 2.0], [1.0, 1.0]]])
        thermal = np.array([[[2.0, 1.0], [1.0, 1.0]]])
        merged_rgb, merged_thermal, _ = cm_ss2d_forward(rgb, thermal, self.transcript_params(), parallel=parallel, delta_softplus=False)
        np.testing.assert_allclose(merged_rgb[0], [[6.5, 40.0], [8.0, 7.25]], rtol=1e-12)
        np.testing.assert_allclose(merged_thermal[0], [[38.5, 7.25], [10.25, 7.25]], rtol=1e-12)

    @pytest.mark.parametrize('mode', ['swapped', 'intra'])
    def test_exchanging_modalities_exchanges_outputs(self, mode):
        rgb, thermal = self.features(seed=4)
        params = small_params()
        merged_rgb, merged_thermal, _ = cm_ss2d_forward(rgb, thermal, params, mode=mode)
        exchanged_rgb, exchanged_thermal, _ = cm_ss2d_forward(thermal, rgb, params, mode=mode)
        np.testing.assert_allclose(exchanged_rgb, merged_thermal, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(exchanged_thermal, merged_rgb, rtol=1e-12, atol=1e-14)

    def test_thermal_reaches_rgb_only_across_modalities(self):
        rgb, thermal = self.features()
        params = small_params()
        for mode, coupled in (('swapped', True), ('strict', True), ('intra', False)):
            base, _, _ = cm_ss2d_forward(rgb, thermal, params, mode=mode)
            other, _, _ = cm_ss2d_forward(rgb, np.zeros_like(thermal), params, mode=mode)
            assert (not np.allclose(base, other)) == coupled, mode

    def test_directions_are_independent(self):
        rgb, thermal = self.features()
        params = small_params()
        sequence = build_directional_sequences(rgb, thermal)
        base_rgb, _ = cross_modal_recurrence_seq(sequence, params)
        params.W_B.value[1] += 1.0
        params.D.value[2] += 1.0
        other_rgb, _ = cross_modal_recurrence_seq(sequence, params)
        np.testing.assert_allclose(other_rgb[:, [0, 3]], base_rgb[:, [0, 3]], rtol=1e-12, atol=1e-14)
        assert not np.allclose(other_rgb[:, 1], base_rgb[:, 1])

    def test_backward_needs_forward_state(self):
        with pytest.raises(ContractError):
            cm_ss2d_backward(None, np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))

    @pytest.mark.parametrize('mode', MODES)
    def test_tape_gradients(self, mode):
        generator = np.random.default_rng(5)
        rgb = Variable(generator.standard_normal((1, 2, 2, 3)), name='rgb')
        thermal = Variable(generator.standard_normal((1, 2, 2, 3)), name='thermal')
        params = small_params()

        def objective(tape):
            merged_rgb, merged_thermal = cm_ss2d(tape, rgb, thermal, params, mode=mode)
            return concat(tape, [merged_rgb, merged_thermal], axis=1)

        variables = [rgb, thermal] + list(params.get_param_dict().values())
        assert grad_check(objective, variables, atol=1e-8) < 1e-5

    def test_unbatched_backward(self):
        rgb, thermal = self.features(shape=(2, 2, 2))
        merged_rgb, merged_thermal, context = cm_ss2d_forward(rgb, thermal, small_params())
        grad_rgb, grad_thermal, grads = cm_ss2d_backward(context, np.ones_like(merged_rgb), np.ones_like(merged_thermal))
        assert grad_rgb.shape == grad_thermal.shape == (2, 2, 2)
        assert set(grads) == set(SsmDirectionParams.FIELDS)

class TestScanEquivalence:

    @pytest.mark.parametrize('dtype, tolerance', [(np.float64, 1e-10), (np.float32, 1e-5)])
    @pytest.mark.parametrize('channels', [1, 4])
    @pytest.mark.parametrize('state_dim', [1, 8])
    def test_parallel_matches_sequential_over_sizes(self, dtype, tolerance, channels, state_dim):
        generator = np.random.default_rng(10 * channels + state_dim)
        params = SsmParams('scan', channels, state_dim, 1, rng=Rng(state_dim), dtype=dtype)
        for height in range(1, 9):
            for width in range(1, 9):
                rgb, thermal = (generator.standard_normal((1, channels, height, width)).astype(dtype) for _ in range(2))
                sequential = cm_ss2d_forward(rgb, thermal, params)[:2]
                parallel = cm_ss2d_forward(rgb, thermal, params, parallel=True)[:2]
                for expected, actual in zip(sequential, parallel):
                    assert actual.dtype == dtype
                    error = np.abs(actual - expected).max() / max(np.abs(expected).max(), 1e-8)
                    assert error < tolerance, (height, width)
