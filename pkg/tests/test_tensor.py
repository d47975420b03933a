import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.errors import ContractError, DegenerateVarianceError, DimensionError, InstabilityError
from brain import functional as F
from brain.gradcheck import OPS, check_op, grad_check
from brain.tensor import Tape, Tensor, count_macs, record


class TestTensor:
    def test_integer_data_becomes_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_is_preserved(self):
        assert Tensor(np.zeros(3)).dtype == np.float64

    def test_shape_matches_data(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert t.size == 24


class TestMatmul:
    def test_identity(self):
        out = F.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_arithmetic(self):
        assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_mismatch_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_is_ones_times_b_transposed(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)))
        with Tape() as tape:
            tape.backward(F.sum(a @ b))
        assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)

    def test_gradient_passes_finite_differences(self, rng):
        report = grad_check(lambda a, b: F.sum(a @ b), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
                            tol=1e-6)
        assert report.passed


class TestConv2d:
    def test_all_ones(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_zero_kernel_gives_bias(self):
        out = F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))),
                       Tensor([0.5, -1.0, 2.0]), padding=1)
        assert_array_equal(out.data[0, :, 1, 2], [0.5, -1.0, 2.0])
        assert np.all(out.data[0, 2] == 2.0)

    @pytest.mark.parametrize("kernel", [1, 3, 5])
    def test_same_padding_preserves_extents(self, rng, kernel):
        x = Tensor(rng.standard_normal((2, 3, 7, 9)))
        w = Tensor(rng.standard_normal((4, 3, kernel, kernel)))
        assert F.conv2d(x, w, padding=(kernel - 1) // 2).shape == (2, 4, 7, 9)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


class TestBatchNorm:
    def _run(self, x, training=True):
        channels = x.shape[1]
        mean, var = np.zeros(channels), np.ones(channels)
        out = F.batchnorm2d(Tensor(x), Tensor(np.ones(channels)), Tensor(np.full(channels, 0.25)),
                            mean, var, training)
        return out, mean, var

    def test_constant_channel_gives_beta(self):
        out, _, _ = self._run(np.full((2, 3, 2, 2), 7.0))
        assert_allclose(out.data, 0.25, atol=1e-6)

    def test_standardized_channel_is_unchanged(self):
        x = np.array([[[[-1.0, 1.0], [1.0, -1.0]]]])
        mean, var = np.zeros(1), np.ones(1)
        out = F.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), mean, var, True)
        assert np.max(np.abs(out.data - x)) < 1e-5

    def test_running_stats_update_with_momentum(self):
        x = np.array([[[[-1.0, 1.0], [1.0, -1.0]]]])
        _, mean, var = self._run(x)
        assert_allclose(mean, [0.0])
        assert_allclose(var, [0.9 + 0.1 * 4.0 / 3.0])

    def test_eval_mode_uses_running_stats(self):
        x = np.full((1, 1, 2, 2), 3.0)
        mean, var = np.array([1.0]), np.array([4.0])
        out = F.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), mean, var, False)
        assert_allclose(out.data, (3.0 - 1.0) / np.sqrt(4.0 + 1e-5))

    def test_single_value_per_channel_is_degenerate(self):
        with pytest.raises(DegenerateVarianceError):
            self._run(np.ones((1, 3, 1, 1)))


class TestActivations:
    def test_relu(self):
        assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_softmax_uniform(self):
        assert_allclose(F.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)

    def test_softmax_is_stable(self):
        out = F.softmax(Tensor([1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        assert_allclose(out, [0.5, 0.5])

    def test_softmax_slices_sum_to_one(self, rng):
        out = F.softmax(Tensor(rng.standard_normal((3, 5, 7)) * 10), axis=1).data
        assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out >= 0)

    def test_softmax_bad_axis(self):
        with pytest.raises(DimensionError):
            F.softmax(Tensor(np.zeros((2, 2))), axis=2)

    def test_sigmoid_range(self, rng):
        out = F.sigmoid(Tensor(rng.standard_normal(100) * 5)).data
        assert np.all((out > 0) & (out < 1))


class TestResampling:
    def test_maxpool(self):
        assert F.maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.tolist() == [[[[4.0]]]]

    def test_nearest_upsample(self):
        assert_array_equal(F.upsample2x(Tensor([[[[1.0]]]])).data, np.ones((1, 1, 2, 2)))

    @pytest.mark.parametrize("mode", ["nearest", "bilinear"])
    def test_upsample_of_maxpool_preserves_shape(self, rng, mode):
        x = Tensor(rng.standard_normal((2, 3, 8, 6)))
        assert F.upsample2x(F.maxpool2d(x), mode).shape == x.shape

    def test_bilinear_keeps_constants(self):
        assert_allclose(F.upsample2x(Tensor(np.full((1, 1, 3, 3), 2.5)), "bilinear").data, 2.5)

    def test_concat_extent_is_the_sum(self):
        out = F.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4)))], axis=1)
        assert out.shape == (1, 5, 4, 4)

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            F.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 5)))], axis=1)

    def test_add_broadcast_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(F.sum(x * x))
        assert_allclose(x.grad, [2.0, 4.0])

    def test_parameter_detached_from_loss_gets_zero(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        x = Tensor([3.0, 4.0], requires_grad=True)
        with Tape() as tape:
            p * 2.0
            tape.backward(F.sum(x * x))
        assert_array_equal(p.grad, [0.0, 0.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            with pytest.raises(ContractError):
                tape.backward(x * 2.0)

    def test_second_backward_without_reset(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = F.sum(x * x)
            tape.backward(loss)
            with pytest.raises(ContractError):
                tape.backward(loss)

    def test_reset_allows_a_new_pass(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(F.sum(x * x))
            tape.reset()
            x.zero_grad()
            tape.backward(F.sum(x * x * x))
        assert_allclose(x.grad, [27.0])

    def test_nothing_is_recorded_outside_a_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 3.0
        assert y.tape_id is None

    def test_shared_input_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(F.sum(x * x + x))
        assert_allclose(x.grad, [5.0])

    def test_gradients_have_tensor_shapes(self, rng):
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
        with Tape() as tape:
            tape.backward(F.mean(F.relu(F.conv2d(x, w, padding=1))))
        assert w.grad.shape == w.shape
        assert x.grad.shape == x.shape


class TestEinsum:
    def test_requires_explicit_output(self):
        with pytest.raises(ValueError):
            F.einsum("ij,jk", Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))

    def test_extent_mismatch(self):
        with pytest.raises(DimensionError):
            F.einsum("ij,jk->ik", Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_matches_numpy(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        assert_allclose(F.einsum("nij,jk->nik", Tensor(a), Tensor(b)).data, a @ b)


class TestMacCounter:
    def test_matmul_macs(self):
        with count_macs() as counter:
            Tensor(np.zeros((3, 4))) @ Tensor(np.zeros((4, 5)))
        assert counter.total == 3 * 4 * 5

    def test_conv_macs(self):
        with count_macs() as counter:
            F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))), padding=1)
        assert counter.by_op == {"conv2d": 3 * 16 * 2 * 9}

    def test_counting_stops_outside_the_context(self):
        with count_macs() as counter:
            pass
        Tensor(np.zeros((3, 4))) @ Tensor(np.zeros((4, 5)))
        assert counter.total == 0


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_registered_op(self, name):
        report = check_op(name, seed=0)
        assert report.passed, report.per_tensor

    @pytest.mark.slow
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_registered_op_over_twenty_seeds(self, name):
        failures = [s for s in range(20) if not check_op(name, seed=s).passed]
        assert failures == []

    def test_non_finite_output_is_an_instability(self):
        with pytest.raises(InstabilityError):
            grad_check(lambda x: F.sum(F.log(x)), [np.array([-1.0, 1.0])])

    def test_wrong_gradient_is_caught(self):
        def broken(x):
            # forward x^2, but the recorded backward is the identity
            return F.sum(record("broken", (x,), x.data ** 2, lambda g: (g,)))

        assert not grad_check(broken, [np.array([1.0, 2.0, 3.0])]).passed
