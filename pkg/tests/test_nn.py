"""Engine tests: layer semantics, network builder, Adam, gradient suite."""
import numpy as np
import pytest

from omniqa import nn
from omniqa.nn import (
    Adam,
    BatchNorm,
    Conv2d,
    Dense,
    MaxPool2d,
    NetworkError,
    NumericError,
    Param,
    Softplus,
    build_network,
)
from omniqa.model import descriptor_specs


RNG = np.random.default_rng(0)


class TestConv:
    def test_one_by_one_identity(self):
        conv = Conv2d(1, 1, 1, 1, np.random.default_rng(0), dtype=np.float64)
        conv.weight.value[...] = 1.0
        x = np.random.default_rng(1).normal(size=(2, 1, 5, 5))
        assert np.allclose(conv.forward(x), x)

    def test_same_padding_output_size(self):
        conv = Conv2d(3, 8, 7, 2, np.random.default_rng(0))
        assert conv.output_shape((3, 256, 256)) == (8, 128, 128)
        x = np.zeros((1, 3, 256, 256), dtype=np.float32)
        assert conv.forward(x).shape == (1, 8, 128, 128)

    def test_even_kernel_rejected(self):
        with pytest.raises(NetworkError):
            Conv2d(1, 1, 2, 1, np.random.default_rng(0))

    def test_channel_mismatch(self):
        conv = Conv2d(3, 4, 3, 1, np.random.default_rng(0))
        with pytest.raises(NetworkError):
            conv.forward(np.zeros((1, 2, 8, 8), dtype=np.float32))


class TestMaxPool:
    def test_constant_input(self):
        pool = MaxPool2d(3, 2)
        x = np.full((1, 2, 8, 8), 1.5)
        assert np.allclose(pool.forward(x), 1.5)

    def test_full_window_pool_to_one(self):
        pool = MaxPool2d(8, 8)
        x = np.random.default_rng(2).normal(size=(1, 4, 8, 8))
        out = pool.forward(x)
        assert out.shape == (1, 4, 1, 1)
        assert np.allclose(out[0, :, 0, 0], x.max(axis=(2, 3))[0])

    def test_tie_routes_to_first_index(self):
        pool = MaxPool2d(2, 2)
        x = np.ones((1, 1, 2, 2))
        pool.forward(x)
        g = pool.backward(np.ones((1, 1, 1, 1)))
        assert g[0, 0, 0, 0] == 1.0
        assert g.sum() == 1.0


class TestBatchNorm:
    def test_standardized_batch_unchanged(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(64, 5))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        bn = BatchNorm(5, dtype=np.float64)
        out = bn.forward(x, train=True)
        assert np.allclose(out, x, atol=1e-5)

    def test_output_moments_match_affine(self):
        rng = np.random.default_rng(4)
        bn = BatchNorm(3, dtype=np.float64)
        bn.gamma.value[...] = [2.0, 0.5, 1.5]
        bn.beta.value[...] = [1.0, -1.0, 0.0]
        out = bn.forward(rng.normal(2.0, 3.0, size=(128, 3)), train=True)
        assert np.allclose(out.mean(axis=0), bn.beta.value, atol=1e-6)
        assert np.allclose(out.std(axis=0), bn.gamma.value, atol=1e-2)

    def test_batch_of_one_rejected_in_train(self):
        bn = BatchNorm(4)
        with pytest.raises(NetworkError):
            bn.forward(np.zeros((1, 4), dtype=np.float32), train=True)

    def test_eval_uses_running_stats(self):
        bn = BatchNorm(2, dtype=np.float64)
        bn.running_mean[...] = [1.0, -1.0]
        bn.running_var[...] = [4.0, 0.25]
        out = bn.forward(np.array([[1.0, -1.0], [3.0, -0.5]]), train=False)
        assert np.allclose(out[0], [0.0, 0.0], atol=1e-5)
        assert out[1, 0] == pytest.approx(1.0, abs=1e-4)


class TestActivations:
    def test_softplus_at_zero(self):
        sp = Softplus()
        out = sp.forward(np.array([[0.0]]))
        assert out[0, 0] == pytest.approx(np.log(2.0), abs=1e-9)

    def test_softplus_asymptote(self):
        sp = Softplus()
        out = sp.forward(np.array([[50.0]]))
        assert out[0, 0] == pytest.approx(50.0, rel=1e-8)

    def test_softplus_positive(self):
        sp = Softplus()
        out = sp.forward(np.linspace(-50, 50, 101).reshape(1, -1))
        assert np.all(out > 0)


class TestDense:
    def test_identity_map(self):
        d = Dense(3, 3, np.random.default_rng(5), dtype=np.float64)
        d.weight.value[...] = np.eye(3)
        d.bias.value[...] = 0.0
        x = np.random.default_rng(6).normal(size=(4, 3))
        assert np.allclose(d.forward(x), x)

    def test_descriptor_head_shape(self):
        d = Dense(512, 1, np.random.default_rng(7))
        out = d.forward(np.zeros((2, 512), dtype=np.float32))
        assert out.shape == (2, 1)

    def test_shape_mismatch(self):
        d = Dense(4, 2, np.random.default_rng(8))
        with pytest.raises(NetworkError):
            d.forward(np.zeros((2, 5), dtype=np.float32))


class TestAdam:
    def test_zero_gradient_no_motion(self):
        p = Param("w", np.array([1.0, -2.0]))
        opt = Adam([p], lr=0.1)
        opt.step()
        assert np.allclose(p.value, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = Param("w", np.array([0.0]))
        p.grad[...] = 3.7
        opt = Adam([p], lr=0.05)
        opt.step()
        assert p.value[0] == pytest.approx(-0.05, rel=1e-6)

    def test_minimizes_quadratic(self):
        p = Param("w", np.array([1.0]))
        opt = Adam([p], lr=0.1)
        for _ in range(200):
            p.grad[...] = 2.0 * p.value
            opt.step()
        assert abs(p.value[0]) < 0.01

    def test_nan_gradient_names_parameter(self):
        p = Param("stream.conv3.weight", np.array([1.0]))
        p.grad[...] = np.nan
        opt = Adam([p], lr=0.1)
        with pytest.raises(NumericError, match="stream.conv3.weight"):
            opt.step()


class TestBuilder:
    def test_full_scale_descriptor_outputs_512(self):
        net = build_network(descriptor_specs(1, 2), (3, 256, 256), seed=0)
        assert net.output_shape == (512,)

    def test_reduced_descriptor_output(self):
        net = build_network(descriptor_specs(8, 1), (3, 64, 64), seed=0)
        assert net.output_shape == (64,)
        x = np.zeros((2, 3, 64, 64), dtype=np.float32)
        assert net.forward(x).shape == (2, 64)

    def test_same_seed_bit_identical(self):
        a = build_network(descriptor_specs(8, 1), (3, 64, 64), seed=9)
        b = build_network(descriptor_specs(8, 1), (3, 64, 64), seed=9)
        for pa, pb in zip(a.params(), b.params()):
            assert np.array_equal(pa.value, pb.value)

    def test_incompatible_chain_names_layer(self):
        specs = [nn.dense(4)]
        with pytest.raises(NetworkError, match="layer 0"):
            build_network(specs, (3, 8, 8), seed=0)

    def test_dense_after_flatten(self):
        specs = [nn.flatten(), nn.dense(5), nn.relu(), nn.dense(1)]
        net = build_network(specs, (2, 3, 3), seed=1)
        assert net.output_shape == (1,)


class TestFiniteHooks:
    def test_offending_layer_named(self):
        net = build_network([nn.conv(2, 3, 1), nn.relu(), nn.flatten(),
                             nn.dense(1)], (1, 4, 4), seed=0)
        net.layers[0].weight.value[0, 0, 0, 0] = np.inf
        x = np.ones((1, 1, 4, 4), dtype=np.float32)
        nn.set_finite_checks(True)
        try:
            with pytest.raises(NumericError, match="0_conv"):
                net.forward(x)
        finally:
            nn.set_finite_checks(False)
        with np.errstate(invalid="ignore"):
            net.forward(x)  # hook off: no check, no raise


class TestGradientSuite:
    def test_all_ops_within_tolerance(self):
        results = nn.run_op_suite(n_instances=20, seed=0)
        assert set(results) >= {"conv2d", "maxpool2d", "batchnorm_train",
                                "batchnorm_eval", "relu", "softplus", "dense",
                                "global_maxpool", "global_avgpool"}
        for name, err in results.items():
            assert err < 1e-4, f"{name}: {err}"

    def test_composed_toy_network_gradient(self):
        rng = np.random.default_rng(12)
        specs = [nn.conv(3, 3, 1), nn.relu(), nn.flatten(), nn.dense(4),
                 nn.softplus(), nn.dense(1)]
        net = build_network(specs, (2, 5, 5), seed=3, dtype=np.float64)
        x = rng.normal(size=(2, 2, 5, 5))
        y0 = net.forward(x)
        r = rng.normal(size=y0.shape)

        def loss():
            return float(np.sum(r * net.forward(x)))

        net.zero_grad()
        net.forward(x)
        gin = net.backward(r.copy())
        worst = nn.max_rel_error(gin, nn.fd_gradient(loss, x))
        for p in net.params():
            worst = max(worst, nn.max_rel_error(p.grad, nn.fd_gradient(loss, p.value)))
        assert worst < 1e-4
