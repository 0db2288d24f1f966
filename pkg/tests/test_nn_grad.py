import numpy as np
import pytest

from cordseg.errors import ConfigError
from cordseg.nn import (
    AdamState,
    ModelParams,
    adam_step,
    backward,
    dice_loss,
    forward,
)
from cordseg.nn.network import (
    BatchNorm,
    Conv,
    Dropout,
    MaxPool,
    NetworkSpec,
    Relu,
    Sigmoid,
    Upsample,
    ConcatSkip,
    build_cnn1,
    build_cnn2,
)

from oracles import central_differences


def rel_err(a, b):
    # floor keeps the ratio meaningful for mathematically-zero gradients
    # (e.g. a conv bias immediately absorbed by batch norm)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    return np.linalg.norm(a - b) / max(na, nb, 1e-6)


class TestDiceLoss:
    def test_perfect_prediction_near_zero(self):
        t = (np.arange(16).reshape(4, 4) % 2).astype(np.float64)
        loss, _ = dice_loss(t.copy(), t)
        assert loss < 0.01

    def test_disjoint_approaches_one(self):
        pred = np.zeros((8, 8))
        target = np.zeros((8, 8))
        target[:2] = 1.0
        loss, _ = dice_loss(pred, target, smooth=1e-4)
        assert loss > 0.99

    def test_range_and_symmetry_binary(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = (rng.random((5, 5)) > 0.5).astype(np.float64)
            b = (rng.random((5, 5)) > 0.5).astype(np.float64)
            la, _ = dice_loss(a, b)
            lb, _ = dice_loss(b, a)
            assert np.isclose(la, lb)
            assert -1e-9 <= la <= 1.0 + 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        pred = rng.random((4, 4))
        target = (rng.random((4, 4)) > 0.5).astype(np.float64)
        _, grad = dice_loss(pred, target)
        fd = central_differences(lambda: dice_loss(pred, target)[0], [pred], h=1e-6)[0]
        assert rel_err(grad, fd) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            dice_loss(np.zeros((2, 2)), np.zeros((3, 3)))


def _micro_unet(ndim):
    """2-level U-net small enough for exhaustive finite differences."""
    return build_cnn1(base_channels=2) if ndim == 2 else build_cnn2((8, 8, 8), base_channels=2)


def _check_network_gradients(spec, x_shape, seed=0, tol=1e-3, mode="train"):
    rng = np.random.default_rng(seed)
    model = ModelParams.initialize(spec, seed, dtype=np.float64)
    x = rng.standard_normal(x_shape)
    target = (rng.random(x_shape) > 0.7).astype(np.float64)

    pred, cache = forward(spec, model.params, model.state, x, mode, dropout_seed=7)
    _, gpred = dice_loss(pred, target)
    grads = backward(spec, model.params, cache, gpred)

    def loss_fn():
        p, _ = forward(spec, model.params, model.state, x, mode, dropout_seed=7)
        return dice_loss(p, target)[0]

    worst = 0.0
    for name in model.params:
        fd = central_differences(loss_fn, [model.params[name]], h=1e-6)[0]
        err = rel_err(grads[name], fd)
        worst = max(worst, err)
        assert err < tol, f"{name}: relative error {err:.2e}"
    return worst


class TestNetworkGradients:
    def test_single_conv_sigmoid_micro_net(self):
        spec = NetworkSpec(2, 1, (Conv("c", 1, 1, kernel=3, dilation=1), Sigmoid()))
        _check_network_gradients(spec, (2, 1, 5, 5), seed=2)

    def test_zero_loss_gradient_gives_zero_param_gradients(self):
        spec = _micro_unet(2)
        model = ModelParams.initialize(spec, 3, dtype=np.float64)
        x = np.random.default_rng(3).standard_normal((1, 1, 8, 8))
        pred, cache = forward(spec, model.params, model.state, x, "train", dropout_seed=1)
        grads = backward(spec, model.params, cache, np.zeros_like(pred))
        assert all(np.allclose(g, 0) for g in grads.values())

    def test_micro_unet_2d_full_gradient_check(self):
        spec = _micro_unet(2)
        _check_network_gradients(spec, (1, 1, 8, 8), seed=4)

    def test_micro_unet_3d_full_gradient_check(self):
        spec = _micro_unet(3)
        _check_network_gradients(spec, (1, 1, 8, 8, 8), seed=5)

    def test_infer_mode_dropout_identity_jacobian(self):
        # with dropout inactive the gradient equals the dropout-free network's
        layers = (Conv("c", 1, 2), BatchNorm("b", 2), Relu(), Dropout(0.5),
                  Conv("o", 2, 1, kernel=1), Sigmoid())
        layers_plain = (Conv("c", 1, 2), BatchNorm("b", 2), Relu(),
                        Conv("o", 2, 1, kernel=1), Sigmoid())
        spec = NetworkSpec(2, 1, layers)
        spec_plain = NetworkSpec(2, 1, layers_plain)
        model = ModelParams.initialize(spec, 6, dtype=np.float64)
        x = np.random.default_rng(6).standard_normal((1, 1, 6, 6))
        pred, cache = forward(spec, model.params, model.state, x, "infer")
        pred2, cache2 = forward(spec_plain, model.params, model.state, x, "infer")
        assert np.array_equal(pred, pred2)
        g = np.random.default_rng(7).standard_normal(pred.shape)
        ga = backward(spec, model.params, cache, g)
        gb = backward(spec_plain, model.params, cache2, g)
        assert all(np.array_equal(ga[k], gb[k]) for k in ga)

    def test_stale_cache_rejected(self):
        spec = _micro_unet(2)
        model = ModelParams.initialize(spec, 8, dtype=np.float64)
        with pytest.raises(ConfigError):
            backward(spec, model.params, {"outputs": [], "records": []}, np.zeros(1))


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        grads = {"w": np.zeros(3)}
        state = AdamState(lr=0.1)
        adam_step(params, grads, state)
        assert np.array_equal(params["w"], [1.0, -2.0, 3.0])
        assert state.t == 1

    def test_first_step_magnitude(self):
        # hand computation: mhat = g, vhat = g^2, delta = lr*g/(|g|+eps)
        for g0 in (0.5, -3.0, 1e-4):
            params = {"w": np.array([1.0])}
            state = AdamState(lr=0.01)
            adam_step(params, {"w": np.array([g0])}, state)
            delta = params["w"][0] - 1.0
            assert np.sign(delta) == -np.sign(g0)
            assert abs(delta) <= 0.01 * (1 + 1e-6)
            assert np.isclose(abs(delta), 0.01, rtol=1e-3)

    def test_default_lr_for_detection_stage(self):
        from cordseg.pipeline import TrainConfig

        cfg = TrainConfig(stage="centerline")
        assert cfg.lr == 1e-4
        assert cfg.batch_size == 32
        assert cfg.epochs == 100
        assert cfg.dropout == 0.2

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())

    def test_moments_track_gradient_direction(self):
        params = {"w": np.zeros(4)}
        state = AdamState(lr=0.001)
        g = np.array([1.0, -1.0, 2.0, 0.0])
        for _ in range(10):
            adam_step(params, {"w": g.copy()}, state)
        assert np.all(np.sign(params["w"][:3]) == -np.sign(g[:3]))
        assert params["w"][3] == 0.0
