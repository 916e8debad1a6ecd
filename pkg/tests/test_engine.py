import math

import numpy as np
import pytest

from bragg_nac.archspace import builtin_braggnn, builtin_nac_base
from bragg_nac.engine import checkpoint, layers
from bragg_nac.engine.gradcheck import VARIANTS, run_suite
from bragg_nac.engine.layers import (
    BackwardError,
    BatchNorm2d,
    Conv2d,
    ConvAttention,
    LayerNorm,
    Linear,
    ShapeError,
    fake_quantize,
    softmax,
)
from bragg_nac.engine.network import Network, LayerSpec
from bragg_nac.engine.optim import scheduled_lr
from bragg_nac.engine.training import TrainConfig, evaluate, train


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_finite_difference_gradients(variant):
    report = run_suite(n_probes=100, variants=[variant])[variant]
    assert report["probes"] >= 100
    assert report["worst"] <= 1e-3, report


def test_zero_braggnn_outputs_zero():
    net = builtin_braggnn().build(zero_init=True)
    out = net(np.zeros((4, 1, 11, 11)))
    assert out.shape == (4, 2)
    assert np.all(out == 0.0)


def test_ones_conv_sums_to_nine():
    conv = Conv2d(1, 1, 3)
    conv.weight.data[:] = 1.0
    net = Network([conv], input_shape=(1, 3, 3))
    assert net(np.ones((1, 1, 3, 3))).item() == 9.0


def test_nac_base_spatial_trace():
    spec = builtin_nac_base()
    spatial = [s[1] for s in spec.shapes if len(s) == 3]
    assert spatial[1] == 9
    assert 7 in spatial and 5 in spatial
    assert spec.flatten_dim == 576
    assert spec.output_shape == (2,)


def test_shape_mismatch_names_layer():
    with pytest.raises(ShapeError, match="layer 1"):
        Network([Conv2d(1, 4, 3), Conv2d(8, 4, 3)])
    net = Network([Conv2d(1, 4, 3)])
    with pytest.raises(ShapeError):
        net(np.zeros((2, 1, 10, 10)))


def test_backward_without_forward():
    net = Network([Conv2d(1, 2, 3, rng=np.random.default_rng(0))])
    with pytest.raises(BackwardError):
        net.backward(np.ones((1, 2, 9, 9)))
    net(np.ones((1, 1, 11, 11)))  # forward without grad tracking
    with pytest.raises(BackwardError):
        net.backward(np.ones((1, 2, 9, 9)))


def test_linear_bias_gradient_is_ones():
    lin = Linear(4, 3, rng=np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(5, 4)).astype(np.float32)
    y = lin.forward(x, grad=True)
    lin.backward(np.ones_like(y))
    np.testing.assert_array_equal(lin.bias.grad, np.full(3, 5.0))  # summed over batch


def test_batchnorm_eval_gradient_closed_form():
    rng = np.random.default_rng(3)
    bn = BatchNorm2d(3)
    bn.weight.data[:] = rng.uniform(0.5, 2, 3)
    bn.running_var[:] = rng.uniform(0.5, 2, 3)
    bn.training = False
    x = rng.normal(size=(2, 4, 4, 3)).astype(np.float32)
    bn.forward(x, grad=True)
    dx = bn.backward(np.ones_like(x))
    expected = bn.weight.data / np.sqrt(bn.running_var + bn.eps)
    np.testing.assert_allclose(dx, np.broadcast_to(expected, x.shape), rtol=1e-6)


class TestAttention:
    def test_zero_value_path_is_skip(self):
        rng = np.random.default_rng(4)
        att = ConvAttention(8, 4, "ReLU", rng=rng)
        att.v.weight.data[:] = 0
        att.proj.weight.data[:] = 0
        x = rng.normal(size=(2, 5, 5, 8)).astype(np.float32)
        np.testing.assert_array_equal(att.forward(x), np.maximum(x, 0))

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(5)
        att = ConvAttention(64, 32, "LeakyReLU", rng=rng)
        x = rng.normal(size=(3, 9, 9, 64)).astype(np.float32)
        out = att.forward(x)
        assert out.shape == x.shape
        assert att.last_attention.shape == (3, 81, 81)
        np.testing.assert_allclose(att.last_attention.sum(-1), 1.0, atol=1e-6)


def test_softmax_and_layernorm_invariants():
    rng = np.random.default_rng(6)
    s = softmax(rng.normal(scale=10, size=(50, 17)).astype(np.float32))
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)

    ln = LayerNorm((8, 5, 5))
    x = (3 + 4 * rng.normal(size=(6, 5, 5, 8))).astype(np.float32)
    y = ln.forward(x).reshape(6, -1).astype(np.float64)
    assert np.abs(y.mean(1)).max() <= 1e-5
    assert np.abs(y.var(1) - 1).max() <= 1e-3


class TestQuantize:
    def test_two_bit_grid(self):
        w = np.array([-1, -0.5, 0, 0.5, 1], dtype=np.float32)
        q, scale = fake_quantize(w, 2)
        assert scale == 1.0
        np.testing.assert_array_equal(q, [-1, -1, 0, 1, 1])

    def test_passthrough_and_idempotence(self):
        w = np.random.default_rng(7).normal(size=100).astype(np.float32)
        assert fake_quantize(w, 32)[0] is w
        for bits in (4, 5, 6, 7, 8):
            q = fake_quantize(w, bits)[0]
            np.testing.assert_array_equal(fake_quantize(q, bits)[0], q)
            assert len(np.unique(q)) <= 2 ** bits - 1

    def test_zero_tensor(self):
        q, scale = fake_quantize(np.zeros(4, dtype=np.float32), 4)
        assert scale == 1.0 and not q.any()


def test_schedules():
    assert scheduled_lr(1.0, "constant", 7, 10) == 1.0
    assert scheduled_lr(1.0, "step", 4, 10) == 1.0
    assert scheduled_lr(1.0, "step", 5, 10) == pytest.approx(0.1)
    assert scheduled_lr(1.0, "step", 8, 10) == pytest.approx(0.01)
    assert scheduled_lr(1.0, "cosine", 0, 10) == 1.0
    assert scheduled_lr(1.0, "cosine", 5, 10) == pytest.approx(0.5 * (1 + math.cos(math.pi / 2)))


def test_train_config_bounds():
    with pytest.raises(ValueError):
        TrainConfig(lr=1.0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=0.1)
    with pytest.raises(ValueError):
        TrainConfig(schedule="linear")


def _linear_problem(n=256, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 1, 11, 11)).astype(np.float32)
    W = rng.normal(size=(121, 2)) * 0.05
    y = (X.reshape(n, -1) @ W + 0.5).astype(np.float32)
    net = Network.from_specs(
        [LayerSpec("Flatten"), LayerSpec("Linear", {"in_features": 121, "out_features": 2})],
        rng=np.random.default_rng(seed + 1))
    return net, X, y


def test_linear_model_loss_decreases_monotonically():
    net, X, y = _linear_problem()
    result = train(net, X, y, TrainConfig(lr=1e-3, epochs=10, batch_size=32))
    losses = [h["loss"] for h in result.history]
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_zero_epochs_leaves_network_untouched():
    net, X, y = _linear_problem()
    before = net.state_dict()
    result = train(net, X, y, TrainConfig(epochs=0))
    assert result.history == []
    for k, v in net.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_divergence_is_reported_not_raised():
    net, X, y = _linear_problem()
    result = train(net, X * 1e6, y, TrainConfig(lr=1e-1, epochs=3))
    assert result.failed
    assert evaluate(net, np.full_like(X, np.nan), y).mean_distance == float("inf")


def test_training_is_bitwise_deterministic():
    rng = np.random.default_rng(0)
    X = rng.random((300, 1, 11, 11), dtype=np.float32)
    y = rng.uniform(0.4, 0.6, (300, 2)).astype(np.float32)
    states = []
    for _ in range(2):
        net = builtin_nac_base().build(seed=11)
        train(net, X, y, TrainConfig(epochs=2, batch_size=64, seed=5))
        states.append(net.state_dict())
    for k in states[0]:
        np.testing.assert_array_equal(states[0][k], states[1][k])


def test_evaluate_constant_center_predictor():
    # mean distance from the center of a 2x2 box: (sqrt(2) + asinh(1)) / 3
    analytic = (math.sqrt(2) + math.asinh(1)) / 3
    net = Network.from_specs(
        [LayerSpec("Flatten"), LayerSpec("Linear", {"in_features": 121, "out_features": 2})])
    net.layers[1].bias.data[:] = 5 / 11
    rng = np.random.default_rng(8)
    n = 200_000
    labels = (5 + rng.uniform(-1, 1, (n, 2))) / 11
    ev = evaluate(net, np.zeros((n, 1, 11, 11), np.float32), labels)
    assert ev.mean_distance == pytest.approx(analytic, abs=3e-3)
    assert analytic == pytest.approx(0.7652, abs=1e-4)

    exact = evaluate(net, np.zeros((3, 1, 11, 11), np.float32), np.full((3, 2), 5 / 11))
    assert exact.mean_distance == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        evaluate(net, np.zeros((0, 1, 11, 11)), np.zeros((0, 2)))


def test_checkpoint_round_trip(tmp_path):
    spec = builtin_nac_base()
    net = spec.build(seed=3)
    net.layers[0].mask = (np.arange(net.layers[0].weight.data.size) % 3 != 0).astype(
        np.uint8).reshape(net.layers[0].weight.data.shape)
    net.layers[0].quant_bits = 7
    path = tmp_path / "model.nacf"
    checkpoint.save(path, net, spec.layers, {"note": "x"})
    back, specs, meta = checkpoint.load(path)
    assert specs == spec.layers and meta["note"] == "x"
    x = np.random.default_rng(9).random((4, 1, 11, 11), dtype=np.float32)
    np.testing.assert_array_equal(back(x), net(x))
    assert back.layers[0].quant_bits == 7
    np.testing.assert_array_equal(back.layers[0].mask, net.layers[0].mask)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + path.read_bytes()[4:])


def test_precision_context_restores_dtype():
    with layers.precision(np.float64):
        assert layers.DTYPE is np.float64
    assert layers.DTYPE is np.float32
