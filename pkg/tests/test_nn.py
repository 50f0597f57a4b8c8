import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paddyforge.errors import ConfigError, ShapeError
from paddyforge.loss import cross_entropy, one_hot, softmax, softmax_xent_grad
from paddyforge.nn import (FLATTEN, RELU, SOFTMAX, LayerSpec, Network, Parameter, build_network, conv2d_backward,
                           conv2d_forward, kaiming_init, linear_backward, linear_forward, maxpool_backward,
                           maxpool_forward, relu_backward, relu_forward, residual_backward, residual_forward,
                           set_trainable)
from paddyforge.optim import sgd_step
from paddyforge.tensor import Shape2D, round_half
from oracles import naive_conv2d, naive_maxpool, numerical_grad, rel_error, to_float64


# -- kaiming ---------------------------------------------------------------------


def test_kaiming_statistics():
    s = kaiming_init((10**6,), 50, np.random.default_rng(0)).astype(np.float64)
    assert -0.01 <= s.mean() <= 0.01
    assert 0.198 <= s.std() <= 0.202
    assert abs(s.mean()) <= 3 * 0.2 / np.sqrt(s.size)
    assert abs(s.var() / (2 / 50) - 1) <= 0.02


def test_kaiming_deterministic_and_scales_with_fan_in():
    a = kaiming_init((4, 5), 9, np.random.default_rng(3))
    assert np.array_equal(a, kaiming_init((4, 5), 9, np.random.default_rng(3)))
    v2 = kaiming_init((200_000,), 2, np.random.default_rng(1)).var()
    v8 = kaiming_init((200_000,), 8, np.random.default_rng(2)).var()
    assert abs(v2 / v8 / 4 - 1) <= 0.05


def test_kaiming_rejects_zero_fan_in():
    with pytest.raises(ValueError):
        kaiming_init((2,), 0, np.random.default_rng(0))


# -- conv ------------------------------------------------------------------------


def test_conv_constant_case():
    out, _ = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1))
    assert out.shape == (1, 1, 2, 2) and np.all(out == 4.0)


def test_conv_zero_kernel_gives_zero(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    out, _ = conv2d_forward(x, np.zeros((4, 3, 3, 3)), np.zeros(4), 1, 1)
    assert np.all(out == 0)


def test_conv_top_edge_kernel_peaks_on_step():
    img = np.zeros((1, 1, 8, 8))
    img[:, :, 4:, :] = 1.0
    k = np.array([[-1, -1, -1], [0, 0, 0], [1, 1, 1]], dtype=np.float64)[None, None]
    out, _ = conv2d_forward(img, k, np.zeros(1))
    rows = np.abs(out[0, 0]).max(axis=1)
    # output row y covers input rows y..y+2; the step between rows 3 and 4 lands in rows 2 and 3
    assert set(np.flatnonzero(rows == rows.max())) == {2, 3}
    assert rows[0] == 0 and rows[5] == 0


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", [0, 1])
@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_loop_oracle(stride, padding, k, rng):
    x = rng.uniform(-1, 1, (2, 3, 7, 6)).astype(np.float32)
    w = rng.uniform(-1, 1, (4, 3, k, k)).astype(np.float32)
    b = rng.uniform(-1, 1, 4).astype(np.float32)
    got, _ = conv2d_forward(x, w, b, stride, padding)
    assert np.max(np.abs(got - naive_conv2d(x, w, b, stride, padding))) <= 1e-5


@pytest.mark.parametrize("x_shape, w_shape", [((1, 2, 5, 5), (3, 3, 3, 3)), ((1, 1, 2, 2), (1, 1, 3, 3))])
def test_conv_shape_errors(x_shape, w_shape):
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros(x_shape), np.zeros(w_shape), np.zeros(w_shape[0]))


def test_conv_backward_zero_grad(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    out, ctx = conv2d_forward(x, rng.normal(size=(3, 2, 3, 3)), np.zeros(3), 1, 1)
    gx, gk, gb = conv2d_backward(ctx, np.zeros_like(out))
    assert not gx.any() and not gk.any() and not gb.any()


def test_conv_backward_single_pixel_adjoint(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    out, ctx = conv2d_forward(x, rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
    g = np.zeros_like(out)
    g[0, 1, 2, 3] = 1
    _, gk, gb = conv2d_backward(ctx, g)
    assert np.array_equal(gk[1], x[0, :, 2:5, 3:6])
    assert not gk[0].any() and not gk[2].any()
    assert gb.tolist() == [0, 1, 0]


def test_conv_backward_rejects_bad_grad(rng):
    out, ctx = conv2d_forward(rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d_backward(ctx, np.zeros((1, 1, 3, 3)))


@pytest.mark.parametrize("stride, padding", [(1, 0), (2, 1), (1, 1)])
def test_conv_backward_finite_differences(stride, padding, rng):
    x = rng.uniform(-1, 1, (1, 2, 6, 6))
    w = rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)
    out, ctx = conv2d_forward(x, w, b, stride, padding)
    r = rng.normal(size=out.shape)
    f = lambda: float(np.sum(conv2d_forward(x, w, b, stride, padding)[0] * r))
    gx, gk, gb = conv2d_backward(ctx, r)
    assert rel_error(gx, numerical_grad(f, x)) <= 1e-2
    assert rel_error(gk, numerical_grad(f, w)) <= 1e-2
    assert rel_error(gb, numerical_grad(f, b)) <= 1e-2


# -- pool / relu / linear --------------------------------------------------------


def test_maxpool_examples():
    out, _ = maxpool_forward(np.array([[[[1.0, 2], [3, 4]]]]), (2, 2))
    assert out.ravel().tolist() == [4.0]
    out, _ = maxpool_forward(np.full((1, 2, 4, 4), 0.3), (2, 2))
    assert np.all(out == 0.3)
    with pytest.raises(ShapeError):
        maxpool_forward(np.zeros((1, 1, 1, 1)), (2, 2))


def test_maxpool_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    out, _ = maxpool_forward(x, (2, 2), 2)
    assert np.array_equal(out, naive_maxpool(x, 2, 2))
    out3, _ = maxpool_forward(x, (3, 3), 2)
    assert np.array_equal(out3, naive_maxpool(x, 3, 2))


def test_maxpool_backward_routes_to_argmax(rng):
    x = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
    out, ctx = maxpool_forward(x, (2, 2))
    g = maxpool_backward(ctx, np.ones_like(out))
    assert g.sum() == 16
    assert np.all(g.reshape(4, 2, 4, 2).sum(axis=(1, 3)) == 1)
    assert sorted(x[g == 1]) == sorted(out.ravel())
    assert not maxpool_backward(ctx, np.zeros_like(out)).any()


def test_maxpool_ties_go_to_first_row_major_position():
    out, ctx = maxpool_forward(np.ones((1, 1, 2, 2)), (2, 2))
    g = maxpool_backward(ctx, np.ones_like(out))
    assert g[0, 0].tolist() == [[1, 0], [0, 0]]


def test_relu_examples():
    out, mask = relu_forward(np.array([-1.0, 0, 2]))
    assert out.tolist() == [0, 0, 2]
    _, mask = relu_forward(np.array([-1.0, 2]))
    assert relu_backward(mask, np.array([5.0, 7])).tolist() == [0, 7]


def test_relu_finite_differences(rng):
    x = rng.uniform(0.1, 1, (3, 7)) * rng.choice([-1, 1], (3, 7))
    r = rng.normal(size=x.shape)
    _, mask = relu_forward(x)
    num = numerical_grad(lambda: float(np.sum(relu_forward(x)[0] * r)), x)
    assert rel_error(relu_backward(mask, r), num) <= 1e-3


def test_linear_examples(rng):
    x = rng.normal(size=(4, 5))
    out, ctx = linear_forward(x, np.eye(5), np.zeros(5))
    assert np.array_equal(out, x)
    gx, gw, gb = linear_backward(ctx, np.zeros((4, 5)))
    assert not gx.any() and not gw.any() and not gb.any()
    with pytest.raises(ShapeError):
        linear_forward(x, np.eye(3), np.zeros(3))


def test_linear_finite_differences(rng):
    x, w, b = rng.normal(size=(4, 6)), rng.normal(size=(3, 6)), rng.normal(size=3)
    r = rng.normal(size=(4, 3))
    f = lambda: float(np.sum(linear_forward(x, w, b)[0] * r))
    gx, gw, gb = linear_backward(linear_forward(x, w, b)[1], r)
    for ana, arr in ((gx, x), (gw, w), (gb, b)):
        assert rel_error(ana, numerical_grad(f, arr)) <= 1e-2


# -- residual --------------------------------------------------------------------


def _zero_block(c, k=3):
    return np.zeros((c, c, k, k)), np.zeros(c), np.zeros((c, c, k, k)), np.zeros(c)


def test_residual_zero_block_is_identity(rng):
    x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
    out, ctx = residual_forward(x, *_zero_block(4))
    assert np.array_equal(out, x)
    g = rng.normal(size=x.shape)
    gx, grads = residual_backward(ctx, g)
    assert np.array_equal(gx, g)


def test_residual_finite_differences(rng):
    x = rng.uniform(-1, 1, (1, 2, 5, 5))
    w1, w2 = rng.uniform(-0.5, 0.5, (2, 2, 3, 3)), rng.uniform(-0.5, 0.5, (2, 2, 3, 3))
    b1, b2 = rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.5, 0.5, 2)
    r = rng.normal(size=x.shape)
    f = lambda: float(np.sum(residual_forward(x, w1, b1, w2, b2)[0] * r))
    gx, (gw1, gb1, gw2, gb2) = residual_backward(residual_forward(x, w1, b1, w2, b2)[1], r)
    for ana, arr in ((gx, x), (gw1, w1), (gb1, b1), (gw2, w2), (gb2, b2)):
        assert rel_error(ana, numerical_grad(f, arr)) <= 1e-2


def test_residual_rejects_shape_change():
    with pytest.raises(ShapeError):
        residual_forward(np.zeros((1, 2, 5, 5)), np.zeros((3, 2, 3, 3)), np.zeros(3),
                         np.zeros((3, 3, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        Network([LayerSpec.conv(4, 3, 1, 1), LayerSpec.residual(8), FLATTEN, LayerSpec.linear(2)],
                Shape2D(4, 4), 2)


# -- networks --------------------------------------------------------------------


def test_builder_is_deterministic():
    a = build_network("convnet", Shape2D(32, 32), 10, seed=7)
    b = build_network("BaselineConvNet", Shape2D(32, 32), 10, seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.name == q.name and np.array_equal(p.master, q.master)
    c = build_network("convnet", Shape2D(32, 32), 10, seed=8)
    assert not np.array_equal(a.parameters()[0].master, c.parameters()[0].master)


def test_convnet_layout_and_init():
    net = build_network("convnet", Shape2D(32, 32), 10, seed=0)
    kinds = [s.kind for s in net.specs]
    assert kinds == ["conv", "relu", "maxpool"] * 3 + ["flatten", "linear", "relu", "linear", "relu", "linear", "softmax"]
    shapes = [p.master.shape for p in net.parameters()]
    assert shapes[0] == (16, 3, 3, 3) and shapes[2] == (32, 16, 3, 3) and shapes[4] == (64, 32, 3, 3)
    assert shapes[6] == (256, 64 * 4 * 4) and shapes[-2] == (10, 64)
    assert all(not p.master.any() for p in net.parameters() if p.name.endswith("bias"))
    assert all(p.master.dtype == np.float32 for p in net.parameters())


@pytest.mark.slow
def test_convnet_native_size_batch_64():
    net = build_network("convnet", Shape2D(224, 224), 10, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (64, 3, 224, 224)).astype(np.float32)
    logits, _ = net.forward(x)
    assert logits.shape == (64, 10)


def test_mini_resnet_shape_and_size_flexibility(rng):
    net = build_network("mini-resnet", Shape2D(32, 32), 4, seed=0)
    assert net.forward(rng.uniform(0, 1, (3, 3, 32, 32)))[0].shape == (3, 4)
    net.set_input_size(Shape2D(16, 16))
    assert net.forward(rng.uniform(0, 1, (2, 3, 16, 16)))[0].shape == (2, 4)
    assert sum(s.kind == "residual" for s in net.specs) >= 2


def test_convnet_cannot_change_size():
    net = build_network("convnet", Shape2D(32, 32), 4)
    with pytest.raises(ConfigError):
        net.set_input_size(Shape2D(64, 64))


def test_builder_errors():
    with pytest.raises(ShapeError):
        build_network("convnet", Shape2D(4, 4), 10)
    with pytest.raises(ConfigError):
        build_network("vgg", Shape2D(32, 32), 10)


def test_forward_checks_input_size(rng):
    net = build_network("convnet", Shape2D(16, 16), 3)
    with pytest.raises(ShapeError):
        net.forward(rng.uniform(0, 1, (1, 3, 32, 32)))


def test_forward_is_pure(rng):
    net = build_network("mini-resnet", Shape2D(16, 16), 3, seed=2)
    x = rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(net.forward(x)[0], net.forward(x)[0])
    p = net.predict_proba(x)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)


def test_backward_twice_doubles_grads(rng):
    net = build_network("convnet", Shape2D(16, 16), 3, seed=1)
    x = rng.uniform(0, 1, (4, 3, 16, 16)).astype(np.float32)
    y = one_hot([0, 1, 2, 0], 3)
    logits, ctx = net.forward(x)
    g = softmax_xent_grad(logits, y)
    net.backward(ctx, g)
    once = [p.grad.copy() for p in net.parameters()]
    net.backward(ctx, g)
    assert all(np.array_equal(p.grad, 2 * o) for p, o in zip(net.parameters(), once))


def _toy_net(seed=0):
    specs = [LayerSpec.conv(3, 3, 1, 1), RELU, LayerSpec.pool(2), FLATTEN, LayerSpec.linear(3), SOFTMAX]
    return to_float64(Network(specs, Shape2D(6, 6), 3, in_channels=2, seed=seed))


def test_toy_network_finite_differences(rng):
    net = _toy_net()
    x = rng.uniform(-1, 1, (3, 2, 6, 6))
    y = one_hot([0, 2, 1], 3, np.float64)

    def loss():
        for p in net.parameters():
            p.sync(False)
        return cross_entropy(softmax(net.forward(x)[0]), y)

    logits, ctx = net.forward(x)
    net.backward(ctx, softmax_xent_grad(logits, y))
    params = net.parameters()
    ana, num = [], []
    for _ in range(10):
        p = params[rng.integers(len(params))]
        idx = tuple(rng.integers(0, s) for s in p.master.shape)
        old = p.master[idx]
        p.master[idx] = old + 1e-3
        fp = loss()
        p.master[idx] = old - 1e-3
        fm = loss()
        p.master[idx] = old
        ana.append(p.grad[idx])
        num.append((fp - fm) / 2e-3)
    assert rel_error(ana, num) <= 1e-2


def test_frozen_params_keep_grads_and_weights(rng):
    net = build_network("convnet", Shape2D(16, 16), 3, seed=1)
    set_trainable(net, "body")
    body = [p.master.copy() for p in net.body_parameters()]
    x = rng.uniform(0, 1, (4, 3, 16, 16)).astype(np.float32)
    for _ in range(3):
        logits, ctx = net.forward(x)
        net.backward(ctx, softmax_xent_grad(logits, one_hot([0, 1, 2, 0], 3)))
        assert all(not p.grad.any() for p in net.body_parameters())
        sgd_step(net.parameters(), 0.1)
    assert all(np.array_equal(p.master, b) for p, b in zip(net.body_parameters(), body))
    assert [p.name.split(".")[1] for p in net.head_parameters()] == ["linear"] * 6


def test_custom_mask_freezes_exactly_one_conv(rng):
    net = build_network("convnet", Shape2D(16, 16), 3, seed=1)
    frozen = {"3.conv.weight": False, "3.conv.bias": False}
    set_trainable(net, frozen)
    before = {p.name: p.master.copy() for p in net.parameters()}
    logits, ctx = net.forward(rng.uniform(0, 1, (4, 3, 16, 16)).astype(np.float32))
    net.backward(ctx, softmax_xent_grad(logits, one_hot([0, 1, 2, 0], 3)))
    sgd_step(net.parameters(), 0.1)
    for p in net.parameters():
        assert np.array_equal(p.master, before[p.name]) == (p.name in frozen), p.name


def test_set_trainable_errors_and_all():
    net = build_network("convnet", Shape2D(16, 16), 3)
    with pytest.raises(ConfigError):
        set_trainable(net, [False] * len(net.parameters()))
    with pytest.raises(ConfigError):
        set_trainable(net, {"nope": True})
    with pytest.raises(ConfigError):
        set_trainable(net, "legs")
    set_trainable(net, "body")
    set_trainable(net, "all")
    assert all(p.trainable for p in net.parameters())


def test_parameter_sync_half():
    p = Parameter("w", [1.0001, 3.14159])
    p.sync(True)
    assert np.array_equal(p.working, round_half(p.master))
    assert p.master.tolist() != p.working.tolist()
    p.sync(False)
    assert p.working is p.master


def test_half_network_forward_rounds_activations(rng):
    net = build_network("convnet", Shape2D(16, 16), 3, seed=0)
    net.set_precision(True)
    logits, _ = net.forward(rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32))
    assert np.array_equal(logits, round_half(logits))


def test_layerspec_roundtrip_and_validation():
    for s in build_network("mini-resnet", Shape2D(16, 16), 3).specs:
        assert LayerSpec.from_dict(s.to_dict()) == s
    with pytest.raises(ConfigError):
        LayerSpec("dropout")
    with pytest.raises(ConfigError):
        LayerSpec.conv(4, 3, stride=0)


def test_macs_shrink_with_image_size():
    net = build_network("mini-resnet", Shape2D(32, 32), 4)
    assert net.macs(Shape2D(16, 16)) < net.macs(Shape2D(32, 32))
    # conv work is proportional to pixels; only the head is size-independent
    head = 16 * 4
    assert (net.macs(Shape2D(32, 32)) - head) == 4 * (net.macs(Shape2D(16, 16)) - head)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 8), st.integers(1, 2), st.integers(0, 1),
       st.integers(0, 2**32 - 1))
def test_conv_output_extent_property(c, o, size, stride, padding, seed):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, (1, c, size, size)).astype(np.float32)
    w = r.uniform(-1, 1, (o, c, 3, 3)).astype(np.float32)
    out, _ = conv2d_forward(x, w, np.zeros(o, np.float32), stride, padding)
    assert out.shape[2] == (size + 2 * padding - 3) // stride + 1
    assert np.max(np.abs(out - naive_conv2d(x, w, np.zeros(o), stride, padding))) <= 1e-5
