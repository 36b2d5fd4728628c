import itertools
from dataclasses import replace

import numpy as np
import pytest

from ctkd import autodiff as ad
from ctkd.autodiff import Tensor, backward
from ctkd.networks import (
    Model,
    ModelParams,
    NetworkConfig,
    build_model,
    count_parameters,
    forward_segmentation,
    parameter_layout,
    plain_conv_block,
    residual_conv_block,
    residual_se_block,
)

from conftest import GRAD_SEEDS, gradcheck, rel_error

GRID = [
    NetworkConfig(num_classes=c, base_features=b, num_stages=s, se_reduction=r, decoder_upsampling=u)
    for (c, b, s, r, u) in itertools.product([2, 3], [4, 8], [1, 2], [2, 4], ["transposed", "trilinear"])
]


def _tiny(**kw):
    base = dict(num_classes=3, base_features=4, num_stages=2, se_reduction=2)
    base.update(kw)
    return NetworkConfig(**base)


def _params(shapes, rng, scale=0.3):
    return {k: Tensor(rng.normal(0, scale, size=s), requires_grad=True) for k, s in shapes.items()}


# --------------------------------------------------------------- blocks
def test_residual_block_zero_main_path_is_activation_of_input(rng):
    x = rng.normal(size=(1, 4, 4, 4, 4))
    p = {
        "conv1.w": Tensor(np.zeros((4, 4, 3, 3, 3))),
        "conv1.b": Tensor(np.zeros(4)),
        "norm1.gain": Tensor(np.ones(4)),
        "norm1.bias": Tensor(np.zeros(4)),
        "conv2.w": Tensor(np.zeros((4, 4, 3, 3, 3))),
        "conv2.b": Tensor(np.zeros(4)),
        "norm2.gain": Tensor(np.ones(4)),
        "norm2.bias": Tensor(np.zeros(4)),
    }
    y = residual_conv_block(Tensor(x), p, stride=1)
    np.testing.assert_allclose(y.data, np.where(x > 0, x, 0.01 * x), atol=1e-12)


def _block_params(prefix_shapes, rng):
    return {k: Tensor(rng.normal(0, 0.3, size=s), requires_grad=True) for k, s in prefix_shapes}


def _residual_shapes(cin, cout, proj):
    shapes = [
        ("conv1.w", (cout, cin, 3, 3, 3)),
        ("conv1.b", (cout,)),
        ("norm1.gain", (cout,)),
        ("norm1.bias", (cout,)),
        ("conv2.w", (cout, cout, 3, 3, 3)),
        ("conv2.b", (cout,)),
        ("norm2.gain", (cout,)),
        ("norm2.bias", (cout,)),
    ]
    if proj:
        shapes += [
            ("proj.w", (cout, cin, 1, 1, 1)),
            ("proj.b", (cout,)),
            ("proj_norm.gain", (cout,)),
            ("proj_norm.bias", (cout,)),
        ]
    return shapes


def test_residual_block_stride_two_halves(rng):
    p = _block_params(_residual_shapes(2, 4, True), rng)
    y = residual_conv_block(Tensor(rng.normal(size=(1, 2, 8, 6, 4))), p, stride=2)
    assert y.shape == (1, 4, 4, 3, 2)


def test_residual_block_mismatch_without_projection(rng):
    p = _block_params(_residual_shapes(2, 4, False), rng)
    with pytest.raises(ValueError):
        residual_conv_block(Tensor(rng.normal(size=(1, 2, 4, 4, 4))), p, stride=1)


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_residual_block_grad(seed):
    rng = np.random.default_rng(seed)
    proj = seed % 2 == 1
    shapes = _residual_shapes(2, 3 if proj else 2, proj)
    names = [n for n, _ in shapes]
    arrays = [rng.normal(size=(1, 2, 4, 4, 4))] + [rng.normal(0, 0.3, size=s) for _, s in shapes]

    def op(x, *ps):
        return residual_conv_block(x, dict(zip(names, ps)), stride=2 if proj else 1)

    assert gradcheck(op, arrays, seed) < 1e-4


def _plain_shapes(cin, cout):
    return [s for s in _residual_shapes(cin, cout, False)]


def test_plain_block_shape_and_zero_propagation(rng):
    shapes = _plain_shapes(3, 5)
    p = {k: Tensor(np.zeros(s)) for k, s in shapes}
    y = plain_conv_block(Tensor(rng.normal(size=(1, 3, 4, 4, 4))), p)
    assert y.shape == (1, 5, 4, 4, 4)
    np.testing.assert_array_equal(y.data, 0.0)


def test_plain_block_shape_mismatch(rng):
    p = _block_params(_plain_shapes(3, 5), rng)
    with pytest.raises(ValueError):
        plain_conv_block(Tensor(rng.normal(size=(1, 2, 4, 4, 4))), p)


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_plain_block_grad(seed):
    rng = np.random.default_rng(seed)
    shapes = _plain_shapes(2, 3)
    names = [n for n, _ in shapes]
    arrays = [rng.normal(size=(1, 2, 4, 4, 4))] + [rng.normal(0, 0.3, size=s) for _, s in shapes]
    assert gradcheck(lambda x, *ps: plain_conv_block(x, dict(zip(names, ps))), arrays, seed) < 1e-4


def _se_shapes(c, r):
    h = c // r
    return [("fc1.w", (h, c, 1, 1, 1)), ("fc1.b", (h,)), ("fc2.w", (c, h, 1, 1, 1)), ("fc2.b", (c,))]


def test_se_closed_form_gate(rng):
    x = rng.normal(size=(1, 8, 3, 3, 3))
    p = {k: Tensor(np.zeros(s)) for k, s in _se_shapes(8, 4)}
    # zero weights: gate = sigmoid(0) = 0.5 per channel
    np.testing.assert_allclose(residual_se_block(Tensor(x), p, 4).data, 1.5 * x, atol=1e-12)
    p["fc2.b"] = Tensor(np.full(8, 50.0))
    np.testing.assert_allclose(residual_se_block(Tensor(x), p, 4).data, 2 * x, atol=1e-12)
    p["fc2.b"] = Tensor(np.full(8, -800.0))
    np.testing.assert_allclose(residual_se_block(Tensor(x), p, 4).data, x, atol=1e-12)


def test_se_bottleneck_width():
    cfg = NetworkConfig(base_features=32, se_reduction=8)
    layout = {n: s for n, s, _ in parameter_layout(cfg)}
    assert layout["skip0.fc1.w"][0] == 4


def test_se_indivisible(rng):
    p = {k: Tensor(np.zeros(s)) for k, s in _se_shapes(8, 4)}
    with pytest.raises(ValueError):
        residual_se_block(Tensor(rng.normal(size=(1, 8, 2, 2, 2))), p, 3)
    with pytest.raises(ValueError):
        NetworkConfig(base_features=6, se_reduction=4).validate()


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_se_grad(seed):
    rng = np.random.default_rng(seed)
    shapes = _se_shapes(4, 2)
    names = [n for n, _ in shapes]
    arrays = [rng.normal(size=(2, 4, 3, 2, 3))] + [rng.normal(0, 0.5, size=s) for _, s in shapes]
    assert gradcheck(lambda x, *ps: residual_se_block(x, dict(zip(names, ps)), 2), arrays, seed) < 1e-4


# ---------------------------------------------------------------- models
@pytest.mark.parametrize("cfg", GRID, ids=lambda c: f"c{c.num_classes}b{c.base_features}s{c.num_stages}r{c.se_reduction}{c.decoder_upsampling[:3]}")
def test_count_matches_instantiation_and_mobile_smaller(cfg):
    for style in ("regular", "depthwise"):
        c = replace(cfg, conv_style=style)
        assert count_parameters(c) == build_model(c, 0, dtype=np.float64).size()
    assert count_parameters(replace(cfg, conv_style="depthwise")) < count_parameters(cfg)


@pytest.mark.parametrize("cfg", GRID[::3], ids=str)
def test_forward_shape_grid(cfg):
    for style in ("regular", "depthwise"):
        c = replace(cfg, conv_style=style)
        model = Model(c, build_model(c, 1, dtype=np.float64))
        ext = (2**c.num_stages * 2, 2**c.num_stages, 2**c.num_stages * 3)
        y = model(Tensor(np.zeros((2, 1) + ext)))
        assert y.shape == (2, c.num_classes) + ext


def test_forward_shape_example():
    cfg = NetworkConfig(num_stages=2, base_features=4, num_classes=3, se_reduction=2)
    y = forward_segmentation(build_model(cfg, 0, np.float64), cfg, Tensor(np.zeros((1, 1, 16, 16, 16))))
    assert y.shape == (1, 3, 16, 16, 16)


def test_forward_indivisible_extent():
    cfg = _tiny()
    with pytest.raises(ValueError, match="divisible"):
        forward_segmentation(build_model(cfg, 0), cfg, Tensor(np.zeros((1, 1, 8, 6, 8), dtype=np.float32)))


def test_forward_pure(rng):
    cfg = _tiny()
    m = Model(cfg, build_model(cfg, 3))
    x = rng.normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(m.predict(x), m.predict(x))


def test_doubling_base_more_than_doubles_count():
    for s in (1, 2, 3):
        a = NetworkConfig(base_features=8, num_stages=s)
        b = replace(a, base_features=16)
        assert count_parameters(b) > 2 * count_parameters(a)


def test_student_differs_only_by_conv_style():
    t = _tiny()
    s = replace(t, conv_style="depthwise")
    lt = {n: sh for n, sh, _ in parameter_layout(t)}
    ls = {n: sh for n, sh, _ in parameter_layout(s)}
    # stem stays regular
    assert lt["stem.conv.w"] == ls["stem.conv.w"]
    assert "enc0.conv1.dw" in ls and "enc0.conv1.w" in lt
    assert ls["enc0.conv1.dw"] == (4, 1, 3, 3, 3)


def test_teacher_encoders_identical_decoders_differ():
    t1 = _tiny(decoder_upsampling="transposed")
    t2 = _tiny(decoder_upsampling="trilinear")
    l1 = {n: sh for n, sh, _ in parameter_layout(t1)}
    l2 = {n: sh for n, sh, _ in parameter_layout(t2)}
    enc = [n for n in l1 if n.startswith(("stem", "enc"))]
    assert enc and all(l1[n] == l2[n] for n in enc)
    assert [n for n in l2 if n.startswith(("stem", "enc"))] == enc
    assert l1["up0.w"] != l2["up0.w"]
    # transposed kernel [Cin, Cout, 2, 2, 2]; trilinear path conv [Cout, Cin, 3, 3, 3]
    assert l1["up0.w"] == (8, 4, 2, 2, 2) and l2["up0.w"] == (4, 8, 3, 3, 3)


def test_build_determinism():
    cfg = _tiny()
    a, b, c = build_model(cfg, 5), build_model(cfg, 5), build_model(cfg, 6)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_xavier_variance():
    cfg = NetworkConfig(base_features=32, num_stages=2, num_classes=4)
    params = build_model(cfg, 0, dtype=np.float64)
    checked = 0
    for name, shape, kind in parameter_layout(cfg):
        if kind != "weight" or int(np.prod(shape)) < 10_000:
            continue
        receptive = int(np.prod(shape[2:]))
        expected = 2.0 / (shape[1] * receptive + shape[0] * receptive)
        assert abs(params[name].data.var() / expected - 1) < 0.10, name
        checked += 1
    assert checked >= 3


def test_init_gains_and_biases():
    cfg = _tiny()
    for name, _, kind in parameter_layout(cfg):
        p = build_model(cfg, 0)[name].data
        if kind == "gain":
            assert np.all(p == 1)
        elif kind == "bias":
            assert np.all(p == 0)


@pytest.mark.parametrize("style", ["regular", "depthwise"])
@pytest.mark.parametrize("upsampling", ["transposed", "trilinear"])
def test_tiny_network_end_to_end_grad(style, upsampling):
    cfg = _tiny(conv_style=style, decoder_upsampling=upsampling)
    params = build_model(cfg, 11, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 8, 8, 8))
    w = rng.normal(size=(1, cfg.num_classes, 8, 8, 8))

    def loss_value():
        p = ModelParams((k, v.detach()) for k, v in params.items())
        return float((ad.softmax_channel(forward_segmentation(p, cfg, Tensor(x))).data * w).sum())

    backward(ad.sum(ad.mul(ad.softmax_channel(forward_segmentation(params, cfg, Tensor(x))), Tensor(w))))
    # Central differences on a fixed random subset of coordinates from every
    # tensor. The step is 1e-6 here: with thousands of leaky-ReLU inputs, a
    # 1e-5 perturbation of an early weight pushes some of them across the kink.
    h = 1e-6
    analytic, numeric = [], []
    for name, t in params.items():
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = loss_value()
            flat[i] = old - h
            down = loss_value()
            flat[i] = old
            numeric.append((up - down) / (2 * h))
            analytic.append(t.grad.reshape(-1)[i])
    assert rel_error(np.array(analytic), np.array(numeric)) < 1e-3
