import numpy as np
import pytest

from mothtrap import graph as G
from mothtrap.graph import GraphError, LayerSpec, ModelGraph, forward
from mothtrap.tensor import ConvSpec, ShapeError, activation, conv2d, dense, pool2d
from mothtrap.weightfile import (
    BadMagicError, TruncatedError, VersionError, WeightShapeError, decode_weights, encode_weights,
    load_model, load_weights, save_model, save_weights,
)
from mothtrap.zoo import (
    LENET_C3_TABLE, build, build_lenet5, build_mobilenetv2, build_vgg16, lenet_c3_mask, make_divisible,
)


@pytest.fixture(scope="module")
def lenet():
    return build_lenet5(seed=3)


@pytest.fixture(scope="module")
def mobilenet():
    return build_mobilenetv2(seed=3)


def zeroed(model):
    m = model.copy()
    m.weights = {k: [np.zeros_like(w) for w in ws] for k, ws in m.weights.items()}
    for layer in m.layers:  # keep batchnorm variances positive
        if layer.kind == "batchnorm":
            m.weights[layer.name][3][:] = 1
    return m


def kinds(model, kind):
    return [l for l in model.layers if l.kind == kind]


# -- LeNet-5 -----------------------------------------------------------------

def test_lenet_shape_chain(lenet):
    s = lenet.shapes()
    assert [s[n][1] for n in ("c1", "s2", "c3", "s4", "c5")] == [48, 24, 20, 10, 6]


def test_lenet_layer_census(lenet):
    assert len(kinds(lenet, "conv")) == 3
    assert len(kinds(lenet, "pool")) == 2
    assert len(kinds(lenet, "dense")) == 1
    assert all(l.params["mode"] == "avg" for l in kinds(lenet, "pool"))
    assert lenet.layers[-1].params["fn"] == "softmax"


def test_lenet_c3_sparse_table(lenet):
    mask = lenet_c3_mask()
    assert mask.shape == (16, 6) and mask.sum() == 60
    assert not mask.all()
    assert sum(len(t) for t in LENET_C3_TABLE) == 60
    w = lenet.weights["c3"][0]
    assert np.all(w[~mask] == 0)


def test_lenet_too_small():
    with pytest.raises(ShapeError):
        build_lenet5(input_size=28)


def test_lenet_matches_hand_stepped_oracle(lenet, rng):
    x = rng.random((1, 52, 52)).astype(np.float32)
    W = lenet.weights
    a = x - lenet.input_center
    a = activation(conv2d(a, *W["c1"], ConvSpec(5, 5)), "relu")
    a = pool2d(a, 2, 2, "avg")
    a = activation(conv2d(a, W["c3"][0] * lenet_c3_mask()[:, :, None, None], W["c3"][1], ConvSpec(5, 5)), "relu")
    a = pool2d(a, 2, 2, "avg")
    a = activation(conv2d(a, *W["c5"], ConvSpec(5, 5)), "relu")
    a = activation(dense(a.reshape(-1), *W["fc"]), "softmax")
    np.testing.assert_allclose(forward(lenet, x), a, atol=1e-5)


# -- VGG16 -------------------------------------------------------------------

def test_vgg_pool_chain_and_convs():
    vgg = build_vgg16()
    s = vgg.shapes()
    assert [s[f"block{b}_pool"][1] for b in range(1, 6)] == [26, 13, 6, 3, 1]
    convs = kinds(vgg, "conv")
    assert len(convs) == 13
    assert all(c.params["spec"] == ConvSpec(3, 3, 1, "same") for c in convs)
    assert [c.params["out_channels"] for c in convs] == [64, 64, 128, 128, 256, 256, 256] + [512] * 6
    assert len(kinds(vgg, "dropout")) == 2
    assert [l.params["units"] for l in kinds(vgg, "dense")] == [256, 2]
    np.testing.assert_array_equal(forward(zeroed(vgg), np.zeros((1, 52, 52), np.float32)), [0.5, 0.5])


# -- MobileNetV2 ---------------------------------------------------------------

def _blocks(model):
    names = sorted({l.name.split("_")[0] for l in model.layers if l.name.startswith("block")},
                   key=lambda n: int(n[5:]))
    return names


def test_mobilenet_residuals_only_on_matching_stride1(mobilenet):
    shapes = mobilenet.shapes()
    for b in _blocks(mobilenet):
        dw = mobilenet.layer(f"{b}_dw")
        proj = f"{b}_project_bn"
        block_in = mobilenet.layer(f"{b}_expand").inputs[0]
        same = dw.params["spec"].stride == 1 and shapes[block_in] == shapes[proj]
        adds = [l for l in mobilenet.layers if l.kind == "residual_add" and l.name.startswith(b + "_")]
        assert len(adds) == (1 if same else 0)
    strides = {mobilenet.layer(f"{b}_dw").params["spec"].stride for b in _blocks(mobilenet)}
    assert strides == {1, 2}


def test_mobilenet_block_structure(mobilenet):
    for b in _blocks(mobilenet):
        assert mobilenet.consumers(f"{b}_expand_bn")[0].params["fn"] == "relu6"
        assert mobilenet.consumers(f"{b}_dw_bn")[0].params["fn"] == "relu6"
        assert mobilenet.layer(f"{b}_dw").kind == "depthwise_conv"
        # linear projection: nothing non-linear after the projection batchnorm
        assert all(c.kind != "activation" for c in mobilenet.consumers(f"{b}_project_bn"))
    assert any(l.params.get("global") for l in kinds(mobilenet, "pool"))


def test_mobilenet_width_multiplier():
    assert make_divisible(32 * 0.35) == 16
    full = build_mobilenetv2(width_mult=1.0)
    assert full.param_count() > build_mobilenetv2().param_count()
    with pytest.raises(ValueError):
        build_mobilenetv2(width_mult=0)


@pytest.mark.parametrize("arch", ["lenet5", "mobilenetv2", "vgg16"])
def test_zero_weights_give_uniform(arch):
    m = zeroed(build(arch))
    np.testing.assert_array_equal(forward(m, np.zeros(m.input_shape, np.float32)), [0.5, 0.5])


@pytest.mark.parametrize("arch", ["lenet5", "mobilenetv2"])
def test_forward_is_probability_and_deterministic(arch, rng):
    m = build(arch, seed=1)
    x = rng.random((3, *m.input_shape)).astype(np.float32)
    p1, p2 = forward(m, x), forward(build(arch, seed=1), x)
    np.testing.assert_allclose(p1.sum(axis=1), 1, atol=1e-6)
    assert np.array_equal(p1, p2)
    np.testing.assert_allclose(forward(m, x[0]), p1[0], atol=1e-6)


def test_forward_shape_mismatch(lenet):
    with pytest.raises(ShapeError):
        forward(lenet, np.zeros((1, 50, 50), np.float32))


def test_param_counts_and_summary_stable():
    assert build_lenet5().param_count() == 59334
    assert build_vgg16().param_count() == 14845378
    assert build_mobilenetv2().param_count() == 419858
    assert build_lenet5(seed=0).summary() == build_lenet5(seed=9).summary()
    assert "total parameters: 59334" in build_lenet5().summary()


def test_dropout_training_vs_inference():
    vgg = build_vgg16(input_size=32, seed=0)
    x = np.random.default_rng(0).random((2, 1, 32, 32)).astype(np.float32)
    a = G.run(vgg, x).output
    b = G.run(vgg, x).output
    assert np.array_equal(a, b)
    t1 = G.run(vgg, x, training=True, rng=np.random.default_rng(1)).output
    t2 = G.run(vgg, x, training=True, rng=np.random.default_rng(2)).output
    assert not np.array_equal(t1, t2)


# -- graph validation ----------------------------------------------------------

def test_graph_rejects_forward_references():
    layers = [LayerSpec("fc", "dense", {"units": 2}, ("later",)), LayerSpec("later", "flatten")]
    with pytest.raises(GraphError):
        ModelGraph(layers, {}, (1, 2, 2), 2)


def test_residual_add_needs_matching_shapes():
    layers = [
        LayerSpec("a", "conv", {"spec": ConvSpec(1, 1), "out_channels": 2}),
        LayerSpec("b", "conv", {"spec": ConvSpec(1, 1), "out_channels": 3}, ("input",)),
        LayerSpec("add", "residual_add", inputs=("a", "b")),
    ]
    with pytest.raises((GraphError, ShapeError)):
        G.infer_shapes(G.resolve_inputs(layers), (1, 4, 4))


def test_unknown_layer_kind():
    with pytest.raises((GraphError, ValueError)):
        LayerSpec("x", "lstm")


# -- weight files --------------------------------------------------------------

def test_weights_roundtrip_bitwise(tmp_path, mobilenet):
    p = tmp_path / "m.pdnw"
    save_weights(mobilenet, p)
    back = load_weights(p, build_mobilenetv2(seed=99))
    for name, ws in mobilenet.weights.items():
        for a, b in zip(ws, back.weights[name]):
            assert a.tobytes() == b.tobytes()


def test_weight_file_layout(lenet):
    data = encode_weights(lenet)
    assert data[:4] == b"PDNW"
    assert int.from_bytes(data[4:6], "little") == 1
    assert int.from_bytes(data[6:10], "little") == len(lenet.layers)
    names = [n for n, _ in decode_weights(data)]
    assert names == [l.name for l in lenet.layers]
    n_floats = lenet.param_count()
    header = 10 + sum(2 + len(l.name) + 1 for l in lenet.layers)
    ranks = sum(1 + 4 * w.ndim for ws in lenet.weights.values() for w in ws)
    assert len(data) == header + ranks + 4 * n_floats


def test_weight_file_errors(tmp_path, lenet):
    data = encode_weights(lenet)
    with pytest.raises(BadMagicError):
        decode_weights(b"XXXX" + data[4:])
    with pytest.raises(VersionError):
        decode_weights(data[:4] + (2).to_bytes(2, "little") + data[6:])
    with pytest.raises(TruncatedError):
        decode_weights(data[:-3])


def test_vgg_weights_into_lenet_names_first_layer(tmp_path):
    p = tmp_path / "vgg.pdnw"
    save_weights(build_vgg16(input_size=32), p)
    with pytest.raises(WeightShapeError, match="'c1'"):
        load_weights(p, build_lenet5())


def test_save_model_with_sidecar(tmp_path, lenet, rng):
    p = tmp_path / "l.pdnw"
    save_model(lenet, p)
    back = load_model(p)
    x = rng.random((2, 1, 52, 52)).astype(np.float32)
    assert np.array_equal(forward(back, x), forward(lenet, x))
