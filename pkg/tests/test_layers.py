from fractions import Fraction

import numpy as np
import pytest

from fdloss import functional as F
from fdloss.autodiff import Tensor, backward, grad
from fdloss.errors import ConfigError, DimensionError
from fdloss.layers import FAMILIES, ArchSpec, Residual, build, final_width, he_normal, residual_block


@pytest.mark.parametrize("family", ["vgg_like", "resnet_like", "alexnet_like"])
@pytest.mark.parametrize("n_classes", [2, 10])
def test_shape_audit_at_desk_scale(family, n_classes):
    model = build(ArchSpec(family, 1, (32, 32, 3), n_classes), seed=0)
    logits, tap = model.forward(np.zeros((32, 32, 3)))
    assert logits.shape == (n_classes,)
    assert tap.shape == model.last_conv_shape
    assert tap.shape[-1] == final_width(model.spec)
    assert model.n_parameters < 500_000


def test_same_seed_bit_identical():
    spec = ArchSpec("vgg_like", 1, (16, 16, 3), 10)
    a, b = build(spec, 7), build(spec, 7)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_different_seeds_differ():
    spec = ArchSpec("resnet_like", 1, (16, 16, 3), 10)
    a, b = build(spec, 1), build(spec, 2)
    assert any(not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_unseeded_builds_differ():
    spec = ArchSpec("tiny", 1, (8, 8, 1), 2)
    a, b = build(spec, None), build(spec, None)
    assert not np.array_equal(a.params["conv1.weight"].data, b.params["conv1.weight"].data)


# [DERIVED] Normal(0, 2/100) has variance 0.02
def test_he_normal_variance():
    w = he_normal((10, 10, 1, 100), np.random.default_rng(0))  # fan_in = 100, 10^4 samples
    assert w.size == 10_000
    assert abs(w.var() - 0.02) / 0.02 < 0.15


def test_biases_start_at_zero():
    model = build(ArchSpec("alexnet_like", 1, (32, 32, 3), 10), 3)
    for name, t in model.params.items():
        if name.endswith(".bias"):
            np.testing.assert_array_equal(t.data, 0.0)


def test_input_too_small():
    with pytest.raises(ConfigError) as err:
        build(ArchSpec("alexnet_like", 1, (8, 8, 3), 10))
    assert err.value.key == "input_shape"
    with pytest.raises(ConfigError):
        build(ArchSpec("vgg_like", 1, (4, 4, 3), 10))


def test_unknown_family():
    with pytest.raises(ConfigError):
        ArchSpec("lenet")


def test_forward_shape_mismatch():
    model = build(ArchSpec("tiny", 1, (8, 8, 1), 2), 0)
    with pytest.raises(DimensionError):
        model.forward(np.zeros((8, 8, 3)))


def test_zero_weights_zero_logits(rng):
    model = build(ArchSpec("vgg_like", 1, (16, 16, 3), 10), 0)
    model.load_state({n: np.zeros(t.shape) for n, t in model.params.items()})
    logits, _ = model.forward(rng.uniform(size=(16, 16, 3)))
    np.testing.assert_array_equal(logits.data, 0.0)


@pytest.mark.parametrize("family", FAMILIES)
def test_tap_is_nonnegative_and_replay_identical(family, rng):
    model = build(ArchSpec(family, Fraction(1, 2), (16, 16, 3), 4), 5)
    x = rng.uniform(size=(2, 16, 16, 3))
    l1, t1 = model.forward(x)
    l2, t2 = model.forward(x)
    assert np.all(t1.data >= 0)
    np.testing.assert_array_equal(l1.data, l2.data)
    np.testing.assert_array_equal(t1.data, t2.data)


# [DERIVED] direct perturbation of one first-layer weight
def test_first_layer_perturbation_reaches_tap(rng):
    model = build(ArchSpec("vgg_like", 1, (16, 16, 3), 10), 0)
    x = rng.uniform(size=(16, 16, 3))
    _, before = model.forward(x)
    model.params["conv1.weight"].data[1, 1, 0, :] += 0.5
    _, after = model.forward(x)
    assert not np.array_equal(before.data, after.data)


def test_tap_connected_to_graph(rng):
    model = build(ArchSpec("resnet_like", 1, (16, 16, 3), 10), 0)
    _, tap = model.forward(rng.uniform(size=(16, 16, 3)))
    backward(tap.sum())
    assert np.any(model.params["stem.weight"].grad != 0)


def test_resnet_has_identity_skips():
    model = build(ArchSpec("resnet_like", 1, (32, 32, 3), 10), 0)
    identity = [l for l in model.layers if isinstance(l, Residual) and not l.projects]
    assert len(identity) >= 2


def test_zero_residual_path_is_relu_of_input(rng):
    block = Residual("b", 3, 3)
    params = {n: Tensor(np.zeros(s)) for n, s in block.param_shapes().items()}
    x = rng.normal(size=(5, 5, 3))
    np.testing.assert_array_equal(residual_block(Tensor(x), params, "b").data, np.maximum(x, 0))


# [DERIVED] both branches receive gradient for a generic input
def test_residual_gradient_reaches_both_branches(rng):
    block = Residual("b", 2, 2)
    params = {n: Tensor(rng.normal(scale=0.3, size=s), requires_grad=True) for n, s in block.param_shapes().items()}
    x = Tensor(rng.uniform(0.1, 1, (5, 5, 2)), requires_grad=True)
    out = residual_block(x, params, "b").sum()
    gx, gw = grad(out, [x, params["b.conv_a.weight"]])
    assert np.any(gw != 0)
    # identity skip contributes 1 wherever the block output is positive
    assert np.any(gx != 0)


def test_projection_inserted_on_channel_change():
    block = Residual("b", 2, 4)
    assert block.projects and "b.proj.weight" in block.param_shapes()
    assert block.out_shape((6, 6, 2)) == (6, 6, 4)
    with pytest.raises(DimensionError):
        block.out_shape((6, 6, 3))


def test_parameter_names_unique():
    model = build(ArchSpec("resnet_like", 1, (16, 16, 3), 10), 0)
    assert len(model.params) == len(set(model.params))


def test_head_of_features_equals_forward(rng):
    model = build(ArchSpec("alexnet_like", 1, (32, 32, 3), 10), 0)
    x = rng.uniform(size=(32, 32, 3))
    logits, _ = model.forward(x)
    np.testing.assert_array_equal(model.head(model.features(x)).data, logits.data)


def test_width_scale_changes_final_width():
    spec = ArchSpec("vgg_like", Fraction(1, 2), (16, 16, 3), 10)
    assert build(spec, 0).last_conv_shape[-1] == final_width(spec) == 16


def test_dense_classifier_shapes(rng):
    out = F.dense(Tensor(rng.normal(size=(3, 5))), Tensor(np.ones((5, 2))))
    assert out.shape == (3, 2)
