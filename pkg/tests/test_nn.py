import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xrl import autodiff as ad
from xrl import nn
from xrl.autodiff import Var


def tiny_convnet():
    return nn.convnet_spec((1, 8, 8), 3, beta=2.0, channels=(2, 3))


def test_layer_shapes_and_parameter_names():
    spec = tiny_convnet()
    assert nn.layer_shapes(spec)[-1] == (3,)
    params = nn.build_model(spec, 0)
    assert list(params) == ["l0.weight", "l0.bias", "l3.weight", "l3.bias", "l7.weight", "l7.bias"]
    assert params["l7.weight"].shape == (3 * 2 * 2, 3)


def test_incompatible_layer_names_the_layer():
    spec = nn.ModelSpec((nn.Linear(4), nn.Flatten(), nn.Linear(2)), (1, 4, 4), 2)
    with pytest.raises(nn.ModelSpecError, match="layer 0"):
        nn.layer_shapes(spec)


def test_final_width_must_match_classes():
    spec = nn.ModelSpec((nn.Flatten(), nn.Linear(4)), (1, 4, 4), 3)
    with pytest.raises(nn.ModelSpecError, match="num_classes"):
        nn.layer_shapes(spec)


def test_spec_dict_round_trip_keeps_digest():
    spec = nn.small_resnet_spec((3, 8, 8), 10, beta=3.0, width=4)
    back = nn.ModelSpec.from_dict(spec.to_dict())
    assert back == spec and back.digest == spec.digest
    assert nn.convnet_spec(beta=1.0).digest != nn.convnet_spec(beta=2.0).digest


def test_init_is_seeded_and_bounded():
    spec = tiny_convnet()
    a, b, c = nn.build_model(spec, 1), nn.build_model(spec, 1), nn.build_model(spec, 2)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert not np.array_equal(a["l0.weight"], c["l0.weight"])
    assert np.abs(a["l0.weight"]).max() <= math.sqrt(6 / 9)
    assert not a["l0.bias"].any()


def test_params_for_other_spec_rejected():
    params = nn.build_model(tiny_convnet(), 0)
    with pytest.raises(nn.ModelSpecError):
        nn.model_forward(nn.convnet_spec((1, 8, 8), 3, beta=1.0, channels=(2, 3)), params, np.zeros((1, 1, 8, 8)))


def test_input_shape_checked():
    spec = tiny_convnet()
    with pytest.raises(ad.ShapeError):
        nn.model_forward(spec, nn.build_model(spec, 0), np.zeros((2, 1, 9, 9)))


def test_features_are_final_linear_input():
    spec = tiny_convnet()
    p = nn.build_model(spec, 0)
    x = np.random.default_rng(0).uniform(size=(4, 1, 8, 8))
    logits, feats = nn.model_forward(spec, p, x, return_features=True)
    np.testing.assert_allclose(feats.value @ p["l7.weight"] + p["l7.bias"], logits.value, rtol=1e-12)


def test_residual_forward_and_param_gradients():
    spec = nn.small_resnet_spec((3, 8, 8), 4, beta=2.0, width=2)
    p = nn.build_model(spec, 0)
    x = np.random.default_rng(1).uniform(size=(2, 3, 8, 8))
    y = np.array([0, 3])
    name = "l2.conv1.weight"

    def f(w):
        pv = {k: Var(v) for k, v in p.arrays.items()}
        pv[name] = w
        return nn.cross_entropy(nn.model_forward(spec, pv, x), y)

    assert ad.finite_diff_check(f, p[name]) < 1e-6


def test_model_input_gradient_and_hvp():
    spec = tiny_convnet()
    p = nn.build_model(spec, 3)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(2, 1, 8, 8))

    def f(v):
        return nn.cross_entropy(nn.model_forward(spec, p, v), [1, 2])

    assert ad.finite_diff_check(f, x) < 1e-6
    assert ad.hvp_check(f, x, rng.standard_normal(x.shape)) < 1e-4


@settings(max_examples=40, deadline=None)
@given(logits=arrays(np.float64, (3, 4), elements=st.floats(-30, 30)), labels=st.lists(st.integers(0, 3), min_size=3,
                                                                                         max_size=3))
def test_cross_entropy_matches_direct_formula(logits, labels):
    got = nn.cross_entropy_per_sample(logits, labels).value
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(got, -logp[np.arange(3), labels], rtol=1e-10, atol=1e-12)
    assert np.all(got >= -1e-12)


@settings(max_examples=40, deadline=None)
@given(p=arrays(np.float64, (2, 5), elements=st.floats(-10, 10)), q=arrays(np.float64, (2, 5), elements=st.floats(-10, 10)))
def test_kl_is_nonnegative_and_zero_on_diagonal(p, q):
    assert np.all(nn.kl_divergence_per_sample(p, q).value >= -1e-12)
    np.testing.assert_allclose(nn.kl_divergence_per_sample(p, p).value, 0.0, atol=1e-12)


def test_composite_losses_match_finite_differences():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert ad.finite_diff_check(lambda v: nn.cross_entropy(v, [0, 1, 3]), a) < 1e-6
    assert ad.finite_diff_check(lambda v: nn.kl_divergence(v, Var(b)), a) < 1e-6
    assert ad.finite_diff_check(lambda v: nn.kl_divergence(Var(a), v), b) < 1e-6
    assert ad.hvp_check(lambda v: nn.kl_divergence(Var(a), v), b, rng.standard_normal(b.shape)) < 1e-4


def test_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        nn.cross_entropy(np.zeros((1, 3)), [3])


def test_zero_weights_give_uniform_softmax():
    spec = tiny_convnet()
    p = nn.build_model(spec, 0)
    for k in p:
        p.arrays[k][...] = 0.0
    ce = nn.cross_entropy(nn.model_forward(spec, p, np.full((2, 1, 8, 8), 0.5)), [0, 2]).value
    assert ce == pytest.approx(math.log(3), rel=1e-15)


def test_max_pool_variant_runs():
    spec = nn.convnet_spec((1, 8, 8), 3, pool="max", channels=(2,))
    out = nn.model_forward(spec, nn.build_model(spec, 0), np.zeros((1, 1, 8, 8)))
    assert out.shape == (1, 3)
