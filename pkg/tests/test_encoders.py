import numpy as np
import pytest

from hybridvfl import autodiff as ad
from hybridvfl import nn
from hybridvfl.autodiff import DimensionError, Graph, Tensor
from hybridvfl.encoders import (
    EMBED_DIM,
    EmbeddingBundle,
    FeatureWidthError,
    Source,
    encode_image,
    encode_tabular,
    init_image_encoder,
    init_tabular_encoder,
)


@pytest.fixture(scope="module")
def image_params():
    return init_image_encoder(seed=0)


@pytest.fixture(scope="module")
def tab_params():
    return init_tabular_encoder(seed=0, in_features=20)


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, 3, 28, 28))


def test_image_shapes_and_source(image_params):
    b = encode_image(Tensor(images(3)), image_params, [7, 8, 9])
    assert b.z_inv.shape == b.z_spec.shape == (3, EMBED_DIM)
    assert b.source is Source.IMAGE_CLIENT and b.batch_ids == [7, 8, 9]


def test_identical_images_identical_rows(image_params):
    x = np.repeat(images(1), 2, axis=0)
    b = encode_image(Tensor(x), image_params)
    np.testing.assert_array_equal(b.z_inv.data[0], b.z_inv.data[1])
    np.testing.assert_array_equal(b.z_spec.data[0], b.z_spec.data[1])


def test_wrong_channel_count(image_params):
    with pytest.raises(DimensionError):
        encode_image(Tensor(np.zeros((1, 1, 28, 28))), image_params)


@pytest.mark.parametrize("seed", range(5))
def test_conv_filters_get_gradient_whenever_their_relu_fires(seed):
    # a randomly initialised relu filter can be silent on every input, so the
    # check is that zero gradient never happens for any other reason
    p = init_image_encoder(seed=seed)
    x = Tensor(images(4, seed))
    with Graph() as g:
        b = encode_image(x, p)
        loss = ad.add(ad.sum_(b.z_inv), ad.sum_(ad.mul(b.z_spec, b.z_spec)))
    grads = ad.backward(g, loss)
    h = ad.sub(x, 0.5)
    for conv in (p.conv1, p.conv2):
        pre = nn.conv2d(h, conv, pad=1).data
        fires = (pre > 0).any(axis=(0, 2, 3))
        per_filter = np.abs(grads[conv["W"]]).reshape(conv["W"].shape[0], -1).sum(axis=1)
        np.testing.assert_array_equal(per_filter > 0, fires, err_msg=conv.name)
        assert np.all(np.abs(grads[conv["b"]])[fires] > 0)
        h = nn.max_pool2(ad.relu(nn.conv2d(h, conv, pad=1)))


def test_tabular_zero_input_reduces_to_the_bias_path(tab_params):
    b = encode_tabular(Tensor(np.zeros((2, 20))), tab_params)
    assert b.z_inv.shape == b.z_spec.shape == (2, EMBED_DIM)
    h = np.maximum(tab_params.fc1["b"].data, 0)
    h = np.maximum(h @ tab_params.fc2["W"].data + tab_params.fc2["b"].data, 0)
    for z, head in zip((b.z_inv, b.z_spec), tab_params.heads):
        expected = h @ head["W"].data + head["b"].data
        np.testing.assert_allclose(z.data, np.stack([expected, expected]), rtol=0, atol=1e-12)


def test_tabular_width_mismatch(tab_params):
    with pytest.raises(FeatureWidthError):
        encode_tabular(Tensor(np.zeros((2, 19))), tab_params)


def test_tabular_permutation_equivariance(tab_params):
    x = np.random.default_rng(0).normal(size=(6, 20))
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = encode_tabular(Tensor(x), tab_params)
    b = encode_tabular(Tensor(x[perm]), tab_params)
    np.testing.assert_array_equal(a.z_inv.data[perm], b.z_inv.data)
    np.testing.assert_array_equal(a.z_spec.data[perm], b.z_spec.data)


def test_heads_share_no_parameters():
    p = init_tabular_encoder(seed=1, in_features=20)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 20)))
    before = encode_tabular(x, p)
    p.heads[1]["W"].data += 1.0
    after = encode_tabular(x, p)
    np.testing.assert_array_equal(before.z_inv.data, after.z_inv.data)
    assert not np.array_equal(before.z_spec.data, after.z_spec.data)
    assert not {id(t) for t in p.heads[0].tensors()} & {id(t) for t in p.heads[1].tensors()}


def test_encoders_are_pure(image_params):
    x = Tensor(images(2, seed=3))
    np.testing.assert_array_equal(encode_image(x, image_params).z_inv.data, encode_image(x, image_params).z_inv.data)


def test_no_raw_passthrough(image_params, tab_params):
    assert EMBED_DIM not in (3 * 28 * 28, 20)
    # a relu sits between input and heads: negating the input does not negate the output
    x = np.random.default_rng(2).normal(size=(2, 20))
    a = encode_tabular(Tensor(x), tab_params).z_inv.data
    b = encode_tabular(Tensor(-x), tab_params).z_inv.data
    assert not np.allclose(a, -b)


def test_bundle_validates_shapes():
    with pytest.raises(DimensionError):
        EmbeddingBundle(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 5))), Source.IMAGE_CLIENT, [0, 1])
    with pytest.raises(DimensionError):
        EmbeddingBundle(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))), Source.IMAGE_CLIENT, [0])
