import itertools

import numpy as np
import pytest

from matrn.config import desk_config
from matrn.errors import ConfigError
from matrn.tensor import Tensor, backward
from matrn import functional as F
from matrn.vision import VisionEncoder, flatten_features, sinusoidal_2d_pe, unflatten_features

from conftest import micro_config


@pytest.fixture(scope="module")
def desk_encoder():
    return VisionEncoder(desk_config(), np.random.default_rng(0))


def test_pe_deterministic_and_bounded():
    a, b = sinusoidal_2d_pe(4, 16, 64), sinusoidal_2d_pe(4, 16, 64)
    assert np.array_equal(a.grid, b.grid)
    assert a.grid.shape == (4, 16, 64) and np.abs(a.grid).max() <= 1.0


def test_pe_single_position():
    pe = sinusoidal_2d_pe(1, 1, 8)
    assert pe.grid.shape == (1, 1, 8) and pe.grid[0, 0, 0] == 0.0


def test_pe_pairwise_distinct():
    flat = sinusoidal_2d_pe(4, 16, 64).flat
    for i, j in itertools.combinations(range(len(flat)), 2):
        assert np.linalg.norm(flat[i] - flat[j]) > 1e-6


def test_pe_row_and_column_halves():
    pe = sinusoidal_2d_pe(3, 5, 16).grid
    # row half constant along columns, column half constant along rows
    assert np.array_equal(pe[:, 0, :8], pe[:, 4, :8])
    assert np.array_equal(pe[0, :, 8:], pe[2, :, 8:])


def test_pe_bad_width():
    with pytest.raises(ConfigError):
        sinusoidal_2d_pe(2, 2, 6)


def test_flatten_roundtrip_row_major(rng):
    fmap = Tensor(rng.normal(size=(2, 3, 4, 5)))
    flat = flatten_features(fmap)
    assert flat.shape == (2, 20, 3)
    np.testing.assert_array_equal(flat.data[1, 1 * 5 + 2], fmap.data[1, :, 1, 2])
    np.testing.assert_array_equal(unflatten_features(flat, 4, 5).data, fmap.data)


def test_backbone_shape(desk_encoder, rng):
    out = desk_encoder.conv_features(rng.random((2, 16, 64, 1)))
    assert out.shape == (2, 64, 4, 16)


def test_encode_shape(desk_encoder, rng):
    assert desk_encoder(rng.random((2, 16, 64, 1))).shape == (2, 64, 64)


def test_zero_image_finite(desk_encoder):
    out = desk_encoder(np.zeros((1, 16, 64, 1)))
    assert np.all(np.isfinite(out.data))


def test_indivisible_input_rejected():
    with pytest.raises(ConfigError):
        micro_config(img_h=10)


def test_wrong_input_size(desk_encoder):
    with pytest.raises(ConfigError):
        desk_encoder(np.zeros((1, 32, 64, 1)))


def test_gradient_reaches_first_conv(rng):
    enc = VisionEncoder(micro_config(), rng)
    backward(F.sum(enc(rng.random((2, 8, 16, 1)))))
    g = enc.backbone.stem.weight.grad
    assert g is not None and np.abs(g).sum() > 0


def test_identity_transformer_composition(rng):
    cfg = micro_config()
    enc = VisionEncoder(cfg, np.random.default_rng(0))
    x = rng.random((2, 8, 16, 1))
    enc.use_transformer = False
    got = enc(x).data
    conv = enc.conv_features(x).data + sinusoidal_2d_pe(2, 4, 8).grid.transpose(2, 0, 1)[None]
    np.testing.assert_allclose(got, conv.reshape(2, 8, 8).transpose(0, 2, 1), atol=1e-6)


def test_batch_permutation_equivariance(desk_encoder, rng):
    x = rng.random((4, 16, 64, 1))
    perm = np.array([2, 0, 3, 1])
    a = desk_encoder(x).data
    b = desk_encoder(x[perm]).data
    np.testing.assert_allclose(b, a[perm], atol=1e-5)


def test_attention_rows_stochastic(desk_encoder, rng):
    desk_encoder(rng.random((2, 16, 64, 1)))
    for attn in desk_encoder.attention_maps():
        np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-6)
        assert np.all(attn > 0)            # full attention, no causal mask


def test_position_embedding_sensitivity_without_params(rng):
    enc = VisionEncoder(micro_config(), np.random.default_rng(0))
    x = rng.random((1, 8, 16, 1))
    n = enc.num_parameters()
    with_pe = enc(x).data
    enc.use_position = False
    assert not np.allclose(with_pe, enc(x).data)
    assert enc.num_parameters() == n
