import dataclasses
import math

import numpy as np
import pytest

from nervc import runtime
from nervc.errors import ConfigError, FrameIndexError, WeightError
from nervc.nerv import (
    NervConfig,
    NervWeights,
    decode_frames,
    decode_video,
    init_weights,
    kernel_param_counts,
    layer_channels,
    nerv_forward,
    param_count,
    shapes_of,
    time_embedding,
    zero_weights,
)
from nervc.tensor import Tensor, backward, mse_loss


def test_full_scale_config_values():
    cfg = NervConfig.full_scale()
    assert cfg.pe_dim == 16 and cfg.width == 16
    assert cfg.upscales == (4, 4, 4, 4) and cfg.kernels == (1, 3, 3, 3)
    assert cfg.frame_size == 256


def test_full_scale_layer_two_kernel_count():
    # 256 x 16 x 3 x 3
    assert kernel_param_counts(NervConfig.full_scale())[1] == 36_864


def test_desk_kernel_counts():
    cfg = NervConfig.desk()
    assert kernel_param_counts(cfg) == [256, 2304, 2304, 3456]
    assert cfg.frame_size == 32


def test_channel_layout():
    cfg = NervConfig.desk()
    assert layer_channels(cfg) == [(32, 8, 1, 2), (32, 8, 3, 2), (32, 8, 3, 2), (48, 8, 3, 4)]


def test_empty_chain():
    cfg = NervConfig(upscales=(), kernels=())
    assert shapes_of(cfg) == []
    assert param_count(cfg) == 0


def test_param_count_includes_biases():
    cfg = NervConfig.desk()
    assert param_count(cfg) == sum(kernel_param_counts(cfg)) + 32 + 32 + 32 + 48
    assert param_count(cfg, include_bias=False) == 8320


@pytest.mark.parametrize("kwargs", [
    dict(upscales=(2, 2), kernels=(1,)),
    dict(kernels=(1, 2, 3, 3)),
    dict(pe_dim=7),
    dict(upscales=(2, 0, 2, 2)),
    dict(width=0),
])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        NervConfig(**kwargs)


def test_embedding_middle_frame():
    emb = time_embedding(2, 5, 8)
    np.testing.assert_array_equal(emb, [0, 1, 0, 1, 0, 1, 0, 1])


def test_embedding_first_of_two():
    emb = time_embedding(0, 2, 6, 1.25)
    expected = []
    for j in range(3):
        w = math.pi * 1.25**j
        expected += [math.sin(-w), math.cos(-w)]
    np.testing.assert_allclose(emb, expected, rtol=0, atol=1e-15)
    assert emb[1] == -1.0 and abs(emb[0]) < 1e-15


def test_embedding_single_frame_is_centre():
    np.testing.assert_array_equal(time_embedding(0, 1, 4), [0, 1, 0, 1])


@pytest.mark.parametrize("t", [-1, 4])
def test_embedding_index_error(t):
    with pytest.raises(FrameIndexError):
        time_embedding(t, 4, 8)


def test_zero_weights_give_mid_grey():
    cfg = NervConfig.desk()
    frame = nerv_forward(cfg, zero_weights(cfg), 1)
    assert frame.shape == (3, 32, 32)
    assert np.all(frame == 0.5)


def test_full_scale_shape():
    cfg = dataclasses.replace(NervConfig.full_scale(), frame_count=2, width=2)
    frame = nerv_forward(cfg, zero_weights(cfg), 0)
    assert frame.shape == (3, 256, 256)


def test_output_extent_is_product_of_upscales():
    cfg = NervConfig(pe_dim=4, width=4, upscales=(3, 1, 2), kernels=(1, 3, 1), frame_count=3)
    w = init_weights(cfg, np.random.default_rng(0))
    assert decode_video(cfg, w).shape == (3, 3, 6, 6)


def test_clamping_only_at_emission():
    cfg = NervConfig.desk()
    w = init_weights(cfg, np.random.default_rng(1))
    w.biases[-1].data += 5.0
    raw = nerv_forward(cfg, w, 0, clamp=False)
    assert raw.max() > 1.0
    assert nerv_forward(cfg, w, 0).max() == 1.0


def test_batch_equals_one_by_one():
    cfg = NervConfig.desk()
    w = init_weights(cfg, np.random.default_rng(2))
    with runtime.sequential():
        batch = decode_video(cfg, w, clamp=False)
        single = np.stack([nerv_forward(cfg, w, t, clamp=False) for t in range(cfg.frame_count)])
    np.testing.assert_array_equal(batch, single)


def test_deterministic():
    cfg = NervConfig.desk()
    w = init_weights(cfg, np.random.default_rng(3))
    with runtime.sequential():
        a = nerv_forward(cfg, w, 2)
        b = nerv_forward(cfg, w, 2)
    np.testing.assert_array_equal(a, b)


def test_weight_shape_error():
    cfg = NervConfig.desk()
    w = init_weights(cfg, np.random.default_rng(4))
    w.kernels[1] = Tensor(np.zeros((32, 8, 1, 1)))
    with pytest.raises(WeightError):
        nerv_forward(cfg, w, 0)
    with pytest.raises(WeightError):
        nerv_forward(cfg, NervWeights(w.kernels[:2], w.biases[:2]), 0)


def test_init_is_fan_in_bounded_and_seeded():
    cfg = NervConfig.desk()
    a = init_weights(cfg, np.random.default_rng(5))
    b = init_weights(cfg, np.random.default_rng(5))
    for ka, kb in zip(a.kernels, b.kernels):
        np.testing.assert_array_equal(ka.data, kb.data)
        fan = ka.shape[1] * ka.shape[2] * ka.shape[3]
        assert np.abs(ka.data).max() <= 1 / math.sqrt(fan)


def test_decoder_gradient_matches_finite_differences():
    cfg = NervConfig(pe_dim=4, width=2, upscales=(2, 2), kernels=(1, 3), frame_count=3)
    rng = np.random.default_rng(6)
    w = init_weights(cfg, rng, dtype=np.float64, requires_grad=True)
    target = rng.uniform(size=(3, 3, 4, 4))
    leaf = w.kernels[1]
    (g,) = backward(mse_loss(decode_frames(cfg, w, range(3)), target), [leaf])

    def loss_at(k):
        trial = NervWeights([w.kernels[0].detach(), Tensor(k)], [b.detach() for b in w.biases])
        return float(np.mean((decode_video(cfg, trial, clamp=False) - target) ** 2))

    base = leaf.data.copy()
    num = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        up, dn = base.copy(), base.copy()
        up[i] += 1e-4
        dn[i] -= 1e-4
        num[i] = (loss_at(up) - loss_at(dn)) / 2e-4
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-4
