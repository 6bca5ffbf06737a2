"""Sliding-window inference: window merging, pad discard, argmax ties."""
import numpy as np
import pytest

from cardiokit import autodiff as ad
from cardiokit.infer import predict_volume
from cardiokit.roi import IndexOutOfRange, RoiParams, apply_crop, plan_crops
from cardiokit.unet import NetConfig, UNet
from cardiokit.volume import VoxelSpacing, Volume4D

RNG = np.random.default_rng(31)
SPACING = VoxelSpacing(1.5, 1.5, 8.0)


def rand_net(seed=0):
    net = UNet(NetConfig(levels=2, base_channels=4, dropout_rate=0.0), rng_seed=seed)
    rng = np.random.default_rng(seed + 1)
    net.final.w.data[...] = rng.normal(0, 0.5, net.final.w.data.shape).astype(np.float32)
    net.final.b.data[...] = rng.normal(0, 0.1, net.final.b.data.shape).astype(np.float32)
    return net


def rand_volume(dims, seed=2):
    rng = np.random.default_rng(seed)
    return Volume4D(rng.normal(size=dims).astype(np.float32), SPACING)


def params(patch=16, td=8, stride=4):
    return RoiParams(patch=patch, target_depth=td, depth_stride=stride,
                     r_min=3, r_max=6)


def test_single_window_equals_plain_forward():
    p = params(patch=16, td=8)
    v = rand_volume((32, 32, 8, 2))
    plan = plan_crops(v.dims[:3], (15, 14), p)
    assert len(plan.depth_windows) == 1
    net = rand_net()
    probs, labels = predict_volume(net, v, plan, frame=1)

    crop = apply_crop(v, plan, 0).frame(1)
    direct = ad.softmax_channels(net(crop[None, ..., None].astype(np.float32))).data[..., 0]
    assert probs.shape == (4, 16, 16, 8)
    assert np.allclose(probs, direct, atol=1e-6)
    assert np.array_equal(labels.labels, direct.argmax(axis=0).astype(np.uint8))
    assert labels.spacing == v.spacing


def test_two_window_overlap_is_mean():
    p = params(patch=16, td=16, stride=8)
    v = rand_volume((32, 32, 24, 1), seed=7)
    plan = plan_crops(v.dims[:3], (16, 16), p)
    assert [w.z_offset for w in plan.depth_windows] == [0, 8]
    net = rand_net(3)
    probs, _ = predict_volume(net, v, plan, frame=0)

    outs = []
    for wi in range(2):
        crop = apply_crop(v, plan, wi).frame(0)
        outs.append(
            ad.softmax_channels(net(crop[None, ..., None].astype(np.float32))).data[..., 0]
        )
    # slices 0..7 come only from window 0; 16..23 only from window 1;
    # the overlap 8..15 averages the two
    assert np.allclose(probs[:, :, :, :8], outs[0][:, :, :, :8], atol=1e-6)
    assert np.allclose(probs[:, :, :, 16:], outs[1][:, :, :, 8:], atol=1e-6)
    mean = 0.5 * (outs[0][:, :, :, 8:] + outs[1][:, :, :, :8])
    assert np.allclose(probs[:, :, :, 8:16], mean, atol=1e-6)


def test_padded_slices_discarded():
    p = params(patch=16, td=8)
    v = rand_volume((24, 24, 4, 1), seed=9)
    plan = plan_crops(v.dims[:3], (12, 12), p)
    (win,) = plan.depth_windows
    assert (win.pad_before, win.pad_after) == (2, 2)
    net = rand_net(5)
    probs, labels = predict_volume(net, v, plan, frame=0)
    assert probs.shape == (4, 16, 16, 4)
    assert labels.labels.shape == (16, 16, 4)

    crop = apply_crop(v, plan, 0).frame(0)
    direct = ad.softmax_channels(net(crop[None, ..., None].astype(np.float32))).data[..., 0]
    assert np.allclose(probs, direct[:, :, :, 2:6], atol=1e-6)


def test_fresh_net_predicts_background_everywhere():
    # zero-initialized head -> uniform probabilities -> ties -> class 0
    p = params(patch=16, td=8)
    v = rand_volume((20, 20, 8, 1), seed=11)
    plan = plan_crops(v.dims[:3], (10, 10), p)
    net = UNet(NetConfig(levels=2, base_channels=4, dropout_rate=0.0))
    probs, labels = predict_volume(net, v, plan, frame=0)
    assert np.allclose(probs, 0.25)
    assert np.all(labels.labels == 0)


def test_probabilities_sum_to_one():
    p = params(patch=16, td=8, stride=4)
    v = rand_volume((40, 28, 20, 2), seed=13)
    plan = plan_crops(v.dims[:3], (20, 14), p)
    assert len(plan.depth_windows) >= 2
    probs, _ = predict_volume(rand_net(7), v, plan, frame=0)
    assert np.abs(probs.sum(axis=0) - 1.0).max() <= 1e-6


def test_frame_out_of_range():
    p = params()
    v = rand_volume((20, 20, 8, 2))
    plan = plan_crops(v.dims[:3], (10, 10), p)
    with pytest.raises(IndexOutOfRange):
        predict_volume(rand_net(), v, plan, frame=2)
